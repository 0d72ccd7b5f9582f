"""Post-LN encoder/decoder mini-transformers with a full activation trace.

Layer ``l`` computes::

    Q, K, V = H W^Q, H W^K, H W^V            (split into heads)
    A       = softmax(Q K^T / sqrt(d_k))      (masked)
    O       = LN(H + concat(A V) W^O)
    F_up    = gelu(O W^U + b^U)
    F_down  = F_up W^D + b^D
    H'      = LN(O + F_down)

Every linear map carries a bias (BERT/GPT-2 convention). Positions use learned
absolute embeddings; the output head is tied to the token embedding unless
``tie_embeddings=False``. There is no dropout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODEL_KINDS = ("encoder-mlm", "decoder-causal")
ATTN_ROLES = ("query", "key", "value", "output")
FFN_ROLES = ("up", "down")
ROLES = ATTN_ROLES + FFN_ROLES


@dataclass
class ModelConfig:
    model_kind: str = "encoder-mlm"
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    vocab_size: int = 1000
    max_seq_len: int = 64
    d_ff: int | None = None
    rank_map: dict[str, int] | None = None
    ln_eps: float = 1e-12
    gelu: str = "tanh"
    tie_embeddings: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        for name in ("d_model", "n_heads", "vocab_size", "max_seq_len", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.rank_map:
            for role, k in self.rank_map.items():
                n, m = self.role_shape(role)
                if not 1 <= k <= min(n, m):
                    raise ValueError(f"rank {k} for {role} outside [1, {min(n, m)}]")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def causal(self) -> bool:
        return self.model_kind == "decoder-causal"

    def role_shape(self, role: str) -> tuple[int, int]:
        d, f = self.d_model, self.d_ff
        if role in ATTN_ROLES:
            return d, d
        if role == "up":
            return d, f
        if role == "down":
            return f, d
        raise KeyError(f"unknown weight role {role!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class LinearLayer:
    """Affine map stored dense (``weight``) or as a factor pair ``a @ b``.

    The factorized form applies ``(x @ a) @ b + bias`` and never forms the
    product ``a @ b``.
    """

    def __init__(self, weight=None, bias=None, a=None, b=None):
        if (weight is None) == (a is None or b is None):
            raise ValueError("LinearLayer needs either weight or the (a, b) pair")
        self.weight = weight
        self.a = a
        self.b = b
        self.bias = bias

    @property
    def factorized(self) -> bool:
        return self.weight is None

    @property
    def shape(self) -> tuple[int, int]:
        if self.factorized:
            return self.a.shape[0], self.b.shape[1]
        return self.weight.shape

    @property
    def rank(self) -> int | None:
        return self.a.shape[1] if self.factorized else None

    def __call__(self, x: Tensor) -> Tensor:
        if self.factorized:
            return T.linear(T.linear(x, self.a), self.b, self.bias)
        return T.linear(x, self.weight, self.bias)

    def tensors(self) -> dict[str, Tensor]:
        out = {"a": self.a, "b": self.b} if self.factorized else {"weight": self.weight}
        out["bias"] = self.bias
        return out

    def dense_weight(self) -> np.ndarray:
        return self.a.data @ self.b.data if self.factorized else self.weight.data

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors().values())


class LowRankEmbedding:
    """Token embedding stored as ``a @ b`` (``[V, k] @ [k, d]``)."""

    def __init__(self, a: Tensor, b: Tensor):
        self.a = a
        self.b = b

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape[0], self.b.shape[1]

    def lookup(self, ids) -> Tensor:
        return T.linear(T.embedding(self.a, ids), self.b)

    def project_out(self, h: Tensor, bias: Tensor) -> Tensor:
        return T.linear(T.linear(h, T.transpose(self.b)), T.transpose(self.a), bias)


@dataclass
class Block:
    attn: dict[str, LinearLayer]
    ffn: dict[str, LinearLayer]
    ln_attn: tuple[Tensor, Tensor]
    ln_ffn: tuple[Tensor, Tensor]


class TransformerModel:
    """Parameter store plus structure for one teacher or student."""

    def __init__(self, config: ModelConfig, token_embed, pos_embed, embed_ln, blocks, head_bias, head_weight=None):
        self.config = config
        self.token_embed = token_embed
        self.pos_embed = pos_embed
        self.embed_ln = embed_ln
        self.blocks: list[Block] = blocks
        self.head_bias = head_bias
        self.head_weight = head_weight
        if len(blocks) != config.n_layers:
            raise ValueError(f"config has {config.n_layers} layers but {len(blocks)} blocks given")
        for name, t in self.named_parameters():
            t.name = name

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        if isinstance(self.token_embed, LowRankEmbedding):
            yield "embed.token.a", self.token_embed.a
            yield "embed.token.b", self.token_embed.b
        else:
            yield "embed.token", self.token_embed
        yield "embed.position", self.pos_embed
        yield "embed.ln.gain", self.embed_ln[0]
        yield "embed.ln.bias", self.embed_ln[1]
        for i, blk in enumerate(self.blocks):
            for group, layers in (("attn", blk.attn), ("ffn", blk.ffn)):
                for role, lin in layers.items():
                    for part, t in lin.tensors().items():
                        yield f"layers.{i}.{group}.{role}.{part}", t
            yield f"layers.{i}.attn.ln.gain", blk.ln_attn[0]
            yield f"layers.{i}.attn.ln.bias", blk.ln_attn[1]
            yield f"layers.{i}.ffn.ln.gain", blk.ln_ffn[0]
            yield f"layers.{i}.ffn.ln.bias", blk.ln_ffn[1]
        if self.head_weight is not None:
            yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def n_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def linear_layers(self) -> Iterator[tuple[int, str, LinearLayer]]:
        for i, blk in enumerate(self.blocks):
            for role, lin in {**blk.attn, **blk.ffn}.items():
                yield i, role, lin

    def is_dense(self) -> bool:
        if isinstance(self.token_embed, LowRankEmbedding):
            return False
        return not any(lin.factorized for _, _, lin in self.linear_layers())

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag

    def copy(self) -> "TransformerModel":
        return from_state_dict(self.config, {k: v.copy() for k, v in self.state_dict().items()})


def _ln(d: int):
    return Tensor(np.ones(d)), Tensor(np.zeros(d))


def init_model(config: ModelConfig, seed: int = 0) -> TransformerModel:
    """Random init: N(0, init_std) weights, zero biases, unit layer-norm gains.

    Roles listed in ``config.rank_map`` get random factor pairs whose product
    has roughly the same scale as a dense init.
    """
    rng = np.random.default_rng(seed)
    std = config.init_std
    d, v = config.d_model, config.vocab_size

    def normal(*shape, scale=std):
        return Tensor(rng.normal(0.0, scale, size=shape))

    blocks = []
    for _ in range(config.n_layers):
        layers = {}
        for role in ROLES:
            n, m = config.role_shape(role)
            bias = Tensor(np.zeros(m))
            k = (config.rank_map or {}).get(role)
            if k is None:
                layers[role] = LinearLayer(weight=normal(n, m), bias=bias)
            else:
                # product entries then have std ~ std
                s = math.sqrt(std / math.sqrt(k))
                layers[role] = LinearLayer(a=normal(n, k, scale=s), b=normal(k, m, scale=s), bias=bias)
        blocks.append(
            Block(
                attn={r: layers[r] for r in ATTN_ROLES},
                ffn={r: layers[r] for r in FFN_ROLES},
                ln_attn=_ln(d),
                ln_ffn=_ln(d),
            )
        )
    return TransformerModel(
        config,
        token_embed=normal(v, d),
        pos_embed=normal(config.max_seq_len, d),
        embed_ln=_ln(d),
        blocks=blocks,
        head_bias=Tensor(np.zeros(v)),
        head_weight=None if config.tie_embeddings else normal(d, v),
    )


def from_state_dict(config: ModelConfig, state: dict[str, np.ndarray]) -> TransformerModel:
    """Rebuild a model from named arrays; dense vs factorized is inferred per layer."""
    missing = []

    def get(name):
        if name not in state:
            missing.append(name)
            return None
        return Tensor(state[name])

    blocks = []
    for i in range(config.n_layers):
        layers = {}
        for role in ROLES:
            group = "attn" if role in ATTN_ROLES else "ffn"
            prefix = f"layers.{i}.{group}.{role}"
            bias = get(f"{prefix}.bias")
            if f"{prefix}.weight" in state:
                layers[role] = LinearLayer(weight=get(f"{prefix}.weight"), bias=bias)
            else:
                layers[role] = LinearLayer(a=get(f"{prefix}.a"), b=get(f"{prefix}.b"), bias=bias)
        blocks.append(
            Block(
                attn={r: layers[r] for r in ATTN_ROLES},
                ffn={r: layers[r] for r in FFN_ROLES},
                ln_attn=(get(f"layers.{i}.attn.ln.gain"), get(f"layers.{i}.attn.ln.bias")),
                ln_ffn=(get(f"layers.{i}.ffn.ln.gain"), get(f"layers.{i}.ffn.ln.bias")),
            )
        )
    if "embed.token.a" in state:
        token_embed = LowRankEmbedding(get("embed.token.a"), get("embed.token.b"))
    else:
        token_embed = get("embed.token")
    model = TransformerModel(
        config,
        token_embed=token_embed,
        pos_embed=get("embed.position"),
        embed_ln=(get("embed.ln.gain"), get("embed.ln.bias")),
        blocks=blocks,
        head_bias=get("head.bias"),
        head_weight=None if config.tie_embeddings else get("head.weight"),
    )
    if missing:
        raise KeyError(f"state is missing tensors: {', '.join(missing[:5])}")
    return model


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


@dataclass
class LayerTrace:
    """Intermediates of one layer; head tensors are ``[B, A_h, |x|, ...]``."""

    query: Tensor
    key: Tensor
    value: Tensor
    attn: Tensor
    mha_out: Tensor
    ffn_up: Tensor
    ffn_down: Tensor
    hidden: Tensor


@dataclass
class ActivationTrace:
    token_ids: np.ndarray
    attn_mask: np.ndarray  # [B, |x|], True where the position holds a real token
    embeddings: Tensor
    layers: list[LayerTrace] = field(default_factory=list)
    logits: Tensor | None = None

    def layer(self, l: int) -> LayerTrace:
        """1-based access, matching layer numbering in distillation plans."""
        if not 1 <= l <= len(self.layers):
            raise IndexError(f"layer {l} outside [1, {len(self.layers)}]")
        return self.layers[l - 1]


def attention_mask(config: ModelConfig, pad_mask: np.ndarray) -> np.ndarray:
    """Broadcastable ``[B, 1, |x|, |x|]`` boolean mask of attendable keys."""
    keys = pad_mask[:, None, None, :]
    if config.causal:
        n = pad_mask.shape[1]
        keys = keys & np.tril(np.ones((n, n), dtype=bool))[None, None]
    return keys


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dk))


def mha_forward(h_prev: Tensor, block: Block, config: ModelConfig, mask: np.ndarray | None):
    """Multi-head self-attention sub-layer with residual and layer norm.

    Returns ``(O, query, key, value, attn)`` with per-head tensors shaped
    ``[B, A_h, |x|, d_k]`` and ``attn`` shaped ``[B, A_h, |x|, |x|]``.
    """
    if h_prev.ndim == 2:
        h_prev = T.reshape(h_prev, (1,) + h_prev.shape)
    b, n, d = h_prev.shape
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 4 or mask.shape[-1] != n or mask.shape[-2] not in (1, n):
            raise T.ShapeError(f"attention mask shape {mask.shape} does not fit sequence length {n}")
    q = _split_heads(block.attn["query"](h_prev), config.n_heads)
    k = _split_heads(block.attn["key"](h_prev), config.n_heads)
    v = _split_heads(block.attn["value"](h_prev), config.n_heads)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(config.d_head))
    attn = T.softmax_rows(scores, mask)
    ctx = _merge_heads(T.matmul(attn, v))
    o = T.layer_norm(h_prev + block.attn["output"](ctx), *block.ln_attn, eps=config.ln_eps)
    return o, q, k, v, attn


def ffn_forward(o: Tensor, block: Block, config: ModelConfig):
    """Feed-forward sub-layer. Returns ``(H, F_up, F_down)``."""
    f_up = T.gelu(block.ffn["up"](o), config.gelu)
    f_down = block.ffn["down"](f_up)
    h = T.layer_norm(o + f_down, *block.ln_ffn, eps=config.ln_eps)
    return h, f_up, f_down


def model_forward(model: TransformerModel, token_ids, attn_mask=None) -> ActivationTrace:
    """Run the whole stack and keep every intermediate.

    ``token_ids`` is ``[B, |x|]`` (a 1-d sequence is treated as one row);
    ``attn_mask`` marks real tokens (True) vs padding and defaults to all-real.
    """
    cfg = model.config
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise T.ShapeError(f"token_ids must be [B, |x|], got {ids.shape}")
    b, n = ids.shape
    if n > cfg.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    pad = np.ones((b, n), dtype=bool) if attn_mask is None else np.asarray(attn_mask, dtype=bool)
    if pad.ndim == 1:
        pad = pad[None, :]
    if pad.shape != ids.shape:
        raise T.ShapeError(f"attention mask {pad.shape} does not match token ids {ids.shape}")
    mask = attention_mask(cfg, pad)

    tok = model.token_embed
    x = (tok.lookup(ids) if isinstance(tok, LowRankEmbedding) else T.embedding(tok, ids)) + T.reshape(T.index(model.pos_embed, slice(0, n)), (1, n, cfg.d_model))
    h = T.layer_norm(x, *model.embed_ln, eps=cfg.ln_eps)
    trace = ActivationTrace(token_ids=ids, attn_mask=pad, embeddings=h)
    for blk in model.blocks:
        o, q, k, v, attn = mha_forward(h, blk, cfg, mask)
        h, f_up, f_down = ffn_forward(o, blk, cfg)
        trace.layers.append(LayerTrace(q, k, v, attn, o, f_up, f_down, h))
    if model.head_weight is not None:
        trace.logits = T.linear(h, model.head_weight, model.head_bias)
    elif isinstance(tok, LowRankEmbedding):
        trace.logits = tok.project_out(h, model.head_bias)
    else:
        trace.logits = T.linear(h, T.transpose(tok), model.head_bias)
    return trace
