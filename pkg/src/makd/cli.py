"""``makd`` command-line entry point.

Subcommands: ``pretrain-teacher``, ``factorize``, ``distill``, ``eval``,
``bench`` and ``inspect``. Every artifact is written together with a
``<artifact>.manifest.json`` describing how it was produced. Failures
print one line ``error: <category>: <message>`` to stderr and exit with

* 2 for usage, configuration and rank errors,
* 3 for a missing input file,
* 4 for data errors, 5 for training divergence, 1 for anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .checkpoint import load_model, manifest_param_count, read_header, save_model
from .config import ConfigError, build_run_config, parse_overrides, parse_rank_map, read_config, write_config
from .data import Tokenizer, encode_corpus, fixed_batches
from .evaluation import agreement, generation_rouge, masked_accuracy, throughput_bench
from .factorize import FactorizationSpec, RankError, build_student, compression_report
from .pipeline import PROMPT_END, corpus_docs, data_from_meta, objective_for, run_distill, run_pretrain
from .train import TrainingDiverged
from .transformer import ModelConfig, init_model, model_forward

log = logging.getLogger("makd")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5

BERT_BASE = dict(n_layers=12, d_model=768, n_heads=12, d_ff=3072, vocab_size=30522, max_seq_len=512)


class UsageError(Exception):
    pass


class MissingFile(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# manifests and small writers
# --------------------------------------------------------------------------


def _git_revision() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    code_version: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    duration_seconds: float = 0.0
    started_at: str = ""
    python: str = platform.python_version()
    numpy: str = np.__version__

    def write(self, artifact) -> Path:
        path = Path(str(artifact) + ".manifest.json")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return path


def _code_version() -> str:
    rev = _git_revision()
    return f"{__version__}+{rev}" if rev else __version__


def _need(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"no such file: {path}")
    return p


def write_kv(path, values: dict) -> Path:
    """``key=value`` lines; floats in repr form so they round-trip exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, v in values.items():
        if isinstance(v, float):
            v = repr(v)
        elif isinstance(v, (list, dict, bool)) or v is None:
            v = json.dumps(v)
        lines.append(f"{k}={v}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k] = v
    return out


def _stem(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _run_config(args, extra: dict | None = None):
    values = read_config(_need(args.config)) if getattr(args, "config", None) else {}
    overrides = parse_overrides(getattr(args, "set", None))
    overrides.update(extra or {})
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    return build_run_config(values, overrides)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_pretrain(args, manifest: RunManifest) -> int:
    extra = {}
    if args.corpus:
        extra["data.corpus"] = args.corpus
    if args.steps is not None:
        extra["train.steps"] = args.steps
    if args.out:
        extra["out"] = args.out
    rc = _run_config(args, extra)
    if not rc.out:
        raise UsageError("pretrain-teacher needs --out (or 'out' in the config)")
    out = Path(rc.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics = _stem(out, ".metrics.jsonl")
    metrics.unlink(missing_ok=True)
    model, records, prep = run_pretrain(rc, log_path=metrics, out=out)
    vocab = _stem(out, ".vocab.tsv")
    prep.tokenizer.save(vocab)
    from .plotting import plot_training_curves

    fig = plot_training_curves(records, _stem(out, ".curves.png"), title="teacher pretraining")
    final = records[-1].get("eval", {}) if records else {}
    print(f"teacher\tparams={model.n_params()}\tvocab={prep.tokenizer.vocab_size}\t"
          f"eval_accuracy={final.get('accuracy', float('nan')):.4f}")
    manifest.config, manifest.seed = rc.flat(), rc.train.seed
    manifest.outputs = {"checkpoint": str(out), "metrics": str(metrics), "vocab": str(vocab), "figure": str(fig)}
    manifest.inputs = {"corpus": rc.data.corpus}
    return EXIT_OK


def cmd_factorize(args, manifest: RunManifest) -> int:
    given = [x is not None for x in (args.rank, args.rate, args.rank_map)]
    if sum(given) != 1:
        raise UsageError("factorize needs exactly one of --rank, --rate, --rank-map")
    if args.rank is not None and args.rank < 1:
        raise RankError(f"rank {args.rank} outside [1, min(n, m)]; ranks must be positive")
    teacher_path = _need(args.teacher)
    spec = FactorizationSpec(
        rank=args.rank,
        rate=args.rate,
        rank_map=parse_rank_map(args.rank_map) if args.rank_map else None,
        factorize_embeddings=args.factorize_embeddings,
        embedding_rank=args.embedding_rank,
        svd_method=args.svd_method,
    )
    teacher, meta = load_model(teacher_path)
    student = build_student(teacher, spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, student, {k: v for k, v in meta.items() if k in ("vocab", "data")})
    rep = compression_report(teacher, student)
    summary = rep.summary()
    summary["checkpoint_params"] = manifest_param_count(out)
    report = write_kv(_stem(out, ".report.txt"), summary)
    table = _stem(out, ".matrices.tsv")
    cols = ("layer", "role", "n", "m", "rank", "dense_params", "params", "frobenius_error", "retained_energy")
    rows = ["\t".join(cols)] + ["\t".join(str(getattr(r, c)) for c in cols) for r in rep.matrices]
    table.write_text("\n".join(rows) + "\n", encoding="utf-8")

    spectra, ranks = {}, {}
    for i, role, lin in teacher.linear_layers():
        name = f"{i + 1}.{role}"
        spectra[name] = np.linalg.svd(lin.dense_weight(), compute_uv=False)
        ranks[name] = student.config.rank_map.get(role) if student.config.rank_map else None
    from .plotting import plot_spectra

    fig = plot_spectra(spectra, ranks, _stem(out, ".spectra.png"), title="teacher singular spectra")

    print(f"{'layer':>5} {'role':<7} {'shape':>10} {'rank':>5} {'params':>9} {'dense':>9} {'energy':>7}")
    for r in rep.matrices:
        energy = f"{r.retained_energy:.4f}" if r.retained_energy is not None else "-"
        print(f"{r.layer:>5} {r.role:<7} {f'{r.n}x{r.m}':>10} {r.rank or '-':>5} {r.params:>9} {r.dense_params:>9} {energy:>7}")
    print(f"teacher_params={rep.teacher_params} student_params={rep.student_params} "
          f"param_ratio={rep.param_ratio:.4f} flops_ratio={rep.flops_ratio:.4f}")
    if rep.inflated:
        print(f"warning: factorization does not compress {len(rep.inflated)} matrices", file=sys.stderr)
    manifest.config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}
    manifest.inputs = {"teacher": str(teacher_path)}
    manifest.outputs = {"checkpoint": str(out), "report": str(report), "table": str(table), "figure": str(fig)}
    return EXIT_OK


def cmd_distill(args, manifest: RunManifest) -> int:
    extra = {}
    for key, val in (("teacher", args.teacher), ("out", args.out), ("train.mode", args.mode),
                     ("train.steps", args.steps), ("student_init", args.student_init)):
        if val is not None:
            extra[key] = val
    rc = _run_config(args, extra)
    if not rc.teacher or not rc.out:
        raise UsageError("distill needs 'teacher' and 'out' (config keys or flags)")
    teacher_path = _need(rc.teacher)
    if args.resume:
        _need(args.resume)
    teacher, meta = load_model(teacher_path)
    prep = data_from_meta(meta, rc, teacher.config.model_kind)
    out = Path(rc.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics = _stem(out, ".metrics.jsonl")
    if not args.resume:
        metrics.unlink(missing_ok=True)
    effective = _stem(out, ".config.txt")
    write_config(effective, rc.flat())
    state, records, plan = run_distill(rc, teacher, prep, log_path=metrics, out=out, resume=args.resume)
    from .plotting import plot_training_curves, read_metrics

    fig = plot_training_curves(read_metrics(metrics), _stem(out, ".curves.png"), title=f"distillation ({rc.train.mode})")
    final = records[-1].get("eval", {}) if records else {}
    print(f"student\tparams={state.model.n_params()}\tsteps={state.step}\t"
          f"eval_accuracy={final.get('accuracy', float('nan')):.4f}\tlogit_kl={final.get('logit_kl', float('nan')):.6f}")
    manifest.config, manifest.seed = rc.flat(), rc.train.seed
    manifest.inputs = {"teacher": str(teacher_path), **({"resume": args.resume} if args.resume else {})}
    manifest.outputs = {"checkpoint": str(out), "metrics": str(metrics), "config": str(effective), "figure": str(fig)}
    return EXIT_OK


def cmd_eval(args, manifest: RunManifest) -> int:
    model_path = _need(args.model)
    model, meta = load_model(model_path)
    teacher = None
    if args.teacher:
        teacher, tmeta = load_model(_need(args.teacher))
        meta = {**tmeta, **meta}
    if args.vocab:
        tok = Tokenizer.load(_need(args.vocab))
    elif "vocab" in meta:
        tok = Tokenizer(meta["vocab"])
    else:
        raise UsageError("checkpoint has no vocabulary; pass --vocab")
    if Path(args.data).suffix and not Path(args.data).exists():
        raise MissingFile(f"no such file: {args.data}")
    docs = corpus_docs(args.data)
    if not docs:
        raise ValueError(f"{args.data}: no documents")
    cfg = model.config
    objective = objective_for(cfg.model_kind)
    seqs = encode_corpus(tok, docs, min(cfg.max_seq_len, args.max_len))
    batches = []
    for d in range(args.draws if objective == "mlm" else 1):
        batches += fixed_batches(seqs, tok, 64, args.seed + d, objective)
    report: dict = {"model": str(model_path), "data": args.data, "n_docs": len(docs),
                    "n_labels": sum(b.n_labels for b in batches), "accuracy": masked_accuracy(model, batches)}
    figure = None
    if teacher is not None:
        ag = agreement(model, teacher, batches)
        report["teacher_accuracy"] = masked_accuracy(teacher, batches)
        report.update(ag.as_dict())
        if cfg.causal:
            prompts = [d[: d.find(PROMPT_END) + len(PROMPT_END)] for d in docs if PROMPT_END in d][: args.n_prompts]
            if prompts:
                report["rouge_l_vs_teacher"] = generation_rouge(model, teacher, tok, prompts)
                report["n_prompts"] = len(prompts)
        from .plotting import plot_bars

        figure = plot_bars({f"layer {i + 1}": v for i, v in enumerate(ag.attn_kl)}, _stem(args.report, ".attn_kl.png"),
                           title="attention KL(teacher || student)", ylabel="nats")
    out = write_kv(args.report, report)
    for k, v in report.items():
        print(f"{k}\t{v}")
    manifest.config = {"data": args.data, "draws": args.draws, "max_len": args.max_len}
    manifest.seed = args.seed
    manifest.inputs = {"model": str(model_path), **({"teacher": args.teacher} if args.teacher else {})}
    manifest.outputs = {"report": str(out), **({"figure": str(figure)} if figure else {})}
    return EXIT_OK


def cmd_bench(args, manifest: RunManifest) -> int:
    if args.model:
        model, _ = load_model(_need(args.model))
        base = load_model(_need(args.teacher))[0] if args.teacher else None
    else:
        if args.rank is None:
            raise UsageError("bench without --model needs --rank for the synthetic student")
        cfg = ModelConfig(**BERT_BASE)
        base = init_model(cfg, seed=args.seed)
        model = init_model(ModelConfig(**BERT_BASE, rank_map={r: args.rank for r in ("query", "key", "value", "output", "up", "down")}),
                           seed=args.seed + 1)
    rep = throughput_bench(model, args.seq_len, args.repetitions, args.batch_size, seed=args.seed)
    report = {"tokens_per_sec": rep.tokens_per_sec, "median_seconds": rep.median_seconds,
              "linear_macs_per_token": rep.linear_macs_per_token, "per_layer_linear_macs": rep.per_layer_linear_macs,
              "params": model.n_params()}
    if base is not None:
        brep = throughput_bench(base, args.seq_len, args.repetitions, args.batch_size, seed=args.seed)
        report.update(baseline_tokens_per_sec=brep.tokens_per_sec, baseline_median_seconds=brep.median_seconds,
                      baseline_linear_macs_per_token=brep.linear_macs_per_token, baseline_params=base.n_params(),
                      wallclock_speedup=brep.median_seconds / rep.median_seconds,
                      flops_ratio=brep.linear_macs_per_token / rep.linear_macs_per_token)
    for k, v in report.items():
        print(f"{k}\t{v}")
    if args.report:
        write_kv(args.report, report)
        manifest.outputs = {"report": args.report}
    manifest.config = {k: getattr(args, k) for k in ("seq_len", "repetitions", "batch_size", "rank")}
    manifest.seed = args.seed
    return EXIT_OK


def cmd_inspect(args, manifest: RunManifest) -> int:
    path = _need(args.checkpoint)
    cfg_fields, meta, tensors_manifest, _ = read_header(path)
    model, _ = load_model(path)
    c = model.config
    print(f"model_kind\t{c.model_kind}")
    print(f"L\t{c.n_layers}\nd\t{c.d_model}\nd_f\t{c.d_ff}\nA_h\t{c.n_heads}\nvocab\t{c.vocab_size}\nmax_seq_len\t{c.max_seq_len}")
    print(f"rank_map\t{json.dumps(c.rank_map)}")
    print(f"params\t{model.n_params()}")
    print(f"manifest_params\t{manifest_param_count(path)}")
    if "step" in meta:
        print(f"step\t{meta['step']}")
    if args.tensors:
        for name, shape in tensors_manifest:
            print(f"tensor\t{name}\t{'x'.join(map(str, shape)) or 'scalar'}")
    t = min(c.max_seq_len, 8)
    ids = np.random.default_rng(args.seed).integers(5 if c.vocab_size > 5 else 0, c.vocab_size, size=(1, t))
    with T.no_grad():
        trace = model_forward(model, ids)
    print(f"trace.embeddings\t{'x'.join(map(str, trace.embeddings.shape))}")
    if trace.layers:
        lt = trace.layers[0]
        for name in ("query", "key", "value", "attn", "ffn_up", "ffn_down", "hidden"):
            print(f"trace.layer.{name}\t{'x'.join(map(str, getattr(lt, name).shape))}")
    print(f"trace.logits\t{'x'.join(map(str, trace.logits.shape))}")
    manifest.inputs = {"checkpoint": str(path)}
    manifest.seed = args.seed
    return EXIT_OK


# --------------------------------------------------------------------------
# parser and dispatch
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="makd", description="Low-rank transformer students distilled from a dense teacher.")
    p.add_argument("--version", action="version", version=f"makd {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=False):
        sp.add_argument("--seed", type=int, default=None if config else 0)
        if config:
            sp.add_argument("--config", help="key = value run config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("pretrain-teacher", help="pretrain a dense teacher")
    common(sp, config=True)
    sp.add_argument("--corpus")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("factorize", help="build an SVD-initialised low-rank student")
    common(sp)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--rank", type=int)
    sp.add_argument("--rate", type=float)
    sp.add_argument("--rank-map", help="e.g. query:8,key:8,value:8")
    sp.add_argument("--factorize-embeddings", action="store_true")
    sp.add_argument("--embedding-rank", type=int)
    sp.add_argument("--svd-method", choices=("lapack", "jacobi"), default="lapack")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_factorize)

    sp = sub.add_parser("distill", help="distil a teacher into a low-rank student")
    common(sp, config=True)
    sp.add_argument("--teacher")
    sp.add_argument("--out")
    sp.add_argument("--mode", choices=("distill-makd", "distill-logit-only"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--student-init", choices=("svd", "random"))
    sp.add_argument("--resume", help="training-state checkpoint to continue from")
    sp.set_defaults(fn=cmd_distill)

    sp = sub.add_parser("eval", help="accuracy, teacher agreement and Rouge-L")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--teacher")
    sp.add_argument("--data", required=True, help="corpus file or bundled corpus name")
    sp.add_argument("--vocab", help="tokenizer file when the checkpoint has no vocabulary")
    sp.add_argument("--report", required=True)
    sp.add_argument("--draws", type=int, default=3)
    sp.add_argument("--max-len", type=int, default=64)
    sp.add_argument("--n-prompts", type=int, default=200)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("bench", help="forward throughput and FLOP ratio")
    common(sp)
    sp.add_argument("--model", help="checkpoint; omit to bench a synthetic BERT-base shape")
    sp.add_argument("--teacher", help="baseline checkpoint for speedup")
    sp.add_argument("--rank", type=int, help="rank of the synthetic student")
    sp.add_argument("--seq-len", type=int, default=128)
    sp.add_argument("--repetitions", type=int, default=5)
    sp.add_argument("--batch-size", type=int, default=1)
    sp.add_argument("--report")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("inspect", help="config, parameter counts and trace shapes of a checkpoint")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("--tensors", action="store_true", help="also list every tensor in the manifest")
    sp.set_defaults(fn=cmd_inspect)
    return p


def _fail(category: str, message: str, code: int) -> int:
    print(f"error: {category}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(command=args.command, argv=argv, config={}, seed=getattr(args, "seed", None),
                           code_version=_code_version(), started_at=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    t0 = time.perf_counter()
    try:
        code = args.fn(args, manifest)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except MissingFile as exc:
        return _fail("missing-file", exc, EXIT_MISSING)
    except FileNotFoundError as exc:
        return _fail("missing-file", exc, EXIT_MISSING)
    except RankError as exc:
        return _fail("rank", exc, EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_USAGE)
    except TrainingDiverged as exc:
        return _fail("diverged", exc, EXIT_DIVERGED)
    except ValueError as exc:
        return _fail("data", exc, EXIT_DATA)
    manifest.duration_seconds = time.perf_counter() - t0
    for artifact in manifest.outputs.values():
        manifest.write(artifact)
    return code


if __name__ == "__main__":
    sys.exit(main())
