"""Checkpoint container.

Layout (all text is UTF-8)::

    MAKD-CKPT 1
    config.<field>=<json value>          one line per ModelConfig field
    meta.<key>=<json value>              free-form run metadata
    tensor <name> <shape>                one line per tensor, payload order
    end
    <payload>

``<shape>`` is ``AxBxC`` (``scalar`` for 0-d). The payload is the tensors'
raw little-endian float64 bytes, concatenated in manifest order with no
padding. Save then load is bit-exact.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from .transformer import ModelConfig, TransformerModel, from_state_dict

MAGIC = "MAKD-CKPT 1"
_LE_F8 = np.dtype("<f8")


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def atomic_write(path, write_fn) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path, tensors: dict[str, np.ndarray], config: ModelConfig | None = None, meta: dict | None = None) -> None:
    lines = [MAGIC]
    if config is not None:
        for key, value in config.to_dict().items():
            lines.append(f"config.{key}={json.dumps(value, sort_keys=True)}")
    for key, value in (meta or {}).items():
        lines.append(f"meta.{key}={json.dumps(value, sort_keys=True)}")
    arrays = []
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        arr = np.ascontiguousarray(arr, dtype=_LE_F8)
        arrays.append(arr)
        lines.append(f"tensor {name} {_shape_str(arr.shape)}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")

    def write(fh):
        fh.write(header)
        for arr in arrays:
            fh.write(arr.tobytes())

    atomic_write(path, write)


def read_header(path) -> tuple[dict, dict, list[tuple[str, tuple[int, ...]]], int]:
    """Parse only the text header: ``(config_fields, meta, manifest, payload_offset)``."""
    config, meta, manifest = {}, {}, []
    with open(path, "rb") as fh:
        first = fh.readline().decode("utf-8").rstrip("\n")
        if first != MAGIC:
            raise ValueError(f"{path}: not a MAKD checkpoint (header {first!r})")
        while True:
            raw = fh.readline()
            if not raw:
                raise ValueError(f"{path}: truncated header")
            line = raw.decode("utf-8").rstrip("\n")
            if line == "end":
                break
            if line.startswith("tensor "):
                _, name, shape = line.split(" ")
                manifest.append((name, _parse_shape(shape)))
            elif line.startswith("config."):
                key, _, value = line[len("config."):].partition("=")
                config[key] = json.loads(value)
            elif line.startswith("meta."):
                key, _, value = line[len("meta."):].partition("=")
                meta[key] = json.loads(value)
            else:
                raise ValueError(f"{path}: unrecognised header line {line!r}")
        offset = fh.tell()
    return config, meta, manifest, offset


def load_tensors(path) -> tuple[dict, dict, dict[str, np.ndarray]]:
    config, meta, manifest, offset = read_header(path)
    tensors = {}
    with open(path, "rb") as fh:
        fh.seek(offset)
        for name, shape in manifest:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: payload truncated at tensor {name}")
            tensors[name] = np.frombuffer(buf, dtype=_LE_F8).astype(np.float64).reshape(shape)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    return config, meta, tensors


def config_from_fields(fields_: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in fields_.items() if k in known})


def save_model(path, model: TransformerModel, meta: dict | None = None) -> None:
    save_tensors(path, model.state_dict(), model.config, meta)


def load_model(path) -> tuple[TransformerModel, dict]:
    cfg_fields, meta, tensors = load_tensors(path)
    if not cfg_fields:
        raise ValueError(f"{path}: checkpoint has no model config")
    cfg = config_from_fields(cfg_fields)
    model_state = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    return from_state_dict(cfg, model_state), meta


def manifest_param_count(path, prefix_exclude: tuple[str, ...] = ("opt.",)) -> int:
    """Sum of tensor sizes listed in the header, independent of any model object."""
    _, _, manifest, _ = read_header(path)
    total = 0
    for name, shape in manifest:
        if name.startswith(prefix_exclude):
            continue
        n = 1
        for s in shape:
            n *= s
        total += n
    return total
