"""Binary checkpoint container.

Layout::

    b"GRTCKPT\\n"
    uint64 little-endian  header length H
    H bytes               UTF-8 JSON header
    payload               tensors, row-major little-endian, back to back

The header holds ``format_version``, the model config echo, free-form
``extra`` metadata and one ``{name, shape, dtype, offset, nbytes}`` entry per
tensor (offsets relative to the payload start). Optimizer buffers are stored
as tensors named ``optim/<parameter name>`` and a best-so-far snapshot as
``best/<parameter name>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GRTCKPT\n"
FORMAT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint."""


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, torch.Tensor]
    extra: dict = field(default_factory=dict)

    def params(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.tensors.items() if "/" not in k}

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        head = prefix + "/"
        return {k[len(head):]: v for k, v in self.tensors.items() if k.startswith(head)}

    def momentum(self) -> dict[str, torch.Tensor]:
        return self.group("optim")


def save(path, ckpt: Checkpoint) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in ckpt.tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes(order="C")
        entries.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype],
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "config": ckpt.config,
                         "extra": ckpt.extra, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not blob.startswith(MAGIC) or len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupted header") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = memoryview(blob)[start + hlen:]
    tensors = {}
    for e in header["tensors"]:
        if e["dtype"] not in _TORCH:
            raise CheckpointError(f"{path}: unsupported dtype {e['dtype']}")
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at tensor {e['name']}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=e["dtype"])
        if arr.size != int(np.prod(e["shape"], dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {e['name']} size does not match its shape")
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("=")))
    if start + hlen + sum(e["nbytes"] for e in header["tensors"]) != len(blob):
        raise CheckpointError(f"{path}: payload length does not match the header")
    return Checkpoint(header["config"], tensors, header.get("extra", {}))


def model_checkpoint(model, extra: dict | None = None, momentum: dict | None = None,
                     params: dict | None = None, best: dict | None = None) -> Checkpoint:
    tensors = dict(params if params is not None else model.state_dict())
    for prefix, group in (("optim", momentum), ("best", best)):
        for name, t in (group or {}).items():
            tensors[f"{prefix}/{name}"] = t
    return Checkpoint(model.config.to_dict(), tensors, dict(extra or {}))


def load_model(path, expect_classes: int | None = None):
    """Rebuild a model from a checkpoint, validating config and parameter shapes."""
    from grt.backbone import GaussianRadarTransformer, GRTConfig

    ckpt = load(path)
    try:
        config = GRTConfig.from_dict(ckpt.config["model"] if "model" in ckpt.config else ckpt.config)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model config ({exc})") from None
    if expect_classes is not None and config.num_classes != expect_classes:
        raise CheckpointError(
            f"{path}: checkpoint predicts {config.num_classes} classes, data has {expect_classes}"
        )
    model = GaussianRadarTransformer(config)
    params = ckpt.params()
    expected = model.state_dict()
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        unexpected = sorted(set(params) - set(expected))
        raise CheckpointError(f"{path}: parameter mismatch, missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, t in params.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"{path}: {name} has shape {tuple(t.shape)}, config needs "
                                  f"{tuple(expected[name].shape)}")
    dtype = next(iter(params.values())).dtype if params else torch.float32
    model = model.to(dtype)
    model.load_state_dict(params)
    return model, ckpt
