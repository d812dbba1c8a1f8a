"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"BLOWCKPT"  u32 version  u64 header_len  header (UTF-8 JSON, sorted keys)
    u32 n_tensors
    repeated: u16 name_len, name, u8 dtype, u8 ndim, u64 * ndim shape, raw data

The header carries the flow config, speaker names (list position = id), seed,
epoch, training-schedule state, sampler RNG state and whether optimizer moments follow.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, FormatError
from .flow import Blow, FlowConfig

MAGIC = b"BLOWCKPT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.bool: 3}
TORCH = {0: torch.float32, 1: torch.float64, 2: torch.int64, 3: torch.bool}


def write_container(path, header, tensors):
    """Write ``header`` (JSON-serializable dict) and an ordered name->tensor mapping."""
    head = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in CODES:
            raise TypeError(f"cannot store {name} with dtype {t.dtype}")
        code = CODES[t.dtype]
        raw = name.encode()
        parts.append(struct.pack("<HBB", len(raw), code, t.dim()) + raw)
        parts.append(struct.pack(f"<{t.dim()}Q", *t.shape))
        arr = t.numpy()
        parts.append(arr.astype(DTYPES[code], copy=False).tobytes())
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        for p in parts:
            fh.write(p)
    tmp.replace(path)


class _Reader:
    def __init__(self, buf, path):
        self.buf = memoryview(buf)
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what}", field=what, offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if bytes(r.take(len(MAGIC), "magic")) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", field="magic", offset=0)
    version, head_len = r.unpack("<IQ", "version")
    if version != VERSION:
        raise FormatError(f"{path}: format version {version}, expected {VERSION}", field="version", offset=8)
    try:
        header = json.loads(bytes(r.take(head_len, "header")).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}", field="header", offset=20) from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        name_len, code, ndim = r.unpack("<HBB", "tensor record")
        name = bytes(r.take(name_len, "tensor name")).decode()
        if code not in DTYPES:
            raise FormatError(f"{path}: {name} has unknown dtype code {code}", field="dtype", offset=r.pos)
        shape = r.unpack(f"<{ndim}Q", f"{name} shape")
        n = int(np.prod(shape, dtype=np.int64))
        data = r.take(n * DTYPES[code].itemsize, f"{name} data")
        arr = np.frombuffer(data, dtype=DTYPES[code]).reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr).to(TORCH[code])
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes", field="trailer", offset=r.pos)
    return header, tensors


@dataclass
class Checkpoint:
    model: Blow
    speakers: list
    train_state: dict = None
    optimizer_state: dict = None
    header: dict = field(default_factory=dict)


def model_tensors(model):
    return dict(model.state_dict())


def optimizer_tensors(model, optimizer):
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            st = optimizer.state.get(p)
            if not st:
                continue
            for key in ("exp_avg", "exp_avg_sq", "step"):
                v = st[key]
                out[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(v).reshape(-1) if key == "step" else v
    return out


def save_checkpoint(path, model, speakers, train_state=None, optimizer=None, seed=0, extra=None):
    header = {
        "config": model.cfg.to_dict(),
        "speakers": list(speakers),
        "seed": seed,
        "epoch": (train_state or {}).get("epoch", 0),
        "train_state": train_state,
        "has_optimizer": optimizer is not None,
        "extra": extra or {},
    }
    tensors = {f"model.{k}": v for k, v in model_tensors(model).items()}
    if optimizer is not None:
        tensors.update(optimizer_tensors(model, optimizer))
    write_container(path, header, tensors)


def load_checkpoint(path, expected_config=None, dtype=torch.float32):
    """Rebuild the model (and optimizer moments, if stored) from ``path``.

    ``expected_config`` (a FlowConfig or dict) triggers a ConfigError on mismatch.
    """
    header, tensors = read_container(path)
    cfg = FlowConfig(**header["config"])
    if expected_config is not None:
        want = expected_config.to_dict() if isinstance(expected_config, FlowConfig) else dict(expected_config)
        diff = sorted(k for k in set(want) | set(cfg.to_dict()) if want.get(k) != cfg.to_dict().get(k))
        if diff:
            raise ConfigError(f"{path}: checkpoint config differs in {', '.join(diff)}")
    model = Blow(cfg, seed=header.get("seed", 0))
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    stored_dtype = next((v.dtype for v in state.values() if v.is_floating_point()), dtype)
    model.to(stored_dtype)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise FormatError(f"{path}: tensor set mismatch (missing={missing}, unexpected={unexpected})",
                          field="tensors")
    optim = {k[len("optim."):]: v for k, v in tensors.items() if k.startswith("optim.")}
    return Checkpoint(model, header["speakers"], header.get("train_state"), optim or None, header)


def restore_optimizer(model, optimizer, optim_state):
    """Load Adam moments saved by ``save_checkpoint`` into a fresh optimizer."""
    if not optim_state:
        return
    for name, p in model.named_parameters():
        key = f"{name}.exp_avg"
        if key not in optim_state:
            continue
        optimizer.state[p] = {
            "step": optim_state[f"{name}.step"].reshape(()).clone(),
            "exp_avg": optim_state[key].clone(),
            "exp_avg_sq": optim_state[f"{name}.exp_avg_sq"].clone(),
        }
