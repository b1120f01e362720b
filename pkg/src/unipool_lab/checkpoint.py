"""Versioned single-file checkpoints.

Layout (little-endian)::

    b"UPL1" | u32 format version | u64 header length | header JSON
    | u32 record count | records... | b"UEND"

    record: u16 name length | name (utf-8) | u8 dtype code | u8 ndim
            | ndim x u64 dims | raw element bytes

The header carries the model/train configs, seed, step, optimizer step count,
accumulator state and the batch RNG state. Records hold parameters
(``param/``), Adam moments (``adam_m/``, ``adam_v/``) and the pool statistic
(``pool/f_bar``). A shared expert is one parameter and is stored once.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from . import __version__
from .config import ModelConfig, TrainConfig, config_hash
from .train import TrainState, init_state

MAGIC = b"UPL1"
END = b"UEND"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def _records(state: TrainState) -> dict[str, np.ndarray]:
    out = {}
    for name, p in state.model.params().items():
        out[f"param/{name}"] = p.data
    opt = state.optimizer.state_dict()
    for name, a in opt["m"].items():
        out[f"adam_m/{name}"] = a
    for name, a in opt["v"].items():
        out[f"adam_v/{name}"] = a
    if state.accumulator is not None:
        out["pool/f_bar"] = state.accumulator.f_bar
    return out


def checkpoint_save(state: TrainState, path) -> None:
    header = {
        "tool_version": __version__,
        "model_config": state.model_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "config_hash": config_hash(state.model_config),
        "seed": state.seed,
        "step": state.step,
        "optimizer_t": state.optimizer.t,
        "accumulator": state.accumulator.state() if state.accumulator is not None else None,
        "rng_state": state.rng.bit_generator.state,
        "router_c": [r.c for r in state.model.routers()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    recs = _records(state)
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(recs))]
    for name, arr in recs.items():
        arr = np.asarray(arr, order="C")
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"cannot store dtype {arr.dtype} for {name}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype(dt, copy=False).tobytes())
    parts.append(END)
    tmp = f"{os.fspath(path)}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(b"".join(parts))
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path!r}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint {self.path!r} is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into its header and named arrays."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {exc}") from exc
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path!r} is not a checkpoint (bad magic)")
    version, hlen = r.unpack("<IQ")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    header = json.loads(r.take(hlen).decode("utf-8"))
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    if r.take(4) != END:
        raise CheckpointError(f"checkpoint {path!r} is corrupt (missing end marker)")
    return header, arrays


def checkpoint_load(path, expect_config: ModelConfig | None = None) -> TrainState:
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    if expect_config is not None and cfg != expect_config:
        diff = sorted(k for k, v in expect_config.to_dict().items() if header["model_config"].get(k) != v)
        raise ConfigMismatchError(f"checkpoint config differs from the requested one in: {', '.join(diff)}")
    tc = TrainConfig.from_dict(header["train_config"])
    state = init_state(cfg, tc, header["seed"])
    params = state.model.params()
    expected = set(_records(state))
    if set(arrays) != expected:
        missing = sorted(expected - set(arrays))
        extra = sorted(set(arrays) - expected)
        raise ConfigMismatchError(f"checkpoint tensors do not match the model (missing {missing[:3]}, extra {extra[:3]})")
    for name, p in params.items():
        a = arrays[f"param/{name}"]
        if a.shape != p.shape:
            raise ConfigMismatchError(f"{name}: stored shape {a.shape} != model shape {p.shape}")
        p.data = a.astype(p.data.dtype)
    state.optimizer.load_state_dict({
        "t": header["optimizer_t"],
        "m": {n: arrays[f"adam_m/{n}"] for n in params},
        "v": {n: arrays[f"adam_v/{n}"] for n in params},
    })
    if state.accumulator is not None:
        state.accumulator.load(arrays["pool/f_bar"], header["accumulator"] or {})
    for r, c in zip(state.model.routers(), header.get("router_c", [])):
        r.c = float(c)
    state.rng.bit_generator.state = header["rng_state"]
    state.step = int(header["step"])
    return state
