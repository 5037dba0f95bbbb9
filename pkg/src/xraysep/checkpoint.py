"""Versioned binary checkpoints.

Layout::

    b"XRSEPCKP"              8-byte magic
    uint32 LE                format version
    uint64 LE                header length in bytes
    header                   UTF-8 JSON (sorted keys)
    payload                  raw little-endian array data, back to back

The header carries the architecture, the training config, the completed
epoch count, the loss history, the ADAM step count and one record per
array (name, dtype, shape, offset, nbytes). Arrays cover every learnable
tensor, every batch-norm running statistic and both ADAM moments of every
parameter, so a loaded state continues training bit-identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .adam import Adam
from .engine import TrainConfig, TrainState
from .losses import LossBreakdown, LossOptions, LossWeights
from .model import BaselineWeights, ModelWeights, init_baseline, init_weights

MAGIC = b"XRSEPCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of a supported version."""


def config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "lambda": list(cfg.weights.as_tuple()),
        "lr": cfg.lr,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "loss_options": asdict(cfg.loss_options),
        "snapshot_epochs": list(cfg.snapshot_epochs),
        "width": cfg.width,
        "joint_bn": cfg.joint_bn,
    }


def config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(weights=LossWeights(*d["lambda"]), lr=d["lr"], epochs=d["epochs"],
                       batch_size=d["batch_size"], seed=d["seed"],
                       loss_options=LossOptions(**d["loss_options"]),
                       snapshot_epochs=tuple(d["snapshot_epochs"]), width=d["width"],
                       joint_bn=d["joint_bn"])


def _arch(weights) -> dict:
    if isinstance(weights, ModelWeights):
        return {"kind": "connected", "width": weights.width}
    if isinstance(weights, BaselineWeights):
        return {"kind": "baseline", "width": int(weights.blocks[0].kernels.shape[0]),
                "depth": len(weights.blocks)}
    raise TypeError(f"unsupported weights type {type(weights).__name__}")


def _skeleton(arch: dict, seed: int, dtype):
    if arch["kind"] == "connected":
        return init_weights(seed, arch["width"], dtype)
    if arch["kind"] == "baseline":
        return init_baseline(seed, arch["width"], arch["depth"], dtype)
    raise CheckpointError(f"unknown architecture {arch['kind']!r}")


def _arrays(state: TrainState):
    for name, owner, attr in state.weights.array_slots():
        yield name, getattr(owner, attr)
    for i, st in enumerate(state.optimizer.states):
        yield f"adam.{i}.m", st.m
        yield f"adam.{i}.v", st.v


def save_checkpoint(path: str | Path, state: TrainState, cfg: TrainConfig) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in _arrays(state):
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    opt = state.optimizer
    s0 = opt.states[0]
    header = {
        "arch": _arch(state.weights),
        "config": config_to_dict(cfg),
        "epoch": state.epoch,
        "history": [[getattr(b, k) for k in LossBreakdown.FIELDS] for b in state.history],
        "adam": {"lr": opt.lr, "t": s0.t, "beta1": s0.beta1, "beta2": s0.beta2, "eps": s0.eps},
        "entries": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hb)))
        fh.write(hb)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path: str | Path) -> tuple[TrainState, TrainConfig]:
    """Rebuild the training state and config stored by :func:`save_checkpoint`."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None

    arrays = {}
    for e in header["entries"]:
        lo = start + e["offset"]
        if lo + e["nbytes"] > len(blob):
            raise CheckpointError(f"{path}: truncated payload at {e['name']}")
        dt = np.dtype(e["dtype"])
        arrays[e["name"]] = np.frombuffer(blob, dtype=dt, count=e["nbytes"] // dt.itemsize,
                                          offset=lo).reshape(e["shape"])

    cfg = config_from_dict(header["config"])
    first = header["entries"][0]
    weights = _skeleton(header["arch"], cfg.seed, np.dtype(first["dtype"]).newbyteorder("="))
    for name, owner, attr in weights.array_slots():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing array {name}")
        current = getattr(owner, attr)
        if arrays[name].shape != current.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {current.shape}")
        setattr(owner, attr, arrays[name].astype(current.dtype))

    a = header["adam"]
    opt = Adam(weights.parameters(), a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    for i, st in enumerate(opt.states):
        st.m = arrays[f"adam.{i}.m"].astype(st.m.dtype)
        st.v = arrays[f"adam.{i}.v"].astype(st.v.dtype)
        st.t = a["t"]
    history = [LossBreakdown(*row) for row in header["history"]]
    return TrainState(weights, opt, header["epoch"], history), cfg
