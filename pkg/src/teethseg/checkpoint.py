"""Binary checkpoint: magic, version, JSON manifest, little-endian float64 payload.

Layout::

    b"TSEGCKPT" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | payload

The manifest lists every stored array with its shape and byte offset into the
payload, plus the run config, optimizer/schedule scalars, RNG state and epoch.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import RunningStats
from .config import RunConfig
from .model import Network
from .optim import AdamState, ScheduleState

MAGIC = b"TSEGCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class TrainingState:
    run: RunConfig
    net: Network
    opt: AdamState
    sched: ScheduleState
    rng: np.random.Generator
    epoch: int = 0


def _arrays(state: TrainingState) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", v) for k, v in state.net.params.items()]
    for k, s in state.net.stats.items():
        out += [(f"running_mean/{k}", s.mean), (f"running_var/{k}", s.var)]
    out += [(f"adam_m/{k}", v) for k, v in state.opt.m.items()]
    out += [(f"adam_v/{k}", v) for k, v in state.opt.v.items()]
    return out


def encode_checkpoint(state: TrainingState) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in _arrays(state):
        data = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    sched = asdict(state.sched)
    if math.isinf(sched["best"]):
        sched["best"] = None
    manifest = {
        "arrays": entries,
        "config": state.run.to_dict(),
        "epoch": state.epoch,
        "optimizer": {"step": state.opt.step, "beta1": state.opt.beta1, "beta2": state.opt.beta2, "eps": state.opt.eps},
        "payload_bytes": offset,
        "rng": state.rng.bit_generator.state,
        "schedule": sched,
        "momentum": {k: s.momentum for k, s in state.net.stats.items()},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def decode_checkpoint(buf: bytes) -> TrainingState:
    if len(buf) < _HEADER.size:
        raise CheckpointError(f"truncated header: expected {_HEADER.size} bytes, got {len(buf)}")
    magic, version, mlen = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, this build reads version {VERSION}")
    start = _HEADER.size
    if len(buf) < start + mlen:
        raise CheckpointError(f"truncated manifest: expected {mlen} bytes, got {len(buf) - start}")
    try:
        manifest = json.loads(buf[start : start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    payload = buf[start + mlen :]
    expected = manifest["payload_bytes"]
    if len(payload) != expected:
        raise CheckpointError(f"payload size mismatch: expected {expected} bytes, got {len(payload)}")

    arrays = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * _DTYPE.itemsize
        if n != e["nbytes"] or e["offset"] < 0 or e["offset"] + n > expected:
            raise CheckpointError(f"manifest entry {e['name']} disagrees with payload (shape {e['shape']}, offset {e['offset']}, {e['nbytes']} bytes)")
        arrays[e["name"]] = np.frombuffer(payload, dtype=_DTYPE, count=n // 8, offset=e["offset"]).reshape(e["shape"]).astype(np.float64)

    def group(prefix):
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    run = RunConfig.from_dict(manifest["config"])
    means, vars_ = group("running_mean/"), group("running_var/")
    stats = {k: RunningStats(means[k], vars_[k], manifest["momentum"][k]) for k in means}
    net = Network(run.model, group("param/"), stats)
    o = manifest["optimizer"]
    opt = AdamState(group("adam_m/"), group("adam_v/"), o["step"], o["beta1"], o["beta2"], o["eps"])
    sched_d = dict(manifest["schedule"])
    if sched_d["best"] is None:
        sched_d["best"] = math.inf
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = manifest["rng"]
    return TrainingState(run, net, opt, ScheduleState(**sched_d), rng, manifest["epoch"])


def save_checkpoint(path: str | os.PathLike, state: TrainingState) -> None:
    data = encode_checkpoint(state)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> TrainingState:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
