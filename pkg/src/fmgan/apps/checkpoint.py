"""Binary checkpoints.

Layout::

    magic   8 bytes  b"FMGANCKP"
    version u32 LE
    hlen    u64 LE
    header  hlen bytes of UTF-8 JSON (sorted keys, compact separators)
    blobs   raw little-endian arrays, in header order, no padding

The header lists each array as ``[name, dtype, shape]``; offsets follow
from the order. Array names are prefixed ``param/``, ``buffer/``,
``opt/<net>/`` or ``bank/``. The header also carries the iteration, the
RNG bit-generator state, optimizer step counters, the center bank meta and
the experiment config, so a checkpoint alone rebuilds a trainer state.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..evaluation import ReferenceClassifier
from ..models import Classifier
from ..registry import CenterBank
from ..trainers import TrainerState, init_state
from . import config as cfgmod

MAGIC = b"FMGANCKP"
VERSION = 1
_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Blob:
    header: dict
    arrays: dict  # name -> ndarray, in file order


def _dtype_tag(a: np.ndarray) -> str:
    tag = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8", np.dtype(np.int64): "i8"}.get(a.dtype)
    if tag is None:
        raise CheckpointError(f"cannot store dtype {a.dtype}")
    return tag


def write_blob(path, header: dict, arrays: dict) -> Path:
    path = Path(path)
    header = dict(header)
    header["arrays"] = [[name, _dtype_tag(a), list(a.shape)] for name, a in arrays.items()]
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", VERSION, len(head)) + head)
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype=_DTYPES[_dtype_tag(a)]).tobytes())
        f.flush()
        os.fsync(f.fileno())
    tmp.replace(path)
    return path


def read_blob(path) -> Blob:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    pos = 20 + hlen
    arrays = {}
    for name, tag, shape in header.pop("arrays"):
        dt = np.dtype(_DTYPES[tag])
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at array {name}")
        a = np.frombuffer(raw, dtype=dt, count=n // dt.itemsize, offset=pos)
        arrays[name] = a.reshape(shape).astype(dt.newbyteorder("="))
        pos += n
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Blob(header, arrays)


# ---------------------------------------------------------------------------
# trainer state


def state_to_blob(state: TrainerState, experiment: cfgmod.ExperimentConfig) -> Blob:
    arrays = {}
    for name, p in state.named_parameters():
        arrays[f"param/{name}"] = p.data
    for name, b in state.named_buffers():
        arrays[f"buffer/{name}"] = b
    steps = {}
    for net, opt in sorted(state.optimizers.items()):
        for key, a in opt.state_arrays().items():
            arrays[f"opt/{net}/{key}"] = a
        steps[net] = opt.state.step
    for key, a in state.bank.state_arrays().items():
        arrays[f"bank/{key}"] = np.asarray(a)
    header = {
        "kind": "trainer",
        "iteration": state.iteration,
        "rng": state.rng.bit_generator.state,
        "optimizer_steps": steps,
        "bank": state.bank.state_meta(),
        "experiment": cfgmod.to_dict(experiment),
    }
    return Blob(header, arrays)


def save(path, state: TrainerState, experiment: cfgmod.ExperimentConfig) -> Path:
    b = state_to_blob(state, experiment)
    return write_blob(path, b.header, b.arrays)


def load(path) -> tuple[TrainerState, cfgmod.ExperimentConfig]:
    """Rebuild the trainer state and experiment config stored at ``path``."""
    blob = read_blob(path)
    h, arrays = blob.header, blob.arrays
    if h.get("kind") != "trainer":
        raise CheckpointError(f"{path} holds a {h.get('kind')!r} blob, not a trainer state")
    exp = cfgmod.from_dict(h["experiment"])
    state = init_state(exp.train, exp.model, exp.weights)
    _fill(path, "param", {n: p.data for n, p in state.named_parameters()}, arrays)
    _fill(path, "buffer", dict(state.named_buffers()), arrays)
    for net, opt in state.optimizers.items():
        prefix = f"opt/{net}/"
        slots = {k[len(prefix):]: a for k, a in arrays.items() if k.startswith(prefix)}
        opt.load_state_arrays(slots, h["optimizer_steps"][net])
    bank_arrays = {k[5:]: a for k, a in arrays.items() if k.startswith("bank/")}
    state.bank = CenterBank.from_state(h["bank"], bank_arrays)
    state.rng.bit_generator.state = h["rng"]
    state.iteration = int(h["iteration"])
    return state, exp


def _fill(path, kind: str, targets: dict, arrays: dict):
    for name, dst in targets.items():
        key = f"{kind}/{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing {key}")
        src = arrays[key]
        if src.shape != dst.shape:
            raise CheckpointError(f"{path}: {key} has shape {src.shape}, model expects {dst.shape}")
        dst[...] = src


# ---------------------------------------------------------------------------
# reference classifier


def save_reference(path, ref) -> Path:
    arrays = {f"param/{n}": p.data for n, p in ref.model.named_parameters("C.")}
    arrays.update({f"buffer/{n}": b for n, b in ref.model.named_buffers("C.")})
    header = {"kind": "reference", "heldout_accuracy": ref.heldout_accuracy,
              "provenance": ref.provenance, "model": cfgmod.section_to_dict("model", ref.model.cfg)}
    return write_blob(path, header, arrays)


def load_reference(path) -> ReferenceClassifier:
    blob = read_blob(path)
    h = blob.header
    if h.get("kind") != "reference":
        raise CheckpointError(f"{path} holds a {h.get('kind')!r} blob, not a reference classifier")
    model = Classifier(cfgmod.section_from_dict("model", h["model"]), 0)
    _fill(path, "param", {n: p.data for n, p in model.named_parameters("C.")}, blob.arrays)
    _fill(path, "buffer", dict(model.named_buffers("C.")), blob.arrays)
    model.eval()
    return ReferenceClassifier(model, float(h["heldout_accuracy"]), h["provenance"])
