"""Adam + plateau learning-rate schedule, the epoch loop, and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .neuralfield import Architecture, NeuralField, ShapeMismatch
from .rng import make_rng

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


class VersionMismatch(ValueError):
    pass


class CorruptBlob(ValueError):
    pass


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 50
    batches_per_epoch: int = 1000
    initial_lr: float = 1e-4
    min_lr: float = 1e-8
    plateau_patience: int = 2
    plateau_factor: float = 0.1
    plateau_threshold: float = 1e-4

    def __post_init__(self):
        if not 0 < self.min_lr <= self.initial_lr:
            raise ValueError("need 0 < min_lr <= initial_lr")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("need 0 < plateau_factor < 1")
        if self.epochs < 0 or self.batches_per_epoch < 1:
            raise ValueError("bad epoch/batch counts")


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, state)``; the
    state is updated in place."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or state.first_moment.shape != params.shape:
        raise ShapeMismatch(f"grads {grads.shape} vs params {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("non-finite entries in gradient")
    b1, b2 = state.beta1, state.beta2
    state.step_count += 1
    t = state.step_count
    state.first_moment *= b1
    state.first_moment += (1 - b1) * grads
    state.second_moment *= b2
    state.second_moment += (1 - b2) * grads * grads
    m_hat = state.first_moment / (1 - b1**t)
    v_hat = state.second_moment / (1 - b2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps), state


def _improves(loss, best, threshold):
    return loss < best * (1 - threshold) if best > 0 else loss < best - abs(best) * threshold


def plateau_update(history, lr: float, patience: int = 2, factor: float = 0.1,
                   min_lr: float = 1e-8, threshold: float = 1e-4) -> float:
    """Learning rate after the last entry of ``history`` (epoch losses),
    following reduce-on-plateau semantics: the bad-epoch counter resets on
    every reduction, so a reduction happens whenever the number of epochs since
    the last improvement is a positive multiple of ``patience + 1``."""
    best = np.inf
    since = 0
    for loss in history:
        if _improves(loss, best, threshold):
            best = loss
            since = 0
        else:
            since += 1
    if since > 0 and since % (patience + 1) == 0:
        return max(lr * factor, min_lr)
    return lr


class PlateauScheduler:
    def __init__(self, schedule: TrainSchedule):
        self.schedule = schedule
        self.lr = schedule.initial_lr
        self.history: list[float] = []

    def step(self, epoch_loss: float) -> float:
        s = self.schedule
        self.history.append(float(epoch_loss))
        self.lr = plateau_update(self.history, self.lr, s.plateau_patience,
                                 s.plateau_factor, s.min_lr, s.plateau_threshold)
        return self.lr


LossFn = Callable[[NeuralField, np.random.Generator], tuple[float, np.ndarray]]


@dataclass
class TrainResult:
    field: NeuralField
    epoch_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)


def train(field: NeuralField, loss: LossFn, schedule: TrainSchedule, seed: int,
          stream: int = 0, on_epoch: Callable | None = None) -> TrainResult:
    """Minimise ``loss`` from ``field``'s parameters.

    ``loss(field, rng)`` draws its own batch from ``rng`` and returns
    ``(value, parameter_gradient)``. Batch ``(epoch, b)`` always receives the
    same stream, so runs are reproducible given ``seed``.
    """
    params = field.params.copy()
    state = AdamState.zeros(len(params))
    sched = PlateauScheduler(schedule)
    result = TrainResult(field)
    for epoch in range(schedule.epochs):
        total = 0.0
        for b in range(schedule.batches_per_epoch):
            rng = make_rng(seed, stream, epoch, b)
            cur = field.with_params(params)
            value, grad = loss(cur, rng)
            if not np.isfinite(value):
                raise NonFiniteGradient(f"non-finite loss at epoch {epoch}, batch {b}")
            try:
                params, state = adam_step(params, grad, state, sched.lr)
            except NonFiniteGradient as exc:
                raise NonFiniteGradient(f"{exc} at epoch {epoch}, batch {b}") from None
            total += value
        mean = total / schedule.batches_per_epoch
        result.epoch_losses.append(mean)
        result.learning_rates.append(sched.lr)
        sched.step(mean)
        log.info("epoch %d loss %.6g lr %.1e", epoch, mean, sched.lr)
        if on_epoch is not None:
            on_epoch(epoch, field.with_params(params), mean)
    result.field = field.with_params(params)
    return result


# --- checkpoints -------------------------------------------------------------
MAGIC = b"HSDFCKPT"
FORMAT_VERSION = 1


def _write_container(path, magic, header: dict, blob: bytes):
    header = dict(header, blob_sha256=hashlib.sha256(blob).hexdigest(), blob_bytes=len(blob))
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(blob)


def _read_container(path, magic):
    data = Path(path).read_bytes()
    if len(data) < len(magic) + 12 or not data.startswith(magic):
        raise CorruptBlob(f"{path}: bad magic or truncated header")
    version, hlen = struct.unpack_from("<IQ", data, len(magic))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = len(magic) + 12
    try:
        header = json.loads(data[start:start + hlen])
    except (ValueError, UnicodeDecodeError):
        raise CorruptBlob(f"{path}: unreadable header") from None
    blob = data[start + hlen:]
    if len(blob) != header.get("blob_bytes") or hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise CorruptBlob(f"{path}: payload checksum mismatch")
    return header, blob


def save_checkpoint(path, fields: NeuralField | Mapping[str, NeuralField], metadata: dict | None = None):
    """Write one or several named fields plus JSON metadata.

    Layout: 8-byte magic, ``<u32 version, u64 header_len>``, JSON header, then
    every field's parameters as little-endian float64 in header order.
    """
    if isinstance(fields, NeuralField):
        fields = {"field": fields}
    entries = []
    chunks = []
    for name, f in fields.items():
        entries.append({"name": name, "architecture": f.architecture.to_dict(),
                        "seed": f.seed, "n_params": int(f.architecture.n_params)})
        chunks.append(f.params.astype("<f8").tobytes())
    _write_container(path, MAGIC, {"fields": entries, "metadata": metadata or {}}, b"".join(chunks))
    return Path(path)


def load_checkpoint(path, expected: Architecture | Mapping[str, Architecture] | None = None):
    """Returns ``(fields, metadata)`` where ``fields`` maps names to fields.

    ``expected`` pins the architecture(s); a mismatch raises VersionMismatch.
    """
    header, blob = _read_container(path, MAGIC)
    out = {}
    off = 0
    for e in header["fields"]:
        arch = Architecture(**e["architecture"])
        n = e["n_params"]
        if n != arch.n_params:
            raise CorruptBlob(f"{path}: parameter count does not match architecture")
        params = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        out[e["name"]] = NeuralField(arch, params, e["seed"])
    if off != len(blob):
        raise CorruptBlob(f"{path}: trailing bytes in payload")
    if expected is not None:
        if isinstance(expected, Architecture):
            expected = {k: expected for k in out}
        for k, arch in expected.items():
            if k not in out or out[k].architecture != arch:
                got = out[k].architecture if k in out else None
                raise VersionMismatch(f"{path}: field {k!r} has architecture {got}, expected {arch}")
    return out, header["metadata"]


def schedule_dict(s: TrainSchedule) -> dict:
    return asdict(s)
