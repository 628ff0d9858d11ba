"""
SGD-with-momentum training over the total loss, and checkpoint persistence.

Checkpoint layout (all integers little-endian u32)::

    b"WSOL" | version | tensor count
    per tensor: name length | name (utf-8) | rank | dims... | f64 data (little-endian)
    metadata length | metadata (orjson, sorted keys)

Momentum buffers are stored as tensors named ``<param>@velocity``.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson
from loguru import logger

from . import autodiff as ad
from .autodiff import Tensor
from .config import LossConfig, LossTerm, ModelConfig, TrainConfig, validated
from .data import Sample, stack
from .exceptions import CheckpointError, ContractError, DimensionError, NumericalInstabilityError, WsolException
from .instrumentation import PerformanceTracker, memory_snapshot, record_epoch
from .log import log_event
from .losses import total_loss
from .model import ClassSelect, WsolNet, forward, init

MAGIC = b"WSOL"
VERSION = 1
VELOCITY_SUFFIX = "@velocity"

Arrays = Dict[str, np.ndarray]


def sgd_momentum_step(
    params: Arrays,
    grads: Arrays,
    velocity: Arrays,
    lr: float,
    mu: float,
) -> Tuple[Arrays, Arrays]:
    """v <- mu * v + g; p <- p - lr * v. Missing velocity entries start at zero."""
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads[name]
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        if g.shape != p.shape or v.shape != p.shape:
            raise DimensionError("sgd_momentum_step", f"shape mismatch for {name}", (p.shape, g.shape, v.shape))
        v = mu * v + g
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, new_velocity


@dataclass
class EpochLog:
    """Epoch-mean loss terms (sample-weighted over batches) and bookkeeping."""
    epoch: int
    terms: Dict[str, float]
    psd_fg: float
    psd_bg: float
    total: float
    skipped: int
    train_accuracy: float
    learning_rate: float
    seconds: float

    def to_line(self) -> str:
        values = " ".join(f"{name}={value:.6f}" for name, value in self.terms.items())
        return (
            f"epoch={self.epoch} {values} total={self.total:.6f} "
            f"psd_fg={self.psd_fg:.6f} psd_bg={self.psd_bg:.6f} skipped={self.skipped} "
            f"train_acc={self.train_accuracy:.4f} lr={self.learning_rate:g} seconds={self.seconds:.2f}"
        )


@dataclass
class TrainResult:
    net: WsolNet
    log: List[EpochLog]
    velocity: Arrays
    epoch: int


def _check_finite(values: Dict[str, float], epoch: int) -> None:
    for term, value in values.items():
        if not np.isfinite(value):
            raise NumericalInstabilityError(term, epoch, value)


def _epoch_order(config: TrainConfig, epoch: int, count: int) -> np.ndarray:
    # one generator per epoch so a resumed run shuffles like an uninterrupted one
    if not config.shuffle:
        return np.arange(count)
    return np.random.default_rng([config.seed, epoch]).permutation(count)


def train(
    net: WsolNet,
    samples: Sequence[Sample],
    train_config: TrainConfig,
    loss_config: LossConfig,
    velocity: Optional[Arrays] = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Train up to ``train_config.epochs`` total epochs, starting after ``start_epoch``."""
    if not samples:
        raise ContractError("train", "dataset is empty")
    velocity = dict(velocity or {})
    history: List[EpochLog] = []
    names = [name for name, _ in net.named_parameters()]

    for epoch in range(start_epoch, train_config.epochs):
        tracker = PerformanceTracker("train_epoch")
        lr = train_config.learning_rate_at(epoch)
        order = _epoch_order(train_config, epoch, len(samples))
        sums = {t.value: 0.0 for t in LossTerm}
        psd_fg = psd_bg = total = 0.0
        skipped = correct = 0

        for start in range(0, len(order), train_config.batch_size):
            batch = [samples[i] for i in order[start:start + train_config.batch_size]]
            images, labels = stack(batch)
            params = net.parameters
            with ad.Tape() as tape:
                bundle = forward(net, Tensor(images), ClassSelect.GROUND_TRUTH, labels)
                breakdown = total_loss(bundle, labels, net, loss_config)
            _check_finite({**breakdown.terms(), "total": breakdown.total}, epoch + 1)
            grads = tape.backward(breakdown.total_tensor)

            new_params, velocity = sgd_momentum_step(
                net.arrays(),
                {name: grads[params[name]] for name in names},
                velocity,
                lr,
                train_config.momentum,
            )
            net.load_arrays(new_params)

            n = len(batch)
            for term, value in breakdown.terms().items():
                sums[term] += value * n
            psd_fg += breakdown.psd_fg * n
            psd_bg += breakdown.psd_bg * n
            total += breakdown.total * n
            skipped += int(np.count_nonzero(breakdown.bas_skipped))
            correct += int(np.count_nonzero(np.argmax(bundle.probs.data, axis=1) == labels))

        count = len(samples)
        tracker.add_metric("epoch", epoch + 1)
        seconds = tracker.finish()
        entry = EpochLog(
            epoch=epoch + 1,
            terms={term: value / count for term, value in sums.items()},
            psd_fg=psd_fg / count,
            psd_bg=psd_bg / count,
            total=total / count,
            skipped=skipped,
            train_accuracy=correct / count,
            learning_rate=lr,
            seconds=seconds,
        )
        history.append(entry)
        record_epoch(seconds, entry.terms, skipped, count)
        log_event(
            "info",
            "Epoch finished",
            epoch=entry.epoch,
            total=round(entry.total, 6),
            skipped=skipped,
            train_acc=round(entry.train_accuracy, 4),
            rss_mb=round(memory_snapshot().rss_mb, 1),
        )

    return TrainResult(net, history, velocity, max(start_epoch, train_config.epochs))


def write_log(history: Sequence[EpochLog], path: Path) -> None:
    Path(path).write_text("".join(entry.to_line() + "\n" for entry in history), encoding="ascii")


# Checkpoint
@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Arrays
    velocity: Arrays = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)
    version: int = VERSION

    @classmethod
    def from_result(
        cls,
        result: TrainResult,
        train_config: TrainConfig,
        loss_config: LossConfig,
    ) -> "Checkpoint":
        return cls(
            model_config=result.net.config,
            params=result.net.arrays(),
            velocity=result.velocity,
            epoch=result.epoch,
            seed=train_config.seed,
            metadata={"train": train_config.model_dump(), "loss": loss_config.summary()},
        )

    def to_net(self) -> WsolNet:
        net = init(self.model_config)
        net.load_arrays(self.params)
        return net


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _tensor_bytes(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    parts = [_u32(len(encoded)), encoded, _u32(array.ndim)]
    parts += [_u32(d) for d in array.shape]
    parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return b"".join(parts)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = list(ckpt.params.items())
    tensors += [(name + VELOCITY_SUFFIX, v) for name, v in ckpt.velocity.items()]
    metadata = orjson.dumps(
        {
            "model": ckpt.model_config.model_dump(),
            "epoch": ckpt.epoch,
            "seed": ckpt.seed,
            **ckpt.metadata,
        },
        option=orjson.OPT_SORT_KEYS,
    )
    parts = [MAGIC, _u32(ckpt.version), _u32(len(tensors))]
    parts += [_tensor_bytes(name, array) for name, array in tensors]
    parts += [_u32(len(metadata)), metadata]
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    path = Path(path)
    try:
        path.write_bytes(checkpoint_bytes(ckpt))
    except OSError as e:
        raise CheckpointError(str(path), "file", f"unwritable: {e}")
    logger.debug("Saved checkpoint", path=str(path), epoch=ckpt.epoch, tensors=len(ckpt.params))


class _Reader:
    def __init__(self, buffer: bytes, path: str):
        self.buffer = buffer
        self.path = path
        self.offset = 0

    def take(self, size: int, field_name: str) -> bytes:
        end = self.offset + size
        if end > len(self.buffer):
            raise CheckpointError(self.path, field_name, f"truncated: need {size} bytes at offset {self.offset}")
        chunk = self.buffer[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, field_name: str) -> int:
        return struct.unpack("<I", self.take(4, field_name))[0]


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as e:
        raise CheckpointError(str(path), "file", f"unreadable: {e}")
    reader = _Reader(buffer, str(path))

    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError(str(path), "magic", "not a wsol checkpoint")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointError(str(path), "version", f"unsupported version {version}, expected {VERSION}")

    params: Arrays = {}
    velocity: Arrays = {}
    for i in range(reader.u32("tensor_count")):
        field = f"tensor[{i}].name"
        try:
            name = reader.take(reader.u32(f"{field}_length"), field).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(str(path), field, "not valid UTF-8")
        rank = reader.u32(f"{name}.rank")
        shape = tuple(reader.u32(f"{name}.dims") for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(reader.take(8 * size, f"{name}.data"), dtype="<f8").astype(np.float64).reshape(shape)
        if name.endswith(VELOCITY_SUFFIX):
            velocity[name[: -len(VELOCITY_SUFFIX)]] = data
        else:
            params[name] = data

    raw = reader.take(reader.u32("metadata_length"), "metadata")
    if reader.offset != len(buffer):
        raise CheckpointError(str(path), "trailer", f"{len(buffer) - reader.offset} unexpected bytes")
    try:
        metadata = orjson.loads(raw)
        model_config = validated(ModelConfig, metadata.pop("model"), "model.")
        epoch = int(metadata.pop("epoch"))
        seed = int(metadata.pop("seed"))
    except (orjson.JSONDecodeError, KeyError, TypeError, ValueError, WsolException) as e:
        raise CheckpointError(str(path), "metadata", str(e))

    ckpt = Checkpoint(model_config, params, velocity, epoch, seed, metadata, version)
    try:
        ckpt.to_net()
    except DimensionError as e:
        raise CheckpointError(str(path), "params", e.message)
    return ckpt
