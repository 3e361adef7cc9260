"""Loss, optimizer, training loop, and evaluation.

The loss is the mean squared error between the one-hot label vector and the
time-averaged vote vector, with a 1/2 factor and averaged over the batch:

    loss = (1 / 2N) * sum_n || y_n - mean_t o_n ||^2

Training runs epochs of shuffled mini-batches of forward -> loss ->
backward -> Adam, with a per-epoch exponentially decayed learning rate
(lr(epoch) = eta * gamma^epoch), evaluates test top-1 accuracy every epoch
and keeps the best-accuracy parameter snapshot. All randomness (shuffling,
dropout) comes from streams derived from the config seed, so a rerun with
the same config reproduces the run record bitwise. Wall-clock timings are
therefore reported separately from the record.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ArchError, ConfigError, DivergenceError, ParameterError, ShapeError, StateError
from .events import (
    CorruptionSpec,
    EventStream,
    FrameSequence,
    add_poisson_noise,
    drop_events,
    drop_frames,
    slice_to_frames,
)
from .network import SpikingNetwork, build_network, parse_architecture
from .neuron import LifConfig
from .rng import Rng
from .tensor import Tensor, no_grad, tmean, tsum

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def one_hot(labels: Sequence[int], classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ParameterError(f"label index out of range for {classes} classes")
    out = np.zeros((len(labels), classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mse_vote_loss(o: Tensor, targets: np.ndarray) -> Tensor:
    """Half mean squared error of the time-averaged votes against one-hot
    targets [B, M]."""
    if o.ndim != 3:
        raise ShapeError(f"votes must be [B, M, T], got {o.shape}")
    b, m, _ = o.shape
    if targets.shape != (b, m):
        raise ShapeError(f"targets {targets.shape} incompatible with votes {o.shape}")
    diff = tmean(o, axis=2) - Tensor(targets.astype(o.data.dtype))
    return tsum(diff * diff) * (0.5 / b)


def lr_schedule(eta: float, gamma: float, epoch: int) -> float:
    """Exponential decay: eta * gamma^epoch."""
    return eta * gamma**epoch


class Adam:
    """Standard bias-corrected Adam over named parameter tensors."""

    def __init__(self, named_params, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.named_params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.named_params:
            if p.grad is None:
                raise StateError(f"adam: parameter {name} has no gradient")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# config


@dataclass
class DataConfig:
    delta_t_ms: float
    timesteps: int
    train_dir: Optional[str] = None
    test_dir: Optional[str] = None
    binarize: bool = False


@dataclass
class TrainConfig:
    arch: str
    variant: str
    epochs: int
    batch_size: int
    lr: float
    lr_decay: float
    seed: int
    lif: LifConfig
    data: DataConfig
    reduction: int = 4
    precision: str = "f32"
    input_height: int = 128
    input_width: int = 128
    master_seed: Optional[int] = None

    def network_config(self) -> dict:
        return {
            "arch": self.arch,
            "variant": self.variant,
            "v_th": self.lif.v_th,
            "kappa": self.lif.kappa,
            "reduction": self.reduction,
            "timesteps": self.data.timesteps,
            "input_height": self.input_height,
            "input_width": self.input_width,
            "precision": self.precision,
        }

    def to_dict(self) -> dict:
        out = {
            "arch": self.arch,
            "variant": self.variant,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "lr_decay": self.lr_decay,
            "seed": self.seed,
            "reduction": self.reduction,
            "precision": self.precision,
            "input_height": self.input_height,
            "input_width": self.input_width,
            "lif": {"v_th": self.lif.v_th, "kappa": self.lif.kappa},
            "data": {
                "delta_t_ms": self.data.delta_t_ms,
                "timesteps": self.data.timesteps,
                "train_dir": self.data.train_dir,
                "test_dir": self.data.test_dir,
                "binarize": self.data.binarize,
            },
        }
        if self.master_seed is not None:
            out["master_seed"] = self.master_seed
        return out


def _require(mapping: dict, key: str, kind, path: str):
    if key not in mapping:
        raise ConfigError("missing required field", field=f"{path}{key}")
    value = mapping[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"expected {kind.__name__}, got {type(value).__name__}",
                          field=f"{path}{key}")
    return value


def config_from_dict(doc: dict) -> TrainConfig:
    """Validate a JSON config document; errors name the dotted field path."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    lif_doc = _require(doc, "lif", dict, "")
    data_doc = _require(doc, "data", dict, "")
    variant = _require(doc, "variant", str, "")
    if variant not in ("bl", "stfa", "ctfa", "sctfa"):
        raise ConfigError(f"unknown variant {variant!r}", field="variant")
    precision = doc.get("precision", "f32")
    if precision not in ("f32", "f64"):
        raise ConfigError(f"precision must be f32 or f64, got {precision!r}", field="precision")
    epochs = _require(doc, "epochs", int, "")
    if epochs < 1:
        raise ConfigError("epochs must be >= 1", field="epochs")
    batch_size = _require(doc, "batch_size", int, "")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1", field="batch_size")
    lr = _require(doc, "lr", float, "")
    if lr <= 0:
        raise ConfigError("lr must be positive", field="lr")
    lr_decay = _require(doc, "lr_decay", float, "")
    if not 0.0 < lr_decay <= 1.0:
        raise ConfigError("lr_decay must be in (0, 1]", field="lr_decay")
    try:
        lif = LifConfig(
            v_th=_require(lif_doc, "v_th", float, "lif."),
            kappa=_require(lif_doc, "kappa", float, "lif."),
        )
    except ParameterError as exc:
        raise ConfigError(str(exc), field="lif")
    data = DataConfig(
        delta_t_ms=_require(data_doc, "delta_t_ms", float, "data."),
        timesteps=_require(data_doc, "timesteps", int, "data."),
        train_dir=data_doc.get("train_dir"),
        test_dir=data_doc.get("test_dir"),
        binarize=bool(data_doc.get("binarize", False)),
    )
    if data.delta_t_ms <= 0:
        raise ConfigError("delta_t_ms must be positive", field="data.delta_t_ms")
    if data.timesteps < 1:
        raise ConfigError("timesteps must be >= 1", field="data.timesteps")
    cfg = TrainConfig(
        arch=_require(doc, "arch", str, ""),
        variant=variant,
        epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        lr_decay=lr_decay,
        seed=_require(doc, "seed", int, ""),
        lif=lif,
        data=data,
        reduction=int(doc.get("reduction", 4)),
        precision=precision,
        input_height=int(doc.get("input_height", 128)),
        input_width=int(doc.get("input_width", 128)),
        master_seed=doc.get("master_seed"),
    )
    # Surface architecture problems at config time.
    try:
        parse_architecture(
            cfg.arch,
            input_shape=(2, cfg.input_height, cfg.input_width),
            variant=cfg.variant,
            lif=cfg.lif,
            reduction=cfg.reduction,
            timesteps=cfg.data.timesteps,
        )
    except ArchError as exc:
        raise ConfigError(str(exc), field="arch")
    return cfg


# ---------------------------------------------------------------------------
# datasets


@dataclass
class LabeledFrames:
    """A dataset materialized as arrays: frames [N, T, 2, H, W], labels [N]."""

    frames: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def frames_from_streams(
    streams: Sequence[EventStream],
    delta_t_ms: float,
    timesteps: int,
    binarize: bool = False,
    dtype=np.float32,
) -> LabeledFrames:
    seqs = [slice_to_frames(s, delta_t_ms, timesteps) for s in streams]
    return frames_from_sequences(seqs, binarize=binarize, dtype=dtype)


def frames_from_sequences(
    seqs: Sequence[FrameSequence], binarize: bool = False, dtype=np.float32
) -> LabeledFrames:
    if any(seq.label is None for seq in seqs):
        raise ParameterError("all sequences must be labeled")
    if binarize:
        seqs = [seq.binarize() for seq in seqs]
    frames = np.stack([seq.frames for seq in seqs]).astype(dtype)
    labels = np.array([seq.label for seq in seqs], dtype=np.int64)
    return LabeledFrames(frames, labels)


# ---------------------------------------------------------------------------
# run records


@dataclass
class EpochStats:
    epoch: int
    loss: float
    test_acc: float
    lr: float


@dataclass
class RunRecord:
    """Everything a run produced. ``to_json`` covers the reproducible part;
    wall-clock timing is volatile and serialized separately."""

    config: dict
    per_epoch: List[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_acc: float = 0.0
    confusion: Optional[List[List[int]]] = None
    timing_ms: float = 0.0

    def to_json(self) -> str:
        doc = {
            "config": self.config,
            "per_epoch": [
                {"epoch": e.epoch, "loss": e.loss, "test_acc": e.test_acc, "lr": e.lr}
                for e in self.per_epoch
            ],
            "best_epoch": self.best_epoch,
            "best_acc": self.best_acc,
            "confusion": self.confusion,
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    def timing_json(self) -> str:
        # volatile sidecar: wall clock plus the threading context the kernels
        # ran under (bitwise reproducibility is per fixed thread count)
        env = {
            k: os.environ[k]
            for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
            if k in os.environ
        }
        return json.dumps(
            {"timing_ms": self.timing_ms, "cpu_count": os.cpu_count(), "blas_env": env},
            sort_keys=True,
        )


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray, classes: int) -> np.ndarray:
    mat = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(mat, (labels, predictions), 1)
    return mat


# ---------------------------------------------------------------------------
# training and evaluation


def _batches(n: int, batch_size: int, order: np.ndarray):
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def evaluate_frames(
    net: SpikingNetwork,
    dataset: LabeledFrames,
    batch_size: int = 32,
    record_hidden: bool = False,
) -> Tuple[float, np.ndarray, Optional[np.ndarray]]:
    """Top-1 accuracy and confusion matrix; optionally also the last conv
    layer's membrane trajectories concatenated over the dataset."""
    classes = net.spec.classes
    preds = np.empty(len(dataset), dtype=np.int64)
    traces = [] if record_hidden else None
    with no_grad():
        for idx in _batches(len(dataset), batch_size, np.arange(len(dataset))):
            vote = net.forward(dataset.frames[idx], training=False, record_hidden=record_hidden)
            preds[idx] = vote.predictions()
            if record_hidden:
                traces.append(net.hidden_activation())
    acc = float(np.mean(preds == dataset.labels)) if len(dataset) else 0.0
    conf = confusion_matrix(preds, dataset.labels, classes)
    hidden = np.concatenate(traces) if record_hidden else None
    return acc, conf, hidden


def train(
    cfg: TrainConfig,
    train_set: LabeledFrames,
    test_set: LabeledFrames,
    eval_batch_size: int = 64,
) -> Tuple[RunRecord, SpikingNetwork]:
    """Run the full loop and return (record, network at best-accuracy state).

    Raises DivergenceError (with the partial record attached) if the loss
    goes non-finite.
    """
    if not len(train_set) or not len(test_set):
        raise ParameterError("datasets must be non-empty")
    if cfg.epochs < 1:
        raise ParameterError("epochs must be >= 1")
    net = build_network(cfg.network_config(), seed=cfg.seed)
    classes = net.spec.classes
    if int(train_set.labels.max()) >= classes or int(test_set.labels.max()) >= classes:
        raise ParameterError(f"dataset labels exceed {classes} classes")

    adam = Adam(net.named_parameters())
    run_rng = Rng(cfg.seed).split("train")
    record = RunRecord(config=cfg.to_dict())
    best_state: Optional[List[np.ndarray]] = None
    best_buffers: Optional[List[np.ndarray]] = None
    start = time.perf_counter()

    n = len(train_set)
    targets_all = one_hot(train_set.labels, classes, dtype=net.dtype)
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg.lr, cfg.lr_decay, epoch)
        order = run_rng.split("shuffle", epoch).permutation(n)
        losses = []
        for step, idx in enumerate(_batches(n, cfg.batch_size, order)):
            vote = net.forward(
                train_set.frames[idx],
                training=True,
                rng=run_rng.split("dropout", epoch, step),
            )
            loss = mse_vote_loss(vote.o, targets_all[idx])
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                record.timing_ms = (time.perf_counter() - start) * 1e3
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}", record=record
                )
            adam.zero_grad()
            loss.backward()
            adam.step(lr)
            losses.append(loss_val)
        acc, conf, _ = evaluate_frames(net, test_set, batch_size=eval_batch_size)
        record.per_epoch.append(
            EpochStats(epoch=epoch, loss=float(np.mean(losses)), test_acc=acc, lr=lr)
        )
        if acc > record.best_acc or best_state is None:
            record.best_acc = acc
            record.best_epoch = epoch
            record.confusion = conf.tolist()
            best_state = [p.data.copy() for p in net.parameters()]
            best_buffers = [arr.copy() for _, arr in net.named_buffers()]

    for p, saved in zip(net.parameters(), best_state):
        p.data[...] = saved
    for (_, arr), saved in zip(net.named_buffers(), best_buffers):
        arr[...] = saved
    record.timing_ms = (time.perf_counter() - start) * 1e3
    return record, net


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    activation_distance: Optional[float] = None


def _corrupt_sequences(
    streams: Sequence[EventStream],
    delta_t_ms: float,
    timesteps: int,
    corruption: CorruptionSpec,
) -> List[FrameSequence]:
    rng = Rng(corruption.seed).split("corrupt", corruption.kind)
    out = []
    for i, stream in enumerate(streams):
        srng = rng.split(i)
        if corruption.kind == "event_loss":
            seq = slice_to_frames(
                drop_events(stream, corruption.parameter, srng), delta_t_ms, timesteps
            )
        elif corruption.kind == "poisson_noise":
            seq = add_poisson_noise(
                slice_to_frames(stream, delta_t_ms, timesteps), corruption.parameter, srng
            )
        else:
            seq = drop_frames(
                slice_to_frames(stream, delta_t_ms, timesteps), corruption.parameter, srng
            )
        out.append(seq)
    return out


def evaluate(
    net: SpikingNetwork,
    streams: Sequence[EventStream],
    delta_t_ms: float,
    timesteps: int,
    corruption: Optional[CorruptionSpec] = None,
    binarize: bool = False,
    batch_size: int = 32,
) -> EvalResult:
    """Evaluate on event streams, optionally corrupted.

    With a corruption spec the result also carries the mean Euclidean
    distance between the clean and corrupted membrane trajectories of the
    last convolutional layer (mean over samples and timesteps of the
    per-step L2 norm over all neurons).
    """
    clean = frames_from_streams(
        streams, delta_t_ms, timesteps, binarize=binarize, dtype=net.dtype
    )
    if corruption is None:
        acc, conf, _ = evaluate_frames(net, clean, batch_size=batch_size)
        return EvalResult(accuracy=acc, confusion=conf)

    seqs = _corrupt_sequences(streams, delta_t_ms, timesteps, corruption)
    corrupted = frames_from_sequences(seqs, binarize=binarize, dtype=net.dtype)
    acc, conf, hidden_c = evaluate_frames(
        net, corrupted, batch_size=batch_size, record_hidden=True
    )
    _, _, hidden_0 = evaluate_frames(net, clean, batch_size=batch_size, record_hidden=True)
    diff = (hidden_0 - hidden_c).reshape(hidden_0.shape[0], hidden_0.shape[1], -1)
    distance = float(np.mean(np.linalg.norm(diff, axis=2)))
    return EvalResult(accuracy=acc, confusion=conf, activation_distance=distance)
