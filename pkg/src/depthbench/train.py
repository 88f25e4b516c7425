"""Optimizers, training loop, evaluation and checkpoint persistence."""
from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import mono, stereo
from .data import collate
from .nn import Module
from .tensor import NonFiniteError, Tensor, backward, no_grad, zero_grads

CHECKPOINT_MAGIC = b"DPBENCH1"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    max_steps: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0 or self.batch_size < 1:
            raise ValueError("learning rate must be non-negative and batch size positive")


def init_optimizer_state(params: Sequence[Tensor], config: OptimizerConfig) -> dict:
    if config.kind == "sgd":
        return {"t": 0}
    return {"t": 0, "m": [np.zeros_like(p.data) for p in params], "v": [np.zeros_like(p.data) for p in params]}


def optimizer_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: dict,
                   config: OptimizerConfig) -> None:
    """In-place update of ``params``; ``None`` grads count as zero."""
    state["t"] += 1
    t = state["t"]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if config.kind == "sgd":
            p.data -= config.lr * g
            continue
        m, v = state["m"][i], state["v"][i]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        m_hat = m / (1.0 - config.beta1 ** t)
        v_hat = v / (1.0 - config.beta2 ** t)
        p.data -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


class MonoObjective:
    def __init__(self, weights: Optional[mono.LossWeights] = None):
        self.weights = weights or mono.LossWeights()

    def __call__(self, model, batch: mono.MonoSample) -> Tuple[Tensor, Dict[str, float]]:
        pred = model(Tensor(batch.rgb))
        loss = mono.mono_total_loss(pred, batch, self.weights)
        return loss, {"loss": loss.item()}


class StereoObjective:
    def __init__(self, up_to_stage: int = 4):
        self.up_to_stage = up_to_stage

    def __call__(self, model, batch: stereo.StereoSample) -> Tuple[Tensor, Dict[str, float]]:
        cfg = model.config
        outs = model(Tensor(batch.left), Tensor(batch.right), self.up_to_stage)
        mask = stereo_mask(batch, cfg.max_disparity)
        w = cfg.stage_loss_weights[: len(outs)]
        loss = stereo.stereo_total_loss(outs, batch.disparity, mask, w, cfg.smooth_l1_beta)
        parts = {"loss": loss.item()}
        with no_grad():
            for k, o in enumerate(outs, 1):
                parts[f"smooth_l1_stage{k}"] = stereo.smooth_l1_loss(
                    o.detach(), batch.disparity, mask, cfg.smooth_l1_beta).item()
        return loss, parts


def stereo_mask(batch: stereo.StereoSample, max_disparity: float) -> np.ndarray:
    return ((batch.mask > 0) & (batch.disparity < max_disparity)).astype(np.float64)


def objective_for(model) -> Callable:
    return MonoObjective() if model.task == "mono" else StereoObjective()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainHistory:
    step_loss: List[float] = field(default_factory=list)
    step_parts: List[Dict[str, float]] = field(default_factory=list)
    epoch_val: List[Dict[str, float]] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)

    def deterministic_view(self) -> dict:
        """Everything except wall-clock timings."""
        return {"step_loss": self.step_loss, "step_parts": self.step_parts, "epoch_val": self.epoch_val}


class Trainer:
    """Step-indexed training: batch k is fixed by (seed, k), so resuming at any
    step reproduces an uninterrupted run."""

    def __init__(self, model: Module, samples: Sequence, config: OptimizerConfig,
                 objective: Optional[Callable] = None, val_samples: Optional[Sequence] = None):
        if not samples:
            raise ValueError("training set is empty")
        self.model = model
        self.samples = list(samples)
        self.config = config
        self.objective = objective or objective_for(model)
        self.val_samples = list(val_samples) if val_samples else None
        self.params = model.store.trainable()
        self.opt_state = init_optimizer_state(self.params, config)
        self.step = 0
        self.history = TrainHistory()
        self._epoch_start = time.perf_counter()

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.samples) // self.config.batch_size)

    def batch_indices(self, step: int) -> np.ndarray:
        n = len(self.samples)
        epoch, pos = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([self.config.seed, epoch]).permutation(n)
        b = min(self.config.batch_size, n)
        return perm[pos * b:(pos + 1) * b]

    def train_step(self) -> float:
        batch = collate([self.samples[i] for i in self.batch_indices(self.step)])
        self.model.train()
        zero_grads(self.params)
        try:
            loss, parts = self.objective(self.model, batch)
        except NonFiniteError as e:
            raise TrainingDiverged(f"non-finite values at step {self.step}") from e
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {self.step}")
        backward(loss)
        optimizer_step(self.params, [p.grad for p in self.params], self.opt_state, self.config)
        self.step += 1
        self.history.step_loss.append(value)
        self.history.step_parts.append(parts)
        if self.step % self.steps_per_epoch == 0:
            self._end_epoch()
        return value

    def _end_epoch(self) -> None:
        self.history.epoch_seconds.append(time.perf_counter() - self._epoch_start)
        if self.val_samples:
            self.history.epoch_val.append(validation_loss(self.model, self.val_samples, self.objective))
        self._epoch_start = time.perf_counter()

    def train(self, steps: Optional[int] = None, callback: Optional[Callable[[int, float], None]] = None) -> TrainHistory:
        target = self.config.max_steps if steps is None else self.step + steps
        while self.step < target:
            value = self.train_step()
            if callback:
                callback(self.step, value)
        return self.history

    # -- checkpoints ------------------------------------------------------
    def save_checkpoint(self) -> bytes:
        return save_checkpoint(self.model, self.opt_state, self.config, self.step)

    @classmethod
    def from_checkpoint(cls, payload: bytes, samples: Sequence, objective=None, val_samples=None) -> "Trainer":
        ckpt = load_checkpoint(payload)
        model = model_from_config(ckpt.task, ckpt.model_config)
        model.store.load_state(ckpt.params)
        trainer = cls(model, samples, OptimizerConfig(**ckpt.optimizer_config), objective, val_samples)
        trainer.opt_state = ckpt.optimizer_state
        trainer.step = ckpt.step
        return trainer


def train_model(model: Module, samples: Sequence, config: OptimizerConfig, objective=None,
                val_samples=None) -> TrainHistory:
    return Trainer(model, samples, config, objective, val_samples).train()


def validation_loss(model, samples: Sequence, objective, batch_size: int = 8) -> Dict[str, float]:
    was = model.training
    model.eval()
    totals: Dict[str, float] = {}
    try:
        with no_grad():
            for i in range(0, len(samples), batch_size):
                chunk = samples[i:i + batch_size]
                _, parts = objective(model, collate(chunk))
                for k, v in parts.items():
                    totals[k] = totals.get(k, 0.0) + v * len(chunk)
    finally:
        model.train(was)
    return {k: v / len(samples) for k, v in totals.items()}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

AGGREGATES = ("mean", "median", "q25", "q75", "min", "max")


def aggregate(values: Sequence[float]) -> Dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(v.mean()),
        "median": float(np.median(v)),
        "q25": float(np.percentile(v, 25)),
        "q75": float(np.percentile(v, 75)),
        "min": float(v.min()),
        "max": float(v.max()),
    }


@dataclass
class MetricsReport:
    task: str
    per_sample: Dict[str, List[float]]
    aggregates: Dict[str, Dict[str, float]] = field(default_factory=dict)
    experiment_id: str = ""
    parameters: Dict[str, int] = field(default_factory=dict)
    macs_per_stage: Dict[str, int] = field(default_factory=dict)
    history_ref: str = ""
    model_config: Dict[str, object] = field(default_factory=dict)
    variant: str = ""
    reference_values: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = {k: aggregate(v) for k, v in self.per_sample.items()}


def _predict(model, batch):
    if model.task == "mono":
        return model(Tensor(batch.rgb))
    return model(Tensor(batch.left), Tensor(batch.right))


def evaluate_model(model, samples: Sequence, metrics: Optional[Sequence[str]] = None,
                   batch_size: int = 8, predict: Optional[Callable] = None) -> MetricsReport:
    """Eval-mode per-sample metrics plus box-plot aggregates."""
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    predict = predict or _predict
    per: Dict[str, List[float]] = {}
    was = model.training
    model.eval()
    try:
        with no_grad():
            for i in range(0, len(samples), batch_size):
                batch = collate(samples[i:i + batch_size])
                out = predict(model, batch)
                for name, vals in _sample_metrics(model.task, out, batch, model).items():
                    per.setdefault(name, []).extend(float(v) for v in vals)
    finally:
        model.train(was)
    if metrics is not None:
        per = {k: v for k, v in per.items() if k in metrics}
    return MetricsReport(task=model.task, per_sample=per)


def _sample_metrics(task: str, out, batch, model) -> Dict[str, np.ndarray]:
    if task == "mono":
        pred = out.data if isinstance(out, Tensor) else np.asarray(out)
        l1 = [float(np.abs(pred[j] - batch.depth[j])[batch.mask[j] > 0].mean()) for j in range(len(pred))]
        return {"ssim": mono.ssim_per_sample(pred, batch.depth), "l1": np.array(l1)}
    cfg = model.config
    mask = stereo_mask(batch, cfg.max_disparity)
    res = {}
    for k, o in enumerate(out, 1):
        d = o.data if isinstance(o, Tensor) else np.asarray(o)
        res[f"three_pixel_error_stage{k}"] = np.array(
            [stereo.three_pixel_error(d[j], batch.disparity[j], mask[j]) for j in range(len(d))])
        res[f"smooth_l1_stage{k}"] = np.array(
            [stereo.smooth_l1_loss(Tensor(d[j]), batch.disparity[j], mask[j], cfg.smooth_l1_beta).item()
             for j in range(len(d))])
    return res


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    version: int
    task: str
    model_config: dict
    optimizer_config: dict
    step: int
    rng: dict
    params: Dict[str, np.ndarray]
    optimizer_state: dict


def model_from_config(task: str, config: dict):
    if task == "mono":
        return mono.build_mono_model(mono.MonoModelConfig(**config))
    if task == "stereo":
        return stereo.build_anynet(stereo.AnyNetConfig(**config))
    raise CheckpointError(f"unknown task {task!r}")


def save_checkpoint(model, opt_state: dict, config: OptimizerConfig, step: int) -> bytes:
    entries = list(model.store)
    slots = [k for k in ("m", "v") if k in opt_state]
    header = {
        "task": model.task,
        "model_config": asdict(model.config),
        "optimizer_config": asdict(config),
        "step": int(step),
        "rng": {"kind": "per-epoch-permutation", "seed": config.seed, "step": int(step)},
        "params": [{"name": e.name, "shape": list(e.tensor.shape), "trainable": e.trainable} for e in entries],
        "optimizer": {"t": int(opt_state["t"]), "slots": slots},
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<Q", len(text)), text]
    chunks += [np.ascontiguousarray(e.tensor.data, dtype="<f8").tobytes() for e in entries]
    for slot in slots:
        chunks += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in opt_state[slot]]
    return b"".join(chunks)


def load_checkpoint(payload: bytes) -> Checkpoint:
    if payload[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if len(payload) < 20:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack("<I", payload[8:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", payload[12:20])
    pos = 20 + hlen
    if len(payload) < pos:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(payload[20:pos].decode("utf-8"))

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape)) * 8
        if len(payload) < pos + n:
            raise CheckpointError("truncated checkpoint payload")
        arr = np.frombuffer(payload[pos:pos + n], dtype="<f8").reshape(shape).astype(np.float64)
        pos += n
        return arr

    params = {p["name"]: take(tuple(p["shape"])) for p in header["params"]}
    opt = {"t": header["optimizer"]["t"]}
    trainable_shapes = [tuple(p["shape"]) for p in header["params"] if p["trainable"]]
    for slot in header["optimizer"]["slots"]:
        opt[slot] = [take(s) for s in trainable_shapes]
    if pos != len(payload):
        raise CheckpointError(f"{len(payload) - pos} trailing bytes in checkpoint")
    return Checkpoint(version, header["task"], header["model_config"], header["optimizer_config"],
                      header["step"], header["rng"], params, opt)
