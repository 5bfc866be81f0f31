"""Reconstruction training loop: L1 loss, Adam, evaluation, checkpoints.

Training is single-threaded and fully deterministic under a fixed seed:
batches are drawn from one RNG stream, gradients are reduced in sample
order, and checkpoints capture parameters, optimizer moments, step count,
and the RNG state so resumed runs continue bitwise identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .data import DatasetManifest, SamplePair, random_crop
from .metrics import MetricReport, compute_report
from .network import NetworkParams, forward, save_checkpoint, load_checkpoint

__all__ = [
    "TrainConfig", "AdamState", "DivergenceError",
    "l1_loss", "adam_step", "train", "evaluate",
    "save_training_checkpoint", "load_training_checkpoint",
]


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 7e-5            # full-scale default; desk runs override
    batch_size: int = 12
    steps: int = 500
    seed: int = 0
    crop: int = 0               # 0 means full-frame samples
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_interval: int = 0      # 0 disables periodic eval
    checkpoint_interval: int = 0
    ssim_mode: str = "global"

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("lr must be >= 0, batch_size and steps positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; subgradient at ties is 0."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return T.reduce_mean(T.absolute(T.sub(pred, target)))


def adam_step(params: list[Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; missing gradients count as zero."""
    state.t += 1
    t = state.t
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient in Adam step")
        if g.shape != p.data.shape:
            raise ValueError("gradient/parameter shape mismatch")
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        m_hat = state.m[i] / (1 - beta1 ** t)
        v_hat = state.v[i] / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainResult:
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    eval_reports: list[tuple[int, MetricReport]] = field(default_factory=list)

    def loss_csv(self) -> str:
        lines = ["step,loss"]
        lines += [f"{step},{loss:.10g}" for step, loss in self.loss_curve]
        return "\n".join(lines) + "\n"


def _train_pairs(manifest: DatasetManifest) -> list[SamplePair]:
    from .data import iter_split

    pairs = [pair for _, pair in iter_split(manifest, "train")]
    if not pairs:
        raise ValueError("training split is empty")
    return pairs


def train(params: NetworkParams, manifest: DatasetManifest, config: TrainConfig,
          state: Optional[AdamState] = None, rng: Optional[T.RngStream] = None,
          start_step: int = 0,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Run config.steps optimization steps; returns loss curve and reports."""
    pairs = _train_pairs(manifest)
    tensors = params.tensors()
    if state is None:
        state = AdamState.for_params(tensors)
    if rng is None:
        rng = T.RngStream(config.seed)
    mult = params.config.size_multiple
    crop = config.crop or 0

    result = TrainResult()
    for step in range(start_step + 1, start_step + config.steps + 1):
        batch = []
        for _ in range(config.batch_size):
            pair = pairs[rng.integers(0, len(pairs))]
            if crop and crop < pair.clear.shape[0]:
                pair = random_crop(pair, crop, rng, multiple=mult)
            batch.append(pair)

        params.zero_grad()
        total = None
        for pair in batch:
            pred = forward(Tensor(pair.cloudy), params)
            loss = l1_loss(pred, Tensor(pair.clear))
            total = loss if total is None else T.add(total, loss)
        mean_loss = T.scalar_mul(total, 1.0 / len(batch))
        loss_value = mean_loss.item()
        if not math.isfinite(loss_value):
            raise DivergenceError(f"training loss diverged at step {step}")
        mean_loss.backward()
        adam_step(tensors, state, config.lr, config.beta1, config.beta2, config.eps)

        result.loss_curve.append((step, loss_value))
        if on_step is not None:
            on_step(step, loss_value)
        if config.eval_interval and step % config.eval_interval == 0:
            result.eval_reports.append(
                (step, evaluate(params, manifest, "train", ssim_mode=config.ssim_mode)))
    return result


def evaluate(params: NetworkParams, manifest: DatasetManifest, split: str,
             ssim_mode: str = "global") -> MetricReport:
    """Forward every sample in the split (no crop) and score against the
    clear ground truth."""
    from .data import iter_split

    triples = []
    with T.no_grad():
        for idx, pair in iter_split(manifest, split):
            pred = forward(Tensor(pair.cloudy), params)
            restored = np.clip(pred.data, 0.0, 1.0)
            triples.append((f"{split}/{idx:05d}", restored, pair.clear))
    if not triples:
        raise ValueError(f"split {split!r} is empty")
    return compute_report(triples, ssim_mode=ssim_mode)


# -- training checkpoints ---------------------------------------------------

def save_training_checkpoint(path, params: NetworkParams, state: AdamState,
                             rng: T.RngStream, step: int,
                             train_config: Optional[TrainConfig] = None) -> None:
    extra_tensors = []
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        extra_tensors.append((f"adam.m.{i:03d}", m))
        extra_tensors.append((f"adam.v.{i:03d}", v))
    extra = {
        "step": step,
        "adam_t": state.t,
        "rng_state": _encode_rng_state(rng.state()),
        "param_count": len(state.m),
    }
    if train_config is not None:
        extra["train"] = train_config.to_dict()
    save_checkpoint(path, params, extra=extra, extra_tensors=extra_tensors)


def load_training_checkpoint(path):
    params, header = load_checkpoint(path)
    extra = header.pop("_extra_arrays")
    n = header.get("param_count", 0)
    state = AdamState(
        m=[extra[f"adam.m.{i:03d}"].astype(np.float32) for i in range(n)],
        v=[extra[f"adam.v.{i:03d}"].astype(np.float32) for i in range(n)],
        t=header.get("adam_t", 0),
    )
    rng = T.RngStream(0)
    if "rng_state" in header:
        rng.set_state(_decode_rng_state(header["rng_state"]))
    step = header.get("step", 0)
    train_config = (TrainConfig.from_dict(header["train"])
                    if "train" in header else None)
    return params, state, rng, step, train_config


def _encode_rng_state(state: dict) -> dict:
    # PCG64 state holds ints beyond 64 bits; stringify for JSON
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def _decode_rng_state(enc: dict) -> dict:
    return {
        "bit_generator": enc["bit_generator"],
        "state": {"state": int(enc["state"]), "inc": int(enc["inc"])},
        "has_uint32": enc["has_uint32"],
        "uinteger": enc["uinteger"],
    }
