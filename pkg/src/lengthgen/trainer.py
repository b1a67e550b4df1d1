"""Training loop: AdamW with decoupled weight decay, global-norm clipping,
periodic evaluation and resumable checkpoints.

Every step draws its batch, dropout masks and abacus offsets from streams
keyed by (seed, step), so stopping at step s and resuming reproduces the
uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import rng
from .datagen import PairSet, pair_keys
from .model import GPT, ModelConfig, PEKind, assign_positions, backward, decay_mask, init, loss_mask
from .tokenizer import LineLayout, encode_batch

log = logging.getLogger(__name__)

LAST = "last.ckpt"
METRICS = "metrics.csv"
RUN_INFO = "run.json"


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_norm_clip: float = 1.0
    batch_size: int = 256
    max_steps: int = 5000
    eval_every: int = 500
    checkpoint_every: int = 1000
    loss_mask: str = "full_sequence"
    cosine_decay: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("learning_rate, batch_size and max_steps must be positive")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ValueError("eval_every and checkpoint_every must be positive")
        if not all(0 < b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ValueError(f"betas must be two values in (0, 1), got {self.betas}")
        if self.weight_decay < 0 or self.grad_norm_clip <= 0:
            raise ValueError("weight_decay must be >= 0 and grad_norm_clip > 0")
        if self.loss_mask not in ("full_sequence", "answer_only"):
            raise ValueError(f"unknown loss_mask {self.loss_mask!r}")

    def lr_at(self, step: int) -> float:
        if not self.cosine_decay:
            return self.learning_rate
        frac = min(step, self.max_steps) / self.max_steps
        return self.learning_rate * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class OptState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


# --- optimizer pieces ------------------------------------------------------------


def global_norm(grads: dict[str, torch.Tensor]) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float = 1.0):
    """Scale all gradients by one factor so their joint L2 norm is at most ``max_norm``.

    Returns (grads, norm before clipping). Gradients are modified in place.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return grads, norm


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads, state: OptState, config: TrainConfig, decay=None, lr=None):
    """One AdamW update in place.

    ``decay`` maps tensor name to whether weight decay applies (default: all).
    Decay is decoupled: ``p <- p - lr * wd * p`` before the Adam step.
    """
    lr = config.lr_at(state.step + 1) if lr is None else lr
    b1, b2 = config.betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        if config.weight_decay and (decay is None or decay[name]):
            p.mul_(1 - lr * config.weight_decay)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + config.eps))
    return params, state


# --- metrics ---------------------------------------------------------------------


@dataclass
class MetricsRow:
    step: int
    loss: float
    metrics: dict[str, float] = field(default_factory=dict)
    wall_clock: float = 0.0

    def as_dict(self) -> dict:
        return {"step": self.step, "loss": self.loss, **self.metrics, "wall_clock": round(self.wall_clock, 3)}


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append({k: (int(v) if k == "step" else _num(v)) for k, v in row.items()})
    return out


def _num(v: str) -> float:
    try:
        return float(v)
    except ValueError:
        return float("nan")


def _write_metrics(path: Path, rows: list[MetricsRow]) -> None:
    if not rows:
        return
    header = list(rows[0].as_dict())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore", restval="")
        w.writeheader()
        for r in rows:
            w.writerow(r.as_dict())


# --- the loop --------------------------------------------------------------------


@dataclass
class TrainData:
    tokens: np.ndarray  # (N, seq_len) uint8
    layout: LineLayout
    keys: Optional[np.ndarray] = None

    @classmethod
    def from_pairs(cls, pairs: PairSet, layout: LineLayout) -> "TrainData":
        return cls(encode_batch(pairs.a, pairs.b, pairs.result, layout), layout, pairs.keys())

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class TrainResult:
    model: GPT
    step: int
    rows: list[MetricsRow]
    run_dir: Optional[Path]
    opt_state: OptState


EvalHook = Callable[[GPT, int], dict]


def batch_at(data: TrainData, config: TrainConfig, model_config: ModelConfig, step: int):
    """(tokens, positions, dropout generator) for ``step``; pure in its arguments."""
    idx = rng.stream(config.seed, "batch", step).integers(0, len(data), config.batch_size)
    tokens = data.tokens[idx]
    positions = None
    if model_config.pe_kind is PEKind.ABACUS:
        k = rng.stream(config.seed, "abacus-offset", step).integers(
            0, model_config.abacus_max_offset + 1, config.batch_size
        )
        positions = assign_positions(data.layout, PEKind.ABACUS, k)
    return tokens, positions, rng.torch_generator(config.seed, "dropout", step)


def _state_tensors(model: GPT, state: OptState) -> dict:
    out = ckpt_io.model_tensors(model)
    for name in state.m:
        out[f"opt.m.{name}"] = state.m[name]
        out[f"opt.v.{name}"] = state.v[name]
    return out


def _restore_state(model: GPT, tensors: dict, step: int) -> OptState:
    ckpt_io.load_into(model, tensors)
    state = OptState(step=step)
    for name, p in model.named_parameters():
        if f"opt.m.{name}" in tensors:
            state.m[name] = torch.from_numpy(tensors[f"opt.m.{name}"].copy()).to(p.dtype)
            state.v[name] = torch.from_numpy(tensors[f"opt.v.{name}"].copy()).to(p.dtype)
    return state


def check_disjoint(data: TrainData, eval_suites: Optional[dict]) -> None:
    if not eval_suites or data.keys is None:
        return
    for name, suite in eval_suites.items():
        keys = pair_keys(suite.a, suite.b)
        if np.isin(keys, data.keys).any():
            raise ValueError(f"evaluation suite {name!r} shares pairs with the training set")


def run_training(
    model_config: ModelConfig,
    train_config: TrainConfig,
    data: TrainData,
    eval_suites: Optional[dict] = None,
    *,
    eval_hook: Optional[EvalHook] = None,
    run_dir=None,
    resume: bool = True,
    stop_at: Optional[int] = None,
) -> TrainResult:
    """Train until ``max_steps`` (or ``stop_at``, for interrupted-run tests).

    When ``run_dir`` holds a checkpoint and ``resume`` is set, training picks
    up from it. Metrics go to ``run_dir/metrics.csv``, checkpoints to
    ``run_dir/last.ckpt``. A non-finite loss or gradient raises
    :class:`TrainingDiverged` and leaves the last checkpoint untouched.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    check_disjoint(data, eval_suites)
    if eval_hook is None and eval_suites:
        raise ValueError("eval_suites given without an eval_hook")
    torch.manual_seed(train_config.seed)  # nothing should draw from the global stream; belt and braces
    run_dir = Path(run_dir) if run_dir is not None else None
    model = init(model_config)
    state = OptState()
    rows: list[MetricsRow] = []
    loss_sum, loss_count, elapsed = 0.0, 0, 0.0
    info = {"model_config": model_config.to_dict(), "train_config": train_config.to_dict(), "layout": data.layout.to_dict()}
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        last = run_dir / LAST
        if resume and last.exists():
            saved = ckpt_io.load(last)
            if saved.meta.get("run") != info:
                raise ValueError(f"{last} was produced by a different configuration")
            state = _restore_state(model, saved.tensors, saved.step)
            loss_sum, loss_count = saved.meta["loss_sum"], saved.meta["loss_count"]
            elapsed = saved.meta.get("elapsed", 0.0)
            rows = [MetricsRow(**r) for r in saved.meta.get("rows", [])]
            log.info("resumed from %s at step %d", last, state.step)
        (run_dir / RUN_INFO).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")

    params = dict(model.named_parameters())
    decay = decay_mask(model)
    mask = loss_mask(data.layout, train_config.loss_mask)
    end = train_config.max_steps if stop_at is None else min(stop_at, train_config.max_steps)
    t0 = time.perf_counter() - elapsed

    def save_checkpoint():
        if run_dir is None:
            return
        meta = {
            "run": info,
            "loss_sum": loss_sum,
            "loss_count": loss_count,
            "elapsed": time.perf_counter() - t0,
            "rows": [asdict(r) for r in rows],
        }
        ckpt_io.save(run_dir / LAST, ckpt_io.Checkpoint(model_config.to_dict(), state.step, _state_tensors(model, state), meta))

    while state.step < end:
        step = state.step + 1
        tokens, positions, gen = batch_at(data, train_config, model_config, step)
        try:
            value, grads = backward(model, tokens, positions, mask, gen)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        if not math.isfinite(value):
            raise TrainingDiverged(f"step {step}: non-finite loss {value}")
        clip_grad_norm(grads, train_config.grad_norm_clip)
        adamw_step(params, grads, state, train_config, decay)
        loss_sum += value
        loss_count += 1
        if step % train_config.eval_every == 0 or step == train_config.max_steps:
            metrics = eval_hook(model, step) if eval_hook is not None else {}
            row = MetricsRow(step, loss_sum / loss_count, dict(metrics), time.perf_counter() - t0)
            rows.append(row)
            loss_sum, loss_count = 0.0, 0
            log.info("step %d loss %.4f %s", step, row.loss, _brief(row.metrics))
            if run_dir is not None:
                _write_metrics(run_dir / METRICS, rows)
        if step % train_config.checkpoint_every == 0 or step == end:
            save_checkpoint()
    model.eval()
    return TrainResult(model, state.step, rows, run_dir, state)


def _brief(metrics: dict) -> str:
    keys = [k for k in metrics if k.startswith("acc_")][:6]
    return " ".join(f"{k}={metrics[k]:.3f}" for k in keys)
