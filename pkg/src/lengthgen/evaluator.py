"""Scoring: exact-match accuracy against the true and the truncated ("learned")
target, teacher-forced digit-wise accuracy, per-position R², and R²
trajectory correlations.

Anything with a ``predict`` interface can be scored; :class:`ModelPredictor`
wraps a trained network, and tests use scripted predictors.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional, Protocol

import numpy as np
import torch

from .datagen import PairSet
from .model import GPT, assign_positions, generate_greedy
from .numtheory import Op, TaskKind, count_modadd_pairs, count_modmul_pairs, learned_fn, theoretical_modadd_acc, true_fn
from .tokenizer import SEMI, LineLayout, MalformedAnswer, answer_digits, decode_answer, encode_batch

DEFAULT_CHUNK = 2048


class Predictor(Protocol):
    layout: LineLayout

    def generate(self, prompts: np.ndarray) -> np.ndarray:
        """Greedy continuation of (B, prompt_len) prompts; (B, <= W_c + 1) tokens."""

    def teacher_forced(self, lines: np.ndarray) -> np.ndarray:
        """(B, W_c, vocab) next-token logits at the answer slots given the true prefix."""


class ModelPredictor:
    """Adapter from a trained :class:`GPT` to the predictor interface (eval mode, offset 0)."""

    def __init__(self, model: GPT, layout: LineLayout, chunk: int = DEFAULT_CHUNK):
        self.model = model
        self.layout = layout
        self.chunk = chunk
        self.positions = assign_positions(layout, model.config.pe_kind)

    def generate(self, prompts):
        outs = []
        for lo in range(0, len(prompts), self.chunk):
            outs.append(
                generate_greedy(self.model, prompts[lo : lo + self.chunk], self.positions, self.layout.answer_width + 1)
            )
        width = max(o.shape[1] for o in outs)
        return np.concatenate([np.pad(o, ((0, 0), (0, width - o.shape[1])), constant_values=SEMI) for o in outs])

    @torch.no_grad()
    def teacher_forced(self, lines):
        lay = self.layout
        start = lay.prompt_len - 1
        outs = []
        for lo in range(0, len(lines), self.chunk):
            x = torch.as_tensor(np.asarray(lines[lo : lo + self.chunk, : start + lay.answer_width]), dtype=torch.long)
            pos = None if self.positions is None else self.positions[: x.shape[1]]
            logits = self.model(x, pos)
            outs.append(logits[:, start:, :].numpy())
        return np.concatenate(outs)


# --- exact match -----------------------------------------------------------------


@dataclass
class AccuracyResult:
    correct: int
    wrong: int
    failures: int

    @property
    def total(self) -> int:
        return self.correct + self.wrong + self.failures

    @property
    def accuracy(self) -> float:
        return self.correct / self.total

    @property
    def failure_rate(self) -> float:
        return self.failures / self.total

    @property
    def wrong_rate(self) -> float:
        return self.wrong / self.total


def _prompts(suite: PairSet, layout: LineLayout) -> np.ndarray:
    zeros = np.zeros(len(suite), dtype=np.int64)
    return encode_batch(suite.a, suite.b, zeros, layout)[:, : layout.prompt_len]


def decode_all(generated: np.ndarray, layout: LineLayout) -> np.ndarray:
    """Decoded integers with -1 marking a malformed answer."""
    out = np.empty(len(generated), dtype=np.int64)
    for i, row in enumerate(generated):
        try:
            out[i] = decode_answer(row, layout)
        except MalformedAnswer:
            out[i] = -1
    return out


def reference_values(task: TaskKind, suite: PairSet, reference: str, n: Optional[int] = None) -> np.ndarray:
    if reference == "true":
        return np.asarray(true_fn(task, suite.a, suite.b), dtype=np.int64)
    if reference == "learned":
        if n is None:
            raise ValueError("learned reference needs the training length n")
        return np.asarray(learned_fn(task, n, suite.a, suite.b), dtype=np.int64)
    raise ValueError(f"unknown reference {reference!r}")


def score(decoded: np.ndarray, expected: np.ndarray) -> AccuracyResult:
    fail = int((decoded < 0).sum())
    correct = int((decoded == expected).sum())
    return AccuracyResult(correct, len(decoded) - fail - correct, fail)


def eval_accuracy(predictor: Predictor, suite: PairSet, task: TaskKind, reference: str = "true", n=None) -> AccuracyResult:
    """Greedy exact match against ``true_fn`` or ``learned_fn(n)``."""
    if len(suite) == 0:
        raise ValueError("empty evaluation suite")
    decoded = decode_all(predictor.generate(_prompts(suite, predictor.layout)), predictor.layout)
    return score(decoded, reference_values(task, suite, reference, n))


# --- per-position metrics ----------------------------------------------------------


def _lines(suite: PairSet, layout: LineLayout, values: np.ndarray) -> np.ndarray:
    return encode_batch(suite.a, suite.b, values, layout)


def teacher_forced_digits(predictor: Predictor, suite: PairSet, task: TaskKind) -> tuple[np.ndarray, np.ndarray]:
    """(predicted, reference) digit matrices, shape (N, W_c).

    Predictions are the argmax over all tokens, so a non-digit prediction
    (id >= 10) never matches a reference digit.
    """
    lay = predictor.layout
    ref = np.asarray(true_fn(task, suite.a, suite.b), dtype=np.int64)
    logits = predictor.teacher_forced(_lines(suite, lay, ref))
    return logits.argmax(axis=-1), answer_digits(ref, lay)


def free_running_digits(predictor: Predictor, suite: PairSet, task: TaskKind) -> tuple[np.ndarray, np.ndarray]:
    lay = predictor.layout
    ref = np.asarray(true_fn(task, suite.a, suite.b), dtype=np.int64)
    gen = predictor.generate(_prompts(suite, lay))
    pred = np.full((len(suite), lay.answer_width), -1, dtype=np.int64)
    width = min(gen.shape[1], lay.answer_width)
    pred[:, :width] = gen[:, :width]
    return pred, answer_digits(ref, lay)


def digitwise_accuracy(predictor: Predictor, suite: PairSet, task: TaskKind, *, teacher_forcing: bool = True) -> np.ndarray:
    """Fraction of examples whose answer digit c_i is right, for i = 1..W_c."""
    if len(suite) == 0:
        raise ValueError("empty evaluation suite")
    fn = teacher_forced_digits if teacher_forcing else free_running_digits
    pred, ref = fn(predictor, suite, task)
    return (pred == ref).mean(axis=0)


def r2_scores(pred: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Column-wise 1 - SS_res / SS_tot; NaN where the reference column is constant."""
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    ss_tot = ((ref - ref.mean(axis=0)) ** 2).sum(axis=0)
    ss_res = ((pred - ref) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 1 - ss_res / ss_tot
    out[ss_tot == 0] = np.nan
    return out


def r2_per_position(predictor: Predictor, probe: PairSet, task: TaskKind) -> np.ndarray:
    """R² between the teacher-forced digit prediction and the true digit per position.

    The prediction is the most likely digit (non-digit tokens excluded), so it
    is always a number in 0..9. Positions with a constant true digit are NaN.
    """
    lay = predictor.layout
    ref = np.asarray(true_fn(task, probe.a, probe.b), dtype=np.int64)
    logits = predictor.teacher_forced(_lines(probe, lay, ref))
    return r2_scores(logits[..., :10].argmax(axis=-1), answer_digits(ref, lay))


@dataclass
class DynamicsTrace:
    steps: list[int] = field(default_factory=list)
    r2: list[list[float]] = field(default_factory=list)

    def add(self, step: int, values) -> None:
        self.steps.append(int(step))
        self.r2.append([float(v) for v in values])

    def matrix(self) -> np.ndarray:
        return np.asarray(self.r2, dtype=float)


def r2_correlation(trace) -> np.ndarray:
    """Pearson correlation between per-position R² trajectories.

    Accepts a :class:`DynamicsTrace` or a (checkpoints, positions) array.
    Entries involving a constant or undefined trajectory are NaN.
    """
    data = trace.matrix() if isinstance(trace, DynamicsTrace) else np.asarray(trace, dtype=float)
    if data.ndim != 2 or data.shape[0] < 3:
        raise ValueError("need at least three checkpoints")
    k = data.shape[1]
    out = np.full((k, k), np.nan)
    centred = data - data.mean(axis=0)
    norms = np.sqrt((centred**2).sum(axis=0))
    ok = np.isfinite(norms) & (norms > 0)
    for i in range(k):
        for j in range(k):
            if ok[i] and ok[j]:
                out[i, j] = float(centred[:, i] @ centred[:, j] / (norms[i] * norms[j]))
    idx = np.flatnonzero(ok)
    out[idx, idx] = 1.0
    return out


# --- reports -----------------------------------------------------------------------


def oracle_value(task: TaskKind, n: int, m: int) -> Optional[Fraction]:
    """Closed-form predicted accuracy vs the true function on length-m operands."""
    if not task.op.modular:
        return None
    if m <= n:
        return Fraction(1)
    if task.op is Op.MODADD:
        return theoretical_modadd_acc(task.modulus, n, m).accuracy
    return _modmul_fraction(task.modulus, n, m)


def oracle_count(task: TaskKind, n: int, m: int, exact_both: bool) -> Optional[Fraction]:
    """Exact fraction of the suite's domain on which f and f̂ agree (outward modular suites)."""
    if not task.op.modular or m <= n:
        return None
    if task.op is Op.MODADD:
        return count_modadd_pairs(task.modulus, n, m, exact_length=exact_both)
    return _modmul_fraction(task.modulus, n, m)


def _modmul_fraction(p: int, n: int, m: int) -> Fraction:
    return count_modmul_pairs(p, n, m, exact_length=True, budget=10**8, sample_size=10**6).fraction


@dataclass
class ReportRow:
    suite: str
    length: int
    samples: int
    mode: str
    acc_vs_true: float
    acc_vs_learned: float
    failure_rate: float
    oracle: Optional[float] = None
    oracle_exact: Optional[str] = None
    oracle_count: Optional[float] = None
    digitwise: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    task: str
    train_length: int
    rows: list[ReportRow]
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=_json_default)

    def to_csv(self) -> str:
        buf = io.StringIO()
        width = max((len(r.digitwise) for r in self.rows), default=0)
        cols = ["suite", "length", "samples", "mode", "acc_vs_true", "acc_vs_learned", "failure_rate", "oracle", "oracle_exact", "oracle_count"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols + [f"digit_{i}" for i in range(1, width + 1)])
        for r in self.rows:
            d = asdict(r)
            w.writerow([_cell(d[c]) for c in cols] + [_cell(v) for v in r.digitwise])
        return buf.getvalue()

    def pretty(self) -> str:
        head = f"{self.task}, trained on length {self.train_length}"
        lines = [head, f"{'suite':<14}{'n':>6}{'mode':>12}{'vs f':>9}{'vs f^':>9}{'fail':>8}{'theory':>9}"]
        for r in self.rows:
            theory = "" if r.oracle is None else f"{100 * r.oracle:.2f}%"
            lines.append(
                f"{r.suite:<14}{r.samples:>6}{r.mode:>12}{100 * r.acc_vs_true:>8.2f}%"
                f"{100 * r.acc_vs_learned:>8.2f}%{100 * r.failure_rate:>7.2f}%{theory:>9}"
            )
        return "\n".join(lines)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def _json_default(v):
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    raise TypeError(type(v))


def hypothesis_report(
    predictor: Predictor,
    task: TaskKind,
    n: int,
    suites: dict[str, PairSet],
    *,
    digitwise: bool = True,
    provenance: Optional[dict] = None,
) -> EvalReport:
    """Accuracy vs f and vs f̂ for every suite, with the oracle column for modular tasks."""
    rows = []
    lay = predictor.layout
    for name, suite in suites.items():
        m = suite.spec.max_length
        decoded = decode_all(predictor.generate(_prompts(suite, lay)), lay)
        vs_true = score(decoded, reference_values(task, suite, "true"))
        vs_learned = score(decoded, reference_values(task, suite, "learned", n))
        oracle = oracle_value(task, n, m)
        count = oracle_count(task, n, m, suite.spec.exact_both)
        digits = digitwise_accuracy(predictor, suite, task).tolist() if digitwise else []
        rows.append(
            ReportRow(
                name,
                m,
                len(suite),
                suite.mode,
                vs_true.accuracy,
                vs_learned.accuracy,
                vs_true.failure_rate,
                None if oracle is None else float(oracle),
                None if oracle is None else str(oracle),
                None if count is None else float(count),
                digits,
            )
        )
    return EvalReport(str(task), n, rows, dict(provenance or {}))


def consistency_violations(report: EvalReport) -> list[str]:
    """Inward suites where accuracy vs f and vs f̂ disagree (should never happen)."""
    return [r.suite for r in report.rows if r.length <= report.train_length and r.acc_vs_true != r.acc_vs_learned]


# --- training hook -----------------------------------------------------------------


def make_eval_hook(task: TaskKind, n: int, layout: LineLayout, suites: dict[str, PairSet], probe: Optional[PairSet] = None):
    """Metrics callback for the trainer.

    Columns, in order: ``acc_true[<suite>]``, ``acc_learned[<suite>]``,
    ``fail[<suite>]`` per suite, then ``digit_<i>`` and ``r2_<i>`` on the probe.
    """

    def hook(model: GPT, step: int) -> dict:
        pred = ModelPredictor(model, layout)
        out = {}
        for name, suite in suites.items():
            decoded = decode_all(pred.generate(_prompts(suite, layout)), layout)
            t = score(decoded, reference_values(task, suite, "true"))
            lr = score(decoded, reference_values(task, suite, "learned", n))
            out[f"acc_true[{name}]"] = t.accuracy
            out[f"acc_learned[{name}]"] = lr.accuracy
            out[f"fail[{name}]"] = t.failure_rate
        if probe is not None:
            for i, v in enumerate(digitwise_accuracy(pred, probe, task), 1):
                out[f"digit_{i}"] = float(v)
            for i, v in enumerate(r2_per_position(pred, probe, task), 1):
                out[f"r2_{i}"] = float(v)
        return out

    return hook


def trace_from_rows(rows: list[dict]) -> DynamicsTrace:
    trace = DynamicsTrace()
    for row in rows:
        cols = sorted((k for k in row if k.startswith("r2_")), key=lambda k: int(k[3:]))
        if cols:
            trace.add(row["step"], [row[c] for c in cols])
    return trace


def binomial_sigma(p: float, count: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / count)
