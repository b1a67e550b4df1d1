"""Operand domains D_n, their unions and exact-length / gapped variants.

``D_n`` holds the pairs whose longer operand has exactly n digits, with
``(0, 0)`` placed in ``D_1``. The exact-length domain (``exact_both``) requires
both operands to have n digits, and ``gap_floor=g`` further forces both top
digits to be at least g. A single-digit operand may be 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Optional

import numpy as np

from . import rng as _rng
from .numtheory import TaskKind, true_fn
from .tokenizer import ExamplePair

DEFAULT_ENUMERATION_BUDGET = 20_000_000


class EmptyDomain(ValueError):
    pass


class BudgetExceeded(OverflowError):
    pass


def _lower(n: int) -> int:
    """Smallest n-digit natural (0 counts as a one-digit number)."""
    return 0 if n == 1 else 10 ** (n - 1)


@dataclass(frozen=True)
class DomainSpec:
    task: TaskKind
    lengths: frozenset[int]
    exact_both: bool = False
    gap_floor: Optional[int] = None

    def __post_init__(self):
        lengths = frozenset(int(n) for n in self.lengths)
        object.__setattr__(self, "lengths", lengths)
        if not lengths:
            raise ValueError("domain needs at least one length")
        if min(lengths) < 1 or max(lengths) > 9:
            raise ValueError(f"lengths must lie in 1..9, got {sorted(lengths)}")
        if self.exact_both and len(lengths) != 1:
            raise ValueError("an exact-length domain takes a single length")
        if self.gap_floor is not None and not (1 <= self.gap_floor <= 9):
            raise ValueError(f"gap_floor must lie in 1..9, got {self.gap_floor}")

    @classmethod
    def of(cls, task: TaskKind, *lengths: int, exact_both: bool = False, gap_floor: Optional[int] = None):
        return cls(task, frozenset(lengths), exact_both, gap_floor)

    @property
    def max_length(self) -> int:
        return max(self.lengths)

    def cardinality_of(self, n: int) -> int:
        if self.gap_floor is not None:
            return ((10 - self.gap_floor) * 10 ** (n - 1)) ** 2
        if self.exact_both:
            width = 10**n - _lower(n)
            return width * width
        if n == 1:
            return 100
        return 10 ** (2 * n) - 10 ** (2 * n - 2)

    @property
    def cardinality(self) -> int:
        return sum(self.cardinality_of(n) for n in self.lengths)

    def describe(self) -> str:
        base = "D~" if self.exact_both else "D"
        tag = base + "_{" + ",".join(str(n) for n in sorted(self.lengths)) + "}"
        if self.gap_floor is not None:
            tag += f"[top>={self.gap_floor}]"
        return tag

    def to_dict(self) -> dict:
        return {
            "task": self.task.op.value,
            "modulus": self.task.modulus,
            "lengths": sorted(self.lengths),
            "exact_both": self.exact_both,
            "gap_floor": self.gap_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(
            TaskKind.parse(d["task"], d.get("modulus")),
            frozenset(d["lengths"]),
            bool(d.get("exact_both", False)),
            d.get("gap_floor"),
        )


def _length(x):
    x = np.asarray(x, dtype=np.int64)
    out = np.ones_like(x)
    for k in range(1, 19):
        out += x >= 10**k
    return out


def contains(spec: DomainSpec, a, b):
    """Membership test; accepts ints or equally shaped integer arrays."""
    la, lb = _length(a), _length(b)
    hit = np.zeros(np.broadcast(la, lb).shape, dtype=bool)
    for n in spec.lengths:
        if spec.exact_both or spec.gap_floor is not None:
            ok = (la == n) & (lb == n)
            if spec.gap_floor is not None:
                top = 10 ** (n - 1)
                ok &= (np.asarray(a) // top >= spec.gap_floor) & (np.asarray(b) // top >= spec.gap_floor)
        else:
            ok = np.maximum(la, lb) == n
        hit |= ok
    return bool(hit) if hit.ndim == 0 else hit


@dataclass
class PairSet:
    """Operand pairs with their ground-truth results, stored as int64 columns."""

    spec: DomainSpec
    a: np.ndarray
    b: np.ndarray
    result: np.ndarray
    mode: str = "sampled"  # or "exhaustive"
    name: str = field(default="")

    def __post_init__(self):
        if not self.name:
            self.name = self.spec.describe()

    def __len__(self) -> int:
        return len(self.a)

    def __iter__(self) -> Iterator[ExamplePair]:
        for a, b, c in zip(self.a.tolist(), self.b.tolist(), self.result.tolist()):
            yield ExamplePair(a, b, c)

    def subset(self, index) -> "PairSet":
        return PairSet(self.spec, self.a[index], self.b[index], self.result[index], "sampled", self.name)

    def head(self, count: int) -> "PairSet":
        if count >= len(self):
            return self
        return self.subset(slice(0, count))

    def keys(self) -> np.ndarray:
        return pair_keys(self.a, self.b)


def pair_keys(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (np.asarray(a, dtype=np.int64) << 31) | np.asarray(b, dtype=np.int64)


def _make(spec: DomainSpec, a: np.ndarray, b: np.ndarray, mode: str) -> PairSet:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    return PairSet(spec, a, b, np.asarray(true_fn(spec.task, a, b), dtype=np.int64), mode)


def _operand(gen: np.random.Generator, n: int, size: int, floor: int = 1) -> np.ndarray:
    """Uniform n-digit operands whose top digit is at least ``floor``."""
    if n == 1:
        return gen.integers(0 if floor <= 1 else floor, 10, size=size, dtype=np.int64)
    top = 10 ** (n - 1)
    return gen.integers(floor, 10, size=size, dtype=np.int64) * top + gen.integers(0, top, size=size, dtype=np.int64)


def _draw_length(spec: DomainSpec, n: int, size: int, gen: np.random.Generator):
    if spec.gap_floor is not None:
        return _operand(gen, n, size, spec.gap_floor), _operand(gen, n, size, spec.gap_floor)
    if spec.exact_both or n == 1:
        return _operand(gen, n, size), _operand(gen, n, size)
    # D_n: split on which operands carry the full length; weights 1 : 1 : 9 per 10**(2n-2)*9
    short_hi = 10 ** (n - 1)
    case = gen.choice(3, size=size, p=[1 / 11, 1 / 11, 9 / 11])
    long_a = _operand(gen, n, size)
    long_b = _operand(gen, n, size)
    short_a = gen.integers(0, short_hi, size=size, dtype=np.int64)
    short_b = gen.integers(0, short_hi, size=size, dtype=np.int64)
    a = np.where(case == 1, short_a, long_a)
    b = np.where(case == 0, short_b, long_b)
    return a, b


def _draw(spec: DomainSpec, count: int, gen: np.random.Generator):
    lengths = sorted(spec.lengths)
    weights = np.array([spec.cardinality_of(n) for n in lengths], dtype=float)
    which = gen.choice(len(lengths), size=count, p=weights / weights.sum())
    a = np.empty(count, dtype=np.int64)
    b = np.empty(count, dtype=np.int64)
    for i, n in enumerate(lengths):
        sel = np.flatnonzero(which == i)
        a[sel], b[sel] = _draw_length(spec, n, len(sel), gen)
    return a, b


def sample(spec: DomainSpec, count: int, seed: int, *, tag: str = "sample") -> PairSet:
    """``count`` i.i.d. uniform draws from the domain (with replacement)."""
    if spec.cardinality == 0:
        raise EmptyDomain(f"{spec.describe()} is empty")
    a, b = _draw(spec, count, _rng.stream(seed, tag))
    return _make(spec, a, b, "sampled")


def sample_distinct(spec: DomainSpec, count: int, seed: int, *, tag: str = "sample", exclude=None) -> PairSet:
    """``count`` distinct uniform pairs, optionally avoiding the keys in ``exclude``."""
    excluded = np.unique(exclude) if exclude is not None else np.empty(0, dtype=np.int64)
    available = spec.cardinality - len(excluded)
    if count > available:
        raise ValueError(f"cannot draw {count} distinct pairs from {available} available in {spec.describe()}")
    if spec.cardinality <= max(4 * count, 10_000) and spec.cardinality <= DEFAULT_ENUMERATION_BUDGET:
        pool = enumerate_domain(spec)
        keep = ~np.isin(pool.keys(), excluded)
        idx = np.flatnonzero(keep)
        gen = _rng.stream(seed, tag)
        chosen = np.sort(gen.choice(idx, size=count, replace=False))
        out = pool.subset(gen.permutation(chosen))
        out.mode = "exhaustive" if count == spec.cardinality else "sampled"
        return out
    got_a, got_b = np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    seen = excluded
    rnd = 0
    while len(got_a) < count:
        a, b = _draw(spec, 2 * (count - len(got_a)) + 16, _rng.stream(seed, tag, rnd))
        keys = pair_keys(a, b)
        _, first = np.unique(keys, return_index=True)
        first = np.sort(first)
        fresh = first[~np.isin(keys[first], seen)]
        fresh = fresh[: count - len(got_a)]
        got_a = np.concatenate([got_a, a[fresh]])
        got_b = np.concatenate([got_b, b[fresh]])
        seen = np.union1d(seen, keys[fresh])
        rnd += 1
    return _make(spec, got_a, got_b, "sampled")


def enumerate_domain(spec: DomainSpec, budget: int = DEFAULT_ENUMERATION_BUDGET) -> PairSet:
    """Every pair once, ordered by a then b."""
    if spec.cardinality > budget:
        raise BudgetExceeded(f"{spec.describe()} has {spec.cardinality} pairs, budget {budget}")
    parts_a, parts_b = [], []
    for n in sorted(spec.lengths):
        hi = 10**n
        if spec.gap_floor is not None:
            lo = spec.gap_floor * 10 ** (n - 1)
            xs = np.arange(lo, hi, dtype=np.int64)
            ys = xs
        elif spec.exact_both:
            xs = ys = np.arange(_lower(n), hi, dtype=np.int64)
        else:
            xs = ys = np.arange(0, hi, dtype=np.int64)
        a, b = np.meshgrid(xs, ys, indexing="ij")
        a, b = a.ravel(), b.ravel()
        if not spec.exact_both and spec.gap_floor is None and n > 1:
            keep = np.maximum(a, b) >= 10 ** (n - 1)
            a, b = a[keep], b[keep]
        parts_a.append(a)
        parts_b.append(b)
    a = np.concatenate(parts_a)
    b = np.concatenate(parts_b)
    order = np.lexsort((b, a))
    return _make(spec, a[order], b[order], "exhaustive")


@dataclass(frozen=True)
class SplitSpec:
    total: int
    train_fraction: Fraction = Fraction(9, 10)
    seed: int = 0

    def __post_init__(self):
        frac = Fraction(self.train_fraction)
        object.__setattr__(self, "train_fraction", frac)
        if not (0 < frac < 1):
            raise ValueError(f"train_fraction must lie strictly between 0 and 1, got {frac}")
        if self.total < 2:
            raise ValueError("total must be at least 2")

    @property
    def n_train(self) -> int:
        return int(self.total * self.train_fraction)

    @property
    def n_test(self) -> int:
        return self.total - self.n_train


def make_splits(spec: DomainSpec, split: SplitSpec, *, dedup: bool = False) -> tuple[PairSet, PairSet]:
    """Disjoint (train, in-distribution test) sets.

    The test set is drawn first as distinct pairs. Training pairs are drawn with
    replacement from the rest of the domain, or as distinct pairs when
    ``dedup`` is set (then ``total`` may not exceed the domain size).
    """
    if dedup and split.total > spec.cardinality:
        raise ValueError(f"total {split.total} exceeds |{spec.describe()}| = {spec.cardinality}")
    if split.n_test >= spec.cardinality:
        raise ValueError(f"test set of {split.n_test} would exhaust {spec.describe()}")
    test = sample_distinct(spec, split.n_test, split.seed, tag="split-test")
    test.name = f"{spec.describe()} id-test"
    if dedup:
        train = sample_distinct(spec, split.n_train, split.seed, tag="split-train", exclude=test.keys())
    else:
        train = _sample_excluding(spec, split.n_train, split.seed, test.keys())
    train.name = f"{spec.describe()} train"
    return train, test


def _sample_excluding(spec: DomainSpec, count: int, seed: int, excluded: np.ndarray) -> PairSet:
    a_parts, b_parts = [], []
    have, rnd = 0, 0
    while have < count:
        a, b = _draw(spec, count - have, _rng.stream(seed, "split-train", rnd))
        keep = ~np.isin(pair_keys(a, b), excluded)
        a_parts.append(a[keep])
        b_parts.append(b[keep])
        have += int(keep.sum())
        rnd += 1
    return _make(spec, np.concatenate(a_parts), np.concatenate(b_parts), "sampled")


def build_ood_suite(
    task: TaskKind,
    train_lengths,
    eval_lengths,
    per_set: int = 10_000,
    exact_both: bool = False,
    seed: int = 0,
) -> dict[int, PairSet]:
    """One test set per evaluated length: the whole domain if it has at most
    ``per_set`` pairs, otherwise ``per_set`` distinct random pairs."""
    train_lengths = set(train_lengths)
    overlap = train_lengths & set(eval_lengths)
    if overlap:
        raise ValueError(f"evaluation lengths {sorted(overlap)} overlap the training lengths")
    return eval_suites(task, eval_lengths, per_set, exact_both, seed)


def eval_suites(task: TaskKind, lengths, per_set: int = 10_000, exact_both: bool = False, seed: int = 0):
    suites = {}
    for m in sorted(set(lengths)):
        spec = DomainSpec.of(task, m, exact_both=exact_both)
        if spec.cardinality <= per_set:
            suite = enumerate_domain(spec)
        else:
            suite = sample_distinct(spec, per_set, seed, tag=f"ood-{m}")
        suite.name = spec.describe()
        suites[m] = suite
    return suites
