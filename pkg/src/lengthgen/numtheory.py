"""Exact digit arithmetic, target functions and OOD accuracy oracles.

Digits are little-endian throughout: ``digits[0]`` is the units digit, so
``digits[i - 1]`` is the digit of significance ``10 ** (i - 1)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import rng as _rng

DEFAULT_ENUMERATION_BUDGET = 10**9


def units_digit(x: int) -> int:
    return x % 10


def carry(x: int) -> int:
    return x // 10


def num_digits(x: int) -> int:
    """Decimal length of a natural number; ``num_digits(0) == 1``."""
    if x < 0:
        raise ValueError(f"expected a natural number, got {x}")
    return len(str(x))


@dataclass(frozen=True)
class DigitString:
    """Little-endian base-10 digit sequence (trailing zeros allowed as padding)."""

    digits: tuple[int, ...]

    def __post_init__(self):
        if not self.digits:
            raise ValueError("DigitString needs at least one position")
        for d in self.digits:
            if not (0 <= d <= 9):
                raise ValueError(f"digit out of range: {d}")

    @classmethod
    def from_value(cls, value: int, length: Optional[int] = None) -> "DigitString":
        if value < 0:
            raise ValueError(f"expected a natural number, got {value}")
        n = num_digits(value) if length is None else length
        if value >= 10**n:
            raise ValueError(f"{value} does not fit in {n} digits")
        return cls(tuple((value // 10**i) % 10 for i in range(n)))

    def to_value(self) -> int:
        return sum(d * 10**i for i, d in enumerate(self.digits))

    def __len__(self) -> int:
        return len(self.digits)

    def __getitem__(self, i: int) -> int:
        """1-based significance index; positions beyond the stored length read as 0."""
        if i < 1:
            raise IndexError("digit positions start at 1")
        return self.digits[i - 1] if i <= len(self.digits) else 0

    def __str__(self) -> str:
        return "".join(str(d) for d in reversed(self.digits))


def add_digitwise(a: DigitString, b: DigitString) -> DigitString:
    """Sum via the per-position recurrence c_i = ζ(a_i + b_i + χ(a_{i-1} + b_{i-1} + ...))."""
    n = max(len(a), len(b))
    out = []
    carry_in = 0
    for i in range(1, n + 2):
        s = a[i] + b[i] + carry_in
        out.append(units_digit(s))
        carry_in = carry(s)
    return DigitString(tuple(out))


def raw_sums(a: DigitString, b: DigitString) -> list[int]:
    """Pre-carry convolution: entry k-1 is the sum of a_i * b_j over i + j = k + 1."""
    out = [0] * (len(a) + len(b) - 1)
    for i, ai in enumerate(a.digits):
        for j, bj in enumerate(b.digits):
            out[i + j] += ai * bj
    return out


def propagate_carries(sums: Sequence[int], length: int) -> DigitString:
    digits = []
    carry_in = 0
    for i in range(length):
        s = (sums[i] if i < len(sums) else 0) + carry_in
        digits.append(units_digit(s))
        carry_in = carry(s)
    if carry_in:
        raise ValueError("carry left over; result length too small")
    return DigitString(tuple(digits))


def mul_digitwise(a: DigitString, b: DigitString) -> DigitString:
    """Product via raw sums S_i = c^R_i + c^χ_{i-1}, c_i = ζ(S_i), c^χ_i = χ(S_i)."""
    return propagate_carries(raw_sums(a, b), len(a) + len(b))



def to_digit_array(values, length: int) -> np.ndarray:
    """(N, length) little-endian digit columns of a vector of naturals."""
    values = np.asarray(values, dtype=np.int64)
    return (values[:, None] // 10 ** np.arange(length, dtype=np.int64)) % 10


def from_digit_array(digits: np.ndarray) -> np.ndarray:
    return np.asarray(digits, dtype=np.int64) @ (10 ** np.arange(digits.shape[1], dtype=np.int64))


def add_digit_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise :func:`add_digitwise` on (N, n) digit arrays; returns (N, n + 1)."""
    n = a.shape[1]
    out = np.zeros((a.shape[0], n + 1), dtype=np.int64)
    carry_in = np.zeros(a.shape[0], dtype=np.int64)
    for i in range(n):
        s = a[:, i] + b[:, i] + carry_in
        out[:, i] = s % 10
        carry_in = s // 10
    out[:, n] = carry_in
    return out


def mul_digit_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise :func:`mul_digitwise`: raw sums, then carry propagation; returns (N, n_a + n_b)."""
    na, nb = a.shape[1], b.shape[1]
    sums = np.zeros((a.shape[0], na + nb), dtype=np.int64)
    for i in range(na):
        for j in range(nb):
            sums[:, i + j] += a[:, i] * b[:, j]
    out = np.zeros_like(sums)
    carry_in = np.zeros(a.shape[0], dtype=np.int64)
    for k in range(na + nb):
        s = sums[:, k] + carry_in
        out[:, k] = s % 10
        carry_in = s // 10
    if carry_in.any():
        raise ValueError("carry left over; result length too small")
    return out

class Op(enum.Enum):
    ADD = "add"
    MUL = "mul"
    MODADD = "modadd"
    MODMUL = "modmul"

    @property
    def modular(self) -> bool:
        return self in (Op.MODADD, Op.MODMUL)

    @property
    def symbol(self) -> str:
        return "+" if self in (Op.ADD, Op.MODADD) else "*"


@dataclass(frozen=True)
class TaskKind:
    op: Op
    modulus: Optional[int] = None

    def __post_init__(self):
        op = Op(self.op)
        object.__setattr__(self, "op", op)
        if op.modular:
            if self.modulus is None or self.modulus < 2:
                raise ValueError(f"{op.value} needs a modulus >= 2, got {self.modulus}")
        elif self.modulus is not None:
            raise ValueError(f"{op.value} takes no modulus")

    @classmethod
    def parse(cls, name: str, modulus: Optional[int] = None) -> "TaskKind":
        return cls(Op(name.lower()), modulus)

    @property
    def symbol(self) -> str:
        return self.op.symbol

    def __str__(self) -> str:
        return self.op.value if self.modulus is None else f"{self.op.value}(p={self.modulus})"


def true_fn(task: TaskKind, a, b):
    """Ground truth f. Works elementwise on numpy integer arrays as well as ints."""
    if task.op is Op.ADD:
        return a + b
    if task.op is Op.MUL:
        return a * b
    if task.op is Op.MODADD:
        return (a + b) % task.modulus
    return (a * b) % task.modulus


def learned_fn(task: TaskKind, n: int, a, b):
    """Hypothesised learned function: truncate both operands mod 10**n, then apply f."""
    if n < 1:
        raise ValueError("trained length n must be >= 1")
    base = 10**n
    return true_fn(task, a % base, b % base)


def max_result(task: TaskKind, operand_width: int) -> int:
    top = 10**operand_width - 1
    if task.op is Op.ADD:
        return 2 * top
    if task.op is Op.MUL:
        return top * top
    return task.modulus - 1


@dataclass(frozen=True)
class OracleResult:
    accuracy: Fraction
    threshold_met: bool
    p_prime: int

    def __float__(self) -> float:
        return float(self.accuracy)


def reduced_modulus(p: int, n: int) -> int:
    """p' = p / gcd(p, 10**n)."""
    return p // math.gcd(p, 10**n)


def theoretical_modadd_acc(p: int, n: int, n_test: int) -> OracleResult:
    """Closed-form outward accuracy of the truncated-sum model on both-length-n_test pairs.

    The length threshold ``n_test >= n + log10(p'/2 + 1)`` is checked as
    ``2 * 10**(n_test - n) >= p' + 2`` so boundary cases are exact.
    """
    if p < 2:
        raise ValueError("modulus must be >= 2")
    if n < 1:
        raise ValueError("trained length must be >= 1")
    if n_test <= n:
        raise ValueError(f"oracle covers outward lengths only (n_test={n_test} <= n={n})")
    g = math.gcd(p, 10**n)
    p_prime = p // g
    met = 2 * 10 ** (n_test - n) >= p_prime + 2
    return OracleResult(Fraction(g, p) if met else Fraction(0), met, p_prime)


def _residue_counts(lo: int, hi: int, modulus: int) -> np.ndarray:
    """Number of integers x in [lo, hi) with x % modulus == r, for each r."""
    counts = np.full(modulus, (hi - lo) // modulus, dtype=object)
    for x in range(lo + (hi - lo) // modulus * modulus, hi):
        counts[x % modulus] += 1
    return counts


def _upper_range(n: int, m: int, exact_length: bool) -> tuple[int, int]:
    """Range of the upper part A = a // 10**n.

    With ``exact_length`` A has exactly m - n digits, so a has exactly m digits.
    Otherwise A runs over [1, 10**(m-n)), which is the same set only when m = n + 1.
    """
    top = 10 ** (m - n)
    lo = 10 ** (m - n - 1) if exact_length else 1
    return lo, top


def count_modadd_pairs(
    p: int,
    n: int,
    m: int,
    *,
    exact_length: bool = False,
    method: str = "count",
    budget: int = DEFAULT_ENUMERATION_BUDGET,
) -> Fraction:
    """Exact fraction of upper parts (A, B) with (A + B) * 10**n ≡ 0 mod p.

    By default A, B range over [1, 10**(m-n)); ``exact_length=True`` restricts
    them so that both operands have exactly m digits. ``method="count"``
    tallies residues arithmetically (always exact, O(p')); ``method="enumerate"``
    walks every pair and is guarded by ``budget``. The lower digits a_0, b_0
    never enter the condition.
    """
    if m <= n:
        raise ValueError(f"tested length m={m} must exceed trained length n={n}")
    p_prime = reduced_modulus(p, n)
    lo, top = _upper_range(n, m, exact_length)
    total = (top - lo) ** 2
    if method == "count":
        counts = _residue_counts(lo, top, p_prime)
        valid = sum(counts[r] * counts[(-r) % p_prime] for r in range(p_prime))
    elif method == "enumerate":
        if total > budget:
            raise OverflowError(f"{total} pairs exceed enumeration budget {budget}")
        valid = 0
        for A in range(lo, top):
            valid += sum(1 for B in range(lo, top) if ((A + B) * 10**n) % p == 0)
    else:
        raise ValueError(f"unknown method {method!r}")
    return Fraction(int(valid), total)


@dataclass(frozen=True)
class ModMulCount:
    fraction: Fraction
    mode: str  # "exact" or "sampled"
    samples: int  # combinations covered (exact) or drawn (sampled)

    def __float__(self) -> float:
        return float(self.fraction)


def count_modmul_pairs(
    p: int,
    n: int,
    m: int,
    *,
    exact_length: bool = True,
    budget: int = DEFAULT_ENUMERATION_BUDGET,
    sample_size: Optional[int] = None,
    seed: int = 0,
) -> ModMulCount:
    """Fraction of both-length-m pairs where the truncated product agrees with f mod p.

    Counts (A, B, a_0, b_0) with A*B*10**n + A*b_0 + B*a_0 ≡ 0 mod p'.
    ``exact_length=False`` widens A, B to [1, 10**(m-n)) as in
    :func:`count_modadd_pairs`. The exact mode covers every combination of
    upper and lower parts (81 * 10**6 for n=3, m=4); it tallies b_0
    and a_0 by residue for each upper part instead of looping over them one at
    a time. Above ``budget`` combinations a seeded uniform sample of
    ``sample_size`` pairs is drawn instead, or OverflowError is raised if none
    was requested.
    """
    if m <= n:
        raise ValueError(f"tested length m={m} must exceed trained length n={n}")
    p_prime = reduced_modulus(p, n)
    lo, top = _upper_range(n, m, exact_length)
    low = 10**n
    total = (top - lo) ** 2 * low**2

    if total > budget:
        if sample_size is None:
            raise OverflowError(
                f"{total} combinations exceed budget {budget}; pass sample_size to estimate"
            )
        return _sample_modmul(p, n, m, sample_size, seed, exact_length)

    lows = np.arange(low, dtype=np.int64)
    # hist[k][r] = #{x in [0, 10**n): k*x ≡ r mod p'}
    hist = {k: np.bincount((k * lows) % p_prime, minlength=p_prime) for k in range(lo, top)}
    shift = np.arange(p_prime)
    valid = 0
    for A in range(lo, top):
        hb = hist[A]  # residues of A*b_0
        for B in range(lo, top):
            target = (-A * B * low) % p_prime
            # Σ_r #{a_0: B*a_0 ≡ r} * #{b_0: A*b_0 ≡ target - r}
            valid += int(np.dot(hist[B].astype(object), hb[(target - shift) % p_prime].astype(object)))
    return ModMulCount(Fraction(valid, total), "exact", total)


def _sample_modmul(p: int, n: int, m: int, size: int, seed: int, exact_length: bool) -> ModMulCount:
    gen = _rng.stream(seed, "modmul-oracle")
    lo, top = _upper_range(n, m, exact_length)
    low = 10**n
    a = gen.integers(lo, top, size=size, dtype=np.int64) * low + gen.integers(0, low, size=size, dtype=np.int64)
    b = gen.integers(lo, top, size=size, dtype=np.int64) * low + gen.integers(0, low, size=size, dtype=np.int64)
    task = TaskKind(Op.MODMUL, p)
    # object arrays keep the products exact beyond int64
    a_o, b_o = a.astype(object), b.astype(object)
    hits = int(np.count_nonzero(true_fn(task, a_o, b_o) == learned_fn(task, n, a_o, b_o)))
    return ModMulCount(Fraction(hits, size), "sampled", size)
