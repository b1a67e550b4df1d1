"""
When does a truncated adder still get modular addition right?
=============================================================

A model trained on n-digit operands is hypothesised to compute
f^(a, b) = (a mod 10^n + b mod 10^n) mod p. This script compares the
closed-form agreement rate between f^ and the truth with exact counts and
a brute-force sample.

Run:  python notebooks/01_oracles.py
"""

import numpy as np

from lengthgen.numtheory import Op, TaskKind, count_modadd_pairs, count_modmul_pairs, learned_fn, theoretical_modadd_acc, true_fn

# closed form next to the exact fraction over D_m, for a few moduli
print(f"{'p':>4} {'n':>2} {'m':>2} {'theory':>10} {'exact D_m':>12}")
for p in (100, 101, 150, 151, 201):
    for m in (5, 6, 7):
        theory = theoretical_modadd_acc(p, 4, m).accuracy
        exact = count_modadd_pairs(p, 4, m)
        print(f"{p:>4} {4:>2} {m:>2} {float(theory):>10.4%} {float(exact):>12.4%}")

# p' = p / gcd(p, 10^n) is what is left of the modulus after the truncation;
# divisors of 10^n leave nothing, so f^ == f everywhere
print()
for p in (50, 100, 200, 16, 125):
    print(f"p={p:>3}: theory on D_9 = {theoretical_modadd_acc(p, 4, 9).accuracy}")

# a quick brute-force sample agrees with the exact count
gen = np.random.default_rng(0)
task = TaskKind(Op.MODADD, 151)
a = gen.integers(10**5, 10**6, 200_000)
b = gen.integers(10**5, 10**6, 200_000)
hits = np.mean(true_fn(task, a, b) == learned_fn(task, 4, a, b))
print()
print(f"sampled agreement, p=151, n=4, both operands 6 digits: {hits:.4%}")
print(f"exact count over the same domain:                   {float(count_modadd_pairs(151, 4, 6, exact_length=True)):.4%}")

# modular multiplication has no closed form here; the count is exact for n=3, m=4
print()
for p in (51, 101, 150, 201):
    print(f"modmul p={p:>3}, n=3, m=4: {float(count_modmul_pairs(p, 3, 4).fraction):.2%}")
