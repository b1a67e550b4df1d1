"""
Learning dynamics per answer position
=====================================

Reads the metrics logged while a run trained and prints, per checkpoint,
the digit-wise accuracy and R² of each answer position, followed by the
correlation between positions' R² trajectories. ``lengthgen report RUN_DIR``
writes the same data as plot-ready CSV files.

Run:  python notebooks/03_learning_dynamics.py RUN_DIR
"""

import sys

import numpy as np

from lengthgen.evaluator import r2_correlation, trace_from_rows
from lengthgen.trainer import read_metrics

run_dir = sys.argv[1]
rows = read_metrics(f"{run_dir}/metrics.csv")

digit_keys = sorted((k for k in rows[0] if k.startswith("digit_")), key=lambda k: int(k.split("_")[1]))
print("step   loss    " + " ".join(f"{k:>8}" for k in digit_keys))
for row in rows:
    print(f"{row['step']:>5} {row['loss']:.4f}  " + " ".join(f"{row[k]:>8.3f}" for k in digit_keys))

trace = trace_from_rows(rows)
print()
print("R² per position (rows: checkpoints)")
print(np.round(trace.matrix(), 3))

if len(trace.steps) >= 3:
    print()
    print("correlation of R² trajectories (NaN: constant or undefined trajectory)")
    print(np.round(r2_correlation(trace), 3))
