"""
Inward yes, outward no: a desk-scale addition run
=================================================

Trains the desk addition profile (D_3 operands, learned absolute positions),
then prints accuracy against the true sum f and against the truncated sum
f^ on shorter and longer operands. The run is cached under .runs/ and
reused on later invocations.

Run:  python notebooks/02_desk_addition.py [configs/desk_add_d3.json]
"""

import sys
from pathlib import Path

from lengthgen.experiment import ExperimentConfig, cached_run

root = Path(__file__).resolve().parents[1]
config = Path(sys.argv[1]) if len(sys.argv) > 1 else root / "configs" / "desk_add_d3.json"
cfg = ExperimentConfig.load(config)
run_dir, report = cached_run(cfg, root / ".runs")

print(f"run directory: {run_dir}")
print((run_dir / "report.txt").read_text())

# the digit-wise view shows where outward answers go wrong: every position up
# to n + 1 matches f^, and the higher positions of the true sum are never produced
for row in report["rows"]:
    digits = " ".join(f"{d:.2f}" for d in row["digitwise"])
    print(f"{row['suite']:>8}  digit-wise (teacher forced): {digits}")
