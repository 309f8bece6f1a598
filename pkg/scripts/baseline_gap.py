"""Full model against the single-head cross-entropy baseline (CC rank-1)."""

import numpy as np
from _common import emit, parse

from divnorm import experiments

cfg, args = parse(__doc__)
rows = experiments.baseline_comparison(cfg)
emit(experiments.results_csv(experiments.BASELINE_HEADER, rows), args.out, cfg, "baseline_gap")

full = [r.report.rank(1) for r in rows if r.label == "diverse_norm"]
base = [r.report.rank(1) for r in rows if r.label == "baseline"]
print(f"# mean CC rank-1: full {np.mean(full):.3f}  baseline {np.mean(base):.3f}  gap {np.mean(full) - np.mean(base):+.3f}")
