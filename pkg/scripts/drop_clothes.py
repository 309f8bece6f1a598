"""Retrain with fewer training outfits per identity and track CC mAP."""

from collections import defaultdict

import numpy as np
from _common import emit, parse

from divnorm import experiments

cfg, args = parse(__doc__)
rows = experiments.drop_clothes_ablation(cfg)
emit(experiments.results_csv(experiments.DROP_CLOTHES_HEADER, rows), args.out, cfg, "drop_clothes")

trend = defaultdict(list)
for r in rows:
    trend[r.label].append(r.report.mAP)
for keep, maps in sorted(trend.items(), key=lambda kv: float(kv[0])):
    print(f"# keep {keep}: mean CC mAP {np.mean(maps):.4f} over {len(maps)} seeds")
