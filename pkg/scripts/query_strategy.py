"""Score one trained model per seed with both query strategies.

    python scripts/query_strategy.py --set seeds=0,1,2 --out runs/query_strategy.csv
"""

import numpy as np
from _common import emit, parse

from divnorm import experiments

cfg, args = parse(__doc__)
rows = experiments.query_strategy_ablation(cfg)
emit(experiments.results_csv(experiments.QUERY_STRATEGY_HEADER, rows), args.out, cfg, "query_strategy")

for protocol in cfg.protocols:
    by = {s: [r.report.mAP for r in rows if r.report.protocol == protocol and r.report.strategy == s] for s in cfg.strategies}
    summary = "  ".join(f"{s} {np.mean(v):.4f}" for s, v in by.items())
    print(f"# {protocol}: mean mAP  {summary}")
