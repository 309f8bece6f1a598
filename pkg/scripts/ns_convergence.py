"""How many Newton-Schulz steps the trace-normalised iteration needs.

For random SPD matrices of a given size and condition number, prints the
worst entrywise gap to the exact inverse square root and the output
covariance error ||W S W - I||_F for T = 1..T_max. Useful when choosing
``ns_iters`` for wider feature dimensions.
"""

import argparse
from dataclasses import dataclass

import numpy as np

from divnorm.numerics import exact_inv_sqrt, newton_schulz_inv_sqrt, whitening_error


@dataclass
class Sweep:
    d: int = 16
    max_cond: float = 100.0
    n_matrices: int = 20
    t_max: int = 14
    seed: int = 0


def random_spd(rng, d, cond):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return (Q * np.geomspace(1.0, cond, d)) @ Q.T


def run(sweep: Sweep):
    rng = np.random.default_rng(sweep.seed)
    mats = [random_spd(rng, sweep.d, rng.uniform(1.0, sweep.max_cond)) for _ in range(sweep.n_matrices)]
    exact = [exact_inv_sqrt(S) for S in mats]
    print("T,max_entry_gap,max_whitening_error")
    for T in range(1, sweep.t_max + 1):
        gaps, werrs = [], []
        for S, We in zip(mats, exact):
            W = newton_schulz_inv_sqrt(S, T)
            gaps.append(np.max(np.abs(W - We)))
            werrs.append(whitening_error(W, S))
        print(f"{T},{max(gaps):.3e},{max(werrs):.3e}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    for name, default in vars(Sweep()).items():
        ap.add_argument(f"--{name.replace('_', '-')}", type=type(default), default=default)
    run(Sweep(**vars(ap.parse_args())))
