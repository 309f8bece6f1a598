"""Finite-difference verification of every hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnet
from .diverse_norm import (
    BaselineNet,
    DiverseNormNet,
    GateParams,
    ModelConfig,
    WhiteningState,
    attention_gate,
    split_features,
    whiten,
)
from .numerics import SeededRng, finite_diff_gradient, newton_schulz_inv_sqrt_vjp, relative_error

LAYER_TOL = 1e-6
MODEL_TOL = 1e-5


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    rel_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.rel_error <= self.tol


def _readout(rng, shape):
    """Random cotangent ``G``; the checked scalar is ``sum(G * output)``."""
    return rng.normal(size=shape)


def check_linear(rng: SeededRng, n=4, d_in=3, d_out=2):
    x = rng.normal(size=(n, d_in))
    W = rng.normal(size=(d_out, d_in))
    b = rng.normal(size=d_out)
    G = _readout(rng, (n, d_out))
    _, bw = diffnet.linear(x, W, b)
    gx, gW, gb = bw(G)
    f = lambda x_, W_, b_: float(np.sum(G * diffnet.linear(x_, W_, b_)[0]))
    return max(
        relative_error(gx, finite_diff_gradient(lambda v: f(v, W, b), x)),
        relative_error(gW, finite_diff_gradient(lambda v: f(x, v, b), W)),
        relative_error(gb, finite_diff_gradient(lambda v: f(x, W, v), b)),
    )


def check_elementwise(op, rng: SeededRng, shape=(4, 5), scale=2.0):
    x = rng.normal(size=shape) * scale
    G = _readout(rng, shape)
    _, bw = op(x)
    num = finite_diff_gradient(lambda v: float(np.sum(G * op(v)[0])), x)
    return relative_error(bw(G), num)


def check_cross_entropy(rng: SeededRng, n=5, C=4):
    logits = rng.normal(size=(n, C)) * 2
    labels = rng.integers(0, C, size=n)
    weights = rng.uniform(0.1, 2.0, size=n)
    _, bw = diffnet.softmax_cross_entropy(logits, labels)
    num = finite_diff_gradient(
        lambda v: float(np.sum(weights * diffnet.softmax_cross_entropy(v, labels)[0])), logits
    )
    return relative_error(bw(weights), num)


def check_global_avg_pool(rng: SeededRng, n=2, d=3, s=4):
    x = rng.normal(size=(n, d, s))
    G = _readout(rng, (n, d))
    _, bw = diffnet.global_avg_pool(x)
    num = finite_diff_gradient(lambda v: float(np.sum(G * diffnet.global_avg_pool(v)[0])), x)
    return relative_error(bw(G), num)


def check_newton_schulz(rng: SeededRng, d=4, T=5):
    A = rng.normal(size=(d, d))
    sigma = A @ A.T + 0.5 * np.eye(d)
    G = _readout(rng, (d, d))
    _, bw = newton_schulz_inv_sqrt_vjp(sigma, T)
    num = finite_diff_gradient(lambda s: float(np.sum(G * newton_schulz_inv_sqrt_vjp(s, T)[0])), sigma)
    return relative_error(bw(G), num)


def check_whiten(rng: SeededRng, n=8, d=4, method="newton_schulz"):
    X = rng.normal(size=(n, d)) @ rng.normal(size=(d, d))
    state = WhiteningState(dim=d, method=method)
    G = _readout(rng, (n, d))
    _, _, bw = whiten(X, state, update_stats=False)
    num = finite_diff_gradient(lambda v: float(np.sum(G * whiten(v, state, update_stats=False)[0])), X)
    return relative_error(bw(G), num)


def check_gate(rng: SeededRng, n=5, d=4, variant="single"):
    psi = rng.normal(size=(n, d))
    gate = GateParams.init(rng, d, variant, reduction=2)
    for p in gate.params():
        p.value = p.value + rng.normal(size=p.value.shape) * 0.1
    G = _readout(rng, (n, d))
    _, bw = attention_gate(psi, gate)
    g_psi, g_params = bw(G)
    errs = [relative_error(g_psi, finite_diff_gradient(lambda v: float(np.sum(G * attention_gate(v, gate)[0])), psi))]
    for p in gate.params():
        def f(v, p=p):
            old = p.value
            p.value = v
            try:
                return float(np.sum(G * attention_gate(psi, gate)[0]))
            finally:
                p.value = old

        errs.append(relative_error(g_params[p.name], finite_diff_gradient(f, p.value)))
    return max(errs)


def check_split(rng: SeededRng, n=4, d=3):
    psi = rng.normal(size=(n, d))
    omega = rng.uniform(0.01, 0.99, size=(n, d))
    Gi, Gc = _readout(rng, (n, d)), _readout(rng, (n, d))
    _, _, bw = split_features(psi, omega)
    g_psi, g_omega = bw(Gi, Gc)

    def f(p, o):
        hi, hc, _ = split_features(p, o)
        return float(np.sum(Gi * hi) + np.sum(Gc * hc))

    return max(
        relative_error(g_psi, finite_diff_gradient(lambda v: f(v, omega), psi)),
        relative_error(g_omega, finite_diff_gradient(lambda v: f(psi, v), omega)),
    )


def model_param_errors(model, x, y, w_c=None) -> dict[str, float]:
    """Per-tensor relative error of ``model.loss`` gradients, weights fixed."""
    out = model.loss(x, y, w_c=w_c, update_stats=False)
    if w_c is None:
        w_c = out.w_c
    errs = {}
    for name, p in model.named_params().items():
        def f(v, p=p):
            old = p.value
            p.value = v
            try:
                return model.loss(x, y, w_c=w_c, update_stats=False).total
            finally:
                p.value = old

        errs[name] = relative_error(out.grads[name], finite_diff_gradient(f, p.value))
    return errs


def check_dual_branch(seed: int, n=8, d=6, C=4, **model_kw):
    rng = SeededRng(seed, 900)
    cfg = ModelConfig(d_in=d, n_classes=C, dim=d, seed=seed, **model_kw)
    model = DiverseNormNet(cfg)
    x = rng.normal(size=(n, d))
    y = rng.integers(0, C, size=n)
    return max(model_param_errors(model, x, y).values())


def check_two_layer_net(seed: int, n=8, d_in=5, hidden=7, d=4, C=3):
    rng = SeededRng(seed, 901)
    cfg = ModelConfig(d_in=d_in, n_classes=C, dim=d, hidden=(hidden,), kind="baseline", seed=seed)
    model = BaselineNet(cfg)
    # shift biases so few ReLU units sit on the kink
    for p in model.params():
        if p.name.endswith("bias"):
            p.value = p.value + rng.uniform(0.2, 0.5, size=p.value.shape)
    x = rng.normal(size=(n, d_in))
    y = rng.integers(0, C, size=n)
    return max(model_param_errors(model, x, y).values())


LAYER_CHECKS = {
    "linear": check_linear,
    "sigmoid": lambda rng: check_elementwise(diffnet.sigmoid, rng),
    "relu": lambda rng: check_elementwise(diffnet.relu, rng),
    "softmax_cross_entropy": check_cross_entropy,
    "global_avg_pool": check_global_avg_pool,
    "newton_schulz": check_newton_schulz,
    "whiten_newton_schulz": check_whiten,
    "attention_gate": check_gate,
    "attention_gate_two_layer": lambda rng: check_gate(rng, variant="two_layer"),
    "split_features": check_split,
}


def run_suite(seed: int = 0, n_seeds: int = 1, layer_points: int = 1) -> list[GradCheckResult]:
    results = []
    for name, fn in LAYER_CHECKS.items():
        worst = max(fn(SeededRng(seed, 800, i)) for i in range(layer_points))
        results.append(GradCheckResult(name, worst, LAYER_TOL))
    seeds = range(seed, seed + n_seeds)
    results.append(GradCheckResult("dual_branch_loss", max(check_dual_branch(s) for s in seeds), MODEL_TOL))
    results.append(GradCheckResult("two_layer_net", max(check_two_layer_net(s) for s in seeds), MODEL_TOL))
    return results
