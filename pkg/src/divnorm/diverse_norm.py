"""Whitening, channel-attention split and relative-difficulty re-weighting.

The model pipeline is::

    x -> backbone -> whiten (psi) -> gate (omega) -> h_id = psi*omega
                                                    h_c  = psi*(1-omega)
      h_id -> head_id,  h_c -> head_c   (both predict person identity)

and the training objective per sample is ``w_c * CE(head_id) + CE(head_c)``
where ``w_c = 2 L_c / (L_id + L_c)`` is computed from the current losses and
treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from . import diffnet
from .diffnet import Param
from .errors import ConfigError, ContractViolation, DegenerateBatchError, UninitializedStatsError
from .numerics import (
    DEFAULT_NS_ITERS,
    DEFAULT_RIDGE,
    SeededRng,
    covariance,
    exact_inv_sqrt,
    newton_schulz_inv_sqrt_vjp,
)

WhiteningMethod = Literal["exact", "newton_schulz"]

# largest double below 1 and smallest normal double: keeps the gate in (0, 1)
OMEGA_MAX = float(np.nextafter(1.0, 0.0))
OMEGA_MIN = float(np.finfo(np.float64).tiny)


@dataclass(frozen=True)
class WhiteningState:
    dim: int
    momentum: float = 0.1
    eps: float = DEFAULT_RIDGE
    T: int = DEFAULT_NS_ITERS
    method: WhiteningMethod = "newton_schulz"
    mode: Literal["train", "eval"] = "train"
    running_mean: np.ndarray = None
    running_cov: np.ndarray = None
    num_updates: int = 0
    # eval-mode whitening matrix, built lazily from the running covariance
    _eval_W: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 0 < self.momentum <= 1:
            raise ConfigError("momentum must lie in (0, 1]")
        if self.method not in ("exact", "newton_schulz"):
            raise ConfigError(f"unknown whitening method {self.method!r}")
        if self.running_mean is None:
            object.__setattr__(self, "running_mean", np.zeros(self.dim))
        if self.running_cov is None:
            object.__setattr__(self, "running_cov", np.eye(self.dim))

    def train(self) -> "WhiteningState":
        return replace(self, mode="train")

    def eval(self) -> "WhiteningState":
        return replace(self, mode="eval")

    def whitening_matrix(self, sigma):
        if self.method == "exact":
            return exact_inv_sqrt(sigma)
        W, _ = newton_schulz_inv_sqrt_vjp(sigma, self.T)
        return W

    def eval_matrix(self) -> np.ndarray:
        if self.num_updates == 0:
            raise UninitializedStatsError("whitening running statistics were never updated by a train step")
        if self._eval_W is None:
            object.__setattr__(self, "_eval_W", self.whitening_matrix(self.running_cov))
        return self._eval_W


def whiten(X, state: WhiteningState, update_stats: bool = True):
    """Whiten a batch: ``psi = (X - mu) W^T`` with ``W^T W = Sigma^-1``.

    Returns ``(psi, new_state, backward)``. In train mode the batch mean and
    covariance are used and folded into the running statistics (unless
    ``update_stats`` is false). With ``method="newton_schulz"`` the backward
    pass goes through the batch statistics and the unrolled iteration; with
    ``method="exact"`` and in eval mode ``mu`` and ``W`` are constants.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != state.dim:
        raise ContractViolation(f"whiten: expected n x {state.dim} input, got {X.shape}")

    if state.mode == "eval":
        W = state.eval_matrix()
        psi = (X - state.running_mean) @ W.T
        return psi, state, lambda grad_psi: grad_psi @ W

    n = X.shape[0]
    if n < 2:
        raise DegenerateBatchError(f"train-mode whitening needs at least 2 samples, got {n}")
    mu, sigma = covariance(X, state.eps)
    Xc = X - mu
    if state.method == "exact":
        W = exact_inv_sqrt(sigma)
        ns_backward = None
    else:
        W, ns_backward = newton_schulz_inv_sqrt_vjp(sigma, state.T)
    psi = Xc @ W.T

    new_state = state
    if update_stats:
        m = state.momentum
        new_state = replace(
            state,
            running_mean=(1 - m) * state.running_mean + m * mu,
            running_cov=(1 - m) * state.running_cov + m * sigma,
            num_updates=state.num_updates + 1,
            _eval_W=None,
        )

    def backward(grad_psi):
        grad_psi = np.asarray(grad_psi, dtype=np.float64)
        if ns_backward is None:
            return grad_psi @ W
        grad_Xc = grad_psi @ W
        grad_sigma = ns_backward(grad_psi.T @ Xc)
        grad_Xc = grad_Xc + Xc @ (grad_sigma + grad_sigma.T) / n
        return grad_Xc - grad_Xc.mean(axis=0)

    return psi, new_state, backward


@dataclass
class GateParams:
    """Channel-attention map. ``hidden`` is empty for the single d->d layer."""

    fc: list[Param]
    hidden: list[Param] = field(default_factory=list)

    @classmethod
    def init(cls, rng: SeededRng, d: int, variant: str = "single", reduction: int = 4) -> "GateParams":
        if variant == "single":
            return cls(fc=diffnet.init_linear(rng, "gate.fc", d, d))
        if variant == "two_layer":
            r = max(1, d // reduction)
            hidden = diffnet.init_linear(rng, "gate.fc1", d, r)
            return cls(fc=diffnet.init_linear(rng, "gate.fc2", r, d), hidden=hidden)
        raise ConfigError(f"unknown gate variant {variant!r}")

    def params(self) -> list[Param]:
        return [*self.hidden, *self.fc]


def attention_gate(psi, gate: GateParams):
    """``omega = sigmoid(fc(gap(psi)))``, one gate vector per sample.

    Backward returns ``(grad_psi, {param_name: grad})``.
    """
    pooled, pool_bw = diffnet.global_avg_pool(psi)
    h = pooled
    hidden_bw = None
    if gate.hidden:
        w1, b1 = gate.hidden
        z, lin1_bw = diffnet.linear(h, w1.value, b1.value)
        h, relu_bw = diffnet.relu(z)
        hidden_bw = (lin1_bw, relu_bw)
    w, b = gate.fc
    logits, lin_bw = diffnet.linear(h, w.value, b.value)
    omega, sig_bw = diffnet.sigmoid(logits)
    # the sigmoid derivative is already exactly 0 wherever this clamps
    omega = np.clip(omega, OMEGA_MIN, OMEGA_MAX)

    def backward(grad_omega):
        grads = {}
        g = sig_bw(grad_omega)
        g, grads[w.name], grads[b.name] = lin_bw(g)
        if hidden_bw is not None:
            lin1_bw, relu_bw = hidden_bw
            g = relu_bw(g)
            g, grads[gate.hidden[0].name], grads[gate.hidden[1].name] = lin1_bw(g)
        return pool_bw(g), grads

    return omega, backward


def split_features(psi, omega):
    psi = np.asarray(psi, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if psi.shape != omega.shape:
        raise ContractViolation(f"psi {psi.shape} and omega {omega.shape} differ in shape")
    h_id = psi * omega
    h_c = psi * (1.0 - omega)

    def backward(grad_id, grad_c):
        grad_psi = grad_id * omega + grad_c * (1.0 - omega)
        grad_omega = (grad_id - grad_c) * psi
        return grad_psi, grad_omega

    return h_id, h_c, backward


@dataclass(frozen=True)
class ReweightScores:
    w_id: np.ndarray
    w_c: np.ndarray


def reweight_scores(loss_id, loss_c) -> ReweightScores:
    """Relative difficulty ``w_c = 2 L_c / (L_id + L_c)`` with ``w_id = 1``.

    A sample whose two losses are both zero gets ``w_c = 1``.
    """
    loss_id = np.asarray(loss_id, dtype=np.float64)
    loss_c = np.asarray(loss_c, dtype=np.float64)
    if loss_id.shape != loss_c.shape:
        raise ContractViolation("loss vectors differ in shape")
    if np.any(loss_id < 0) or np.any(loss_c < 0):
        raise ContractViolation("losses must be non-negative")
    total = loss_id + loss_c
    safe = np.where(total > 0, total, 1.0)
    w_c = np.where(total > 0, 2.0 * loss_c / safe, 1.0)
    return ReweightScores(w_id=np.ones_like(w_c), w_c=np.clip(w_c, 0.0, 2.0))


@dataclass(frozen=True)
class BranchEmbeddings:
    psi: np.ndarray
    omega: np.ndarray
    h_id: np.ndarray
    h_c: np.ndarray


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    n_classes: int
    dim: int = 16
    hidden: tuple[int, ...] = ()
    kind: Literal["diverse_norm", "baseline"] = "diverse_norm"
    whitening: WhiteningMethod = "newton_schulz"
    ns_iters: int = DEFAULT_NS_ITERS
    eps: float = DEFAULT_RIDGE
    momentum: float = 0.1
    gate: Literal["single", "two_layer"] = "single"
    gate_reduction: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("diverse_norm", "baseline"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.d_in < 1 or self.dim < 1 or self.n_classes < 1:
            raise ConfigError("model dimensions must be positive")


@dataclass
class LossOutput:
    total: float
    grads: dict[str, np.ndarray]
    loss_id: np.ndarray
    loss_c: np.ndarray
    w_c: np.ndarray


class Backbone:
    """Fully-connected stack; ReLU between layers, none after the last."""

    def __init__(self, rng: SeededRng, d_in: int, hidden: tuple[int, ...], d_out: int):
        dims = [d_in, *hidden, d_out]
        self.layers = [
            diffnet.init_linear(rng, f"backbone.{i}", dims[i], dims[i + 1]) for i in range(len(dims) - 1)
        ]

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer]

    def forward(self, x):
        steps = []
        h = x
        for i, (w, b) in enumerate(self.layers):
            h, lin_bw = diffnet.linear(h, w.value, b.value)
            act_bw = None
            if i < len(self.layers) - 1:
                h, act_bw = diffnet.relu(h)
            steps.append((w.name, b.name, lin_bw, act_bw))

        def backward(grad_out):
            grads = {}
            g = grad_out
            for wname, bname, lin_bw, act_bw in reversed(steps):
                if act_bw is not None:
                    g = act_bw(g)
                g, grads[wname], grads[bname] = lin_bw(g)
            return g, grads

        return h, backward


class _Net:
    config: ModelConfig

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def get_flat(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_params().items()}

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()


class DiverseNormNet(_Net):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = SeededRng(config.seed, 1)
        self.backbone = Backbone(rng.child(0), config.d_in, config.hidden, config.dim)
        self.gate = GateParams.init(rng.child(1), config.dim, config.gate, config.gate_reduction)
        head_rng = rng.child(2)
        self.head_id = diffnet.init_linear(head_rng, "head_id", config.dim, config.n_classes)
        self.head_c = diffnet.init_linear(head_rng, "head_c", config.dim, config.n_classes)
        self.whitening = WhiteningState(
            dim=config.dim,
            momentum=config.momentum,
            eps=config.eps,
            T=config.ns_iters,
            method=config.whitening,
        )

    def params(self) -> list[Param]:
        return [*self.backbone.params(), *self.gate.params(), *self.head_id, *self.head_c]

    def branches(self, x, mode="train", update_stats=True):
        """Forward through backbone, whitening, gate and split.

        Returns ``(BranchEmbeddings, backward)`` where
        ``backward(grad_h_id, grad_h_c)`` returns parameter gradients.
        """
        feats, bb_bw = self.backbone.forward(np.asarray(x, dtype=np.float64))
        state = self.whitening.train() if mode == "train" else self.whitening.eval()
        psi, new_state, wh_bw = whiten(feats, state, update_stats=update_stats and mode == "train")
        if mode == "train":
            self.whitening = new_state.train()
        else:
            # keep the cached eval matrix
            self.whitening = new_state
        omega, gate_bw = attention_gate(psi, self.gate)
        h_id, h_c, split_bw = split_features(psi, omega)

        def backward(grad_id, grad_c):
            grad_psi, grad_omega = split_bw(grad_id, grad_c)
            g_psi_gate, grads = gate_bw(grad_omega)
            grad_feats = wh_bw(grad_psi + g_psi_gate)
            _, bb_grads = bb_bw(grad_feats)
            grads.update(bb_grads)
            return grads

        return BranchEmbeddings(psi=psi, omega=omega, h_id=h_id, h_c=h_c), backward

    def embed(self, x):
        """Eval-mode ``(h_id, h_c)`` for retrieval."""
        emb, _ = self.branches(x, mode="eval")
        return emb.h_id, emb.h_c

    def loss(self, x, y, w_c=None, update_stats=True) -> LossOutput:
        return dual_branch_loss(self, x, y, w_c=w_c, update_stats=update_stats)


class BaselineNet(_Net):
    """Same backbone, one identity head, plain cross-entropy, no whitening."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = SeededRng(config.seed, 1)
        self.backbone = Backbone(rng.child(0), config.d_in, config.hidden, config.dim)
        self.head = diffnet.init_linear(rng.child(2), "head", config.dim, config.n_classes)
        self.whitening = None

    def params(self) -> list[Param]:
        return [*self.backbone.params(), *self.head]

    def embed(self, x):
        feats, _ = self.backbone.forward(np.asarray(x, dtype=np.float64))
        return feats, np.zeros_like(feats)

    def loss(self, x, y, w_c=None, update_stats=True) -> LossOutput:
        feats, bb_bw = self.backbone.forward(np.asarray(x, dtype=np.float64))
        w, b = self.head
        logits, lin_bw = diffnet.linear(feats, w.value, b.value)
        losses, ce_bw = diffnet.softmax_cross_entropy(logits, y)
        n = losses.shape[0]
        g, gw, gb = lin_bw(ce_bw(np.full(n, 1.0 / n)))
        _, grads = bb_bw(g)
        grads[w.name] = gw
        grads[b.name] = gb
        return LossOutput(
            total=float(losses.mean()),
            grads=grads,
            loss_id=losses,
            loss_c=np.zeros(n),
            w_c=np.ones(n),
        )


def build_model(config: ModelConfig):
    if config.kind == "baseline":
        return BaselineNet(config)
    return DiverseNormNet(config)


def dual_branch_loss(model: DiverseNormNet, x, y, w_c=None, update_stats=True) -> LossOutput:
    """Re-weighted two-head identity loss and its parameter gradients.

    ``total = mean_i(w_c[i] * CE_id[i] + CE_c[i])``. ``w_c`` defaults to the
    relative difficulty of the current batch; it never carries gradient. Pass
    an explicit ``w_c`` to hold the weights fixed (gradient checks).
    """
    y = np.asarray(y)
    emb, branch_bw = model.branches(x, mode="train", update_stats=update_stats)
    (wi, bi), (wc, bc) = model.head_id, model.head_c
    logits_id, lin_id_bw = diffnet.linear(emb.h_id, wi.value, bi.value)
    logits_c, lin_c_bw = diffnet.linear(emb.h_c, wc.value, bc.value)
    loss_id, ce_id_bw = diffnet.softmax_cross_entropy(logits_id, y)
    loss_c, ce_c_bw = diffnet.softmax_cross_entropy(logits_c, y)
    if w_c is None:
        w_c = reweight_scores(loss_id, loss_c).w_c
    w_c = np.asarray(w_c, dtype=np.float64)
    n = y.shape[0]
    total = float(np.mean(w_c * loss_id + loss_c))

    g_id, grad_wi, grad_bi = lin_id_bw(ce_id_bw(w_c / n))
    g_c, grad_wc, grad_bc = lin_c_bw(ce_c_bw(np.full(n, 1.0 / n)))
    grads = branch_bw(g_id, g_c)
    grads.update({wi.name: grad_wi, bi.name: grad_bi, wc.name: grad_wc, bc.name: grad_bc})
    return LossOutput(total=total, grads=grads, loss_id=loss_id, loss_c=loss_c, w_c=w_c)
