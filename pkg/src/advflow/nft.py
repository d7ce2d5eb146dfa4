"""DiffusionNFT branch loss and its equivalence to AdvantageFlow.

The branch loss lives in velocity space::

    v+ = (1 - beta) v_old + beta v_theta
    v- = (1 + beta) v_old - beta v_theta
    loss = r ||v+ - v||^2 + (1 - r) ||v- - v||^2

with ``v = eps - x0`` and ``r`` in [0, 1].  Multiplied by ``t^2`` (the map
from velocity to prediction residuals) it differs from the AdvantageFlow loss
with advantage weight ``beta * A``, ``gamma = beta * (beta - A)`` and
``lambda = 0`` only by ``t^2 (1 - beta A) ||v_old - v||^2``, which does not
depend on ``theta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .nn import backward, forward
from .rl import advantageflow_loss
from .rng import make_rng


@dataclass(frozen=True)
class NftBranchInputs:
    beta: float
    r_norm: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r_norm, dtype=np.float64)
        if np.any(r < 0) or np.any(r > 1):
            raise InputError("r_norm must lie in [0, 1]")
        object.__setattr__(self, "r_norm", r)

    @property
    def A(self):
        return 2 * self.r_norm - 1


@dataclass
class BranchVectors:
    v_target: np.ndarray
    v_old: np.ndarray
    v_theta: np.ndarray

    @property
    def d(self):
        return self.v_theta - self.v_old

    @property
    def e(self):
        return self.v_old - self.v_target


def branch_vectors(triple, x0, xt, t, c):
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],))
    if np.any(tt <= 0):
        raise InputError("branch loss needs t > 0 to recover the velocity target")
    v_target = (xt - x0) / tt[:, None]
    return BranchVectors(v_target, forward(triple.rollout, xt, tt, c),
                         forward(triple.learned, xt, tt, c))


def nft_branch_per_sample(triple, inputs, x0, xt, t, c):
    """Per-sample branch losses and the upstream gradient w.r.t. ``v_theta``."""
    bv = branch_vectors(triple, x0, xt, t, c)
    beta = inputs.beta
    r = np.broadcast_to(inputs.r_norm, (bv.v_target.shape[0],))[:, None]
    pos = (1 - beta) * bv.v_old + beta * bv.v_theta - bv.v_target
    neg = (1 + beta) * bv.v_old - beta * bv.v_theta - bv.v_target
    loss = r[:, 0] * np.sum(pos**2, axis=1) + (1 - r[:, 0]) * np.sum(neg**2, axis=1)
    dv = 2 * beta * (r * pos - (1 - r) * neg)
    return loss, dv, bv


def nft_branch_loss(triple, inputs, x0, xt, t, c=None):
    """Batch-mean branch loss and its gradient w.r.t. the learned params."""
    loss, dv, _ = nft_branch_per_sample(triple, inputs, x0, xt, t, c)
    n = loss.shape[0]
    return float(loss.mean()), backward(triple.learned, xt, t, c, dv / n)


def nft_expansion(bv, beta, A):
    """``||e||^2 + beta^2 ||d||^2 + 2 beta A <e, d>`` per sample."""
    d, e = bv.d, bv.e
    return np.sum(e * e, 1) + beta**2 * np.sum(d * d, 1) + 2 * beta * A * np.sum(e * d, 1)


def draw_equivalence_samples(rng, arch, n, t_range=(0.05, 1.0)):
    """Fresh ``(x0, eps, t, c, r_norm)`` draws for the equivalence check."""
    x0 = rng.standard_normal((n, arch.data_dim))
    eps = rng.standard_normal((n, arch.data_dim))
    t = rng.uniform(*t_range, size=n)
    c = rng.standard_normal((n, arch.cond_dim))
    r = rng.uniform(0, 1, size=n)
    return {"x0": x0, "eps": eps, "t": t, "c": c, "r_norm": r}


@dataclass
class EquivalenceReport:
    beta: float
    n_samples: int
    max_grad_abs_diff: float
    max_gap_theta_drift: float
    max_gap_formula_err: float
    passed: bool

    def to_dict(self):
        return dict(self.__dict__)


def _per_sample(triple, beta, s, i):
    x0, t, c = s["x0"][i], s["t"][i], s["c"][i]
    xt = (1 - t) * x0 + t * s["eps"][i]
    inputs = NftBranchInputs(beta, s["r_norm"][i])
    A = float(inputs.A)
    nft, g_nft = nft_branch_loss(triple, inputs, x0, xt, t, c)
    lb, g_af = advantageflow_loss(triple, beta * A, x0, xt, t, c, beta * (beta - A), 0.0)
    gap = t**2 * nft - lb.total
    bv = branch_vectors(triple, x0, xt, t, c)
    expected_gap = t**2 * (1 - beta * A) * float(np.sum(bv.e**2))
    return t**2 * g_nft, g_af, gap, expected_gap


def equivalence_check(triple, beta, samples, perturb_scale=0.05, seed=0,
                      grad_tol=1e-8, gap_tol=1e-10):
    """Compare scaled branch-loss gradients with prediction-space AdvantageFlow.

    For every sample the velocity-space branch loss is mapped to prediction
    space by the factor ``t^2``; its gradient must match that of
    ``advantageflow_loss`` with weight ``beta * A``, ``gamma = beta (beta - A)``
    and ``lambda = 0``.  The loss gap is then re-evaluated after a random
    perturbation of the learned params and must not move.
    """
    n = len(samples["t"])
    if any(len(v) != n for v in samples.values()):
        raise InputError("equivalence samples have inconsistent lengths")
    arch = triple.learned.arch
    if samples["x0"].shape[1:] != (arch.data_dim,) or samples["c"].shape[1:] != (arch.cond_dim,):
        raise InputError("equivalence samples do not match the model dimensions")
    rng = make_rng(seed, "nft_perturb")
    perturbed = type(triple)(
        triple.learned.with_params(triple.learned.params
                                   + perturb_scale * rng.standard_normal(arch.n_params)),
        triple.rollout, triple.reference)
    max_grad = max_drift = max_formula = 0.0
    for i in range(n):
        g_nft, g_af, gap, expected = _per_sample(triple, beta, samples, i)
        _, _, gap2, _ = _per_sample(perturbed, beta, samples, i)
        max_grad = max(max_grad, float(np.max(np.abs(g_nft - g_af))))
        max_drift = max(max_drift, float(abs(gap - gap2)))
        max_formula = max(max_formula, float(abs(gap - expected)))
    passed = bool(max_grad <= grad_tol and max_drift <= gap_tol)
    return EquivalenceReport(float(beta), n, max_grad, max_drift, max_formula, passed)
