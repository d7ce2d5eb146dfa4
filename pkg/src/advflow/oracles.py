"""Exact checks of the distribution-level theory on finite supports and Gaussian toys.

On a finite support every expectation is a finite sum, so the tilt,
reward-gain and Fisher-Rao identities can be tested without sampling noise.
The variance-reduction statement is inherently statistical and is checked on
a Gaussian prior where the posterior mean of ``x0`` given ``x_t`` is linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, TiltError
from .flow import T_MIN, predict_clean
from .nn import backward


@dataclass(frozen=True)
class FiniteDist:
    support: np.ndarray
    probs: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.float64)
        if support.ndim == 1:
            support = support[:, None]
        probs = np.asarray(self.probs, dtype=np.float64)
        rewards = np.asarray(self.rewards, dtype=np.float64)
        n = support.shape[0]
        if probs.shape != (n,) or rewards.shape != (n,):
            raise InputError("support, probs and rewards must have matching lengths")
        if np.any(probs < 0):
            raise InputError("probabilities must be nonnegative")
        if abs(math.fsum(probs) - 1.0) > 1e-12:
            raise InputError(f"probabilities sum to {math.fsum(probs)!r}, not 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "rewards", rewards)

    @classmethod
    def random(cls, rng, n, dim=1, reward_scale=1.0, min_prob=0.0):
        p = rng.dirichlet(np.ones(n)) * (1 - n * min_prob) + min_prob
        p = p / math.fsum(p)
        return cls(rng.standard_normal((n, dim)), p, reward_scale * rng.standard_normal(n))

    def expect(self, values):
        return math.fsum(self.probs * values)

    def mean_reward(self):
        return self.expect(self.rewards)

    def reward_var(self):
        return self.expect((self.rewards - self.mean_reward()) ** 2)


def centered_advantage(dist):
    """``r(x) - E_p[r]`` on the support."""
    return dist.rewards - dist.mean_reward()


def _tangent(dist):
    return centered_advantage(dist) * dist.probs


def max_tilt(dist):
    """Largest ``eta`` keeping ``1 + eta * A`` nonnegative (``inf`` if none binds)."""
    lo = centered_advantage(dist).min()
    return math.inf if lo >= 0 else 1.0 / abs(lo)


def tilt(dist, eta):
    """``q = (1 + eta A) p``, computed as ``p + eta * (A p)``.

    Raises :class:`TiltError` if ``eta`` exceeds :func:`max_tilt`.
    """
    A = centered_advantage(dist)
    bound = max_tilt(dist)
    if eta < 0:
        raise InputError("eta must be nonnegative")
    if eta > bound:
        i = int(np.argmin(A))
        raise TiltError(
            f"1 + eta*A < 0 at support point {i} (A={A[i]:.6g}); "
            f"largest admissible eta is {bound:.6g}", index=i, max_eta=bound)
    q = dist.probs + eta * _tangent(dist)
    # rounding at the boundary eta == 1/|min A| can leave -1e-17
    q = np.where(q < 0, 0.0, q)
    return FiniteDist(dist.support, q, dist.rewards)


def reward_gain(dist, eta):
    """``E_q[r] - E_p[r]`` for the tilted ``q``; equals ``eta * Var_p(r)``."""
    q = tilt(dist, eta)
    return q.mean_reward() - dist.mean_reward()


def fisher_rao_direction(dist):
    """Natural-gradient direction ``A p`` of expected reward under Fisher-Rao."""
    if np.any(dist.probs <= 0):
        i = int(np.flatnonzero(dist.probs <= 0)[0])
        raise InputError(f"support point {i} has zero probability; tangent u*p undefined")
    return _tangent(dist)


def zero_mean_tests(rng, dist, m):
    """``m`` random test functions with ``E_p[u] = 0``, shape ``(m, n)``."""
    U = rng.standard_normal((m, dist.probs.size))
    return U - (U @ dist.probs)[:, None]


def fisher_rao_condition_error(dist, tests):
    """Max ``|<u*, u>_p - E_p[r u]|`` over the rows of ``tests``.

    ``u* = delta_p / p`` is the Fisher-Rao gradient; the inner product is
    ``<u, w>_p = E_p[u w]``.
    """
    u_star = fisher_rao_direction(dist) / dist.probs
    errs = [abs(dist.expect(u_star * u) - dist.expect(dist.rewards * u)) for u in tests]
    return max(errs) if errs else 0.0


# -- decomposition of the tilted loss ----------------------------------------


@dataclass
class Decomposition:
    reward_independent: float
    reward_dependent: float
    recombined: float
    direct: float

    @property
    def rel_err(self):
        return abs(self.recombined - self.direct) / max(abs(self.direct), 1e-300)


def decompose_loss(model, dist, eta, n_samples, rng, t_min=T_MIN):
    """Monte-Carlo estimates of both parts of the tilted prediction loss.

    Draws ``x0 ~ p`` from the finite support and fresh ``(eps, t)``; the same
    draws feed the direct estimate of ``E_p[(1 + eta A) ||x0 - f||^2]``, so
    the recombination identity is algebraic rather than statistical.
    """
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    idx = rng.choice(dist.probs.size, size=n_samples, p=dist.probs)
    x0 = dist.support[idx]
    A = centered_advantage(dist)[idx]
    eps = rng.standard_normal(x0.shape)
    t = rng.uniform(t_min, 1.0, size=n_samples)
    xt = (1 - t[:, None]) * x0 + t[:, None] * eps
    sq = np.sum((x0 - predict_clean(model, xt, t, None)) ** 2, axis=1)
    indep = float(np.mean(sq))
    dep = float(np.mean(A * sq))
    direct = float(np.mean((1 + eta * A) * sq))
    return Decomposition(indep, dep, indep + eta * dep, direct)


# -- Rao-Blackwell variance reduction ----------------------------------------


@dataclass(frozen=True)
class GaussianToy:
    """Prior ``x0 ~ N(mean, cov)``, noise ``eps ~ N(0, noise^2 I)``, fixed ``t``."""

    mean: np.ndarray
    cov: np.ndarray
    t: float = 0.5
    noise: float = 1.0

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = mean.size
        if cov.shape != (d, d) or not np.allclose(cov, cov.T):
            raise InputError("cov must be a symmetric (d, d) matrix")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise InputError("cov must be positive semi-definite")
        if not 0 < self.t <= 1 or self.noise <= 0:
            raise InputError("need 0 < t <= 1 and noise > 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size

    def sample(self, rng, n):
        x0 = rng.multivariate_normal(self.mean, self.cov, size=n, method="eigh")
        eps = self.noise * rng.standard_normal((n, self.dim))
        return x0, (1 - self.t) * x0 + self.t * eps

    def posterior_mean(self, xt):
        """``E[x0 | x_t]`` from the joint Gaussian of ``(x0, x_t)``."""
        a, S = 1 - self.t, self.cov
        var_xt = a * a * S + (self.t * self.noise) ** 2 * np.eye(self.dim)
        gain = a * S @ np.linalg.inv(var_xt)
        return self.mean + (np.atleast_2d(xt) - a * self.mean) @ gain.T


@dataclass
class RaoBlackwellReport:
    n_trials: int
    var_sample: float
    var_rollout: float
    max_mean_z: float
    cross_term: float
    cross_term_se: float
    passed: bool

    def to_dict(self):
        return dict(self.__dict__)


def _z(diff, se):
    return np.where(se > 0, np.abs(diff) / np.where(se > 0, se, 1.0),
                    np.where(diff == 0, 0.0, np.inf))


def rao_blackwell_check(toy, model, n_trials, rng, n_se=3.0):
    """Compare sample-anchored and posterior-anchored single-sample gradients.

    ``g_sample = grad ||x0 - f||^2`` and ``g_rollout = grad ||f_old - f||^2``
    with ``f_old`` the exact posterior mean.  Passes when the mean
    componentwise variance of ``g_rollout`` does not exceed that of
    ``g_sample`` (up to a ``n_se / sqrt(n)`` relative margin) and every
    component of the two gradient means agrees within ``n_se`` standard errors.
    """
    if model.arch.data_dim != toy.dim or model.arch.cond_dim:
        raise InputError("model must be unconditional with data_dim equal to the toy dimension")
    x0, xt = toy.sample(rng, n_trials)
    t = toy.t
    f = predict_clean(model, xt, t, None)
    f_old = toy.posterior_mean(xt)
    g_s = backward(model, xt, t, None, -2 * t * (f - x0), per_sample=True)
    g_r = backward(model, xt, t, None, -2 * t * (f - f_old), per_sample=True)
    var_s = float(np.mean(g_s.var(axis=0)))
    var_r = float(np.mean(g_r.var(axis=0)))
    diff = g_s - g_r
    z = _z(diff.mean(axis=0), diff.std(axis=0) / math.sqrt(n_trials))
    cross = np.sum((x0 - f_old) * (f_old - f), axis=1)
    cross_mean = float(cross.mean())
    cross_se = float(cross.std() / math.sqrt(n_trials))
    passed = (var_r <= var_s * (1 + n_se / math.sqrt(n_trials))
              and float(z.max()) <= n_se
              and abs(cross_mean) <= n_se * cross_se + 1e-300)
    return RaoBlackwellReport(n_trials, var_s, var_r, float(z.max()), cross_mean, cross_se,
                              bool(passed))
