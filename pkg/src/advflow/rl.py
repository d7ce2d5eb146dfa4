"""AdvantageFlow: advantage-weighted prediction loss with rollout and reference anchors.

Also hosts a deliberately small Flow-GRPO style comparator that runs policy
gradients through the Gaussian transitions of the stochastic sampler.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .flow import (SamplerConfig, T_MIN, gaussian_logpdf, interpolate, predict_clean,
                   sample_ode, sample_sde, sample_times, sde_coefficients, sde_mean)
from .nn import AdamState, VelocityModel, adam_step, backward, forward, sgd_step

Z_GUARD = 1e-8


@dataclass
class ModelTriple:
    learned: VelocityModel
    rollout: VelocityModel
    reference: VelocityModel

    def __post_init__(self):
        if not (self.learned.arch == self.rollout.arch == self.reference.arch):
            raise ConfigError("learned, rollout and reference models must share one arch")

    @classmethod
    def from_reference(cls, reference):
        return cls(reference.copy(), reference.copy(), reference.copy())


# -- advantages and schedules -------------------------------------------------


def compute_advantages(rewards):
    """Per-prompt centred, batch-standardised, clipped advantages.

    ``rewards`` has shape ``(L, K)``.  The scale is the root-mean-square
    deviation from the per-prompt means over the whole batch; when it falls
    below ``1e-8`` every advantage is zero.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 1 or r.shape[1] < 1:
        raise InputError(f"rewards must be an (L, K) matrix, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise InputError("rewards contain non-finite values")
    dev = r - r.mean(axis=1, keepdims=True)
    z = np.sqrt(np.mean(dev * dev))
    if z < Z_GUARD:
        return np.zeros_like(r)
    return np.clip(dev / z, -1.0, 1.0)


@dataclass(frozen=True)
class GammaSchedule:
    """``constant`` (gamma), ``adaptive`` (1 - A) or ``nft`` (beta * (beta - A))."""

    kind: str = "constant"
    value: float = 1.1

    def __post_init__(self):
        if self.kind not in ("constant", "adaptive", "nft"):
            raise ConfigError(f"unknown gamma schedule {self.kind!r}", "train.gamma_schedule")
        if self.kind == "constant" and self.value < 0:
            raise ConfigError("constant gamma must be >= 0", "train.gamma_schedule")
        if self.kind == "nft" and self.value <= 0:
            raise ConfigError("nft beta must be > 0", "train.gamma_schedule")

    @classmethod
    def parse(cls, text):
        """Parse ``"constant:1.1"``, ``"adaptive"`` or ``"nft:0.1"``."""
        kind, _, val = str(text).partition(":")
        if kind == "adaptive":
            return cls("adaptive", 1.0)
        try:
            return cls(kind, float(val) if val else 1.0)
        except ValueError:
            raise ConfigError(f"cannot parse gamma schedule {text!r}", "train.gamma_schedule") from None

    def __str__(self):
        return "adaptive" if self.kind == "adaptive" else f"{self.kind}:{self.value:g}"


def advantage_weight(schedule, A):
    """Weight on the sample-anchored term: ``A``, or ``beta * A`` under ``nft``."""
    A = np.asarray(A, dtype=np.float64)
    return schedule.value * A if schedule.kind == "nft" else A


def gamma_value(schedule, A):
    A = np.asarray(A, dtype=np.float64)
    if schedule.kind == "constant":
        return np.full_like(A, schedule.value) if A.ndim else float(schedule.value)
    if schedule.kind == "adaptive":
        return 1.0 - A
    beta = schedule.value
    return beta * (beta - A)


# -- the three-term loss ------------------------------------------------------


@dataclass
class LossBreakdown:
    advantage_term: float
    rollout_term: float
    reference_term: float
    total: float
    quad_coeff: np.ndarray
    per_sample: np.ndarray = field(repr=False, default=None)


def prediction_space_loss(f, A, x0, f_old, f_ref, gamma, lam):
    """Per-sample three-term loss as a function of the prediction ``f``.

    Returns ``(adv, roll, ref)`` arrays; useful for probing convexity in ``f``
    directly without going through a network.
    """
    adv = A * np.sum((f - x0) ** 2, axis=-1)
    roll = gamma * np.sum((f - f_old) ** 2, axis=-1)
    ref = lam * np.sum((f - f_ref) ** 2, axis=-1)
    return adv, roll, ref


def advantageflow_loss(triple, A, x0, xt, t, c, gamma, lam):
    """Batch-mean AdvantageFlow loss and its gradient w.r.t. the learned params.

    ``A`` weights the sample-anchored term and ``gamma`` the rollout anchor;
    both may be per-sample arrays.  The rollout and reference predictions are constants: no gradient flows
    into ``triple.rollout`` or ``triple.reference``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    n = x0.shape[0]
    A = np.broadcast_to(np.asarray(A, dtype=np.float64), (n,))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (n,))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    if lam < 0:
        raise ConfigError("lambda must be nonnegative")

    v = forward(triple.learned, xt, t, c)
    f = xt - t[:, None] * v
    f_old = predict_clean(triple.rollout, xt, t, c)
    f_ref = predict_clean(triple.reference, xt, t, c)
    adv, roll, ref = prediction_space_loss(f, A, x0, f_old, f_ref, gamma, lam)
    per_sample = adv + roll + ref
    bad = ~np.isfinite(per_sample)
    if bad.any():
        raise NumericError("non-finite AdvantageFlow loss", sample=int(np.flatnonzero(bad)[0]))

    dl_df = 2 * (A[:, None] * (f - x0) + gamma[:, None] * (f - f_old) + lam * (f - f_ref))
    grad = backward(triple.learned, xt, t, c, -t[:, None] * dl_df / n)
    out = LossBreakdown(
        advantage_term=float(adv.mean()),
        rollout_term=float(roll.mean()),
        reference_term=float(ref.mean()),
        total=float(per_sample.mean()),
        quad_coeff=A + gamma + lam,
        per_sample=per_sample,
    )
    return out, grad


def ema_update(rollout, learned, rho):
    """``rho * rollout + (1 - rho) * learned``, as a new model."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError("rho must lie in [0, 1]", "train.rho")
    return rollout.with_params(rho * rollout.params + (1 - rho) * learned.params)


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    L: int = 32
    K: int = 4
    gamma_schedule: GammaSchedule = GammaSchedule("constant", 1.1)
    lam: float = 0.001
    rho: float = 0.9
    iterations: int = 300
    inner_steps: int = 1
    sampler: SamplerConfig = SamplerConfig(steps=10, mode="ode")
    eval_sampler: SamplerConfig = SamplerConfig(steps=40, mode="ode")
    eval_samples: int = 512
    eval_every: int = 1
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    t_min: float = T_MIN
    clip_range: float = 0.2

    def __post_init__(self):
        if isinstance(self.gamma_schedule, str):
            object.__setattr__(self, "gamma_schedule", GammaSchedule.parse(self.gamma_schedule))
        if self.L < 1 or self.K < 1:
            raise ConfigError("L and K must be >= 1", "train.L")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]", "train.rho")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0", "train.lam")
        if self.iterations < 0 or self.inner_steps < 1:
            raise ConfigError("iterations >= 0 and inner_steps >= 1 required", "train.iterations")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}", "train.optimizer")
        g = self.gamma_schedule
        if g.kind == "constant" and g.value + self.lam <= 1.0:
            warnings.warn(
                f"gamma + lambda = {g.value + self.lam:g} <= 1: the per-sample loss can be "
                "concave for advantages near -1", stacklevel=3)

    def to_dict(self):
        return {
            "L": self.L, "K": self.K, "gamma_schedule": str(self.gamma_schedule),
            "lam": self.lam, "rho": self.rho, "iterations": self.iterations,
            "inner_steps": self.inner_steps, "sampler": self.sampler.to_dict(),
            "eval_sampler": self.eval_sampler.to_dict(), "eval_samples": self.eval_samples,
            "eval_every": self.eval_every, "optimizer": self.optimizer, "lr": self.lr,
            "betas": list(self.betas), "adam_eps": self.adam_eps, "t_min": self.t_min,
            "clip_range": self.clip_range,
        }


METRIC_FIELDS = ("iter", "wall_s", "mean_reward", "eval_reward", "min_quad_coeff",
                 "max_quad_coeff", "adv_term", "rollout_term", "ref_term")


class TrainingAborted(NumericError):
    """Raised when a trainer hits a numeric error; carries the last good state."""

    def __init__(self, cause, last_good, metrics):
        super().__init__(f"training aborted: {cause}")
        self.last_good = last_good
        self.metrics = metrics


@dataclass
class TrainResult:
    triple: ModelTriple
    metrics: list


class _Optimizer:
    def __init__(self, cfg, params):
        self.cfg = cfg
        self.state = AdamState.zeros_like(params)

    def step(self, params, grad):
        if self.cfg.optimizer == "sgd":
            return sgd_step(params, grad, self.cfg.lr)
        params, self.state = adam_step(params, grad, self.state, self.cfg.lr,
                                       self.cfg.betas, self.cfg.adam_eps)
        return params


def _prompt_array(prompt_set, cond_dim):
    P = np.asarray(prompt_set, dtype=np.float64)
    if P.ndim == 1:
        P = P.reshape(-1, cond_dim) if cond_dim else np.zeros((max(len(P), 1), 0))
    if P.shape[0] < 1 or P.shape[1] != cond_dim:
        raise ConfigError(f"prompt set has shape {P.shape}, expected (n, {cond_dim})")
    return P


class _Evaluator:
    """Mean reward of ODE samples drawn from fixed held-out noise."""

    def __init__(self, arch, prompts, cfg, rng):
        n = cfg.eval_samples
        self.noise = rng.standard_normal((n, arch.data_dim))
        self.C = prompts[np.arange(n) % prompts.shape[0]]
        self.sampler = cfg.eval_sampler

    def __call__(self, model, reward_fn):
        x0 = sample_ode(model, self.noise, self.C, self.sampler)[-1]
        return float(np.mean(reward_fn(x0, self.C)))


def _rollout_batch(model, prompts, cfg, rng):
    idx = rng.integers(prompts.shape[0], size=cfg.L)
    C = np.repeat(prompts[idx], cfg.K, axis=0)
    xT = rng.standard_normal((cfg.L * cfg.K, model.arch.data_dim))
    return C, xT


def train_advantageflow(triple, reward_fn, prompt_set, cfg, rng, callback=None):
    """Run AdvantageFlow for ``cfg.iterations`` iterations.

    ``reward_fn(x0, c) -> (n,)`` scores clean samples.  Each iteration samples
    ``L`` prompts, draws ``K`` ODE rollouts per prompt from the rollout model,
    standardises rewards into advantages, takes ``inner_steps`` optimizer
    steps on the batch-mean loss at fresh ``(t, eps)`` and finally moves the
    rollout model toward the learned one by EMA.

    Metrics rows are appended to the returned list and passed to
    ``callback`` as they are produced.
    """
    arch = triple.learned.arch
    prompts = _prompt_array(prompt_set, arch.cond_dim)
    if cfg.sampler.mode != "ode":
        raise ConfigError("AdvantageFlow rolls out with the ODE sampler", "train.sampler.mode")
    evaluator = _Evaluator(arch, prompts, cfg, rng)
    opt = _Optimizer(cfg, triple.learned.params)
    metrics = []
    start = time.perf_counter()
    for it in range(cfg.iterations):
        good = ModelTriple(triple.learned.copy(), triple.rollout.copy(), triple.reference)
        try:
            C, xT = _rollout_batch(triple.rollout, prompts, cfg, rng)
            x0 = sample_ode(triple.rollout, xT, C, cfg.sampler)[-1]
            rewards = np.asarray(reward_fn(x0, C), dtype=np.float64)
            A = compute_advantages(rewards.reshape(cfg.L, cfg.K)).ravel()
            gamma = gamma_value(cfg.gamma_schedule, A)
            weight = advantage_weight(cfg.gamma_schedule, A)
            t = sample_times(rng, x0.shape[0], cfg.t_min)
            xt = interpolate(x0, rng.standard_normal(x0.shape), t).xt
            for _ in range(cfg.inner_steps):
                lb, grad = advantageflow_loss(triple, weight, x0, xt, t, C, gamma, cfg.lam)
                triple.learned = triple.learned.with_params(opt.step(triple.learned.params, grad))
            triple.rollout = ema_update(triple.rollout, triple.learned, cfg.rho)
            if not np.all(np.isfinite(triple.learned.params)):
                raise NumericError("non-finite parameters after update", step=it)
            ev = evaluator(triple.learned, reward_fn) if it % cfg.eval_every == 0 else float("nan")
        except NumericError as exc:
            raise TrainingAborted(exc, good, metrics) from exc
        row = {
            "iter": it, "wall_s": time.perf_counter() - start,
            "mean_reward": float(rewards.mean()), "eval_reward": ev,
            "min_quad_coeff": float(lb.quad_coeff.min()),
            "max_quad_coeff": float(lb.quad_coeff.max()),
            "adv_term": lb.advantage_term, "rollout_term": lb.rollout_term,
            "ref_term": lb.reference_term,
        }
        metrics.append(row)
        if callback is not None:
            callback(row)
    return TrainResult(triple, metrics)


def grpo_surrogate(model, trace, C, A, old_logp, cfg, clip_range):
    """Clipped policy-gradient surrogate over all recorded transitions.

    Returns ``(loss, grad)`` where ``loss = -mean(min(ratio * A, clip(ratio) * A))``
    over samples and steps, and ``grad`` is its gradient w.r.t. ``model.params``.
    """
    sampler = cfg.sampler
    n = A.shape[0]
    steps = sampler.steps
    grad = np.zeros(model.arch.n_params)
    total = 0.0
    for s, t in enumerate(trace.times):
        x, x_next = trace.trajectory[s], trace.trajectory[s + 1]
        std = trace.stds[s]
        v = forward(model, x, t, C)
        mean = sde_mean(x, v, t, sampler)
        logp = gaussian_logpdf(x_next, mean, std)
        ratio = np.exp(logp - old_logp[s])
        clipped = np.clip(ratio, 1 - clip_range, 1 + clip_range)
        total += float(np.sum(np.minimum(ratio * A, clipped * A)))
        active = np.where(A >= 0, ratio <= 1 + clip_range, ratio >= 1 - clip_range)
        w = np.where(active, A * ratio, 0.0)
        _, coef = sde_coefficients(sampler, t)
        dmean_dv = -sampler.dt * (1 - coef * (1 - t))
        dlogp_dv = (x_next - mean) / std**2 * dmean_dv
        grad -= backward(model, x, t, C, w[:, None] * dlogp_dv / (n * steps))
    return -total / (n * steps), grad


def train_grpo_baseline(triple, reward_fn, prompt_set, cfg, rng, callback=None):
    """Minimal on-policy Flow-GRPO style comparator.

    Rolls out with the stochastic sampler from the learned model, uses the
    same advantages as AdvantageFlow and ascends the ratio-clipped surrogate of
    the recorded Gaussian transitions.  No KL term; the rollout model simply
    tracks the learned one.
    """
    arch = triple.learned.arch
    prompts = _prompt_array(prompt_set, arch.cond_dim)
    if cfg.sampler.mode != "sde":
        raise ConfigError("GRPO baseline requires the SDE sampler", "train.sampler.mode")
    if cfg.sampler.sigma_scale <= 0:
        raise ConfigError("GRPO baseline needs sigma_scale > 0: log-densities are undefined "
                          "for a degenerate Gaussian", "train.sampler.sigma_scale")
    evaluator = _Evaluator(arch, prompts, cfg, rng)
    opt = _Optimizer(cfg, triple.learned.params)
    metrics = []
    start = time.perf_counter()
    for it in range(cfg.iterations):
        good = ModelTriple(triple.learned.copy(), triple.rollout.copy(), triple.reference)
        try:
            C, xT = _rollout_batch(triple.learned, prompts, cfg, rng)
            trace = sample_sde(triple.learned, xT, C, cfg.sampler, rng)
            x0 = trace.trajectory[-1]
            rewards = np.asarray(reward_fn(x0, C), dtype=np.float64)
            A = compute_advantages(rewards.reshape(cfg.L, cfg.K)).ravel()
            old_logp = trace.logprobs
            for _ in range(cfg.inner_steps):
                loss, grad = grpo_surrogate(triple.learned, trace, C, A, old_logp, cfg, cfg.clip_range)
                triple.learned = triple.learned.with_params(opt.step(triple.learned.params, grad))
            triple.rollout = triple.learned.copy()
            if not np.all(np.isfinite(triple.learned.params)):
                raise NumericError("non-finite parameters after update", step=it)
            ev = evaluator(triple.learned, reward_fn) if it % cfg.eval_every == 0 else float("nan")
        except NumericError as exc:
            raise TrainingAborted(exc, good, metrics) from exc
        row = {
            "iter": it, "wall_s": time.perf_counter() - start,
            "mean_reward": float(rewards.mean()), "eval_reward": ev,
            "min_quad_coeff": float("nan"), "max_quad_coeff": float("nan"),
            "adv_term": loss, "rollout_term": 0.0, "ref_term": 0.0,
        }
        metrics.append(row)
        if callback is not None:
            callback(row)
    return TrainResult(triple, metrics)

