"""Rectified-flow primitives: interpolation, losses, clean-point predictor, samplers."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .nn import backward, forward

T_MIN = 0.001


@dataclass(frozen=True)
class Interpolant:
    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    xt: np.ndarray


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 10
    mode: str = "ode"
    sigma_scale: float = 0.3
    t_floor: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1", "sampler.steps")
        if self.mode not in ("ode", "sde"):
            raise ConfigError(f"unknown sampler mode {self.mode!r}", "sampler.mode")
        if self.sigma_scale < 0:
            raise ConfigError("sigma_scale must be >= 0", "sampler.sigma_scale")
        if self.t_floor is not None and self.t_floor <= 0:
            raise ConfigError("t_floor must be > 0", "sampler.t_floor")

    @property
    def dt(self):
        return 1.0 / self.steps

    @property
    def floor(self):
        return self.dt / 2 if self.t_floor is None else self.t_floor

    def times(self):
        """Start time of each Euler step, from 1 down to ``dt``."""
        return 1.0 - np.arange(self.steps) / self.steps

    def to_dict(self):
        return {"steps": self.steps, "mode": self.mode,
                "sigma_scale": self.sigma_scale, "t_floor": self.t_floor}


def _col(t, like):
    t = np.asarray(t, dtype=np.float64)
    return t[:, None] if t.ndim == 1 and like.ndim == 2 else t


def interpolate(x0, eps, t):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ConfigError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    tt = _col(t, x0)
    return Interpolant(x0, eps, np.asarray(t, dtype=np.float64), (1 - tt) * x0 + tt * eps)


def sample_times(rng, n, t_min=T_MIN):
    return rng.uniform(t_min, 1.0, size=n)


def predict_clean(model, xt, t, c=None):
    """``f(x_t) = x_t - t * v(x_t, t, c)``."""
    xt = np.asarray(xt, dtype=np.float64)
    return xt - _col(t, xt) * forward(model, xt, t, c)


def _n(x):
    return 1 if np.ndim(x) == 1 else np.shape(x)[0]


def flow_matching_loss(model, x0, eps, t, c=None):
    """``||v(x_t) - (eps - x0)||^2`` (batch mean) and its parameter gradient."""
    it = interpolate(x0, eps, t)
    r = forward(model, it.xt, t, c) - (it.eps - it.x0)
    n = _n(it.x0)
    loss = float(np.sum(r * r)) / n
    return loss, backward(model, it.xt, t, c, 2 * r / n)


def prediction_loss(model, x0, eps, t, c=None):
    """``||f(x_t) - x0||^2`` (batch mean) and its parameter gradient."""
    it = interpolate(x0, eps, t)
    r = predict_clean(model, it.xt, t, c) - it.x0
    n = _n(it.x0)
    loss = float(np.sum(r * r)) / n
    return loss, backward(model, it.xt, t, c, -2 * _col(t, r) * r / n)


def sample_ode(model, xT, c, cfg):
    """Euler integration of ``dx = v dt`` from t=1 to t=0.

    Returns the trajectory with shape ``(steps + 1, *xT.shape)``;
    ``traj[-1]`` is the generated clean point.
    """
    x = np.array(xT, dtype=np.float64)
    dt = cfg.dt
    traj = [x]
    for k, t in enumerate(cfg.times()):
        x = x - forward(model, x, t, c) * dt
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite state in ODE sampler", step=k)
        traj.append(x)
    return np.stack(traj)


@dataclass
class SDETrace:
    trajectory: np.ndarray  # (steps + 1, ..., d)
    times: np.ndarray       # (steps,)
    means: np.ndarray       # (steps, ..., d)
    stds: np.ndarray        # (steps,)
    logprobs: np.ndarray    # (steps, ...)


def sde_coefficients(cfg, t):
    """Noise level and drift coefficient ``sigma_t^2 / 2t`` at step start ``t``."""
    sigma = cfg.sigma_scale * np.sqrt(t)
    return sigma, sigma**2 / (2 * max(t, cfg.floor))


def sde_mean(x, v, t, cfg):
    _, coef = sde_coefficients(cfg, t)
    x_hat1 = x + (1 - t) * v
    return x - (v - coef * x_hat1) * cfg.dt


def gaussian_logpdf(x, mean, std):
    """Diagonal Gaussian log-density summed over the last axis."""
    z = (x - mean) / std
    d = np.shape(x)[-1]
    return -0.5 * np.sum(z * z, axis=-1) - d * (np.log(std) + 0.5 * np.log(2 * np.pi))


def sample_sde(model, xT, c, cfg, rng):
    """Stochastic sampler with Gaussian transitions and their log-densities.

    With ``sigma_scale == 0`` the path coincides with :func:`sample_ode` and
    the recorded log-densities are NaN.
    """
    x = np.array(xT, dtype=np.float64)
    dt = cfg.dt
    traj, means, stds, logps = [x], [], [], []
    for k, t in enumerate(cfg.times()):
        sigma, _ = sde_coefficients(cfg, t)
        v = forward(model, x, t, c)
        mean = sde_mean(x, v, t, cfg)
        std = sigma * np.sqrt(dt)
        x = mean + std * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite state in SDE sampler", step=k)
        if std > 0:
            logp = gaussian_logpdf(x, mean, std)
        else:
            logp = np.full(x.shape[:-1], np.nan)
        traj.append(x)
        means.append(mean)
        stds.append(std)
        logps.append(logp)
    return SDETrace(np.stack(traj), cfg.times(), np.stack(means), np.array(stds), np.stack(logps))


def dump_trajectory(path, model, trajectory, c, cfg, trace=None):
    """Write one JSON record per step for a single-sample trajectory."""
    with open(path, "w") as fh:
        for k, t in enumerate(cfg.times()):
            x = trajectory[k]
            rec = {"t": float(t), "x": x.tolist(), "v": forward(model, x, t, c).tolist()}
            if trace is not None:
                rec["mean"] = trace.means[k].tolist()
                rec["std"] = float(trace.stds[k])
                rec["logprob"] = float(trace.logprobs[k])
            fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps({"t": 0.0, "x": trajectory[-1].tolist()}) + "\n")
