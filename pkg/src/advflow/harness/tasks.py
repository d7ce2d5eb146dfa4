"""Toy data generators and reward functions.

A task is built from a plain dict (the ``task`` section of a run config)::

    {"data": {"kind": "two_gauss", "means": [[-2, 0], [2, 0]],
              "weights": [0.5, 0.5], "std": 0.4},
     "reward": {"kind": "mode_indicator", "target": 1}}
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError


class TwoGauss:
    kind = "two_gauss"

    def __init__(self, means=((-2.0, 0.0), (2.0, 0.0)), weights=(0.5, 0.5), std=0.4):
        self.means = np.asarray(means, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.std = float(std)
        if self.means.ndim != 2 or self.means.shape[0] != self.weights.size:
            raise ConfigError("means must be (k, d) with one weight per mean", "task.data.means")
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ConfigError("weights must be nonnegative and sum to 1", "task.data.weights")
        if self.std <= 0:
            raise ConfigError("std must be > 0", "task.data.std")
        self.data_dim = self.means.shape[1]
        self.cond_dim = 0

    def modes(self):
        return self.means

    def prompts(self):
        return np.zeros((1, 0))

    def sample(self, rng, n):
        k = rng.choice(self.weights.size, size=n, p=self.weights)
        x = self.means[k] + self.std * rng.standard_normal((n, self.data_dim))
        return x, np.zeros((n, 0))


class Ring:
    kind = "ring"

    def __init__(self, radius=2.0, width=0.2):
        self.radius = float(radius)
        self.width = float(width)
        if self.radius <= 0 or self.width <= 0:
            raise ConfigError("radius and width must be > 0", "task.data")
        self.data_dim = 2
        self.cond_dim = 0

    def modes(self):
        ang = np.arange(4) * np.pi / 2
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def prompts(self):
        return np.zeros((1, 0))

    def sample(self, rng, n):
        ang = rng.uniform(0, 2 * np.pi, size=n)
        r = self.radius + self.width * rng.standard_normal(n)
        return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1), np.zeros((n, 0))


class LabeledModes:
    """``k`` Gaussian modes on a circle; the condition is the one-hot label."""

    kind = "labeled_modes"

    def __init__(self, k=4, radius=2.0, std=0.3):
        self.k = int(k)
        if self.k < 1:
            raise ConfigError("k must be >= 1", "task.data.k")
        self.radius = float(radius)
        self.std = float(std)
        self.data_dim = 2
        self.cond_dim = self.k

    def modes(self):
        ang = 2 * np.pi * np.arange(self.k) / self.k
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def prompts(self):
        return np.eye(self.k)

    def sample(self, rng, n):
        lab = rng.integers(self.k, size=n)
        x = self.modes()[lab] + self.std * rng.standard_normal((n, 2))
        return x, np.eye(self.k)[lab]


def nearest_mode(x, modes):
    d = np.sum((x[:, None, :] - modes[None, :, :]) ** 2, axis=-1)
    return np.argmin(d, axis=1)


class Reward:
    """Base class: ``reward(x, c) -> (n,)`` plus a per-component breakdown."""

    name = "reward"

    def __call__(self, x, c):
        raise NotImplementedError

    def components(self, x, c):
        return {self.name: self(x, c)}


class ModeIndicator(Reward):
    """1 when the nearest data mode is ``target``.

    ``target = -1`` on a labelled task means "the mode named by the condition".
    """

    name = "mode_indicator"

    def __init__(self, modes, target=1):
        self.modes = np.asarray(modes, dtype=np.float64)
        self.target = int(target)
        if not -1 <= self.target < len(self.modes):
            raise ConfigError(f"target {target} out of range", "task.reward.target")

    def __call__(self, x, c):
        idx = nearest_mode(np.atleast_2d(x), self.modes)
        if self.target == -1:
            return (idx == np.argmax(c, axis=1)).astype(np.float64)
        return (idx == self.target).astype(np.float64)


class NegDistance(Reward):
    name = "neg_distance"

    def __init__(self, point):
        self.point = np.asarray(point, dtype=np.float64)

    def __call__(self, x, c):
        return -np.linalg.norm(np.atleast_2d(x) - self.point, axis=1)


class Quadrant(Reward):
    """1 when every coordinate has the sign given by ``mask`` (entries +-1)."""

    name = "quadrant"

    def __init__(self, mask):
        self.mask = np.sign(np.asarray(mask, dtype=np.float64))
        if np.any(self.mask == 0):
            raise ConfigError("quadrant mask entries must be +1 or -1", "task.reward.mask")

    def __call__(self, x, c):
        return np.all(np.sign(np.atleast_2d(x)) == self.mask, axis=1).astype(np.float64)


class WeightedSum(Reward):
    name = "weighted_sum"

    def __init__(self, terms):
        self.terms = [(float(w), r, f"{i}:{r.name}") for i, (w, r) in enumerate(terms)]
        if not self.terms or not all(np.isfinite(w) for w, _, _ in self.terms):
            raise ConfigError("weighted_sum needs finite weights", "task.reward.terms")

    def __call__(self, x, c):
        return sum(w * r(x, c) for w, r, _ in self.terms)

    def components(self, x, c):
        out = {label: r(x, c) for _, r, label in self.terms}
        out[self.name] = self(x, c)
        return out


DATA_KINDS = {"two_gauss": TwoGauss, "ring": Ring, "labeled_modes": LabeledModes}


def build_data(spec):
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in DATA_KINDS:
        raise ConfigError(f"unknown data generator {kind!r}", "task.data.kind")
    try:
        return DATA_KINDS[kind](**spec)
    except TypeError as exc:
        raise ConfigError(str(exc), "task.data") from None


def build_reward(spec, data):
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "mode_indicator":
            return ModeIndicator(data.modes(), **spec)
        if kind == "neg_distance":
            return NegDistance(**spec)
        if kind == "quadrant":
            return Quadrant(**spec)
        if kind == "weighted_sum":
            return WeightedSum([(t["weight"], build_reward(t["reward"], data))
                                for t in spec["terms"]])
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bad reward spec: {exc}", "task.reward") from None
    raise ConfigError(f"unknown reward {kind!r}", "task.reward.kind")


class Task:
    def __init__(self, spec):
        self.spec = spec
        self.data = build_data(spec["data"])
        self.reward = build_reward(spec["reward"], self.data)

    @property
    def data_dim(self):
        return self.data.data_dim

    @property
    def cond_dim(self):
        return self.data.cond_dim

    def prompts(self):
        return self.data.prompts()

    def mode_masses(self, x):
        """Fraction of points assigned to each data mode by nearest-mode rule."""
        idx = nearest_mode(np.atleast_2d(x), self.data.modes())
        return np.bincount(idx, minlength=len(self.data.modes())) / max(len(idx), 1)
