"""Dense feed-forward velocity network with hand-written reverse mode.

The network maps ``concat(x, t, c)`` to a velocity of the same dimension as
``x``.  Parameters live in one flat float64 vector; layer ``i`` owns a weight
block of shape ``(w_i, w_{i+1})`` (row-major) followed by a bias of length
``w_{i+1}``.  Hidden layers use ``tanh`` or ``silu``; the output layer is
linear.

All functions accept either a single point (``x`` of shape ``(d,)``) or a
batch (``x`` of shape ``(n, d)``); ``t`` and ``c`` broadcast.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, NumericError
from .rng import make_rng

ACTIVATIONS = ("tanh", "silu")
MAGIC = b"AFLW1"


@dataclass(frozen=True)
class ArchSpec:
    data_dim: int
    hidden_widths: tuple = (64, 64)
    cond_dim: int = 0
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.data_dim < 1:
            raise ConfigError("data_dim must be >= 1", "arch.data_dim")
        if self.cond_dim < 0:
            raise ConfigError("cond_dim must be >= 0", "arch.cond_dim")
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigError("all hidden widths must be >= 1", "arch.hidden_widths")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}", "arch.activation")

    @property
    def input_dim(self):
        return self.data_dim + 1 + self.cond_dim

    @property
    def output_dim(self):
        return self.data_dim

    @property
    def widths(self):
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def n_params(self):
        w = self.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def layer_slices(self):
        """Yield ``(weight_slice, weight_shape, bias_slice)`` per layer."""
        w = self.widths
        offset = 0
        for i in range(len(w) - 1):
            n_w = w[i] * w[i + 1]
            yield (
                slice(offset, offset + n_w),
                (w[i], w[i + 1]),
                slice(offset + n_w, offset + n_w + w[i + 1]),
            )
            offset += n_w + w[i + 1]

    def to_dict(self):
        return {
            "data_dim": self.data_dim,
            "hidden_widths": list(self.hidden_widths),
            "cond_dim": self.cond_dim,
            "activation": self.activation,
        }


@dataclass
class VelocityModel:
    arch: ArchSpec
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.arch.n_params,):
            raise ConfigError(
                f"params has shape {self.params.shape}, arch expects ({self.arch.n_params},)"
            )

    @classmethod
    def zeros(cls, arch):
        return cls(arch, np.zeros(arch.n_params))

    @classmethod
    def init(cls, arch, seed):
        """Xavier-uniform weights, zero biases.  ``seed`` may be an int or a tuple of ints."""
        rng = make_rng(seed, "init")
        params = np.zeros(arch.n_params)
        for w_sl, shape, _ in arch.layer_slices():
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[w_sl] = rng.uniform(-bound, bound, size=shape[0] * shape[1])
        return cls(arch, params)

    def copy(self):
        return VelocityModel(self.arch, self.params.copy())

    def with_params(self, params):
        return VelocityModel(self.arch, params)


def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    return a / (1.0 + np.exp(-a))


def _act_grad(name, a, h):
    if name == "tanh":
        return 1.0 - h * h
    s = 1.0 / (1.0 + np.exp(-a))
    return s * (1.0 + a * (1.0 - s))


def _as_batch(arch, x, t, c):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.ndim != 2 or X.shape[1] != arch.data_dim:
        raise ConfigError(f"x has shape {x.shape}, expected (..., {arch.data_dim})")
    n = X.shape[0]
    T = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
    if c is None:
        c = np.zeros(arch.cond_dim)
    c = np.asarray(c, dtype=np.float64)
    if arch.cond_dim == 0:
        if c.size:
            raise ConfigError(f"c has shape {c.shape}, model takes no condition")
        C = np.zeros((n, 0))
    else:
        if c.shape[-1:] != (arch.cond_dim,):
            raise ConfigError(f"c has shape {c.shape}, expected (..., {arch.cond_dim})")
        C = np.broadcast_to(c.reshape(-1, arch.cond_dim), (n, arch.cond_dim))
    return np.concatenate([X, T[:, None], C], axis=1), single


def _forward_cache(model, z):
    arch, p = model.arch, model.params
    pre, acts = [], [z]
    h = z
    layers = list(arch.layer_slices())
    for k, (w_sl, shape, b_sl) in enumerate(layers):
        a = h @ p[w_sl].reshape(shape) + p[b_sl]
        if k == len(layers) - 1:
            h = a
        else:
            h = _act(arch.activation, a)
        pre.append(a)
        acts.append(h)
    return pre, acts


def forward(model, x, t, c=None):
    """Velocity ``v(x, t, c)``; shape follows ``x``."""
    z, single = _as_batch(model.arch, x, t, c)
    out = _forward_cache(model, z)[1][-1]
    return out[0] if single else out


def backward(model, x, t, c, upstream, per_sample=False):
    """Gradient of ``sum_n <upstream_n, v(x_n, t_n, c_n)>`` w.r.t. params.

    With ``per_sample=True`` the per-row gradients are returned as an
    ``(n, n_params)`` array instead of their sum.
    """
    arch, p = model.arch, model.params
    z, single = _as_batch(arch, x, t, c)
    U = np.asarray(upstream, dtype=np.float64).reshape(z.shape[0], arch.output_dim)
    if not np.all(np.isfinite(U)):
        raise NumericError("non-finite upstream gradient")
    pre, acts = _forward_cache(model, z)
    layers = list(arch.layer_slices())
    n = z.shape[0]
    grad = np.zeros((n, arch.n_params)) if per_sample else np.zeros(arch.n_params)
    delta = U
    for k in range(len(layers) - 1, -1, -1):
        w_sl, shape, b_sl = layers[k]
        h_in = acts[k]
        if per_sample:
            grad[:, w_sl] = (h_in[:, :, None] * delta[:, None, :]).reshape(n, -1)
            grad[:, b_sl] = delta
        else:
            grad[w_sl] = (h_in.T @ delta).ravel()
            grad[b_sl] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ p[w_sl].reshape(shape).T
            delta = delta * _act_grad(arch.activation, pre[k - 1], acts[k])
    return grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_coords: int
    worst_index: int


def central_difference(f, params, i, step, order=4):
    """Central difference of scalar ``f`` along coordinate ``i`` (order 2 or 4)."""
    def at(h):
        p = params.copy()
        p[i] += h
        return f(p)
    if order == 2:
        return (at(step) - at(-step)) / (2 * step)
    return (8 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12 * step)


def grad_check(params, loss_closure, tolerance=1e-5, n_coords=200, step=1e-3, order=4, seed=0):
    """Compare the analytic gradient of ``loss_closure`` with central differences.

    ``loss_closure(params) -> (loss, grad)``.  Checks a random subset of
    ``n_coords`` coordinates (all of them if there are fewer).  The default
    fourth-order stencil keeps roundoff near 1e-13, so coordinates with
    gradients around 1e-6 are still resolved to the tolerance.
    """
    params = np.asarray(params, dtype=np.float64)
    _, analytic = loss_closure(params)
    rng = make_rng(seed, "grad_check")
    n = params.size
    idx = np.arange(n) if n <= n_coords else np.sort(rng.choice(n, size=n_coords, replace=False))
    errs = np.empty(idx.size)
    value = lambda p: loss_closure(p)[0]  # noqa: E731
    for j, i in enumerate(idx):
        numeric = central_difference(value, params, i, step, order)
        a = analytic[i]
        errs[j] = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
    worst = int(np.argmax(errs))
    max_err = float(errs[worst])
    return GradCheckReport(max_err, bool(max_err <= tolerance), int(idx.size), int(idx[worst]))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(params, grad, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update.  Returns ``(new_params, new_state)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient, Adam step refused")
    if state.m.shape != params.shape:
        raise ConfigError("optimizer state does not match params")
    b1, b2 = betas
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, step)


def sgd_step(params, grad, lr):
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient, SGD step refused")
    return params - lr * grad


# -- checkpoint file ---------------------------------------------------------


def checkpoint_bytes(model):
    arch = model.arch
    header = [arch.data_dim, arch.cond_dim, ACTIVATIONS.index(arch.activation),
              len(arch.hidden_widths), *arch.hidden_widths, arch.n_params]
    return MAGIC + struct.pack(f"<{len(header)}I", *header) + model.params.astype("<f8").tobytes()


def model_from_bytes(buf):
    if buf[:5] != MAGIC:
        raise CheckpointError("bad magic, not an AFLW1 checkpoint")
    try:
        pos = 5
        data_dim, cond_dim, act, n_hidden = struct.unpack_from("<4I", buf, pos)
        pos += 16
        widths = struct.unpack_from(f"<{n_hidden}I", buf, pos)
        pos += 4 * n_hidden
        (n_params,) = struct.unpack_from("<I", buf, pos)
        pos += 4
    except struct.error as exc:
        raise CheckpointError(f"truncated header: {exc}") from None
    if act >= len(ACTIVATIONS):
        raise CheckpointError(f"unknown activation code {act}")
    arch = ArchSpec(data_dim, widths, cond_dim, ACTIVATIONS[act])
    if arch.n_params != n_params:
        raise CheckpointError(f"header declares {n_params} params, arch implies {arch.n_params}")
    body = buf[pos:]
    if len(body) != 8 * n_params:
        raise CheckpointError(f"expected {8 * n_params} bytes of params, found {len(body)}")
    return VelocityModel(arch, np.frombuffer(body, dtype="<f8").astype(np.float64))


def save_checkpoint(model, path):
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path, expect_arch=None):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from None
    model = model_from_bytes(buf)
    if expect_arch is not None and model.arch != expect_arch:
        raise CheckpointError(f"checkpoint arch {model.arch} does not match configured {expect_arch}")
    return model
