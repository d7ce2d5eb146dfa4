"""Property suites run by ``advflow verify``.

Each check yields ``{"check_name", "value", "bound", "pass"}``.  ``value`` is
the worst observed discrepancy (or the statistic being bounded); ``pass``
compares it against ``bound``.
"""

from __future__ import annotations

import json
import math
from importlib import resources

import numpy as np

from ..errors import TiltError
from ..flow import SamplerConfig, flow_matching_loss, prediction_loss, sample_ode, sample_sde
from ..nft import NftBranchInputs, draw_equivalence_samples, equivalence_check, nft_branch_loss
from ..nn import ArchSpec, VelocityModel, grad_check
from ..oracles import (FiniteDist, GaussianToy, decompose_loss, fisher_rao_condition_error,
                       fisher_rao_direction, max_tilt, rao_blackwell_check, reward_gain, tilt,
                       zero_mean_tests)
from ..rl import (GammaSchedule, ModelTriple, advantage_weight, advantageflow_loss,
                  compute_advantages, ema_update, gamma_value)
from ..rng import make_rng

FAULTS = ("grad_sign",)
SMALL_ARCH = ArchSpec(2, (16, 16), 2)


def _check(name, value, bound, passed=None):
    value = float(value)
    if passed is None:
        passed = value <= bound
    if not math.isfinite(value):
        value, passed = float(np.finfo(float).max), False
    return {"check_name": name, "value": value, "bound": float(bound), "pass": bool(passed)}


def random_triple(arch, seed):
    return ModelTriple(VelocityModel.init(arch, (seed, 0)), VelocityModel.init(arch, (seed, 1)),
                       VelocityModel.init(arch, (seed, 2)))


def random_sample(rng, arch, n=4, t_lo=0.05):
    x0 = rng.standard_normal((n, arch.data_dim))
    eps = rng.standard_normal((n, arch.data_dim))
    t = rng.uniform(t_lo, 1.0, size=n)
    c = rng.standard_normal((n, arch.cond_dim))
    return x0, eps, t, c


def loss_closures(triple, rng):
    """Closures ``params -> (loss, grad)`` for every differentiable loss, keyed by name."""
    arch = triple.learned.arch
    x0, eps, t, c = random_sample(rng, arch)
    xt = (1 - t[:, None]) * x0 + t[:, None] * eps
    A = rng.uniform(-1, 1, size=x0.shape[0])
    r_norm = rng.uniform(0, 1, size=x0.shape[0])

    def with_learned(p):
        return ModelTriple(triple.learned.with_params(p), triple.rollout, triple.reference)

    def af(schedule):
        sched = GammaSchedule.parse(schedule)

        def closure(p):
            lb, g = advantageflow_loss(with_learned(p), advantage_weight(sched, A), x0, xt, t, c,
                                       gamma_value(sched, A), 0.001)
            return lb.total, g
        return closure

    return {
        "flow_matching_loss": lambda p: flow_matching_loss(triple.learned.with_params(p), x0, eps, t, c),
        "prediction_loss": lambda p: prediction_loss(triple.learned.with_params(p), x0, eps, t, c),
        "advantageflow_loss[constant:1.1]": af("constant:1.1"),
        "advantageflow_loss[adaptive]": af("adaptive"),
        "advantageflow_loss[nft:0.5]": af("nft:0.5"),
        "nft_branch_loss": lambda p: nft_branch_loss(with_learned(p), NftBranchInputs(0.5, r_norm),
                                                     x0, xt, t, c),
    }


def _faulty(closure):
    def wrapped(p):
        loss, g = closure(p)
        return loss, -g
    return wrapped


def check_gradients(seed, n_models=5, fault=None):
    worst = {}
    for m in range(n_models):
        triple = random_triple(SMALL_ARCH, (seed, m))
        for name, closure in loss_closures(triple, make_rng(seed, "grad", m)).items():
            if fault == "grad_sign":
                closure = _faulty(closure)
            rep = grad_check(triple.learned.params, closure, 1e-5, seed=m)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_err)
    return [_check(f"grad_check.{k}", v, 1e-5) for k, v in worst.items()]


def check_t2_identity(seed, n=1000):
    rng = make_rng(seed, "t2")
    model = VelocityModel.init(SMALL_ARCH, (seed, 7))
    worst = 0.0
    for _ in range(n):
        x0, eps, t, c = random_sample(rng, SMALL_ARCH, n=1, t_lo=0.001)
        fm, _ = flow_matching_loss(model, x0[0], eps[0], t[0], c[0])
        pl, _ = prediction_loss(model, x0[0], eps[0], t[0], c[0])
        worst = max(worst, abs(pl - t[0] ** 2 * fm) / max(abs(pl), 1e-300))
    return [_check("t2_identity.max_rel_err", worst, 1e-12)]


def random_dists(seed, n_dists=100):
    rng = make_rng(seed, "dists")
    return [FiniteDist.random(rng, int(rng.integers(2, 50)), min_prob=1e-4) for _ in range(n_dists)]


def check_tilt(seed):
    rng = make_rng(seed, "tilt_eta")
    norm_err = gain_err = 0.0
    boundary_ok = True
    for d in random_dists(seed):
        eta_max = max_tilt(d)
        eta = float(rng.uniform(0, eta_max))
        q = tilt(d, eta)
        norm_err = max(norm_err, abs(math.fsum(q.probs) - 1.0))
        gain = reward_gain(d, eta)
        gain_err = max(gain_err, abs(gain - eta * d.reward_var()) / max(eta * d.reward_var(), 1e-300))
        tilt(d, eta_max)
        try:
            tilt(d, eta_max * (1 + 1e-9))
            boundary_ok = False
        except TiltError as exc:
            boundary_ok &= exc.max_eta == eta_max
    return [
        _check("tilt.normalization_abs_err", norm_err, 1e-12),
        _check("tilt.reward_gain_rel_err", gain_err, 1e-12),
        _check("tilt.positivity_boundary", 0.0 if boundary_ok else 1.0, 0.0),
    ]


def check_fisher_rao(seed):
    rng = make_rng(seed, "fr")
    step_err = cond_err = 0.0
    for d in random_dists(seed):
        eta = float(rng.uniform(0, max_tilt(d)))
        step = d.probs + eta * fisher_rao_direction(d)
        step_err = max(step_err, float(np.max(np.abs(step - tilt(d, eta).probs))))
        cond_err = max(cond_err, fisher_rao_condition_error(d, zero_mean_tests(rng, d, 50)))
    return [
        _check("fisher_rao.step_equals_tilt", step_err, 0.0),
        _check("fisher_rao.defining_condition", cond_err, 1e-12),
    ]


def check_decomposition(seed):
    rng = make_rng(seed, "decomp")
    worst = 0.0
    for k in range(5):
        model = VelocityModel.init(ArchSpec(2, (16,)), (seed, 20 + k))
        d = FiniteDist.random(rng, 20, dim=2)
        worst = max(worst, decompose_loss(model, d, 0.5 * max_tilt(d), 2000, rng).rel_err)
    return [_check("decomposition.recombination_rel_err", worst, 1e-12)]


def check_rao_blackwell(seed, n_trials=10_000, seeds=3):
    out = []
    toy = GaussianToy(0.0, 1.0, t=0.5)
    for s in range(seeds):
        model = VelocityModel.init(ArchSpec(1, (16, 16)), (seed, 100 + s))
        rep = rao_blackwell_check(toy, model, n_trials, make_rng(seed, "rb", s))
        margin = 1 + 3 / math.sqrt(n_trials)
        out.append(_check(f"rao_blackwell[{s}].var_ratio", rep.var_rollout / rep.var_sample, margin))
        out.append(_check(f"rao_blackwell[{s}].mean_z", rep.max_mean_z, 3.0))
        cz = abs(rep.cross_term) / rep.cross_term_se if rep.cross_term_se > 0 else 0.0
        out.append(_check(f"rao_blackwell[{s}].cross_term_z", cz, 3.0))
    return out


def check_nft(seed, n=500):
    out = []
    for beta in (0.1, 0.5, 1.0):
        triple = random_triple(SMALL_ARCH, (seed, 50))
        samples = draw_equivalence_samples(make_rng(seed, "nft", int(beta * 10)), SMALL_ARCH, n)
        rep = equivalence_check(triple, beta, samples)
        out.append(_check(f"nft_equivalence[beta={beta}].grad_abs_diff", rep.max_grad_abs_diff, 1e-8))
        out.append(_check(f"nft_equivalence[beta={beta}].gap_theta_drift",
                          rep.max_gap_theta_drift, 1e-10))
    return out


def check_degenerate(seed):
    rng = make_rng(seed, "degenerate")
    k1 = np.max(np.abs(compute_advantages(rng.standard_normal((8, 1)))))
    flat = np.max(np.abs(compute_advantages(np.full((4, 4), 3.7))))
    r = rng.standard_normal((6, 5))
    centering = np.max(np.abs((r - r.mean(axis=1, keepdims=True)).sum(axis=1)))
    a, b = VelocityModel.init(SMALL_ARCH, 1), VelocityModel.init(SMALL_ARCH, 2)
    e0 = np.max(np.abs(ema_update(a, b, 0.0).params - b.params))
    e1 = np.max(np.abs(ema_update(a, b, 1.0).params - a.params))
    return [
        _check("advantages.k1_zero", k1, 0.0),
        _check("advantages.zero_variance_zero", flat, 0.0),
        _check("advantages.centering", centering, 1e-12),
        _check("ema.rho0_copies_learned", e0, 0.0),
        _check("ema.rho1_keeps_rollout", e1, 0.0),
    ]


def check_samplers(seed):
    model = VelocityModel.init(SMALL_ARCH, (seed, 9))
    rng = make_rng(seed, "samplers")
    xT = rng.standard_normal((64, 2))
    c = rng.standard_normal((64, 2))
    ode = sample_ode(model, xT, c, SamplerConfig(10))
    sde = sample_sde(model, xT, c, SamplerConfig(10, "sde", 0.0), rng).trajectory
    return [_check("sampler.sde_sigma0_equals_ode", 0.0 if np.array_equal(ode, sde) else 1.0, 0.0)]


SUITES = (check_gradients, check_t2_identity, check_tilt, check_fisher_rao, check_decomposition,
          check_rao_blackwell, check_nft, check_degenerate, check_samplers)


def run_verify(seed=0, fault=None):
    """Run every suite and return the aggregated report dict."""
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    checks = []
    for suite in SUITES:
        if suite is check_gradients:
            checks.extend(suite(seed, fault=fault))
        else:
            checks.extend(suite(seed))
    return {"seed": seed, "fault": fault, "passed": all(c["pass"] for c in checks),
            "checks": checks}


def report_schema():
    return json.loads(resources.files("advflow.harness").joinpath(
        "verify_report.schema.json").read_text())
