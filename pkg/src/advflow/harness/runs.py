"""Experiment drivers behind the CLI subcommands."""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from ..errors import CheckpointError, ConfigError, InputError
from ..flow import SamplerConfig, flow_matching_loss, prediction_loss, sample_ode, sample_times
from ..nn import AdamState, VelocityModel, adam_step, load_checkpoint, save_checkpoint
from ..rl import METRIC_FIELDS, ModelTriple, TrainingAborted, train_advantageflow, train_grpo_baseline
from ..rng import make_rng
from .config import RunConfig
from .metrics import MetricsWriter, read_metrics_csv

log = logging.getLogger(__name__)

PRETRAIN_CKPT = "pretrain.aflw"


def _prepare_dir(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {exc}", "output_dir") from None
    return path


def pretrain(cfg: RunConfig):
    """Fit a velocity model to the task's data distribution.

    Writes ``pretrain.aflw``, ``pretrain_metrics.{csv,jsonl}`` and
    ``pretrain_eval.json`` (mode masses of ODE samples) to the output dir.
    """
    out = _prepare_dir(cfg.output_dir)
    cfg.dump(out / "config.json")
    task, arch, p = cfg.task, cfg.arch, cfg.raw["pretrain"]
    model = VelocityModel.init(arch, cfg.seed)
    loss_fn = prediction_loss if p["loss"] == "prediction" else flow_matching_loss
    rng = make_rng(cfg.seed, "pretrain")
    state = AdamState.zeros_like(model.params)
    writer = MetricsWriter(out, "pretrain_metrics", ("step", "loss"))
    running = []
    for step in range(p["steps"]):
        x0, c = task.data.sample(rng, p["batch_size"])
        eps = rng.standard_normal(x0.shape)
        t = sample_times(rng, x0.shape[0], p["t_min"])
        loss, grad = loss_fn(model, x0, eps, t, c)
        params, state = adam_step(model.params, grad, state, lr=p["lr"])
        model = model.with_params(params)
        running.append(loss)
        if (step + 1) % p["log_every"] == 0 or step + 1 == p["steps"]:
            writer({"step": step + 1, "loss": float(np.mean(running))})
            running = []
    save_checkpoint(model, out / PRETRAIN_CKPT)
    summary = {"steps": p["steps"], **mode_mass_eval(model, cfg, p["eval_samples"], p["eval_steps"])}
    (out / "pretrain_eval.json").write_text(json.dumps(summary, indent=2) + "\n")
    return model, summary


def mode_mass_eval(model, cfg, n, steps):
    task = cfg.task
    rng = make_rng(cfg.seed, "mode_mass")
    prompts = task.prompts()
    C = prompts[np.arange(n) % prompts.shape[0]]
    x = sample_ode(model, rng.standard_normal((n, task.data_dim)), C, SamplerConfig(steps))[-1]
    masses = task.mode_masses(x)
    data_w = getattr(task.data, "weights", None)
    out = {"mode_masses": masses.tolist()}
    if data_w is not None:
        out["data_weights"] = list(map(float, data_w))
        out["max_mass_error"] = float(np.max(np.abs(masses - data_w)))
    return out


def finetune(cfg: RunConfig, algo="advflow", checkpoint=None):
    """Reward fine-tuning from a pretrained checkpoint.

    Writes ``finetune_<algo>.aflw`` (learned), ``finetune_<algo>_rollout.aflw``
    and ``finetune_metrics.{csv,jsonl}``.  On a numeric failure the last good
    state is checkpointed before the error propagates.
    """
    out = _prepare_dir(cfg.output_dir)
    cfg.dump(out / "config.json")
    train_cfg = cfg.train_config(algo)
    ckpt = Path(checkpoint) if checkpoint else out / PRETRAIN_CKPT
    if not ckpt.is_file():
        raise CheckpointError(f"pretrained checkpoint {ckpt} not found")
    reference = load_checkpoint(ckpt, expect_arch=cfg.arch)
    task = cfg.task
    triple = ModelTriple.from_reference(reference)
    writer = MetricsWriter(out, "finetune_metrics", METRIC_FIELDS)
    trainer = train_advantageflow if algo == "advflow" else train_grpo_baseline
    rng = make_rng(cfg.seed, "finetune", algo)
    try:
        result = trainer(triple, task.reward, task.prompts(), train_cfg, rng, callback=writer)
    except TrainingAborted as exc:
        save_checkpoint(exc.last_good.learned, out / f"finetune_{algo}_lastgood.aflw")
        log.error("training aborted; last good state saved")
        raise
    save_checkpoint(result.triple.learned, out / f"finetune_{algo}.aflw")
    save_checkpoint(result.triple.rollout, out / f"finetune_{algo}_rollout.aflw")
    return result


def evaluate(model, cfg: RunConfig, n_samples, steps, seed=None):
    """Mean and 95% normal CI of every reward component over ODE samples."""
    if n_samples < 1:
        raise InputError("n_samples must be >= 1: cannot summarise an empty sample")
    task = cfg.task
    rng = make_rng(cfg.seed if seed is None else seed, "eval")
    prompts = task.prompts()
    C = prompts[np.arange(n_samples) % prompts.shape[0]]
    xT = rng.standard_normal((n_samples, task.data_dim))
    x = sample_ode(model, xT, C, SamplerConfig(steps))[-1]
    stats = {}
    for name, vals in task.reward.components(x, C).items():
        mean = float(np.mean(vals))
        half = 1.96 * float(np.std(vals)) / math.sqrt(n_samples)
        stats[name] = {"mean": mean, "ci95": [mean - half, mean + half], "n": n_samples}
    return {"steps": steps, "rewards": stats, "mode_masses": task.mode_masses(x).tolist()}


def evaluate_checkpoint(path, cfg, n_samples, steps):
    if n_samples < 1:
        raise InputError("n_samples must be >= 1: cannot summarise an empty sample")
    return evaluate(load_checkpoint(path, expect_arch=cfg.arch), cfg, n_samples, steps)


# -- comparison ---------------------------------------------------------------


def _metrics_path(spec):
    p = Path(spec)
    if p.is_file() and p.suffix == ".csv":
        return p
    if p.is_file():
        p = RunConfig.load(p).output_dir
    return p / "finetune_metrics.csv"


def time_to_threshold(rows, threshold, key):
    for r in rows:
        if not math.isnan(r["eval_reward"]) and r["eval_reward"] >= threshold:
            return r[key]
    return None


def _ratio(a, b):
    if a is None or b is None:
        return "not reached"
    if b == 0:
        return math.inf if a > 0 else 1.0
    return a / b


def _value_at(rows, wall):
    last = math.nan
    for r in rows:
        if r["wall_s"] > wall:
            break
        if not math.isnan(r["eval_reward"]):
            last = r["eval_reward"]
    return last


def compare(spec_a, spec_b, threshold=0.8, out_dir=None, n_grid=50):
    """Align two runs by iteration and by wall-clock; report time-to-threshold ratios.

    ``spec_a``/``spec_b`` may be run configs, run directories or metrics CSVs.
    Ratios are A over B; a run that never reaches the threshold yields
    ``"not reached"``.
    """
    a, b = read_metrics_csv(_metrics_path(spec_a)), read_metrics_csv(_metrics_path(spec_b))
    by_iter = []
    for ra, rb in zip(a, b):
        by_iter.append({"iter": int(ra["iter"]), "a_eval_reward": ra["eval_reward"],
                        "b_eval_reward": rb["eval_reward"], "a_wall_s": ra["wall_s"],
                        "b_wall_s": rb["wall_s"]})
    t_max = max(a[-1]["wall_s"], b[-1]["wall_s"])
    by_wall = [{"wall_s": w, "a_eval_reward": _value_at(a, w), "b_eval_reward": _value_at(b, w)}
               for w in np.linspace(0, t_max, n_grid)]
    ta, tb = time_to_threshold(a, threshold, "wall_s"), time_to_threshold(b, threshold, "wall_s")
    ia, ib = time_to_threshold(a, threshold, "iter"), time_to_threshold(b, threshold, "iter")
    summary = {
        "threshold": threshold,
        "a": {"time_to_threshold_s": ta, "iters_to_threshold": ia,
              "final_eval_reward": a[-1]["eval_reward"]},
        "b": {"time_to_threshold_s": tb, "iters_to_threshold": ib,
              "final_eval_reward": b[-1]["eval_reward"]},
        "time_ratio": _ratio(ta, tb),
        "iter_ratio": _ratio(None if ia is None else ia + 1, None if ib is None else ib + 1),
    }
    if out_dir is not None:
        out = _prepare_dir(out_dir)
        for name, rows in (("compare_by_iter.csv", by_iter), ("compare_by_wall.csv", by_wall)):
            with open(out / name, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(rows[0]))
                w.writeheader()
                w.writerows(rows)
        (out / "compare_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary, by_iter, by_wall
