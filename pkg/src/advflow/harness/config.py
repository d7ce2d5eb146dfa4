"""Run configuration: one self-contained JSON file per run.

Only the output directory may be overridden from the environment
(``ADVFLOW_OUTPUT_DIR``).  Unknown keys are rejected with their dotted path.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError
from ..flow import SamplerConfig
from ..nn import ArchSpec
from ..rl import TrainConfig
from .tasks import Task

OUTPUT_ENV = "ADVFLOW_OUTPUT_DIR"

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "task": {
        "data": {"kind": "two_gauss", "means": [[-2.0, 0.0], [2.0, 0.0]],
                 "weights": [0.5, 0.5], "std": 0.4},
        "reward": {"kind": "mode_indicator", "target": 1},
    },
    "arch": {"hidden_widths": [64, 64], "activation": "tanh"},
    "pretrain": {"steps": 3000, "batch_size": 256, "lr": 1e-3, "loss": "prediction",
                 "t_min": 0.001, "log_every": 100, "eval_samples": 2000, "eval_steps": 40},
    "train": {
        "L": None, "K": 4, "gamma_schedule": "constant:1.1", "lam": 0.001, "rho": 0.9,
        "iterations": 300, "inner_steps": 1,
        "sampler": {"steps": 10, "mode": "ode", "sigma_scale": 0.3, "t_floor": None},
        "eval_sampler": {"steps": 40, "mode": "ode", "sigma_scale": 0.3, "t_floor": None},
        "eval_samples": 512, "eval_every": 1, "optimizer": "adam", "lr": 1e-3,
        "betas": [0.9, 0.999], "adam_eps": 1e-8, "t_min": 0.001, "clip_range": 0.2,
    },
    "grpo_sampler": {"steps": 10, "mode": "sde", "sigma_scale": 0.7, "t_floor": None},
    "eval": {"n_samples": 2000, "steps": 40},
}

DEFAULT_L = 32


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError("unknown key", where)
        if isinstance(base[key], dict) and key not in ("data", "reward"):
            if not isinstance(val, dict):
                raise ConfigError("expected a table", where)
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _sampler(d, path):
    try:
        return SamplerConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc), path) from None


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d, env=True):
        raw = _merge(DEFAULTS, d)
        if env and os.environ.get(OUTPUT_ENV):
            raw["output_dir"] = os.environ[OUTPUT_ENV]
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", "config") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", "config") from None
        return cls.from_dict(data)

    def dump(self, path):
        Path(path).write_text(json.dumps(self.raw, indent=2, sort_keys=True) + "\n")

    def validate(self):
        self.task
        self.arch
        self.train_config("advflow")
        self.train_config("grpo")
        p = self.raw["pretrain"]
        if p["steps"] < 0 or p["batch_size"] < 1:
            raise ConfigError("steps >= 0 and batch_size >= 1 required", "pretrain")
        if p["loss"] not in ("prediction", "flow_matching"):
            raise ConfigError(f"unknown loss {p['loss']!r}", "pretrain.loss")

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def output_dir(self):
        return Path(self.raw["output_dir"])

    @property
    def task(self):
        return Task(self.raw["task"])

    @property
    def arch(self):
        task = self.task
        a = self.raw["arch"]
        try:
            return ArchSpec(task.data_dim, tuple(a["hidden_widths"]), task.cond_dim, a["activation"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(str(exc), "arch") from None

    def batch_L(self):
        L = self.raw["train"]["L"]
        if L is not None:
            return int(L)
        task = self.task
        if task.cond_dim > 0:
            return min(DEFAULT_L, task.prompts().shape[0])
        return DEFAULT_L

    def train_config(self, algo="advflow"):
        t = dict(self.raw["train"])
        t["L"] = self.batch_L()
        t["sampler"] = _sampler(t["sampler"], "train.sampler")
        t["eval_sampler"] = _sampler(t["eval_sampler"], "train.eval_sampler")
        t["betas"] = tuple(t["betas"])
        if algo == "grpo":
            t["sampler"] = _sampler(self.raw["grpo_sampler"], "grpo_sampler")
        elif algo != "advflow":
            raise ConfigError(f"unknown algorithm {algo!r}", "algo")
        try:
            return TrainConfig(**t)
        except TypeError as exc:
            raise ConfigError(str(exc), "train") from None
