"""Reward fine-tuning with AdvantageFlow.

Starting from the pretrained mixture model, the reward is 1 for samples
nearest the right-hand mode.  We compare a constant rollout weight of 1.1
with the adaptive weight ``1 - A``.  The quadratic coefficient logged per
iteration stays positive throughout, which is what keeps each per-sample
regression target well posed.
"""
import sys
from pathlib import Path

from advflow.harness.config import RunConfig
from advflow.harness.runs import finetune, pretrain

root = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_runs")
base = RunConfig.from_dict({"seed": 0, "output_dir": str(root / "pretrain")}, env=False)
ckpt = root / "pretrain" / "pretrain.aflw"
if not ckpt.is_file():
    pretrain(base)

for sched in ("constant:1.1", "adaptive"):
    cfg = RunConfig.from_dict({"seed": 0, "output_dir": str(root / sched.replace(":", "_")),
                               "train": {"L": 8, "K": 4, "gamma_schedule": sched}}, env=False)
    res = finetune(cfg, "advflow", ckpt)
    m = res.metrics
    hit = next((r["iter"] for r in m if r["eval_reward"] >= 0.8), None)
    lo = min(r["min_quad_coeff"] for r in m)
    hi = max(r["max_quad_coeff"] for r in m)
    print(f"{sched:13s} eval reward {m[0]['eval_reward']:.3f} -> {m[-1]['eval_reward']:.3f}, "
          f"first >= 0.8 at iter {hit}, quad coeff in [{lo:.3f}, {hi:.3f}], "
          f"{m[-1]['wall_s']:.1f} s")
