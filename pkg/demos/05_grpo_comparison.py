"""AdvantageFlow against a minimal policy-gradient baseline.

The baseline rolls out with the stochastic sampler and ascends the clipped
likelihood-ratio surrogate of every recorded transition.  Both runs share the
pretrained start and the advantage estimator.  Which one wins is recorded,
not assumed; the answer shifts with batch size and noise level.
"""
import sys
from pathlib import Path

from advflow.harness.config import RunConfig
from advflow.harness.runs import compare, finetune, pretrain

root = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_runs")
ckpt = root / "pretrain" / "pretrain.aflw"
if not ckpt.is_file():
    pretrain(RunConfig.from_dict({"seed": 0, "output_dir": str(root / "pretrain")}, env=False))

dirs = {}
for algo in ("advflow", "grpo"):
    cfg = RunConfig.from_dict({"seed": 0, "output_dir": str(root / f"cmp_{algo}"),
                               "train": {"L": 8, "K": 4, "iterations": 150}}, env=False)
    finetune(cfg, algo, ckpt)
    dirs[algo] = cfg.output_dir

summary, _, _ = compare(dirs["advflow"], dirs["grpo"], 0.8, root / "cmp")
for algo, key in (("advflow", "a"), ("grpo", "b")):
    s = summary[key]
    print(f"{algo:8s} reached 0.8 at iter {s['iters_to_threshold']}, "
          f"{s['time_to_threshold_s']} s; final {s['final_eval_reward']:.3f}")
print("time ratio (advflow / grpo):", summary["time_ratio"])
