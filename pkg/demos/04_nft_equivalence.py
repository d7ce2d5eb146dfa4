"""The DiffusionNFT branch loss is AdvantageFlow with a particular rollout weight.

Scaled by ``t^2``, the branch loss has the same parameter gradient as the
prediction-space loss with advantage weight ``beta A`` and rollout weight
``beta (beta - A)``.  The remaining gap does not depend on the learned network.
"""
from advflow.nft import draw_equivalence_samples, equivalence_check
from advflow.nn import ArchSpec, VelocityModel
from advflow.rl import ModelTriple
from advflow.rng import make_rng

arch = ArchSpec(2, (32, 32), 2)
triple = ModelTriple(*(VelocityModel.init(arch, (0, k)) for k in range(3)))
for beta in (0.1, 0.5, 1.0):
    rep = equivalence_check(triple, beta, draw_equivalence_samples(make_rng(beta * 10), arch, 500))
    print(f"beta={beta}: max |grad diff| {rep.max_grad_abs_diff:.2e}, "
          f"gap drift under perturbation {rep.max_gap_theta_drift:.2e}, passed={rep.passed}")
