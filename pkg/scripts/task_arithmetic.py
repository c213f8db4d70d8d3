"""
Task vectors and explainability transfer
========================================

Build task vectors from parameter snapshots and check the identities the
transfer rule relies on.  The snapshots here are random perturbations of one
initialization; the pipeline uses trained checkpoints.
"""
import numpy as np

from xferlab.arithmetic import (TransferConfig, apply, cosine_similarity, explainability_vector,
                                task_vector, transfer)
from xferlab.model import ModelConfig, init_parameters

cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=8, num_layers=1, num_heads=2,
                  mlp_ratio=2)
rng = np.random.default_rng(0)
base = init_parameters(cfg)


def nudge(theta, scale):
    return theta.with_values(theta.values + scale * rng.normal(size=theta.size))


src_ft, tgt_ft = nudge(base, 0.1), nudge(base, 0.1)
src_star = nudge(src_ft, 0.02)

tau_src = task_vector(src_ft, base)
tau_tgt = task_vector(tgt_ft, base)
tau_star = explainability_vector(src_star, src_ft)
print("|tau_src| =", round(tau_src.norm(), 4), " |tau_star| =", round(tau_star.norm(), 4))
print("cos(tau_src, tau_tgt) =", round(cosine_similarity(tau_src, tau_tgt), 4))

# adding a task vector back onto its base is exact, bit for bit
assert apply(base, [(1.0, tau_src)]).values.tobytes() == src_ft.values.tobytes()

# lambda2 = 0 gives back the target model; larger lambda2 moves along tau_star
for lam in (0.0, 0.5, 1.0):
    theta = transfer(base, tau_tgt, tau_star, TransferConfig(lambda1=1.0, lambda2=lam))
    print(f"lambda2={lam}: distance from target ft = "
          f"{np.linalg.norm(theta.values - tgt_ft.values):.4f}")
