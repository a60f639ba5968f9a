"""
Mixup labelling on a sparse world
=================================

On a world where every sample has at most three close neighbours, thresholded
teacher similarities give small positive sets. Handing each mixed sample
the positives of both parents enlarges them without another teacher call.
"""
import numpy as np

from rankdistill import experiments
from rankdistill.config import RunConfig
from rankdistill.embed import similarity_matrix
from rankdistill.labeling import mixup_labeling, similarity_labeling
from rankdistill.mixup import mix_batch, sample_lambda, sample_partners

world = experiments.desk_world(seed=0, sparse=True)
rng = np.random.default_rng(0)
idx = rng.permutation(world.size)[:200]
teacher = world.teacher[:, idx]

lam = sample_lambda(1.0, rng)
joint, mix = mix_batch(teacher, sample_partners(200, rng), lam, rng)
print(f"lambda = {lam:.3f}; joint set has {joint.shape[1]} columns")
print("first mixing entries (k, r_k, mixed):", mix.entries[:3])

S = similarity_matrix(joint)
sl = similarity_labeling(S, tau=0.75)
ml = mixup_labeling(sl, mix)
for name, P in (("similarity labels", sl), ("+ mixup labels", ml)):
    sizes = P.sizes()
    print(f"{name:18s} empty queries {np.mean(sizes == 0):6.1%}   mean |P_q| {sizes.mean():.2f}   symmetric {P.is_symmetric()}")

# the same statistics across many batches, as the command line reports them
for no_ml in (True, False):
    cfg = RunConfig(no_ml=no_ml)
    sizes = np.concatenate([
        experiments.positive_set_sizes(world.teacher, cfg, np.random.default_rng(s)) for s in range(3)
    ])
    _, summary = experiments.label_statistics(sizes)
    print(f"no_ml={no_ml!s:5s}  empty fraction {summary['empty_fraction']:.3f}   mean |P_q| {summary['mean_positive_size']:.2f}")
