"""
Ablations at desk scale
=======================

Three switches of the training recipe, each averaged over three seeds:
mixing on or off, mixup labelling on or off (on a sparse world), and
whether gradients flow through the mixed student representations.
"""
import numpy as np

from rankdistill import experiments

SEEDS = (0, 1, 2)


def mean_map(sparse, **switches):
    maps = []
    for seed in SEEDS:
        ds = experiments.desk_dataset(seed, sparse)
        result = experiments.run_distillation(ds, experiments.desk_config(seed, **switches))
        maps.append(experiments.evaluate_head(result.head, ds)["mAP"])
    return float(np.mean(maps))


dense = {
    "mixup": mean_map(False),
    "no-aug": mean_map(False, no_aug=True),
    "all-grad": mean_map(False, all_grad=True),
}
sparse = {
    "mixup labelling": mean_map(True),
    "no-ml": mean_map(True, no_ml=True),
}
for table in (dense, sparse):
    for name, value in table.items():
        print(f"{name:16s} mAP {value:.4f}")
    print()
