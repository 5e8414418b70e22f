"""Grid over the current-batch regularization coefficients on tuning seeds.

The tuning seeds are disjoint from the seeds used by the acceptance suite
(0, 1, 2). Each variant runs over every cyclic order; the script prints the
mean final average accuracy per variant.

    python scripts/tune_current_lambda.py --seeds 100 101 --scales 0 0.1 1
"""

import argparse
import time

import numpy as np

from idbr.corpus import build_task_sequence
from idbr.data import prepare_synthetic
from idbr.evaluation import average_accuracy
from idbr.objectives import LossWeights
from idbr.synthetic import SyntheticConfig, cyclic_orders
from idbr.trainer import TrainConfig, run_sequence


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, nargs="+", default=[100, 101])
    p.add_argument("--scales", type=float, nargs="+", default=[0.0, 0.1, 1.0],
                   help="multipliers of the default current-batch coefficients (0.25, 0.20)")
    p.add_argument("--methods", nargs="+", default=["regularization", "idbr"])
    p.add_argument("--store-ratio", type=float, default=0.02)
    args = p.parse_args()

    cfg = SyntheticConfig()
    base = LossWeights()
    variants = {"replay": TrainConfig(method="replay", store_ratio=args.store_ratio)}
    for method in args.methods:
        for scale in args.scales:
            w = LossWeights(base.lambda_g_mem, base.lambda_s_mem,
                            scale * base.lambda_g_cur, scale * base.lambda_s_cur)
            variants[f"{method} x{scale:g}"] = TrainConfig(method=method, weights=w,
                                                           store_ratio=args.store_ratio)
    scores = {name: [] for name in variants}
    start = time.perf_counter()
    for seed in args.seeds:
        data = prepare_synthetic(cfg, seed)
        for order in cyclic_orders(cfg):
            seq = build_task_sequence(order, data.registry)
            for name, config in variants.items():
                result = run_sequence(seq, TrainConfig.from_dict({**config.to_dict(), "seed": seed}),
                                      data.vocab_size)
                scores[name].append(average_accuracy(result.accuracy))
    for name, vals in scores.items():
        print(f"{name:28s} {100 * np.mean(vals):6.2f}  " + " ".join(f"{100 * v:.1f}" for v in vals))
    print(f"{time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
