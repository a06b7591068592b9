"""Chained model vs independent heads on the dependent emotion, over seeds and folds."""

import argparse

import numpy as np

from nvchain.data import DEPENDENT_PAIR, generate_synthetic_dataset, select, speaker_disjoint_kfold
from nvchain.model import EMOTIONS, REFERENCE_CHAIN_ORDER, init_model
from nvchain.training import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--folds", type=int, nargs="+", default=[0, 1])
    args = ap.parse_args()
    config = TrainConfig(lr_chain=3e-2, lr_frontend=3e-3)
    dep = EMOTIONS.index(DEPENDENT_PAIR[1])
    margins = []
    print(f"{'seed':>4} {'fold':>4} {'chained':>8} {'indep':>8} {'margin':>8}")
    for seed in args.seeds:
        ds = generate_synthetic_dataset(400, 20, 16, seed=seed)
        folds = speaker_disjoint_kfold(ds.manifest, 5, seed=0)
        for i in args.folds:
            tr, va = select(ds.samples, folds[i].train_ids), select(ds.samples, folds[i].val_ids)
            scores = []
            for chained in (True, False):
                m = init_model(16, 16, 8, chain_order=REFERENCE_CHAIN_ORDER, seed=0, chained=chained)
                best, _ = train(m, tr, va, config)
                scores.append(evaluate(best, va)[0][dep])
            margins.append(scores[0] - scores[1])
            print(f"{seed:>4} {i:>4} {scores[0]:8.4f} {scores[1]:8.4f} {margins[-1]:8.4f}")
    print(f"margin min {min(margins):.4f}  mean {np.mean(margins):.4f}  max {max(margins):.4f}")


if __name__ == "__main__":
    main()
