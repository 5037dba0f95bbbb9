"""Recombination error of the proposed model against the single-network baseline.

The baseline maps each RGB side straight to an X-ray with one shared
network and is trained only to make the two outputs add up to the mix.
Both are trained for the same number of epochs on the same pair.
"""

import argparse

import numpy as np

from xraysep import engine
from xraysep.engine import TrainConfig
from xraysep.pipeline import TripleDataset
from xraysep.synthetic import SyntheticSpec, make_pair


def rms(a):
    return float(np.linalg.norm(a) / np.sqrt(a.size))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()

    pair = make_pair(SyntheticSpec("texture-pair", seed=0, size=128))
    cfg = TrainConfig(lr=1e-3, epochs=a.epochs, batch_size=8, width=32, seed=a.seed, snapshot_epochs=())
    truth = (pair.x1, pair.x2)

    _, ours = engine.fit_and_separate(pair.r1, pair.r2, pair.x, cfg, 32, 16, snapshots=False)
    data = TripleDataset.from_images(pair.r1, pair.r2, pair.x, 32, 16)
    st = engine.train_baseline(data, cfg)
    base = engine.separate_baseline(st.weights, pair.r1, pair.r2, pair.x, 32, 16)

    print(f"{'':10} {'|x - xbar|':>11} {'side error':>11}")
    for name, res in (("proposed", ours), ("baseline", base)):
        print(f"{name:10} {rms(res.error_map):11.4f} {engine.mse_eval([(res.x1_hat, res.x2_hat)], truth):11.4f}")


if __name__ == "__main__":
    main()
