"""How often does training collapse onto one side, with and without L4/L5?

Runs a handful of seeds at the default weights and again with the energy and
dis-correlation terms switched off, then tabulates outcome cases
(I separated, II one-sided, III leakage).
"""

import argparse
from dataclasses import replace

from xraysep import engine
from xraysep.engine import TrainConfig
from xraysep.losses import LossWeights
from xraysep.synthetic import SyntheticSpec, make_pair


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--jobs", type=int, default=1)
    a = ap.parse_args()

    pair = make_pair(SyntheticSpec("texture-pair", seed=0, size=128))
    base = TrainConfig(lr=1e-3, epochs=a.epochs, batch_size=8, width=32, snapshot_epochs=())
    settings = {"lambda3=2, lambda4=0.3": LossWeights(3, 5, 2, 0.3),
                "lambda3=0, lambda4=0  ": LossWeights(3, 5, 0, 0)}
    print(f"{'setting':24} {'I':>5} {'II':>5} {'III':>5}  mean error")
    for label, w in settings.items():
        entry = engine.run_trials(pair.r1, pair.r2, pair.x, replace(base, weights=w), a.seeds, 32, 16,
                                  (pair.x1, pair.x2), n_jobs=a.jobs)
        f = entry.frequencies()
        print(f"{label:24} {f['I']:5.2f} {f['II']:5.2f} {f['III']:5.2f}  {entry.mean_mse:.4f}")


if __name__ == "__main__":
    main()
