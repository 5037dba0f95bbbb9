"""Train the connected auto-encoders on one synthetic pair and separate its mix.

Compares the result with the trivial answer that hands each side half of
the mix. Defaults are a quick run; pass ``--epochs 100`` for the
desk-scale setting used by the acceptance suite.
"""

import argparse
import time
from pathlib import Path

from xraysep import engine
from xraysep.engine import TrainConfig
from xraysep.images import write_png16
from xraysep.losses import LossWeights
from xraysep.synthetic import SyntheticSpec, make_pair


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--width", type=int, default=32)
    ap.add_argument("--out", type=Path, default=Path("demos_out/02"))
    a = ap.parse_args()

    pair = make_pair(SyntheticSpec("texture-pair", seed=0, size=128))
    cfg = TrainConfig(weights=LossWeights(3, 5, 2, 0.3), lr=1e-3, epochs=a.epochs, batch_size=8,
                      seed=a.seed, width=a.width, snapshot_epochs=(1, a.epochs))

    t0 = time.perf_counter()
    state, res = engine.fit_and_separate(pair.r1, pair.r2, pair.x, cfg, p=32, overlap=16)
    print(f"trained {a.epochs} epochs in {time.perf_counter() - t0:.0f}s")
    for e in sorted({1, max(1, a.epochs // 2), a.epochs}):
        b = res.history[e - 1]
        print(f"  epoch {e:4d}  L1 {b.l1:7.3f}  L2 {b.l2:7.3f}  L3 {b.l3:7.3f}  "
              f"L4 {b.l4:7.3f}  L5 {b.l5:6.3f}  total {b.total:8.3f}")

    truth = (pair.x1, pair.x2)
    mse = engine.mse_eval([(res.x1_hat, res.x2_hat)], truth)
    trivial = engine.mse_eval([(pair.x / 2, pair.x / 2)], truth)
    oc = engine.classify_outcome(res.x1_hat, res.x2_hat, pair.x)
    print(f"per-pixel error  {mse:.4f}   (half-and-half answer: {trivial:.4f})")
    print(f"outcome case {oc.case.value}  energy ratio {oc.energy_ratio:.2f}  correlation {oc.correlation:+.2f}")

    a.out.mkdir(parents=True, exist_ok=True)
    for name in ("x1_hat", "x2_hat", "x_bar", "error_map"):
        write_png16(a.out / f"{name}.png", getattr(res, name))
    for epoch, imgs in res.snapshots.items():
        for key, img in imgs.items():
            write_png16(a.out / f"epoch_{epoch}_{key}.png", img)
    print(f"images written to {a.out}/")


if __name__ == "__main__":
    main()
