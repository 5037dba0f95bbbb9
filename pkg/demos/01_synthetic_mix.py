"""Build a seeded synthetic double-sided "painting" and look at its mixed X-ray.

Writes the RGB sides, the per-side X-rays and the mix to ``demos_out/01``.
"""

import argparse
from pathlib import Path

import numpy as np

from xraysep.images import write_png16
from xraysep.synthetic import KINDS, SyntheticSpec, make_pair


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kind", choices=KINDS, default="texture-pair")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--out", type=Path, default=Path("demos_out/01"))
    a = ap.parse_args()

    pair = make_pair(SyntheticSpec(a.kind, a.seed, a.size, grain=0.1, cracks=0.1))
    a.out.mkdir(parents=True, exist_ok=True)
    for name in ("r1", "r2", "x1", "x2", "x"):
        write_png16(a.out / f"{name}.png", getattr(pair, name))

    corr = np.corrcoef(pair.x1.ravel(), pair.x2.ravel())[0, 1]
    print(f"mix rescale factor      {pair.factor:.4f}")
    print(f"side X-ray correlation  {corr:+.3f}  (distinct content keeps this near 0)")
    print(f"energy per side         {np.sum(pair.x1**2):.1f} / {np.sum(pair.x2**2):.1f}")
    print(f"images written to {a.out}/")


if __name__ == "__main__":
    main()
