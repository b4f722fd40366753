"""Train and evaluate every preset of an ablation suite on generated phantoms.

    python scripts/ablation_suite.py --suite TABLE2 --steps 50 --out runs/table2
"""

import argparse
import logging
import math
import time
from pathlib import Path

from ckd_transbts.cli import ABLATION_COLUMNS, run_ablation
from ckd_transbts.config import SUITES, ModelConfig, TrainConfig
from ckd_transbts.phantom import PhantomSpec, phantom_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--suite", type=str.upper, choices=sorted(SUITES), default="TABLE2")
    ap.add_argument("--n", type=int, default=4)
    ap.add_argument("--dims", type=int, default=32)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--base", type=int, default=8)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    spec = PhantomSpec(dims=(args.dims,) * 3, radius_range=(0.16 * args.dims, 0.22 * args.dims), seed=args.seed)
    subjects = phantom_dataset(args.n, spec)
    crop = 32 * math.ceil(args.dims / 32)
    base = ModelConfig(base_embed=args.base, crop_size=crop, seed=args.seed)
    train_cfg = TrainConfig(base_lr=args.lr, epochs=math.ceil(args.steps / args.n), max_steps=args.steps,
                            crop_size=crop, augment=False, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    rows = run_ablation(args.suite, subjects, out, base, train_cfg)
    cols = [c for c in ABLATION_COLUMNS if c not in ("model", "hd95_et", "hd95_tc", "hd95_wt")]
    print("  ".join(cols))
    for r in rows:
        print("  ".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    print(f"elapsed {time.time() - t0:.0f}s, table at {out / 'ablation.csv'}")


if __name__ == "__main__":
    main()
