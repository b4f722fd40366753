"""Overfit the full clinical model on a handful of phantoms and report Dice.

    python scripts/overfit_phantoms.py --steps 300 --lr 3e-3
"""

import argparse
import json
import logging
import time

from ckd_transbts.config import ModelConfig, TrainConfig
from ckd_transbts.metrics import evaluate
from ckd_transbts.phantom import PhantomSpec, phantom_dataset
from ckd_transbts.training import model_from_checkpoint, train


def run(n=4, dims=64, steps=300, lr=3e-3, base=8, seed=0, val_every=25, out_dir=None):
    subjects = phantom_dataset(n, PhantomSpec(dims=(dims,) * 3, seed=seed))
    model_cfg = ModelConfig(base_embed=base, window=4, crop_size=dims, seed=seed)
    epochs = -(-steps // n)
    train_cfg = TrainConfig(base_lr=lr, epochs=epochs, crop_size=dims, augment=False, seed=seed,
                            val_every=val_every, max_steps=steps)
    result = train(model_cfg, train_cfg, subjects, val_subjects=subjects, out_dir=out_dir)
    model = model_from_checkpoint(result.best)
    report = evaluate(model, subjects, dims, train_cfg.overlap, train_cfg.blend, model_cfg.grouping,
                      name="overfit")
    return result, report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=4)
    ap.add_argument("--dims", type=int, default=64)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--base", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--val-every", type=int, default=25)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    t0 = time.time()
    _, report = run(args.n, args.dims, args.steps, args.lr, args.base, args.seed, args.val_every, args.out)
    print(json.dumps(report.aggregates, indent=2))
    print(f"elapsed {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
