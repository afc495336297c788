"""Grid over architecture x optimizer x augmentation on one synthetic dataset.

Prints one JSON line per run and writes a summary table (CSV) at the end.

    python3 scripts/compare_models.py --epochs 30 --seeds 0 1 2 --out results/compare.csv
"""

import argparse
import csv
import itertools
import json
import sys
import time

from dramnet.evaluation import evaluate
from dramnet.model import build_model
from dramnet.presets import get_architecture
from dramnet.sim import ALL_CONDITIONS, generate_dataset
from dramnet.training import TrainConfig, image_set, split_dataset, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--archs", nargs="+", default=["dramnet", "alexnet-s", "vggnet-s"])
    p.add_argument("--optimizers", nargs="+", default=["sgd", "adam"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--master-seed", type=int, default=7)
    p.add_argument("--out", default="compare.csv")
    args = p.parse_args()

    ds = generate_dataset(3, ALL_CONDITIONS, 10, 1024, 1024, args.master_seed)
    images = image_set(ds.measurements, args.input_size)
    rows = []
    for arch_name, opt, augment, seed in itertools.product(args.archs, args.optimizers, (False, True), args.seeds):
        tr, te = split_dataset(images.labels, 0.6, seed)
        arch = get_architecture(arch_name, args.input_size)
        cfg = TrainConfig(optimizer=opt, epochs=args.epochs, augment=augment, seed=seed, input_size=args.input_size)
        start = time.perf_counter()
        model, _ = train(build_model(arch, seed), images.subset(tr), images.subset(te), cfg)
        r = evaluate(model, images.subset(te)).report
        row = {
            "arch": arch.name, "optimizer": cfg.optimizer, "augment": augment, "seed": seed,
            "accuracy": r.accuracy, "precision": r.macro_precision, "recall": r.macro_recall, "f1": r.macro_f1,
            "seconds": round(time.perf_counter() - start, 1),
        }
        print(json.dumps(row), flush=True)
        rows.append(row)
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
