"""Short self-distillation run on the bundled digits data.

Trains small-cnn-4 with additive MUSE plus CE and KD heads, then prints the
per-exit accuracy and the logged SI/MI losses from the final epoch.

    python gallery/self_distill_digits.py --epochs 4 --per-class 100
"""

import argparse
import tempfile

import numpy as np

from musekd.data import first_per_class, load_idx, make_digits_idx
from musekd.nn import BackboneSpec, build_backbone
from musekd.objective import ObjectiveConfig
from musekd.training import DataSplits, Schedule, TrainSettings, run_self_distill, thread_limits


def load(per_class):
    paths = make_digits_idx(tempfile.mkdtemp(prefix="digits-"))
    train = load_idx(paths["train_images"], paths["train_labels"])
    test = load_idx(paths["test_images"], paths["test_labels"], split="test", stats=(train.mean, train.std))
    return DataSplits(first_per_class(train, per_class), test)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--per-class", type=int, default=100)
    ap.add_argument("--variant", default="additive")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = load(args.per_class)
    net = build_backbone(BackboneSpec("small-cnn-4", 10, in_channels=1, input_size=28), args.seed)
    objective = ObjectiveConfig(args.variant, use_ce_heads=True, use_kd_heads=True)
    schedule = Schedule(0.05, (), 0.1, args.epochs)
    with thread_limits():
        result = run_self_distill(net, data, objective, schedule, args.seed, TrainSettings(batch_size=32))

    log = result.metrics
    last = log.last_epoch()
    for k, acc in enumerate(log.top1(), start=1):
        line = f"exit {k}: top-1 {acc:6.2f}%"
        if k < 4:
            for metric in ("si_loss", "mi_loss"):
                vals = log.values(metric, "train", k, last)
                if vals:
                    line += f"  {metric} {np.mean(vals):.3f}"
        print(line)


if __name__ == "__main__":
    main()
