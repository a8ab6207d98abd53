"""Accuracy per exit against its parameter and FLOP budget.

Trains a small model briefly, then truncates it at each exit and reports what
the compact model costs and how well it scores.
"""

import tempfile

from musekd.data import first_per_class, load_idx, make_digits_idx
from musekd.nn import BackboneSpec, build_backbone, count_flops, count_params
from musekd.objective import ObjectiveConfig
from musekd.training import DataSplits, Schedule, TrainSettings, evaluate, run_self_distill, truncate

paths = make_digits_idx(tempfile.mkdtemp(prefix="digits-"))
train = load_idx(paths["train_images"], paths["train_labels"])
test = load_idx(paths["test_images"], paths["test_labels"], split="test", stats=(train.mean, train.std))
data = DataSplits(first_per_class(train, 60), test)

net = build_backbone(BackboneSpec("small-cnn-4", 10, in_channels=1, input_size=28), seed=0)
run_self_distill(net, data, ObjectiveConfig("additive"), Schedule(0.05, (), 0.1, 3), 0, TrainSettings(batch_size=32))

full = count_params(net)
print(f"{'exit':>4} {'params':>9} {'share':>6} {'FLOPs':>11} {'top-1':>7}")
for k in range(1, 5):
    compact = truncate(net, k)
    acc = evaluate(compact, data.test)[0]
    p = count_params(net, k)
    print(f"{k:>4} {p:>9,} {p / full:>6.1%} {count_flops(net, up_to_module=k):>11,} {acc:>6.2f}%")
