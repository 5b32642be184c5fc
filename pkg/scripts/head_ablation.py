"""Head ablation: global stream, local stream, or both, after full training.

Runs both training stages for each head mode and reports GZSL mAP and
F1@K per seed plus the seed means. The combined mode should match or
beat either single stream on the mean.
"""

import argparse

import numpy as np

from ovml.metrics import evaluate
from ovml.model import ModelConfig, fixed_table, init_model, score_batch
from ovml.synth import build_world, sample
from ovml.training import TrainConfig, run_stage1, run_stage2

MODES = ("both", "global", "local")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--labels", type=int, default=20)
    ap.add_argument("--train", type=int, default=600)
    ap.add_argument("--test", type=int, default=200)
    ap.add_argument("--epochs-stage1", type=int, default=30)
    ap.add_argument("--epochs-stage2", type=int, default=8)
    ap.add_argument("--k", type=int, default=3)
    args = ap.parse_args()

    print(f"{'seed':>6}  {'mode':>8}  {'GZSL mAP':>10}  {'F1@' + str(args.k):>8}")
    f1 = {mode: [] for mode in MODES}
    for seed in args.seeds:
        world = build_world(args.labels, 0.8, seed)
        train_ds = sample(world, args.train, world.split.seen, seed, stream="sample.train")
        test_ds = sample(world, args.test, world.split.all_ids, seed, stream="sample.test")
        cfg = TrainConfig(epochs_stage1=args.epochs_stage1, epochs_stage2=args.epochs_stage2)

        for mode in MODES:
            model = init_model(seed, world, ModelConfig(head_mode=mode))
            run_stage1(model, train_ds, cfg, seed, lambda record: None)
            run_stage2(model, train_ds, cfg, seed, lambda record: None)
            table = fixed_table(model, provenance="tuned")
            scores = score_batch(model, test_ds.images, table)
            gt = test_ds.ground_truth(table.label_ids)
            report = evaluate(scores, gt, world.split, "GZSL", (args.k,))
            f1[mode].append(report.prf_at_k[args.k][2])
            print(f"{seed:>6d}  {mode:>8}  {report.map:>10.4f}  {f1[mode][-1]:>8.4f}")

    print()
    for mode in MODES:
        print(f"{'mean':>6}  {mode:>8}  {'':>10}  {float(np.mean(f1[mode])):>8.4f}")


if __name__ == "__main__":
    main()
