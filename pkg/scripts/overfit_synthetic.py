"""Overfit the two-stage model on the synthetic corpus and report training-set scores.

    python3 scripts/overfit_synthetic.py --epochs 40
"""

import argparse
import time

from ner_rpn.metrics import classify_errors, evaluate
from ner_rpn.pipeline import EncoderConfig, TrainConfig, predict_corpus, train_end_to_end
from ner_rpn.region_proposal import Stage1Config
from ner_rpn.stage2 import Stage2Config
from ner_rpn.synthetic import nested_pairs, synthetic_corpus


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sentences", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=3e-3)
    args = p.parse_args()

    ds = synthetic_corpus(args.sentences, seed=args.seed)
    s1, s2 = Stage1Config(), Stage2Config()
    train = TrainConfig(lr=args.lr, batch_size=16, stage1_epochs=args.epochs, stage2_epochs=args.epochs)
    t0 = time.perf_counter()
    stage1, stage2, report = train_end_to_end(ds, s1, s2, train, args.seed, EncoderConfig())
    preds = predict_corpus(ds, stage1, stage2, s1, s2)
    res = evaluate(preds, ds)
    print(f"corpus: {len(ds)} sentences, {ds.n_gold()} entities, {nested_pairs(ds)} nested pairs")
    print(f"stage 1 region precision {report.region_precision:.4f} recall {report.region_recall:.4f}")
    print(f"stage 2 examples {report.example_counts}")
    print(f"train precision {res.precision:.4f} recall {res.recall:.4f} f1 {res.f1:.4f}")
    print(f"errors {classify_errors(preds, ds).counts}")
    print(f"{time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
