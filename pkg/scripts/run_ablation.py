"""Ablation direction check on the synthetic corpus.

Trains the full model and two ablations (no random negatives, quarter-width
stage-2 channels) on an 80/20 split for several seeds and prints held-out
precision / F1 per variant and their seed averages.

    python3 scripts/run_ablation.py --seeds 0 1 2 --epochs 40
"""

import argparse
import dataclasses
import statistics

import numpy as np

from ner_rpn.metrics import evaluate
from ner_rpn.pipeline import EncoderConfig, TrainConfig, predict_corpus, train_end_to_end
from ner_rpn.encoder import Vocab
from ner_rpn.region_proposal import Stage1Config
from ner_rpn.stage2 import Stage2Config
from ner_rpn.synthetic import synthetic_corpus

VARIANTS = {
    "full": {},
    "no_random_negatives": {"random_negatives_per_sentence": 0},
    "channels_0.25": {"channel_scale": 0.25},
}


def split(dataset, seed, held_out=0.2):
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_test = int(round(held_out * len(dataset)))
    return dataset.subset(sorted(order[n_test:])), dataset.subset(sorted(order[:n_test]))


def run(variant, seed, args):
    corpus = synthetic_corpus(args.sentences, seed=args.corpus_seed)
    train, test = split(corpus, seed)
    s1 = Stage1Config()
    s2 = dataclasses.replace(Stage2Config(), **VARIANTS[variant])
    tc = TrainConfig(lr=args.lr, batch_size=16, stage1_epochs=args.epochs, stage2_epochs=args.epochs)
    stage1, stage2, _ = train_end_to_end(
        train, s1, s2, tc, seed, EncoderConfig(), Vocab.from_sentences(corpus)
    )
    return evaluate(predict_corpus(test, stage1, stage2, s1, s2), test)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--sentences", type=int, default=50)
    p.add_argument("--corpus-seed", type=int, default=0)
    args = p.parse_args()
    print("variant\tseed\tprecision\trecall\tf1")
    for variant in VARIANTS:
        results = [run(variant, s, args) for s in args.seeds]
        for s, r in zip(args.seeds, results):
            print(f"{variant}\t{s}\t{r.precision:.4f}\t{r.recall:.4f}\t{r.f1:.4f}")
        mean = lambda xs: statistics.fmean(xs)  # noqa: E731
        print(f"{variant}\tmean\t{mean(r.precision for r in results):.4f}\t"
              f"{mean(r.recall for r in results):.4f}\t{mean(r.f1 for r in results):.4f}")


if __name__ == "__main__":
    main()
