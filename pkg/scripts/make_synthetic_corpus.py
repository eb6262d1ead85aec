"""Write the synthetic nested-entity corpus as JSONL spans or CoNLL (flat spans only).

    python3 scripts/make_synthetic_corpus.py data/synthetic.jsonl --sentences 50 --seed 0
"""

import argparse
from pathlib import Path

from ner_rpn.corpus import write_conll, write_json_spans
from ner_rpn.synthetic import nested_pairs, synthetic_corpus


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("output", type=Path)
    p.add_argument("--sentences", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nested-every", type=int, default=4, help="every k-th sentence uses a nested template; 0 for none")
    args = p.parse_args()
    ds = synthetic_corpus(args.sentences, seed=args.seed, nested_every=args.nested_every)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    if args.output.suffix in (".conll", ".txt"):
        if nested_pairs(ds):
            raise SystemExit("CoNLL cannot hold nested spans; pass --nested-every 0 or write .jsonl")
        write_conll(ds, args.output)
    else:
        write_json_spans(ds, args.output)
    print(f"{len(ds)} sentences, {ds.n_gold()} entities, {nested_pairs(ds)} nested pairs -> {args.output}")


if __name__ == "__main__":
    main()
