"""Validation MAE per freeze strategy over several seeds on synthetic data.

    python scripts/freeze_sweep.py --n 512 --seeds 5 --out sweep.csv
"""

import argparse
import csv
import statistics
import sys

from gaptext.model import ModelConfig, init_model
from gaptext.records import stratified_split, synth_generate
from gaptext.textgen import to_structured_string
from gaptext.tokenizer import build_vocab, encode
from gaptext.trainer import FREEZE_STRATEGIES, Dataset, TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=512)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--max-len", type=int, default=96)
    ap.add_argument("--out", default="-")
    args = ap.parse_args()

    rs = synth_generate(args.n, seed=11)
    sp = stratified_split(rs, seed=0)
    texts = [to_structured_string(r).text for r in rs]
    vocab = build_vocab([texts[i] for i in sp.train], 1000)
    data = Dataset([encode(vocab, t, args.max_len) for t in texts], rs.band_gaps().tolist())
    tr, va = data.subset(sp.train), data.subset(sp.val)

    rows = []
    for strategy in FREEZE_STRATEGIES:
        maes = []
        for seed in range(args.seeds):
            cfg = ModelConfig("encoder", d_model=32, n_layers=args.layers, n_heads=2, d_ff=64,
                              vocab_size=len(vocab), max_len=args.max_len, init_std=0.1, seed=seed)
            _, rep = train(init_model(cfg), tr, va, TrainConfig(epochs=args.epochs, batch_size=16,
                                                                learning_rate=3e-3, weight_decay=0.0,
                                                                freeze_strategy=strategy, seed=seed))
            maes.append(rep.final["val"].mae)
            rows.append([strategy, seed, rep.trainable_params, f"{rep.trainable_percent:.2f}", f"{maes[-1]:.6f}"])
        print(f"{strategy:16s} trainable={rep.trainable_params:6d} median val MAE={statistics.median(maes):.4f}",
              file=sys.stderr)

    out = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["strategy", "seed", "trainable", "trainable_pct", "val_mae"])
    w.writerows(rows)
    if out is not sys.stdout:
        out.close()


if __name__ == "__main__":
    main()
