"""Command-line entry point: ``gaptext <subcommand> ...``."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .attnscore import bar_chart_svg, feature_attention_report, tables_to_csv
from .baseline import RFConfig, featurize_all, kfold_grid_search
from .embedmap import TsneConfig, coords_to_csv, extract_embeddings, scatter_svg, tsne
from .model import init_model, load_checkpoint, save_checkpoint
from .pipeline import (
    ConfigSchemaError, deterministic_mode, dataset, encode_rows, evaluate_splits,
    parse_config, read_corpus, read_splits, run_pipeline, select, tsne_layer, write_corpus,
)
from .records import FEATURES, filter_indices, load_records, stratified_split
from .textgen import DESCRIPTION, STRUCTURED
from .tokenizer import Vocab, build_vocab, encode
from .trainer import FREEZE_STRATEGIES, train

log = logging.getLogger("gaptext")


def _global_flags(parser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=d if suppress else 0)
    parser.add_argument("--deterministic", action="store_true", default=d if suppress else False)
    parser.add_argument("--format", choices=[STRUCTURED, DESCRIPTION], default=d if suppress else STRUCTURED)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaptext", description=__doc__)
    p.add_argument("--version", action="version", version=f"gaptext {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    s = sub.add_parser("ingest", parents=[common], help="filter records and write a stratified split")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--lo", type=float, default=0.0)
    s.add_argument("--hi", type=float, default=5.0)
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--out", required=True)

    s = sub.add_parser("textgen", parents=[common], help="render records as text with feature spans")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("tokenize", parents=[common], help="build a vocabulary from a corpus")
    s.add_argument("--vocab", required=True, help="output vocab file")
    s.add_argument("--in", dest="inp", required=True, help="corpus JSON lines")
    s.add_argument("--splits", help="build from the training split only")
    s.add_argument("--max-len", type=int, default=512)
    s.add_argument("--max-size", type=int, default=1000)
    s.add_argument("--out", help="optional JSON lines of token ids")

    s = sub.add_parser("train", parents=[common], help="fine-tune a regressor")
    s.add_argument("--config", required=True, help="YAML with model/train/tokenizer sections")
    s.add_argument("--splits", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--vocab", help="vocab file (default: built from the training split)")
    s.add_argument("--freeze", choices=FREEZE_STRATEGIES)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--report", help="per-epoch CSV (default: <out>.csv)")

    s = sub.add_parser("eval", parents=[common], help="MAE/RMSE/R2 per split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--splits", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", help="CSV path (default: stdout)")

    s = sub.add_parser("attn", parents=[common], help="feature attention attribution")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--splits")
    s.add_argument("--split", default="test")
    s.add_argument("--layers", default="first,last")
    s.add_argument("--out", required=True)
    s.add_argument("--svg", help="bar chart of the last requested layer")

    s = sub.add_parser("tsne", parents=[common], help="t-SNE map of pooled embeddings")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--splits")
    s.add_argument("--split", default="all")
    s.add_argument("--layer", default="last")
    s.add_argument("--perplexity", type=float, default=30.0)
    s.add_argument("--iterations", type=int, default=1000)
    s.add_argument("--out", required=True)
    s.add_argument("--svg")
    s.add_argument("--color-by", choices=["crystal_system", "band_gap"], default="crystal_system")

    s = sub.add_parser("baseline", parents=[common], help="random-forest grid search")
    s.add_argument("--grid", required=True, help="YAML mapping of RFConfig field -> list of values")
    s.add_argument("--splits", required=True)
    s.add_argument("--in", dest="inp", required=True, help="records JSON lines")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--out", required=True)

    s = sub.add_parser("pipeline", parents=[common], help="run a config-driven pipeline")
    s.add_argument("--config", required=True)
    return p


def _vocab_for(ckpt_vocab, path=None) -> Vocab:
    if path:
        return Vocab.load(path)
    if ckpt_vocab is None:
        raise SystemExit("checkpoint carries no vocabulary; pass --vocab")
    return Vocab(tuple(ckpt_vocab))


def _rows(corpus, splits_path, split):
    return select(corpus, read_splits(splits_path), split) if splits_path else corpus


def cmd_ingest(a):
    rs = load_records(a.inp)
    keep = filter_indices(rs, a.lo, a.hi)
    sp = stratified_split(rs, a.seed, a.bins, indices=keep)
    sp.meta.update({"lo": a.lo, "hi": a.hi, "n_input": len(rs), "n_kept": len(keep)})
    Path(a.out).write_text(sp.to_json() + "\n", encoding="utf-8")
    print(f"kept {len(keep)}/{len(rs)}: train={len(sp.train)} val={len(sp.val)} test={len(sp.test)}")


def cmd_textgen(a):
    rs = load_records(a.inp)
    write_corpus(rs, a.format, a.out)
    print(f"wrote {len(rs)} {a.format} texts to {a.out}")


def cmd_tokenize(a):
    corpus = read_corpus(a.inp)
    texts = [r["text"] for r in _rows(corpus, a.splits, "train")]
    v = build_vocab(texts, a.max_size)
    v.save(a.vocab)
    seqs = [encode(v, r["text"], a.max_len) for r in corpus]
    if a.out:
        with open(a.out, "w", encoding="utf-8") as fh:
            for r, ts in zip(corpus, seqs):
                fh.write(json.dumps({"id": r["id"], "ids": ts.ids, "truncated": ts.truncated}) + "\n")
    n_trunc = sum(ts.truncated for ts in seqs)
    print(f"vocab {len(v)} tokens; {n_trunc}/{len(seqs)} sequences truncated at {a.max_len}")


def cmd_train(a):
    raw = yaml.safe_load(Path(a.config).read_text(encoding="utf-8")) or {}
    cfg = parse_config({"seed": a.seed, **raw})
    if a.freeze:
        cfg.train["freeze_strategy"] = a.freeze
    corpus, splits = read_corpus(a.corpus), read_splits(a.splits)
    train_rows, val_rows = select(corpus, splits, "train"), select(corpus, splits, "val")
    vocab = Vocab.load(a.vocab) if a.vocab else build_vocab([r["text"] for r in train_rows],
                                                            cfg.tokenizer_cfg().max_vocab)
    max_len = cfg.tokenizer_cfg().max_len
    m = init_model(cfg.model_cfg(len(vocab)))
    m, report = train(m, dataset(train_rows, vocab, max_len),
                      dataset(val_rows, vocab, max_len) if val_rows else None, cfg.train_cfg())
    save_checkpoint(a.out, m, vocab.tokens, {"best_epoch": report.best_epoch,
                                             "freeze_strategy": cfg.train_cfg().freeze_strategy})
    Path(a.report or f"{a.out}.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.summary())


def cmd_eval(a):
    m, vtok, _ = load_checkpoint(a.ckpt)
    text = evaluate_splits(m, read_corpus(a.corpus), read_splits(a.splits), _vocab_for(vtok),
                           m.cfg.max_len, a.seed)
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_attn(a):
    m, vtok, _ = load_checkpoint(a.ckpt)
    v = _vocab_for(vtok)
    rows = _rows(read_corpus(a.corpus), a.splits, a.split)
    layers = [x.strip() for x in a.layers.split(",") if x.strip()]
    tables = feature_attention_report(m, encode_rows(rows, v, m.cfg.max_len), [r["spans"] for r in rows], layers)
    Path(a.out).write_text(tables_to_csv(tables, FEATURES), encoding="utf-8")
    if a.svg:
        bar_chart_svg(tables[-1], a.svg, FEATURES)
    for t in tables:
        print(f"layer {t.layer}: {t.n_samples} samples, {t.n_degenerate} degenerate, "
              f"{t.n_excluded_spans} truncated spans")


def cmd_tsne(a):
    m, vtok, _ = load_checkpoint(a.ckpt)
    v = _vocab_for(vtok)
    rows = _rows(read_corpus(a.corpus), a.splits, a.split)
    emb = extract_embeddings(m, encode_rows(rows, v, m.cfg.max_len), [r["crystal_system"] for r in rows],
                             [r["band_gap"] for r in rows], tsne_layer(a.layer, m.cfg.n_layers))
    res = tsne(emb, TsneConfig(perplexity=a.perplexity, iterations=a.iterations, seed=a.seed))
    Path(a.out).write_text(coords_to_csv(res.Y, emb.crystal_system, emb.band_gap, [r["id"] for r in rows]),
                           encoding="utf-8")
    if a.svg:
        scatter_svg(res.Y, emb.crystal_system, emb.band_gap, a.svg, a.color_by)
    print(f"{len(rows)} points, final KL {res.kl[-1]:.4f}")


def load_grid(path) -> list[dict]:
    """YAML mapping of RFConfig field -> value or list of values; expanded as a
    Cartesian product in file order."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict) or not raw:
        raise ValueError(f"{path}: grid must be a non-empty mapping")
    allowed = set(RFConfig.__dataclass_fields__) - {"seed"}
    bad = sorted(set(raw) - allowed)
    if bad:
        raise ValueError(f"{path}: unknown grid key(s): {', '.join(bad)}")
    keys = list(raw)
    values = [v if isinstance(v, list) else [v] for v in raw.values()]
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def cmd_baseline(a):
    rs = load_records(a.inp)
    splits = read_splits(a.splits)
    idx = sorted(splits.train + splits.val)  # CV over the non-test records
    X, y = featurize_all(rs.records)[idx], rs.band_gaps()[idx]
    res = kfold_grid_search(X, y, load_grid(a.grid), k=a.k, seed=a.seed)
    Path(a.out).write_text(res.to_csv(), encoding="utf-8")
    for gi, mae in enumerate(res.mean_mae):
        print(f"config {gi}: mean cv mae {mae:.4f}{'  <- best' if gi == res.best_index else ''}")


def cmd_pipeline(a):
    res = run_pipeline(a.config, command=" ".join(["gaptext"] + sys.argv[1:]))
    print(f"run dir: {res.run_dir}")
    if res.exit_code:
        print(res.manifest.error, file=sys.stderr)
    return res.exit_code


COMMANDS = {
    "ingest": cmd_ingest,
    "textgen": cmd_textgen,
    "tokenize": cmd_tokenize,
    "train": cmd_train,
    "eval": cmd_eval,
    "attn": cmd_attn,
    "tsne": cmd_tsne,
    "baseline": cmd_baseline,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    np.random.seed(a.seed)
    torch.manual_seed(a.seed)
    try:
        with deterministic_mode(a.deterministic and a.command != "pipeline"):
            return COMMANDS[a.command](a) or 0
    except ConfigSchemaError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"{a.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
