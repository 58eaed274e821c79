"""Config-driven experiment pipeline with run directories and manifests.

A run executes a subset of the stages in STAGES, in that order, inside
``<out_dir>/<timestamp>-<hash>/``. Every stage declares the artifacts it
reads and writes; it can only open those, and a stage whose inputs are not
produced by an earlier selected stage is rejected before anything runs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .attnscore import feature_attention_report, tables_to_csv
from .baseline import RFConfig, featurize_all, fit_random_forest, rf_predict
from .embedmap import TsneConfig, coords_to_csv, extract_embeddings, tsne
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .records import FEATURES, RecordSet, Splits, filter_indices, load_records, save_records, \
    stratified_split, synth_generate
from .textgen import STRUCTURED, render
from .tokenizer import Vocab, build_vocab, encode
from .trainer import Dataset, TrainConfig, bootstrap_metrics, metrics_from_predictions, predict, train

log = logging.getLogger(__name__)

STAGES = ["ingest", "textgen", "tokenize", "train", "evaluate", "attnscore", "embedmap", "baseline"]

RECORDS, SPLITS, CORPUS, VOCAB = "records.jsonl", "splits.json", "corpus.jsonl", "vocab.txt"
MODEL, TRAIN_LOG, METRICS = "model.pt", "train.csv", "metrics.csv"
ATTENTION, TSNE, BASELINE, MANIFEST = "attention.csv", "tsne.csv", "baseline.csv", "manifest.json"

READS = {
    "ingest": [],
    "textgen": [RECORDS],
    "tokenize": [CORPUS, SPLITS],
    "train": [CORPUS, SPLITS, VOCAB],
    "evaluate": [MODEL, CORPUS, SPLITS, VOCAB],
    "attnscore": [MODEL, CORPUS, SPLITS, VOCAB],
    "embedmap": [MODEL, CORPUS, SPLITS, VOCAB],
    "baseline": [RECORDS, SPLITS],
}
WRITES = {
    "ingest": [RECORDS, SPLITS],
    "textgen": [CORPUS],
    "tokenize": [VOCAB],
    "train": [MODEL, TRAIN_LOG],
    "evaluate": [METRICS],
    "attnscore": [ATTENTION],
    "embedmap": [TSNE],
    "baseline": [BASELINE],
}


class ConfigSchemaError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- config


@dataclass
class DataSection:
    input: str | None = None  # JSON-lines records; None synthesizes n_synthetic records
    n_synthetic: int = 64
    synthetic_seed: int = 0
    max_sites: int = 4
    lo: float = 0.0
    hi: float = 5.0
    bins: int = 10


@dataclass
class TokenizerSection:
    max_vocab: int = 1000
    max_len: int = 96


@dataclass
class AttnSection:
    layers: list = field(default_factory=lambda: ["first", "last"])
    split: str = "test"


@dataclass
class TsneSection:
    layer: int | str = "last"
    split: str = "all"
    perplexity: float = 10.0
    iterations: int = 500
    learning_rate: float = 200.0
    exaggeration: float = 12.0
    exaggeration_iters: int = 100


@dataclass
class BaselineSection:
    n_trees: int = 100
    max_depth: int | None = 50
    min_samples_split: int = 2
    min_samples_leaf: int = 2
    features_per_split: float = 1 / 3
    bootstrap: bool = True


_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"vocab_size", "max_len"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}

SECTIONS = {
    "data": {f.name for f in fields(DataSection)},
    "tokenizer": {f.name for f in fields(TokenizerSection)},
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "attn": {f.name for f in fields(AttnSection)},
    "tsne": {f.name for f in fields(TsneSection)},
    "baseline": {f.name for f in fields(BaselineSection)},
}
TOP_LEVEL = {"seed", "deterministic", "format", "stages", "out_dir"} | set(SECTIONS)


@dataclass
class PipelineConfig:
    seed: int = 0
    deterministic: bool = True
    format: str = STRUCTURED
    stages: list = field(default_factory=lambda: STAGES[:7])
    out_dir: str = "runs"
    data: dict = field(default_factory=dict)
    tokenizer: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    attn: dict = field(default_factory=dict)
    tsne: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)

    def data_cfg(self) -> DataSection:
        return DataSection(**{"synthetic_seed": self.seed, **self.data})

    def tokenizer_cfg(self) -> TokenizerSection:
        return TokenizerSection(**self.tokenizer)

    def model_cfg(self, vocab_size: int) -> ModelConfig:
        tok = self.tokenizer_cfg()
        return ModelConfig(**{"seed": self.seed, **self.model, "vocab_size": vocab_size,
                              "max_len": tok.max_len})

    def train_cfg(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    def attn_cfg(self) -> AttnSection:
        return AttnSection(**self.attn)

    def tsne_cfg(self) -> TsneSection:
        return TsneSection(**self.tsne)

    def baseline_cfg(self) -> RFConfig:
        return RFConfig(**{**asdict(BaselineSection()), **self.baseline, "seed": self.seed})

    def seeds(self) -> dict:
        return {"global": self.seed, "split": self.seed, "synthetic": self.data_cfg().synthetic_seed,
                "model_init": self.model.get("seed", self.seed), "train": self.train.get("seed", self.seed),
                "tsne": self.seed, "baseline": self.seed}


def parse_config(obj) -> PipelineConfig:
    """Validate a config mapping; unknown keys raise ConfigSchemaError."""
    if obj is None:
        obj = {}
    if not isinstance(obj, dict):
        raise ConfigSchemaError("config must be a mapping")
    unknown = sorted(set(obj) - TOP_LEVEL)
    if unknown:
        raise ConfigSchemaError(f"unknown key(s): {', '.join(unknown)}")
    for name, allowed in SECTIONS.items():
        sec = obj.get(name, {}) or {}
        if not isinstance(sec, dict):
            raise ConfigSchemaError(f"section '{name}' must be a mapping")
        bad = sorted(set(sec) - allowed)
        if bad:
            raise ConfigSchemaError(f"unknown key(s) in '{name}': {', '.join(bad)}")
    cfg = PipelineConfig(**{k: (v or {}) if k in SECTIONS else v for k, v in obj.items()})
    bad = [s for s in cfg.stages if s not in STAGES]
    if bad:
        raise ConfigSchemaError(f"unknown stage(s): {', '.join(bad)}")
    if cfg.format not in ("structured", "description"):
        raise ConfigSchemaError(f"unknown format {cfg.format!r}")
    cfg.stages = [s for s in STAGES if s in cfg.stages]
    produced = set()
    for s in cfg.stages:
        missing = [a for a in READS[s] if a not in produced]
        if missing:
            raise ConfigSchemaError(f"stage '{s}' needs {', '.join(missing)} from an earlier stage")
        produced.update(WRITES[s])
    try:  # surface value errors (bad freeze strategy, head count, ...) before running
        cfg.data_cfg(), cfg.tokenizer_cfg(), cfg.model_cfg(vocab_size=8), cfg.train_cfg()
        cfg.attn_cfg(), cfg.tsne_cfg(), cfg.baseline_cfg()
    except (TypeError, ValueError) as e:
        raise ConfigSchemaError(str(e)) from e
    return cfg


def load_config(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(yaml.safe_load(fh))


# ---------------------------------------------------------------- shared I/O


def write_corpus(rs: RecordSet, fmt: str, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, r in enumerate(rs):
            at = render(r, fmt)
            row = {"id": i, "text": at.text, "spans": [list(s) for s in at.spans],
                   "band_gap": r.band_gap, "crystal_system": r.crystal_system}
            fh.write(json.dumps(row) + "\n")


def read_corpus(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_splits(path) -> Splits:
    return Splits.from_json(Path(path).read_text(encoding="utf-8"))


def select(corpus: list[dict], splits: Splits, split: str) -> list[dict]:
    by_id = {row["id"]: row for row in corpus}
    ids = sorted(splits.train + splits.val + splits.test) if split == "all" else getattr(splits, split)
    return [by_id[i] for i in ids]


def encode_rows(rows, vocab: Vocab, max_len: int):
    return [encode(vocab, row["text"], max_len) for row in rows]


def dataset(rows, vocab: Vocab, max_len: int) -> Dataset:
    return Dataset(encode_rows(rows, vocab, max_len), [float(r["band_gap"]) for r in rows])


def metrics_rows_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "mae", "rmse", "r2", "n", "mae_sd"])
    for split, m, sd in rows:
        w.writerow([split, f"{m.mae:.6f}", f"{m.rmse:.6f}", f"{m.r2:.6f}", m.n, f"{sd['mae_sd']:.6f}"])
    return buf.getvalue()


def evaluate_splits(m, corpus, splits: Splits, vocab: Vocab, max_len: int, seed: int = 0) -> str:
    rows = []
    for name in ("train", "val", "test"):
        sel = select(corpus, splits, name)
        if not sel:
            continue
        data = dataset(sel, vocab, max_len)
        pred = predict(m, data)
        rows.append((name, metrics_from_predictions(data.targets, pred),
                     bootstrap_metrics(data.targets, pred, n_resamples=200, seed=seed)))
    return metrics_rows_csv(rows)


def tsne_layer(layer, n_layers: int) -> int:
    if layer == "last":
        return n_layers
    if layer == "first":
        return 1
    return int(layer)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class deterministic_mode:
    """Single-threaded, deterministic torch kernels for the duration of a block."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled

    def __enter__(self):
        if self.enabled:
            self._threads = torch.get_num_threads()
            self._det = torch.are_deterministic_algorithms_enabled()
            torch.set_num_threads(1)
            torch.use_deterministic_algorithms(True)
        return self

    def __exit__(self, *exc):
        if self.enabled:
            torch.set_num_threads(self._threads)
            torch.use_deterministic_algorithms(self._det)
        return False


# ---------------------------------------------------------------- stages


class _Artifacts:
    """Path lookup restricted to a stage's declared reads and writes."""

    def __init__(self, run_dir: Path, stage: str):
        self.run_dir, self.stage = run_dir, stage
        self.allowed = set(READS[stage]) | set(WRITES[stage])

    def __call__(self, name: str) -> Path:
        if name not in self.allowed:
            raise PermissionError(f"stage '{self.stage}' did not declare artifact {name}")
        return self.run_dir / name


def _stage_ingest(cfg: PipelineConfig, art):
    d = cfg.data_cfg()
    if d.input:
        rs = load_records(d.input)
    else:
        rs = synth_generate(d.n_synthetic, d.synthetic_seed, d.max_sites)
    save_records(rs, art(RECORDS))
    keep = filter_indices(rs, d.lo, d.hi)
    splits = stratified_split(rs, cfg.seed, d.bins, indices=keep)
    splits.meta.update({"lo": d.lo, "hi": d.hi, "n_input": len(rs), "n_kept": len(keep)})
    art(SPLITS).write_text(splits.to_json() + "\n", encoding="utf-8")


def _stage_textgen(cfg, art):
    write_corpus(load_records(art(RECORDS)), cfg.format, art(CORPUS))


def _stage_tokenize(cfg, art):
    corpus, splits = read_corpus(art(CORPUS)), read_splits(art(SPLITS))
    vocab = build_vocab([r["text"] for r in select(corpus, splits, "train")], cfg.tokenizer_cfg().max_vocab)
    vocab.save(art(VOCAB))


def _load_common(cfg, art):
    return read_corpus(art(CORPUS)), read_splits(art(SPLITS)), Vocab.load(art(VOCAB))


def _stage_train(cfg, art):
    corpus, splits, vocab = _load_common(cfg, art)
    max_len = cfg.tokenizer_cfg().max_len
    m = init_model(cfg.model_cfg(len(vocab)))
    val_rows = select(corpus, splits, "val")
    m, report = train(m, dataset(select(corpus, splits, "train"), vocab, max_len),
                      dataset(val_rows, vocab, max_len) if val_rows else None, cfg.train_cfg())
    art(TRAIN_LOG).write_text(report.to_csv(), encoding="utf-8")
    save_checkpoint(art(MODEL), m, vocab.tokens, {"best_epoch": report.best_epoch,
                                                  "freeze_strategy": cfg.train_cfg().freeze_strategy})
    log.info("train: %s", report.summary())


def _stage_evaluate(cfg, art):
    corpus, splits, vocab = _load_common(cfg, art)
    m, _, _ = load_checkpoint(art(MODEL))
    text = evaluate_splits(m, corpus, splits, vocab, m.cfg.max_len, cfg.seed)
    art(METRICS).write_text(text, encoding="utf-8")


def _stage_attnscore(cfg, art):
    corpus, splits, vocab = _load_common(cfg, art)
    m, _, _ = load_checkpoint(art(MODEL))
    a = cfg.attn_cfg()
    rows = select(corpus, splits, a.split)
    tables = feature_attention_report(m, encode_rows(rows, vocab, m.cfg.max_len),
                                      [r["spans"] for r in rows], a.layers)
    art(ATTENTION).write_text(tables_to_csv(tables, FEATURES), encoding="utf-8")


def _stage_embedmap(cfg, art):
    corpus, splits, vocab = _load_common(cfg, art)
    m, _, _ = load_checkpoint(art(MODEL))
    t = cfg.tsne_cfg()
    rows = select(corpus, splits, t.split)
    emb = extract_embeddings(m, encode_rows(rows, vocab, m.cfg.max_len), [r["crystal_system"] for r in rows],
                             [r["band_gap"] for r in rows], tsne_layer(t.layer, m.cfg.n_layers))
    tc = TsneConfig(perplexity=t.perplexity, iterations=t.iterations, learning_rate=t.learning_rate,
                    exaggeration=t.exaggeration, exaggeration_iters=t.exaggeration_iters, seed=cfg.seed)
    res = tsne(emb, tc)
    art(TSNE).write_text(coords_to_csv(res.Y, emb.crystal_system, emb.band_gap, [r["id"] for r in rows]),
                         encoding="utf-8")


def _stage_baseline(cfg, art):
    rs, splits = load_records(art(RECORDS)), read_splits(art(SPLITS))
    X, y = featurize_all(rs.records), rs.band_gaps()
    model = fit_random_forest(X[splits.train], y[splits.train], cfg.baseline_cfg())
    rows = []
    for name in ("train", "val", "test"):
        idx = getattr(splits, name)
        if idx:
            pred = rf_predict(model, X[idx])
            rows.append((name, metrics_from_predictions(y[idx], pred),
                         bootstrap_metrics(y[idx], pred, n_resamples=200, seed=cfg.seed)))
    art(BASELINE).write_text(metrics_rows_csv(rows), encoding="utf-8")


_RUNNERS = {
    "ingest": _stage_ingest,
    "textgen": _stage_textgen,
    "tokenize": _stage_tokenize,
    "train": _stage_train,
    "evaluate": _stage_evaluate,
    "attnscore": _stage_attnscore,
    "embedmap": _stage_embedmap,
    "baseline": _stage_baseline,
}


# ---------------------------------------------------------------- driver


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict
    version: str
    duration_s: float = 0.0
    stages: list = field(default_factory=list)
    status: str = "running"
    error: str | None = None

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class PipelineResult:
    exit_code: int
    run_dir: Path
    manifest: RunManifest


def _config_hash(snapshot: dict) -> str:
    return hashlib.sha256(json.dumps(snapshot, sort_keys=True).encode()).hexdigest()[:8]


def make_run_dir(out_dir, snapshot: dict) -> Path:
    base = f"{time.strftime('%Y%m%d-%H%M%S')}-{_config_hash(snapshot)}"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path, k = out / base, 1
    while path.exists():
        k += 1
        path = out / f"{base}.{k}"
    path.mkdir()
    return path


def run_pipeline(config, command: str = "pipeline", config_path=None) -> PipelineResult:
    """Run the selected stages. `config` is a path or a PipelineConfig.

    Config errors raise ConfigSchemaError before any stage runs; a failing
    stage stops the run with exit code 1, keeps what was written so far and
    records the stage name and cause in the manifest.
    """
    if not isinstance(config, PipelineConfig):
        config_path = config
        config = load_config(config)
    snapshot = asdict(config)
    inputs = {}
    if config_path is not None:
        inputs[str(config_path)] = sha256_file(config_path)
    data_input = config.data_cfg().input
    if data_input:
        if not Path(data_input).exists():
            raise ConfigSchemaError(f"data.input {data_input} does not exist")
        inputs[str(data_input)] = sha256_file(data_input)
    run_dir = make_run_dir(config.out_dir, snapshot)
    manifest = RunManifest(command, snapshot, config.seeds(), inputs, __version__)
    t0 = time.perf_counter()
    exit_code = 0
    with deterministic_mode(config.deterministic):
        torch.manual_seed(config.seed)
        np.random.seed(config.seed)
        for stage in config.stages:
            ts = time.perf_counter()
            try:
                _RUNNERS[stage](config, _Artifacts(run_dir, stage))
            except Exception as e:  # noqa: BLE001 - reported with the stage name
                err = StageError(stage, e)
                log.error("%s", err)
                manifest.stages.append({"name": stage, "status": "failed",
                                        "seconds": round(time.perf_counter() - ts, 3)})
                manifest.status, manifest.error, exit_code = "failed", str(err), 1
                break
            manifest.stages.append({"name": stage, "status": "ok",
                                    "seconds": round(time.perf_counter() - ts, 3)})
    if exit_code == 0:
        manifest.status = "ok"
    manifest.duration_s = round(time.perf_counter() - t0, 3)
    manifest.write(run_dir / MANIFEST)
    return PipelineResult(exit_code, run_dir, manifest)
