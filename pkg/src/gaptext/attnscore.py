"""Feature-wise attention attribution.

Per layer and sample: average the header-token attention row over heads,
take the maximum over each feature's token span, min-max normalize across
the sample's features, then average the normalized scores over samples.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import DECODER, FIRST_TOKEN, RegressorModel, collate
from .tokenizer import token_spans

log = logging.getLogger(__name__)


@dataclass
class SampleScores:
    raw: dict[str, float]
    norm: dict[str, float]
    degenerate: bool = False
    excluded: list[str] = field(default_factory=list)


@dataclass
class FeatureAttentionTable:
    layer: int
    values: dict[str, float]
    n_samples: int
    n_degenerate: int = 0
    n_excluded_spans: int = 0
    n_excluded_samples: int = 0
    counts: dict[str, int] = field(default_factory=dict)


def head_average(attn, layer: int, header_pos: int) -> np.ndarray:
    """Mean over heads of the header row of `attn[layer]`.

    `attn` is indexed [layer][head][query][key]; `layer` is a plain index
    into it (callers using 1-based block numbers subtract one).
    """
    a = np.asarray(attn[layer], dtype=float)
    return a[:, header_pos, :].mean(axis=0)


def feature_span_max(s, spans: dict):
    """Max of `s` over each feature's inclusive token span.

    Returns (raw scores, names of features whose span is None, i.e. fully
    truncated away).
    """
    if not spans:
        raise ValueError("empty span set")
    s = np.asarray(s, dtype=float)
    raw, excluded = {}, []
    for name, span in spans.items():
        if span is None:
            excluded.append(name)
            continue
        t0, t1 = span
        if not 0 <= t0 <= t1 < len(s):
            raise ValueError(f"span {span} of {name!r} outside sequence of length {len(s)}")
        raw[name] = float(s[t0:t1 + 1].max())
    return raw, excluded


def minmax_normalize(raw: dict):
    """(normalized scores, degenerate flag). Equal scores map to all zeros."""
    if not raw:
        raise ValueError("no features to normalize")
    lo, hi = min(raw.values()), max(raw.values())
    if hi == lo:
        return {k: 0.0 for k in raw}, True
    return {k: (v - lo) / (hi - lo) for k, v in raw.items()}, False


def score_sample(s, spans: dict) -> SampleScores:
    raw, excluded = feature_span_max(s, spans)
    if not raw:
        return SampleScores({}, {}, False, excluded)
    norm, degenerate = minmax_normalize(raw)
    return SampleScores(raw, norm, degenerate, excluded)


def average_over_samples(samples, layer: int = 0) -> FeatureAttentionTable:
    """Per-feature mean of normalized scores; a feature missing from some
    samples is averaged over the samples where it is present."""
    samples = [s for s in samples if s.norm]
    if not samples:
        raise ValueError("no samples with scorable features")
    sums, counts = {}, {}
    for s in samples:
        for k, v in s.norm.items():
            sums[k] = sums.get(k, 0.0) + v
            counts[k] = counts.get(k, 0) + 1
    values = {k: sums[k] / counts[k] for k in sums}
    return FeatureAttentionTable(
        layer=layer,
        values=values,
        n_samples=len(samples),
        n_degenerate=sum(s.degenerate for s in samples),
        n_excluded_spans=sum(len(s.excluded) for s in samples),
        counts=counts,
    )


def resolve_layers(layers, n_layers: int) -> list[int]:
    """Map 'first'/'last'/1-based ints to 1-based block numbers."""
    out = []
    for l in layers:
        if l == "first":
            out.append(1)
        elif l == "last":
            out.append(n_layers)
        else:
            l = int(l)
            if not 1 <= l <= n_layers:
                raise ValueError(f"layer {l} outside [1, {n_layers}]")
            out.append(l)
    return out


@torch.no_grad()
def feature_attention_report(m: RegressorModel, seqs, char_spans, layers=("first", "last"),
                             batch_size: int = 32) -> list[FeatureAttentionTable]:
    """Attention attribution tables for the requested layers.

    `seqs` are encoded TokenSeqs and `char_spans` the matching lists of
    (feature, char_start, char_end). The header token is the model's pooling
    position. Samples whose spans were all truncated away are excluded and
    counted.
    """
    if len(seqs) != len(char_spans):
        raise ValueError("seqs and char_spans differ in length")
    if m.cfg.flavor == DECODER and m.cfg.pooling == FIRST_TOKEN:
        log.warning("first-token header under causal attention only attends to itself; "
                    "its attention row is degenerate")
    blocks = resolve_layers(layers, m.cfg.n_layers)
    per_layer = {l: [] for l in blocks}
    excluded_samples = 0
    m.eval()
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i:i + batch_size]
        out = m(collate(chunk))
        for j, ts in enumerate(chunk):
            spans = token_spans(ts, char_spans[i + j])
            if all(v is None for v in spans.values()):
                excluded_samples += 1
                continue
            header = int(out.pool_pos[j])
            for l in blocks:
                a = out.attentions[l - 1][j].double().numpy()
                s = a[:, header, :].mean(axis=0)
                per_layer[l].append(score_sample(s, spans))
    tables = []
    for l in blocks:
        if not per_layer[l]:
            raise ValueError("every sample had all feature spans truncated")
        t = average_over_samples(per_layer[l], layer=l)
        t.n_excluded_samples = excluded_samples
        tables.append(t)
    return tables


def tables_to_csv(tables, feature_order=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "feature", "avg_attention", "n_samples", "n_degenerate"])
    for t in tables:
        names = feature_order or sorted(t.values)
        for name in names:
            if name in t.values:
                w.writerow([t.layer, name, f"{t.values[name]:.10f}", t.counts.get(name, t.n_samples),
                            t.n_degenerate])
    return buf.getvalue()


def bar_chart_svg(table: FeatureAttentionTable, path, feature_order=None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [n for n in (feature_order or sorted(table.values)) if n in table.values]
    fig, ax = plt.subplots(figsize=(6, 0.25 * len(names) + 1))
    ax.barh(range(len(names)), [table.values[n] for n in names])
    ax.set_yticks(range(len(names)), names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlim(0, 1)
    ax.set_xlabel(f"average normalized attention, layer {table.layer}")
    fig.tight_layout()
    plt.rcParams["svg.hashsalt"] = "gaptext"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
