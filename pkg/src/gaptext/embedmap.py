"""Pooled-embedding extraction and exact t-SNE."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .model import RegressorModel, collate


class TsneError(RuntimeError):
    pass


@dataclass
class EmbeddingMatrix:
    X: np.ndarray
    crystal_system: list[str]
    band_gap: list[float]

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] < 2:
            raise ValueError("need an N x d matrix with N >= 2")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("embedding matrix has non-finite entries")


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    exaggeration: float = 12.0
    exaggeration_iters: int = 100
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    adaptive_gains: bool = True
    seed: int = 0

    def check(self, n: int):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 1 <= self.perplexity <= (n - 1) / 3:
            raise ValueError(f"perplexity {self.perplexity} outside [1, (N-1)/3] for N={n}")


@dataclass
class TsneResult:
    Y: np.ndarray
    kl: list[float]
    config: dict = field(default_factory=dict)


@torch.no_grad()
def extract_embeddings(m: RegressorModel, seqs, crystal_system, band_gap, layer: int,
                       pooling: str | None = None, batch_size: int = 64) -> EmbeddingMatrix:
    if not seqs:
        raise ValueError("empty corpus")
    if not 0 <= layer <= m.cfg.n_layers:
        raise ValueError(f"layer {layer} outside [0, {m.cfg.n_layers}]")
    m.eval()
    rows = []
    for i in range(0, len(seqs), batch_size):
        out = m(collate(seqs[i:i + batch_size]), pooling=pooling)
        rows.append(out.hidden[:, layer].double().numpy())
    return EmbeddingMatrix(np.concatenate(rows), list(crystal_system), list(band_gap))


def squared_distances(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_entropy(d, beta):
    # d: distances to the other points of one row; returns (entropy in nats, probs)
    shifted = d - d.min()
    p = np.exp(-beta * shifted)
    s = p.sum()
    H = np.log(s) + beta * np.sum(shifted * p) / s
    return H, p / s


def perplexity_calibrate(distances, perplexity: float, tol: float = 1e-10, max_steps: int = 200) -> np.ndarray:
    """Conditional affinities P[i, j] = p_{j|i} with per-row Gaussian
    precision chosen by bisection so that exp(entropy) == perplexity.

    `distances` are squared Euclidean distances (zero diagonal).
    """
    D = np.asarray(distances, dtype=float)
    n = D.shape[0]
    if D.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if np.any(D < 0) or not np.allclose(D, D.T) or np.any(np.diag(D) != 0):
        raise ValueError("distances must be symmetric, nonnegative, zero on the diagonal")
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        d = np.delete(D[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        scale = np.mean(d) if np.mean(d) > 0 else 1.0
        beta = 1.0 / scale
        for _ in range(max_steps):
            H, p = _row_entropy(d, beta)
            diff = H - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        else:
            raise TsneError(f"perplexity calibration did not converge for row {i}")
        P[i, np.arange(n) != i] = p
    return P


def row_perplexity(P) -> np.ndarray:
    """exp(Shannon entropy in nats) of each row; same as 2**(entropy in bits)."""
    P = np.asarray(P, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(P > 0, P * np.log(P), 0.0), axis=1)
    return np.exp(ent)


def joint_probabilities(X, perplexity: float) -> np.ndarray:
    P = perplexity_calibrate(squared_distances(X), perplexity)
    return (P + P.T) / (2.0 * P.shape[0])


def _row_seed(row: np.ndarray, seed: int) -> int:
    h = hashlib.sha256(np.ascontiguousarray(row, dtype=np.float64).tobytes() + str(seed).encode())
    return int.from_bytes(h.digest()[:8], "little")


def initial_layout(X, seed: int, scale: float = 1e-4) -> np.ndarray:
    """Each point's start position depends only on its own coordinates and the seed."""
    return np.stack([np.random.default_rng(_row_seed(r, seed)).normal(0.0, scale, 2) for r in np.asarray(X)])


def kl_divergence(P, Y) -> float:
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = num / num.sum()
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def tsne(emb, cfg: TsneConfig = TsneConfig()) -> TsneResult:
    """Exact O(N^2) t-SNE with early exaggeration, momentum and adaptive gains.

    ``kl[t]`` is KL(P || Q) with the un-exaggerated P after iteration t+1.
    Rows are processed in lexicographic order of their coordinates so the
    map is exactly permutation-equivariant; floating-point summation order
    would otherwise be amplified by the optimization.
    """
    X = emb.X if isinstance(emb, EmbeddingMatrix) else np.asarray(emb, dtype=float)
    n = X.shape[0]
    cfg.check(n)
    order = np.lexsort(X.T[::-1])
    X = X[order]
    P = joint_probabilities(X, cfg.perplexity)
    Y = initial_layout(X, cfg.seed)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl = []
    for it in range(cfg.iterations):
        exag = cfg.exaggeration if it < cfg.exaggeration_iters else 1.0
        num = 1.0 / (1.0 + squared_distances(Y))
        np.fill_diagonal(num, 0.0)
        Q = num / num.sum()
        W = (exag * P - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        if not np.all(np.isfinite(grad)):
            raise TsneError(f"non-finite gradient at iteration {it + 1}")
        mom = cfg.momentum if it < cfg.momentum_switch else cfg.final_momentum
        if cfg.adaptive_gains:
            same = np.sign(grad) == np.sign(update)
            gains = np.where(same, gains * 0.8, gains + 0.2)
            np.maximum(gains, 0.01, out=gains)
        update = mom * update - cfg.learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        kl.append(kl_divergence(P, Y))
    out = np.empty_like(Y)
    out[order] = Y
    return TsneResult(out, kl, asdict(cfg))


def neighbor_preservation(X, Y, k: int = 5) -> dict[str, float]:
    """Trustworthiness and mean k-NN overlap between the input and the map."""
    from sklearn.manifold import trustworthiness

    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    k = min(k, (X.shape[0] - 1) // 2) or 1
    DX, DY = squared_distances(X), squared_distances(Y)
    np.fill_diagonal(DX, np.inf)
    np.fill_diagonal(DY, np.inf)
    nx = np.argsort(DX, axis=1, kind="stable")[:, :k]
    ny = np.argsort(DY, axis=1, kind="stable")[:, :k]
    overlap = np.mean([len(set(a) & set(b)) / k for a, b in zip(nx, ny)])
    return {"k": k, "trustworthiness": float(trustworthiness(X, Y, n_neighbors=k)),
            "knn_overlap": float(overlap)}


def coords_to_csv(Y, crystal_system, band_gap, ids=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "x", "y", "crystal_system", "band_gap"])
    ids = ids if ids is not None else range(len(Y))
    for i, (x, y), cs, g in zip(ids, Y, crystal_system, band_gap):
        w.writerow([i, f"{x:.8f}", f"{y:.8f}", cs, f"{g:.3f}"])
    return buf.getvalue()


def scatter_svg(Y, crystal_system, band_gap, path, color_by: str = "crystal_system") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    Y = np.asarray(Y)
    plt.rcParams["svg.hashsalt"] = "gaptext"
    fig, ax = plt.subplots(figsize=(5, 5))
    if color_by == "band_gap":
        sc = ax.scatter(Y[:, 0], Y[:, 1], c=band_gap, s=8, cmap="viridis")
        fig.colorbar(sc, ax=ax, label="band gap (eV)")
    else:
        for cs in sorted(set(crystal_system)):
            sel = [i for i, c in enumerate(crystal_system) if c == cs]
            ax.scatter(Y[sel, 0], Y[sel, 1], s=8, label=cs)
        ax.legend(fontsize=6)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
