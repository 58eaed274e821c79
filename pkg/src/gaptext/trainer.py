"""Training loop, layer-freezing strategies, metrics and gradient checking."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .model import RegressorModel, collate, count_params

log = logging.getLogger(__name__)

FREEZE_STRATEGIES = ["none", "first_layer", "all_but_final_3", "all_but_final", "all"]


class FreezeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    freeze_strategy: str = "none"
    seed: int = 0
    patience: int = 0  # 0 disables early stopping
    target_train_mae: float = 0.0  # stop once train MAE falls below this (0 disables)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.freeze_strategy not in FREEZE_STRATEGIES:
            raise ValueError(f"unknown freeze strategy {self.freeze_strategy!r}")


@dataclass
class Metrics:
    mae: float
    rmse: float
    r2: float
    n: int = 0


@dataclass
class FreezeReport:
    strategy: str
    trainable: int
    total: int
    frozen_groups: list[str]

    @property
    def percent(self) -> float:
        return 100.0 * self.trainable / self.total


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    train_mae: list[float] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    final: dict[str, Metrics] = field(default_factory=dict)
    trainable_params: int = 0
    total_params: int = 0
    config: dict = field(default_factory=dict)

    @property
    def trainable_percent(self) -> float:
        return 100.0 * self.trainable_params / self.total_params

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_mae"])
        for i in range(self.epochs_run):
            vl = self.val_loss[i] if i < len(self.val_loss) else ""
            vm = self.val_mae[i] if i < len(self.val_mae) else ""
            w.writerow([i + 1, _fmt(self.train_loss[i]), _fmt(vl), _fmt(vm)])
        return buf.getvalue()

    def summary(self) -> str:
        parts = [f"best_epoch={self.best_epoch}", f"trainable={self.trainable_params}"
                 f" ({self.trainable_percent:.1f}%)"]
        for split, m in self.final.items():
            parts.append(f"{split}: mae={m.mae:.4f} rmse={m.rmse:.4f} r2={m.r2:.4f}")
        return " | ".join(parts)


def _fmt(x):
    return f"{x:.6f}" if isinstance(x, float) else x


@dataclass
class Dataset:
    """Encoded sequences with their band-gap targets."""

    seqs: list
    targets: list[float]

    def __post_init__(self):
        if len(self.seqs) != len(self.targets):
            raise ValueError("seqs and targets differ in length")

    def __len__(self):
        return len(self.seqs)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.seqs[i] for i in idx], [self.targets[i] for i in idx])


def mse_loss(pred, target):
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.numel() == 0:
        raise ValueError("empty input")
    return ((pred - target) ** 2).mean()


def metrics_from_predictions(y_true, y_pred) -> Metrics:
    """MAE, RMSE and R^2 = 1 - SSE/SST. With SST = 0, R^2 is 1 for a perfect
    fit and -inf otherwise."""
    y = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    if y.size == 0:
        raise ValueError("empty dataset")
    if y.shape != p.shape:
        raise ValueError("length mismatch")
    e = p - y
    sse = float(np.sum(e * e))
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        r2 = 1.0 if sse == 0.0 else -math.inf
    else:
        r2 = 1.0 - sse / sst
    return Metrics(float(np.mean(np.abs(e))), math.sqrt(sse / y.size), r2, int(y.size))


def bootstrap_metrics(y_true, y_pred, n_resamples: int = 1000, seed: int = 0) -> dict[str, float]:
    """Standard deviation of MAE/RMSE/R^2 over bootstrap resamples of the test set."""
    y = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_resamples):
        idx = rng.integers(0, len(y), len(y))
        m = metrics_from_predictions(y[idx], p[idx])
        rows.append((m.mae, m.rmse, m.r2 if math.isfinite(m.r2) else np.nan))
    arr = np.array(rows)
    return {"mae_sd": float(np.std(arr[:, 0])), "rmse_sd": float(np.std(arr[:, 1])),
            "r2_sd": float(np.nanstd(arr[:, 2]))}


@torch.no_grad()
def predict(m: RegressorModel, data: Dataset, batch_size: int = 64) -> np.ndarray:
    m.eval()
    out = []
    for i in range(0, len(data), batch_size):
        out.append(m(collate(data.seqs[i:i + batch_size])).predictions.double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(m: RegressorModel, data: Dataset, batch_size: int = 64) -> Metrics:
    if len(data) == 0:
        raise ValueError("empty dataset")
    return metrics_from_predictions(data.targets, predict(m, data, batch_size))


def freeze_flags(strategy: str, n_layers: int) -> dict[str, bool]:
    """Trainable flag per parameter group for a named freeze strategy."""
    L = n_layers
    layers = {f"layer.{i}": True for i in range(1, L + 1)}
    if strategy == "none":
        return {"embeddings": True, **layers, "final_norm": True, "head": True}
    if strategy == "first_layer":
        # only block 1 is frozen; embeddings keep training
        return {"embeddings": True, **layers, "layer.1": False, "final_norm": True, "head": True}
    if strategy == "all_but_final_3":
        if L < 3:
            raise FreezeError(f"all_but_final_3 needs at least 3 layers, model has {L}")
        keep = {f"layer.{i}": i > L - 3 for i in range(1, L + 1)}
        return {"embeddings": False, **keep, "final_norm": True, "head": True}
    if strategy == "all_but_final":
        keep = {f"layer.{i}": i == L for i in range(1, L + 1)}
        return {"embeddings": False, **keep, "final_norm": True, "head": True}
    if strategy == "all":
        return {"embeddings": False, **{k: False for k in layers}, "final_norm": False, "head": True}
    raise FreezeError(f"unknown freeze strategy {strategy!r}")


def apply_freeze(m: RegressorModel, strategy: str) -> FreezeReport:
    flags = freeze_flags(strategy, m.cfg.n_layers)
    m.set_trainable(flags)
    return FreezeReport(
        strategy,
        count_params(m, trainable_only=True),
        count_params(m),
        [name for name, on in flags.items() if not on],
    )


def frozen_prefix_depth(m: RegressorModel):
    """Number of leading blocks frozen together with the embeddings, or None
    when the embeddings train (nothing can be cached)."""
    flags = m.trainable_flags()
    if flags["embeddings"]:
        return None
    depth = 0
    while depth < m.cfg.n_layers and not flags[f"layer.{depth + 1}"]:
        depth += 1
    return depth


@torch.no_grad()
def _cache_prefix(m, seqs, depth, batch_size=64):
    cached = []
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i:i + batch_size]
        batch = collate(chunk)
        x = m.run_blocks(m.embed(batch), batch.mask, 0, depth)
        cached.extend(x[j, :len(s.ids)].clone() for j, s in enumerate(chunk))
    return cached


def _pad_stack(tensors):
    T = max(t.shape[0] for t in tensors)
    out = tensors[0].new_zeros((len(tensors), T, tensors[0].shape[1]))
    for i, t in enumerate(tensors):
        out[i, :t.shape[0]] = t
    return out


def train(m: RegressorModel, train_set: Dataset, val_set: Dataset | None, cfg: TrainConfig):
    """Fit `m` in place with MSE and AdamW; returns (m, TrainReport).

    Only parameters left trainable by the freeze strategy reach the
    optimizer, so frozen tensors are never written. When the embeddings and
    the first k blocks are frozen their output is computed once and reused.
    The weights with the best validation MAE (train MAE when no validation
    set is given) are restored at the end.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    apply_freeze(m, cfg.freeze_strategy)
    params = [p for p in m.parameters() if p.requires_grad]
    report = TrainReport(
        trainable_params=count_params(m, trainable_only=True),
        total_params=count_params(m),
        config=asdict(cfg),
    )
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
                            eps=cfg.eps, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    targets = torch.tensor(train_set.targets, dtype=next(m.parameters()).dtype)
    has_val = val_set is not None and len(val_set) > 0
    depth = frozen_prefix_depth(m)
    cache = _cache_prefix(m, train_set.seqs, depth) if depth is not None else None
    best, best_state, stale = math.inf, copy.deepcopy(m.state_dict()), 0

    for epoch in range(1, cfg.epochs + 1):
        m.train()
        order = torch.randperm(len(train_set), generator=gen).tolist()
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = collate([train_set.seqs[i] for i in idx])
            if cache is None:
                out = m(batch)
            else:
                out = m(batch, start_layer=depth, x=_pad_stack([cache[i] for i in idx]))
            loss = mse_loss(out.predictions, targets[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {b} (learning rate {cfg.learning_rate})"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        report.train_loss.append(total / count)
        train_mae = None
        if not has_val or cfg.target_train_mae:
            train_mae = evaluate(m, train_set).mae
            report.train_mae.append(train_mae)
        if has_val:
            vm = evaluate(m, val_set)
            report.val_mae.append(vm.mae)
            report.val_loss.append(vm.rmse ** 2)
            score = vm.mae
        else:
            score = train_mae
        report.epochs_run = epoch
        if score < best:
            best, best_state, stale = score, copy.deepcopy(m.state_dict()), 0
            report.best_epoch = epoch
        else:
            stale += 1
        log.debug("epoch %d train_loss %.5f score %.5f", epoch, report.train_loss[-1], score)
        if cfg.patience and stale >= cfg.patience:
            break
        if cfg.target_train_mae and train_mae < cfg.target_train_mae:
            break

    m.load_state_dict(best_state)
    report.final["train"] = evaluate(m, train_set)
    if has_val:
        report.final["val"] = evaluate(m, val_set)
    return m, report


def grad_check(m: RegressorModel, batch_seqs, targets, eps: float = 1e-5,
               per_group: int = 100, seed: int = 0, floor: float = 1e-5):
    """Largest relative error between autograd and central differences.

    Runs on a float64 copy of `m`. For every parameter group, up to
    `per_group` trainable entries are sampled. The relative error of an
    entry is |a - n| / max(|a|, |n|, floor). The floor sits above the
    roundoff of the central difference (~1e-10 at eps=1e-5), which is all
    that is left for gradients that vanish identically, such as key biases.
    Returns (max_rel_err, per_group_max).
    """
    m64 = copy.deepcopy(m).double()
    m64.eval()
    batch = collate(batch_seqs)
    y = torch.tensor(targets, dtype=torch.float64)

    def loss_fn():
        return mse_loss(m64(batch).predictions, y)

    m64.zero_grad(set_to_none=True)
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    per = {}
    with torch.no_grad():
        for name, params in m64.param_groups().items():
            entries = [(pi, j) for pi, p in enumerate(params) if p.requires_grad for j in range(p.numel())]
            if not entries:
                continue
            pick = rng.choice(len(entries), size=min(per_group, len(entries)), replace=False)
            worst = 0.0
            for k in pick:
                pi, j = entries[k]
                p = params[pi]
                flat = p.view(-1)
                analytic = float(p.grad.view(-1)[j]) if p.grad is not None else 0.0
                orig = float(flat[j])
                flat[j] = orig + eps
                up = float(loss_fn())
                flat[j] = orig - eps
                down = float(loss_fn())
                flat[j] = orig
                numeric = (up - down) / (2 * eps)
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
                worst = max(worst, err)
            per[name] = worst
    return max(per.values()), per
