"""Loss, optimizer, scheduler, enhancer-level split and the training loop."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as M
from .numerics import DTYPE, NumericalError, RngStream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingSample:
    enhancer_id: str
    dna_index: str
    gene_index: int
    beta: float


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    huber_delta: float = 1.0
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    min_lr: float = 1e-6
    val_fraction: float = 0.2
    stratify_threshold: float = -0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "huber_delta", "batch_size", "max_epochs", "patience",
                     "adam_eps", "scheduler_factor", "scheduler_patience", "min_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must be in [0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config fields {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------- loss

def huber(residual, delta: float = 1.0):
    """Quadratic within ``delta``, linear beyond; C1 at ``|r| = delta``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = np.abs(np.asarray(residual, dtype=DTYPE))
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return out if out.ndim else float(out)


def huber_grad(residual, delta: float = 1.0) -> np.ndarray:
    r = np.asarray(residual, dtype=DTYPE)
    return np.clip(r, -delta, delta)


def masked_loss(y_hat, batch, delta: float = 1.0, return_grad: bool = False):
    """Mean Huber loss of each sample's target-gene prediction.

    ``y_hat`` is ``(B, n_genes)`` (or ``(n_genes,)`` for a single sample).
    Non-target outputs get exactly zero gradient.
    """
    y_hat = np.asarray(y_hat, dtype=DTYPE)
    single = y_hat.ndim == 1
    if single:
        y_hat = y_hat[None]
    if not batch:
        raise ValueError("masked_loss needs a non-empty batch")
    if len(batch) != y_hat.shape[0]:
        raise ValueError(f"{len(batch)} samples for {y_hat.shape[0]} prediction rows")
    idx = np.array([s.gene_index for s in batch])
    if np.any(idx < 0) or np.any(idx >= y_hat.shape[1]):
        raise IndexError(f"gene_index out of range [0, {y_hat.shape[1]})")
    beta = np.array([s.beta for s in batch], dtype=DTYPE)
    rows = np.arange(len(batch))
    resid = beta - y_hat[rows, idx]
    loss = float(huber(resid, delta).mean())
    if not return_grad:
        return loss
    grad = np.zeros_like(y_hat)
    # d/dy_hat of huber(beta - y_hat) is -clip(resid)
    grad[rows, idx] = -huber_grad(resid, delta) / len(batch)
    return loss, (grad[0] if single else grad)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, grads: dict, state: AdamState, config: TrainConfig,
               lr: float | None = None) -> dict:
    """One in-place AdamW update with bias correction and decoupled weight decay.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``
    Returns the applied steps ``{name: theta_new - theta_old}`` as computed
    before the addition.
    """
    lr = config.lr if lr is None else lr
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.t += 1
    t = state.t
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    steps = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_eps) + config.weight_decay * theta
        step = -lr * update
        theta += step
        steps[name] = step
    return steps


@dataclass
class PlateauScheduler:
    """Reduce the learning rate when a minimized metric stops improving."""

    lr: float
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-6
    threshold: float = 1e-8
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, metric: float) -> float:
        if not math.isfinite(metric):
            raise ValueError("scheduler metric must be finite")
        if metric < self.best - self.threshold:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def reduce_lr_on_plateau(state: PlateauScheduler, val_metric: float) -> float:
    return state.step(val_metric)


# ---------------------------------------------------------------- split & metric

def enhancer_labels(samples, threshold: float = -0.1) -> dict[str, bool]:
    """Per-enhancer stratum: positive iff the enhancer's most negative beta <= threshold."""
    lowest: dict[str, float] = {}
    for s in samples:
        lowest[s.enhancer_id] = min(lowest.get(s.enhancer_id, math.inf), s.beta)
    return {e: b <= threshold for e, b in lowest.items()}


def split_by_enhancer(samples, val_fraction: float, seed: int, threshold: float = -0.1):
    """Stratified enhancer-level split; every enhancer lands wholly in one side."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    labels = enhancer_labels(samples, threshold)
    if len(labels) < 2:
        raise ValueError("need at least 2 enhancers to split")
    rng = np.random.default_rng(seed)
    val_ids: set[str] = set()
    for label in (True, False):
        stratum = sorted(e for e, lab in labels.items() if lab is label)
        if not stratum:
            continue
        n_val = int(round(val_fraction * len(stratum)))
        order = rng.permutation(len(stratum))
        val_ids.update(stratum[i] for i in order[:n_val])
    # both sides must be non-empty
    if not val_ids:
        val_ids.add(sorted(labels)[int(rng.integers(len(labels)))])
    if len(val_ids) == len(labels):
        val_ids.discard(sorted(val_ids)[int(rng.integers(len(val_ids)))])
    train = [s for s in samples if s.enhancer_id not in val_ids]
    val = [s for s in samples if s.enhancer_id in val_ids]
    return train, val


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two vectors of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson undefined: zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _safe_pearson(x, y) -> float | None:
    try:
        return pearson(x, y)
    except ValueError:
        return None


# ---------------------------------------------------------------- dataset io

DATASET_FIELDS = ("enhancer_id", "dna_index", "gene_index", "beta")


def write_dataset(samples, path) -> None:
    path = Path(path)
    delim = "\t" if path.suffix == ".tsv" else ","
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delim, lineterminator="\n")
        w.writerow(DATASET_FIELDS)
        for s in samples:
            w.writerow([s.enhancer_id, s.dna_index, s.gene_index, repr(float(s.beta))])


def read_dataset(path) -> list[TrainingSample]:
    path = Path(path)
    delim = "\t" if path.suffix == ".tsv" else ","
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delim, skipinitialspace=True)
        if reader.fieldnames is None or set(DATASET_FIELDS) - set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain {', '.join(DATASET_FIELDS)}")
        out = []
        for line, row in enumerate(reader, start=2):
            try:
                s = TrainingSample(row["enhancer_id"], row["dna_index"],
                                   int(row["gene_index"]), float(row["beta"]))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
            if not math.isfinite(s.beta):
                raise ValueError(f"{path}:{line}: non-finite beta")
            out.append(s)
    return out


# ---------------------------------------------------------------- loop

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_r: float | None
    val_r: float | None
    lr: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_r: float | None = None
    stop_epoch: int | None = None

    def to_json(self) -> list[dict]:
        return [asdict(e) for e in self.epochs]

    def summary(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_val_r": self.best_val_r,
                "stop_epoch": self.stop_epoch}


class Data:
    """Stacked engine-precision inputs for a sample list."""

    def __init__(self, dna_samples: dict, rna: np.ndarray, protein: np.ndarray):
        self.dna = dna_samples
        self.rna = np.asarray(rna, dtype=DTYPE)
        self.protein = np.asarray(protein, dtype=DTYPE)

    def stack(self, batch) -> np.ndarray:
        return np.stack([np.asarray(self.dna[s.dna_index], dtype=DTYPE) for s in batch])


def predict(params, config: M.ModelConfig, data: Data, samples, batch_size: int = 32):
    """Eval-mode target-gene predictions, in sample order."""
    out = np.empty(len(samples), dtype=DTYPE)
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        rec = M.forward(data.stack(batch), data.rna, data.protein, params, config)
        out[start:start + len(batch)] = rec.y_hat[np.arange(len(batch)),
                                                  [s.gene_index for s in batch]]
    return out


def evaluate(params, config, data, samples, delta: float = 1.0) -> tuple[float, float | None]:
    """Returns ``(mean huber loss, pearson r or None)`` in eval mode."""
    preds = predict(params, config, data, samples)
    beta = np.array([s.beta for s in samples], dtype=DTYPE)
    return float(huber(beta - preds, delta).mean()), _safe_pearson(preds, beta)


def train(model_config: M.ModelConfig, train_config: TrainConfig, train_set, val_set,
          data: Data, params=None, log=None):
    """Mini-batch AdamW with plateau scheduling and early stopping on validation r.

    Returns ``(checkpoint, history)``; the checkpoint holds the parameters from
    the epoch with the best validation Pearson r.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    for s in list(train_set) + list(val_set):
        if not 0 <= s.gene_index < model_config.n_genes:
            raise IndexError(f"sample {s}: gene_index out of range")
        if s.dna_index not in data.dna:
            raise KeyError(f"sample {s}: DNA sample {s.dna_index!r} not in cache")
    tc = train_config
    root = RngStream(tc.seed)
    if params is None:
        params = M.init_params(model_config, root.spawn(0))
    shuffle_rng = root.spawn(1)
    dropout_rng = root.spawn(2)
    opt = AdamState()
    sched = PlateauScheduler(tc.lr, tc.scheduler_factor, tc.scheduler_patience, tc.min_lr)
    history = TrainHistory()
    best_params = copy.deepcopy(params)
    best_r = -math.inf
    stale = 0
    train_beta = np.array([s.beta for s in train_set], dtype=DTYPE)

    for epoch in range(1, tc.max_epochs + 1):
        lr = sched.lr
        order = shuffle_rng.permutation(len(train_set))
        preds = np.empty(len(train_set), dtype=DTYPE)
        loss_sum = 0.0
        for bi, start in enumerate(range(0, len(order), tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            batch = [train_set[i] for i in idx]
            rec = M.forward(data.stack(batch), data.rna, data.protein, params, model_config,
                            training=True, rng=dropout_rng)
            loss, dy = masked_loss(rec.y_hat, batch, tc.huber_delta, return_grad=True)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads, _ = M.backward(rec, params, model_config, dy)
            adamw_step(params, grads, opt, tc, lr=lr)
            loss_sum += loss * len(batch)
            preds[idx] = rec.y_hat[np.arange(len(batch)), [s.gene_index for s in batch]]
        train_loss = loss_sum / len(train_set)
        train_r = _safe_pearson(preds, train_beta)
        val_loss, val_r = evaluate(params, model_config, data, val_set, tc.huber_delta)
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        rec_ = EpochRecord(epoch, train_loss, val_loss, train_r, val_r, lr)
        history.epochs.append(rec_)
        if log is not None:
            log(rec_)

        score = -math.inf if val_r is None else val_r
        if history.best_epoch is None or score > best_r:
            best_r = score
            history.best_epoch = epoch
            history.best_val_r = val_r
            best_params = copy.deepcopy(params)
            stale = 0
        else:
            stale += 1
        sched.step(val_loss)
        history.stop_epoch = epoch
        if stale >= tc.patience:
            break

    best = history.epochs[history.best_epoch - 1]
    ckpt = M.Checkpoint(model_config, best_params, seed=tc.seed, epoch=history.best_epoch,
                        metrics={"val_loss": best.val_loss, "val_r": best.val_r,
                                 "train_loss": best.train_loss, "train_r": best.train_r})
    return ckpt, history


def save_history(history: TrainHistory, path) -> None:
    """JSON array of per-epoch records."""
    Path(path).write_text(json.dumps(history.to_json(), indent=2) + "\n")
