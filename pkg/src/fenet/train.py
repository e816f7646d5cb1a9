"""
Training and evaluation: weighted multi-head cross-entropy, a mini-batch
Adam loop with recall-based early stopping, confusion-matrix metrics,
dataset splits and the hyperparameter grid search.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from fenet import nn
from fenet.errors import ConfigError, InvalidInputError, NumericError
from fenet.model import FENet, FENetConfig
from fenet.rr_signal import (
    UNLABELED,
    EpochMatrix,
    NestedLabelSeq,
    downsample,
    nest_labels,
    unfold_labels,
    window_centers,
)

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

GRID_LAMBDA2 = (0.9, 0.7, 0.5, 0.3)
GRID_EXTRACT = (1, 2, 3, 4)
GRID_WIDTH = (3, 5, 7)


# ----------------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    """Per-head weights ordered ``i-m .. i+m``."""

    values: tuple

    def __post_init__(self):
        v = tuple(float(x) for x in self.values)
        if not v or any(x < 0 for x in v):
            raise ConfigError("loss weights must be non-negative")
        if abs(sum(v) - 1.0) > 1e-12:
            raise ConfigError(f"loss weights must sum to 1, got {sum(v)!r}")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_center(cls, lambda2: float, m: int = 1) -> "LossWeights":
        """Centre head gets ``lambda2``; the ``2m`` side heads split the rest evenly."""
        if m == 0:
            return cls((1.0,))
        if not 0.0 <= lambda2 <= 1.0:
            raise ConfigError("lambda2 must lie in [0, 1]")
        side = (1.0 - lambda2) / (2 * m)
        return cls(tuple([side] * m + [lambda2] + [side] * m))

    def __len__(self):
        return len(self.values)


def weighted_loss(probs, targets, weights: LossWeights) -> float:
    """Mean over samples of ``sum_h w_h * -log P_h(label = a_h)``."""
    probs = np.asarray(probs, dtype=float)
    targets = np.asarray(targets)
    if probs.ndim == 2:
        probs, targets = probs[None], targets[None]
    if probs.shape[1] != len(weights) or targets.shape != probs.shape[:2]:
        raise InvalidInputError(
            f"{probs.shape[1]} heads / targets {targets.shape} vs {len(weights)} weights"
        )
    picked = np.take_along_axis(probs, targets[..., None].astype(int), axis=-1)[..., 0]
    ce = -np.log(np.maximum(picked, PROB_FLOOR))
    return float((ce @ np.asarray(weights.values)).mean())


def loss_and_grad(logits, targets, weights: LossWeights):
    """Loss value and its gradient with respect to the logits."""
    probs = nn.softmax(logits, axis=-1)
    value = weighted_loss(probs, targets, weights)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, np.asarray(targets)[..., None].astype(int), 1.0, axis=-1)
    w = np.asarray(weights.values)[None, :, None]
    grad = w * (probs - onehot) / probs.shape[0]
    return value, grad


# ----------------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------------


def _ratio(num, den, name):
    if den == 0:
        warnings.warn(f"{name} undefined (zero denominator); reported as NaN", RuntimeWarning,
                      stacklevel=3)
        return math.nan
    return num / den


@dataclass(frozen=True)
class MetricsReport:
    TP: int
    TN: int
    FP: int
    FN: int
    Acc: float
    Rec: float
    Pre: float
    Spe: float

    @classmethod
    def from_counts(cls, tp, tn, fp, fn) -> "MetricsReport":
        tp, tn, fp, fn = int(tp), int(tn), int(fp), int(fn)
        return cls(
            tp, tn, fp, fn,
            Acc=_ratio(tp + tn, tp + tn + fp + fn, "Acc"),
            Rec=_ratio(tp, tp + fn, "Rec"),
            Pre=_ratio(tp, tp + fp, "Pre"),
            Spe=_ratio(tn, tn + fp, "Spe"),
        )

    @property
    def total(self):
        return self.TP + self.TN + self.FP + self.FN

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport.from_counts(
            self.TP + other.TP, self.TN + other.TN, self.FP + other.FP, self.FN + other.FN
        )


def confusion(pred, truth) -> MetricsReport:
    """Confusion counts over labelled positions; apnea (1) is the positive class."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise InvalidInputError("prediction and truth lengths differ")
    keep = truth != UNLABELED
    pred, truth = pred[keep], truth[keep]
    tp = np.count_nonzero((pred == 1) & (truth == 1))
    tn = np.count_nonzero((pred == 0) & (truth == 0))
    fp = np.count_nonzero((pred == 1) & (truth == 0))
    fn = np.count_nonzero((pred == 0) & (truth == 1))
    return MetricsReport.from_counts(tp, tn, fp, fn)


def evaluate_nested(pred: NestedLabelSeq, truth: NestedLabelSeq) -> MetricsReport:
    return confusion(unfold_labels(pred), unfold_labels(truth))


def predict_record(model: FENet, record: EpochMatrix) -> np.ndarray:
    """Unfolded label timeline for the covered prefix of one record."""
    seq = downsample(record, model.config.m)
    return model.predict(seq.epochs).reshape(-1)


def evaluate(model: FENet, records, m: int | None = None) -> MetricsReport:
    """Sense only window centres, predict every covered minute, score against truth."""
    if m is not None and m != model.config.m:
        raise ConfigError(f"model serves m={model.config.m}, asked for m={m}")
    if isinstance(records, EpochMatrix):
        records = [records]
    counts = np.zeros(4, dtype=np.int64)
    for rec in records:
        if rec.labels is None:
            raise InvalidInputError(f"record {rec.patient_id} has no labels")
        flat = predict_record(model, rec)
        rep = confusion(flat, rec.labels[: flat.size])
        counts += (rep.TP, rep.TN, rep.FP, rep.FN)
    return MetricsReport.from_counts(*counts)


# ----------------------------------------------------------------------------
# Windows and splits
# ----------------------------------------------------------------------------


@dataclass
class WindowSet:
    """Training samples: one sensed epoch per row with its ``2m+1`` neighbour labels."""

    X: np.ndarray
    Y: np.ndarray
    patient: np.ndarray

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.X[idx], self.Y[idx], self.patient[idx])

    @classmethod
    def concat(cls, sets) -> "WindowSet":
        sets = list(sets)
        return cls(
            np.concatenate([s.X for s in sets]),
            np.concatenate([s.Y for s in sets]),
            np.concatenate([s.patient for s in sets]),
        )


def make_windows(records, m: int, dense: bool = True) -> WindowSet:
    """Windows from labelled records.

    ``dense`` uses every epoch with a full neighbourhood as a centre; otherwise
    only the non-overlapping window centres a duty-cycled sensor would see.
    Windows touching an unlabelled minute are dropped.
    """
    if isinstance(records, EpochMatrix):
        records = [records]
    width = 2 * m + 1
    xs, ys, ps = [], [], []
    for rec in records:
        if rec.labels is None:
            raise InvalidInputError(f"record {rec.patient_id} has no labels")
        n = rec.n_epochs
        if dense:
            centers = np.arange(m, n - m)
        else:
            centers = window_centers(n, m)
        if centers.size == 0:
            continue
        offsets = np.arange(-m, m + 1)
        Y = rec.labels[centers[:, None] + offsets[None, :]]
        ok = np.all(Y != UNLABELED, axis=1)
        xs.append(rec.epochs[centers[ok]])
        ys.append(Y[ok])
        ps.append(np.full(int(ok.sum()), rec.patient_id, dtype=object))
    if not xs:
        return WindowSet(np.zeros((0, 60)), np.zeros((0, width), dtype=np.int8),
                         np.zeros(0, dtype=object))
    return WindowSet(np.concatenate(xs), np.concatenate(ys).astype(np.int8), np.concatenate(ps))


@dataclass(frozen=True)
class SplitPlan:
    kind: str = "epoch"
    ratios: tuple = (3, 1, 1)
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("epoch", "patient"):
            raise ConfigError(f"split kind must be 'epoch' or 'patient', got {self.kind!r}")
        if len(self.ratios) != 3 or min(self.ratios) < 0 or sum(self.ratios) <= 0:
            raise ConfigError("ratios must be three non-negative numbers")
        if self.folds < 2:
            raise ConfigError("need at least 2 folds")


def make_split(items, plan: SplitPlan):
    """Epoch split: ``(train, val, test)`` index arrays over ``range(items)``.

    Patient split: a list of ``(train_ids, test_ids)`` folds over the given ids.
    """
    rng = np.random.default_rng(plan.seed)
    if plan.kind == "epoch":
        n = int(items) if np.isscalar(items) else len(items)
        r = np.asarray(plan.ratios, dtype=float) / sum(plan.ratios)
        n_train = int(round(n * r[0]))
        n_val = int(round(n * r[1]))
        if n_train + n_val > n:
            n_val = n - n_train
        perm = rng.permutation(n)
        return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                np.sort(perm[n_train + n_val:]))
    ids = list(dict.fromkeys(items))
    if len(ids) < plan.folds:
        raise ConfigError(f"{len(ids)} patients cannot fill {plan.folds} folds")
    order = rng.permutation(len(ids))
    folds = []
    for chunk in np.array_split(order, plan.folds):
        test = [ids[i] for i in sorted(chunk)]
        test_set = set(test)
        train = [p for p in ids if p not in test_set]
        assert not test_set & set(train)
        folds.append((train, test))
    return folds


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    m: int = 1
    d1_values: tuple = (3, 4, 5, 6)
    width: int = 3
    n_extract: int = 1
    lambda2: float = 0.7
    dropout: float = 0.5
    batch_size: int = 64
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    early_stop: bool = True
    dense: bool = True
    recalibrate_bn: bool = True
    split: str = "epoch"
    ratios: tuple = (3, 1, 1)
    folds: int = 5
    grid_lambda2: tuple = GRID_LAMBDA2
    grid_extract: tuple = GRID_EXTRACT
    grid_width: tuple = GRID_WIDTH

    def model_config(self) -> FENetConfig:
        return FENetConfig(m=self.m, d1_values=tuple(self.d1_values), width=self.width,
                           n_extract=self.n_extract, dropout=self.dropout)

    def loss_weights(self) -> LossWeights:
        return LossWeights.from_center(self.lambda2, self.m)

    def split_plan(self) -> SplitPlan:
        return SplitPlan(self.split, tuple(self.ratios), self.folds, self.seed)


def _coerce(kind, text, key):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(_number(v) for v in text.split(",") if v.strip())
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _number(text):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return float(text)


_FIELD_TYPES = {"seed": int, "m": int, "width": int, "n_extract": int, "lambda2": float,
                "dropout": float, "batch_size": int, "lr": float, "max_epochs": int,
                "patience": int, "early_stop": bool, "dense": bool, "recalibrate_bn": bool, "split": str,
                "folds": int, "d1_values": tuple, "ratios": tuple, "grid_lambda2": tuple,
                "grid_extract": tuple, "grid_width": tuple}


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment; lists are comma-separated."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(_FIELD_TYPES[key], value, key)
    return replace(base or TrainConfig(), **values)


def read_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class History:
    epochs: list = field(default_factory=list)
    stopped_early: bool = False
    # epoch of the best validation recall seen, -1 without validation
    best_epoch: int = -1

    @property
    def train_loss(self):
        return [e["train_loss"] for e in self.epochs]


def window_metrics(model: FENet, data: WindowSet) -> MetricsReport:
    pred = model.predict(data.X)
    return confusion(pred.reshape(-1), data.Y.reshape(-1))


def _better(rep, best):
    """Validation recall first, accuracy breaks ties; NaN ranks lowest."""
    key = tuple(-math.inf if math.isnan(v) else v for v in (rep.Rec, rep.Acc))
    if best is None:
        return True, key
    return key > best, key


def train(train_set: WindowSet, config: TrainConfig, val_set: WindowSet | None = None,
          progress=None):
    """Fit a fresh FENet. Returns ``(model, history)``.

    With a validation set and ``early_stop`` on, training stops once validation
    recall has not improved for ``patience`` epochs. Without one it runs
    ``max_epochs`` epochs. The model is returned as it stands at the last
    epoch: recall alone is maximised by predicting every minute positive, so
    it only decides when to stop, not which snapshot to keep.
    """
    if len(train_set) == 0:
        raise ConfigError("empty training split")
    cfg = config.model_config()
    if train_set.Y.shape[1] != cfg.n_heads:
        raise ConfigError(f"targets have {train_set.Y.shape[1]} labels, model has {cfg.n_heads} heads")
    weights = config.loss_weights()
    rng = np.random.default_rng(config.seed)
    model = FENet(cfg, seed=rng.integers(2**63))
    state = nn.AdamState(lr=config.lr)
    history = History()
    use_val = val_set is not None and len(val_set) > 0 and config.early_stop
    best_key, stale = None, 0
    n = len(train_set)
    bs = max(2, config.batch_size)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if idx.size < 2:
                continue
            _, logits, cache = model.forward(train_set.X[idx], train=True, rng=rng)
            value, g_logits = loss_and_grad(logits, train_set.Y[idx], weights)
            if not math.isfinite(value):
                raise NumericError(f"loss diverged at epoch {epoch}, step {state.step}")
            grads = model.backward(cache, g_logits)
            nn.adam_step(model.params, grads, state)
            total += value * idx.size
            seen += idx.size
        if config.recalibrate_bn:
            model.recalibrate_bn(train_set.X, seed=epoch)
        record = {"epoch": epoch, "train_loss": total / max(seen, 1)}
        if val_set is not None and len(val_set) > 0:
            rep = window_metrics(model, val_set)
            record.update(val_acc=rep.Acc, val_rec=rep.Rec, val_pre=rep.Pre, val_spe=rep.Spe)
            if use_val:
                improved, key = _better(rep, best_key)
                if improved:
                    best_key, stale = key, 0
                    history.best_epoch = epoch
                else:
                    stale += 1
        history.epochs.append(record)
        if progress is not None:
            progress(record)
        if use_val and stale >= config.patience:
            history.stopped_early = True
            break
    return model, history


# ----------------------------------------------------------------------------
# Grid search
# ----------------------------------------------------------------------------

RESULT_FIELDS = ["run_id", "grid_point", "split", "TP", "TN", "FP", "FN",
                 "Acc", "Rec", "Pre", "Spe", "wall_seconds"]


def grid_points(config: TrainConfig):
    return [
        {"lambda2": lam, "n_extract": l, "width": w}
        for lam, l, w in itertools.product(config.grid_lambda2, config.grid_extract, config.grid_width)
        if l <= len(config.d1_values)
    ]


def format_point(point) -> str:
    return ";".join(f"{k}={v}" for k, v in point.items())


def _run_point(args):
    run_id, point, config, train_set, val_set = args
    t0 = time.perf_counter()
    cfg = replace(config, **point)
    model, _ = train(train_set, cfg, val_set)
    rep = window_metrics(model, val_set)
    return run_id, point, rep, time.perf_counter() - t0, model


def grid_search(config: TrainConfig, train_set: WindowSet, val_set: WindowSet, workers: int = 1):
    """Train one model per grid point, pick the best by validation recall then accuracy.

    Returns ``(best_point, best_model, rows)`` where rows follow RESULT_FIELDS.
    """
    if len(val_set) == 0:
        raise ConfigError("grid search needs a validation split")
    points = grid_points(config)
    if not points:
        raise ConfigError("empty grid")
    jobs = [(i, p, config, train_set, val_set) for i, p in enumerate(points)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(job) for job in jobs]
    rows = []
    best = None
    for run_id, point, rep, wall, model in sorted(results, key=lambda r: r[0]):
        rows.append(result_row(run_id, format_point(point), "val", rep, wall))
        better, key = _better(rep, None if best is None else best[0])
        if better:
            best = (key, point, model)
    return best[1], best[2], rows


def result_row(run_id, grid_point, split, rep: MetricsReport, wall_seconds) -> dict:
    row = {"run_id": run_id, "grid_point": grid_point, "split": split}
    row.update({k: getattr(rep, k) for k in ("TP", "TN", "FP", "FN", "Acc", "Rec", "Pre", "Spe")})
    row["wall_seconds"] = round(float(wall_seconds), 3)
    return row


def write_results(rows, fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)


def read_results(fh) -> list[dict]:
    return list(csv.DictReader(fh))


def nested_predictions(model: FENet, record: EpochMatrix) -> NestedLabelSeq:
    flat = predict_record(model, record)
    return nest_labels(flat, model.config.m, record.patient_id)

