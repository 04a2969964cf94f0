"""Subject-wise cross-validation, the optimization loop and fold statistics."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from . import autodiff as ad
from .errors import DegenerateDifferences, DivergedLoss, LengthMismatch, TooFewSubjects
from .features import FeatureScaler
from .model import ModelHyper, ModelParams, batch_graphs, bce_loss, forward_batch, predict_proba

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    val_fraction: float = 0.1
    n_folds: int = 10
    seed: int = 42

    def to_dict(self):
        return asdict(self)


@dataclass
class Fold:
    train: list
    test: list


@dataclass
class FoldPlan:
    folds: list
    seed: int

    @property
    def n_folds(self):
        return len(self.folds)


def make_folds(subject_labels: dict, n_folds=10, seed=42) -> FoldPlan:
    """Stratified subject-wise folds.

    Subjects of each class are shuffled with the seed and dealt round-robin;
    the dealing position carries over between classes so fold sizes differ by
    at most one subject.
    """
    subjects = sorted(subject_labels)
    if len(subjects) < n_folds:
        raise TooFewSubjects(f"{len(subjects)} subjects cannot fill {n_folds} folds")
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(n_folds)]
    slot = 0
    for label in sorted(set(subject_labels.values())):
        members = [s for s in subjects if subject_labels[s] == label]
        for idx in rng.permutation(len(members)):
            buckets[slot % n_folds].append(members[idx])
            slot += 1
    folds = []
    for k in range(n_folds):
        test = sorted(buckets[k])
        train = sorted(s for s in subjects if s not in set(test))
        folds.append(Fold(train=train, test=test))
    return FoldPlan(folds=folds, seed=seed)


@dataclass
class MetricsRow:
    accuracy: float
    precision: float
    recall: float
    f1: float
    precision_undefined: bool = False
    recall_undefined: bool = False
    n: int = 0

    def as_tuple(self):
        return (self.accuracy, self.precision, self.recall, self.f1)


def evaluate(probabilities, labels, threshold=0.5) -> MetricsRow:
    """Accuracy / precision / recall / F1 in percent; MDD (1) is the positive class."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if probabilities.shape != labels.shape:
        raise LengthMismatch(f"{probabilities.shape} predictions vs {labels.shape} labels")
    pred = (probabilities >= threshold).astype(int)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    n = len(labels)
    accuracy = 100.0 * np.mean(pred == labels) if n else 0.0
    p_undef, r_undef = tp + fp == 0, tp + fn == 0
    precision = 0.0 if p_undef else 100.0 * tp / (tp + fp)
    recall = 0.0 if r_undef else 100.0 * tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MetricsRow(float(accuracy), float(precision), float(recall), float(f1),
                      p_undef, r_undef, n)


@dataclass
class MetricsTable:
    rows: list                       # MetricsRow per fold
    names: tuple = ("accuracy", "precision", "recall", "f1")

    def mean(self):
        return np.mean([r.as_tuple() for r in self.rows], axis=0)

    def std(self):
        return np.std([r.as_tuple() for r in self.rows], axis=0, ddof=1) \
            if len(self.rows) > 1 else np.zeros(4)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self):
        lines = ["fold,n,accuracy,precision,recall,f1"]
        for k, r in enumerate(self.rows):
            lines.append(f"{k},{r.n}," + ",".join(f"{v:.4f}" for v in r.as_tuple()))
        lines.append("mean,," + ",".join(f"{v:.4f}" for v in self.mean()))
        lines.append("std,," + ",".join(f"{v:.4f}" for v in self.std()))
        return "\n".join(lines) + "\n"


@dataclass
class TTestResult:
    t: float
    p: float
    dof: int
    zero_variance: bool = False


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test; p from the regularized incomplete beta function."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"paired samples differ in shape: {a.shape} vs {b.shape}")
    n = len(a)
    if n < 2:
        raise DegenerateDifferences("need at least two pairs")
    d = a - b
    if np.all(d == 0.0):
        raise DegenerateDifferences("all paired differences are zero")
    dof = n - 1
    sd = np.std(d, ddof=1)
    if sd == 0.0:
        return TTestResult(t=math.copysign(math.inf, d.mean()), p=0.0, dof=dof,
                           zero_variance=True)
    t = d.mean() / (sd / math.sqrt(n))
    p = float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return TTestResult(t=float(t), p=p, dof=dof)


# -- training -------------------------------------------------------------------

@dataclass
class FoldResult:
    params: ModelParams
    scaler: FeatureScaler
    metrics: MetricsRow
    test_probabilities: np.ndarray
    test_labels: np.ndarray
    history: list = field(default_factory=list)
    best_epoch: int = 0


def split_validation(train_subjects, subject_labels, fraction, rng):
    """Hold out ~fraction of the training subjects, stratified, >= 1 per class."""
    val = []
    for label in sorted({subject_labels[s] for s in train_subjects}):
        members = sorted(s for s in train_subjects if subject_labels[s] == label)
        if len(members) < 2:
            continue
        n_val = max(1, int(round(fraction * len(members))))
        picks = rng.permutation(len(members))[:n_val]
        val.extend(members[i] for i in picks)
    val = sorted(val)
    return [s for s in train_subjects if s not in set(val)], val


def _mean_loss(graphs, feats, labels, params, batch_size=256):
    total = 0.0
    for start in range(0, len(graphs), batch_size):
        sl = slice(start, start + batch_size)
        logits = forward_batch(batch_graphs(graphs[sl], feats[sl]), params)
        total += bce_loss(logits, labels[sl]).data * len(labels[sl])
    return total / max(len(graphs), 1)


def train_model(train_graphs, train_feats, train_labels, hyper: ModelHyper,
                cfg: TrainConfig, val=None, seed=None):
    """Adam on mini-batches with early stopping on validation loss.

    ``val`` is an optional ``(graphs, feats, labels)`` triple; without it the
    model of the last epoch is returned.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    params = ModelParams.init(hyper, seed=seed)
    opt = ad.Adam(params.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    labels = np.asarray(train_labels, dtype=np.float64)
    best, best_loss, best_epoch, stale = params.copy(), math.inf, 0, 0
    history = []
    n = len(train_graphs)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = batch_graphs([train_graphs[i] for i in idx], [train_feats[i] for i in idx])
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = bce_loss(forward_batch(batch, params, training=True, rng=rng), labels[idx])
            if not np.isfinite(loss.data):
                raise DivergedLoss(f"loss became {loss.data} at epoch {epoch}")
            tape.backward(loss)
            opt.step()
            running += float(loss.data) * len(idx)
        entry = {"epoch": epoch, "train_loss": running / n}
        if val is not None:
            val_loss = _mean_loss(val[0], val[1], np.asarray(val[2], float), params)
            if not np.isfinite(val_loss):
                raise DivergedLoss(f"validation loss became {val_loss} at epoch {epoch}")
            entry["val_loss"] = val_loss
            if val_loss < best_loss - 1e-9:
                best, best_loss, best_epoch, stale = params.copy(), val_loss, epoch, 0
            else:
                stale += 1
        history.append(entry)
        log.debug("epoch %d %s", epoch, entry)
        if val is not None and stale >= cfg.patience:
            break
    if val is None:
        best, best_epoch = params.copy(), len(history)
    return best, history, best_epoch


def train_fold(graphs, fold: Fold, hyper: ModelHyper = ModelHyper(),
               cfg: TrainConfig = TrainConfig(), labels=None, fold_index=0) -> FoldResult:
    """Train on the fold's training subjects and score its test subjects.

    ``labels`` optionally overrides the graph labels (used by the shuffled
    control); it is aligned with ``graphs``.
    """
    labels = np.array([g.label for g in graphs] if labels is None else labels, dtype=int)
    subject_labels = {}
    for g in graphs:
        subject_labels.setdefault(g.subject_id, g.label)
    rng = np.random.default_rng(cfg.seed + 1000 + fold_index)
    inner, val_subjects = split_validation(fold.train, subject_labels, cfg.val_fraction, rng)
    inner, val_subjects, test = set(inner), set(val_subjects), set(fold.test)
    idx_tr = [i for i, g in enumerate(graphs) if g.subject_id in inner]
    idx_va = [i for i, g in enumerate(graphs) if g.subject_id in val_subjects]
    idx_te = [i for i, g in enumerate(graphs) if g.subject_id in test]

    scaler = FeatureScaler().fit([graphs[i].node_features for i in idx_tr])
    feats = {i: scaler.transform(graphs[i].node_features) for i in idx_tr + idx_va + idx_te}
    val = None
    if idx_va:
        val = ([graphs[i] for i in idx_va], [feats[i] for i in idx_va], labels[idx_va])
    params, history, best_epoch = train_model(
        [graphs[i] for i in idx_tr], [feats[i] for i in idx_tr], labels[idx_tr],
        hyper, cfg, val=val, seed=cfg.seed + fold_index)
    probs = predict_proba([graphs[i] for i in idx_te], params, [feats[i] for i in idx_te])
    metrics = evaluate(probs, labels[idx_te])
    log.info("fold %d: acc %.1f  (best epoch %d)", fold_index, metrics.accuracy, best_epoch)
    return FoldResult(params=params, scaler=scaler, metrics=metrics,
                      test_probabilities=probs, test_labels=labels[idx_te],
                      history=history, best_epoch=best_epoch)


def shuffled_labels(graphs, seed):
    """Segment-level label permutation for the null-model control."""
    labels = np.array([g.label for g in graphs], dtype=int)
    return np.random.default_rng(seed).permutation(labels)


def cross_validate(graphs, plan: FoldPlan, hyper: ModelHyper = ModelHyper(),
                   cfg: TrainConfig = TrainConfig(), labels=None):
    results = [train_fold(graphs, fold, hyper, cfg, labels=labels, fold_index=k)
               for k, fold in enumerate(plan.folds)]
    return results, MetricsTable([r.metrics for r in results])


def train_final(graphs, hyper: ModelHyper = ModelHyper(), cfg: TrainConfig = TrainConfig()):
    """One model on every subject (a held-out slice still drives early stopping)."""
    subjects = sorted({g.subject_id for g in graphs})
    fold = Fold(train=subjects, test=[])
    labels = np.array([g.label for g in graphs], dtype=int)
    subject_labels = {}
    for g in graphs:
        subject_labels.setdefault(g.subject_id, g.label)
    rng = np.random.default_rng(cfg.seed + 999)
    inner, val_subjects = split_validation(fold.train, subject_labels, cfg.val_fraction, rng)
    inner, val_subjects = set(inner), set(val_subjects)
    idx_tr = [i for i, g in enumerate(graphs) if g.subject_id in inner]
    idx_va = [i for i, g in enumerate(graphs) if g.subject_id in val_subjects]
    scaler = FeatureScaler().fit([graphs[i].node_features for i in idx_tr])
    feats = [scaler.transform(g.node_features) for g in graphs]
    val = None
    if idx_va:
        val = ([graphs[i] for i in idx_va], [feats[i] for i in idx_va], labels[idx_va])
    params, history, best_epoch = train_model(
        [graphs[i] for i in idx_tr], [feats[i] for i in idx_tr], labels[idx_tr],
        hyper, cfg, val=val, seed=cfg.seed)
    return params, scaler, history, best_epoch
