"""Training loop, lambda schedule, cross-validation and metrics."""

from __future__ import annotations

import dataclasses
import logging
import math
import resource
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .bags import PrototypeBag
from .core_math import softmax
from .errors import ConfigError, DimensionError, NonFiniteGradientError
from .model import (
    MixerConfig, MixerParams, forward, init_params, loss_and_grads,
    param_count, pooled_representation,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 1
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    alpha: float = 1.0
    lambda_offset: bool = False
    # None: follow the schedule; a number pins lambda for every epoch
    lambda_override: float | None = None
    adversarial: bool = True
    folds: int = 5
    repeats: int = 1
    seed: int = 0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 (one bag per step) is supported")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")


def lambda_schedule(epoch: int, total: int, alpha: float = 1.0,
                    offset: bool = False) -> float:
    """Domain weight ``2 / (1 + exp(-10 r))`` with ``r = epoch / total * alpha``.

    Without ``offset`` this starts at 1.0, as printed in the method
    description; ``offset=True`` subtracts 1 (the usual 0-based ramp).
    """
    if total < 1 or not 0 <= epoch <= total:
        raise ValueError(f"need 0 <= epoch <= total, total >= 1; got {epoch}, {total}")
    r = epoch / total * alpha
    lam = 2.0 / (1.0 + math.exp(-10.0 * r))
    return lam - 1.0 if offset else lam


# --------------------------------------------------------------------------
# optimizers


def _check_finite(grads) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)


class Adam:
    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: MixerParams, grads) -> None:
        _check_finite(grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        params.version = getattr(params, "version", 0) + 1


class SGDMomentum:
    def __init__(self, lr=1e-2, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: MixerParams, grads) -> None:
        _check_finite(grads)
        for name, g in grads.items():
            v = self.velocity.setdefault(name, np.zeros_like(g))
            v *= self.momentum
            v += g
            params[name] -= self.lr * v
        params.version = getattr(params, "version", 0) + 1


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGDMomentum(cfg.learning_rate, cfg.momentum)


def optimizer_step(params, grads, optimizer) -> None:
    optimizer.step(params, grads)


# --------------------------------------------------------------------------
# training


@dataclass
class EpochLosses:
    class_loss: float
    domain_loss: float


def train_epoch(params: MixerParams, cfg: MixerConfig, bags, optimizer,
                lam: float, rng: np.random.Generator,
                adversarial: bool = True) -> EpochLosses:
    """One pass over ``bags`` in a shuffled order, one optimizer step per bag.

    ``bag.domain_id`` must already index the domain head's outputs.
    """
    order = rng.permutation(len(bags))
    cls_total = dom_total = 0.0
    for i in order:
        bag = bags[i]
        target = bag.domain_id if adversarial else None
        if target is not None and not 0 <= target < cfg.num_domains:
            raise DimensionError(
                f"slide {bag.slide_id}: domain {target} outside the "
                f"{cfg.num_domains}-way domain head")
        step = loss_and_grads(bag, params, cfg, bag.class_label, target, lam, rng)
        optimizer.step(params, step.grads)
        cls_total += step.class_loss
        if adversarial:
            dom_total += step.domain_loss
    n = len(bags)
    return EpochLosses(cls_total / n, dom_total / n if adversarial else float("nan"))


@dataclass
class CostProfile:
    param_count: int
    peak_resident_bytes: int
    seconds_per_epoch: float


def peak_resident_bytes() -> int:
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # Linux reports KiB, macOS bytes
    return int(peak if sys.platform == "darwin" else peak * 1024)


@dataclass
class FitResult:
    params: MixerParams
    config: MixerConfig
    losses: list[tuple[int, float, float, float]]
    profile: CostProfile


def relabel_domains(bags) -> list[PrototypeBag]:
    """Map training slides onto domain indices 0..n-1 in list order."""
    return [dataclasses.replace(b, domain_id=i) for i, b in enumerate(bags)]


def model_config_for(bags, base: MixerConfig, num_classes: int,
                     dropout_rate: float) -> MixerConfig:
    k, N = bags[0].prototypes.shape
    return dataclasses.replace(base, k=k, N=N, num_classes=num_classes,
                               num_domains=len(bags), dropout_rate=dropout_rate)


def fit(train_bags, base: MixerConfig, tcfg: TrainConfig, num_classes: int,
        init_seed: int | None = None) -> FitResult:
    """Train a fresh model on ``train_bags`` (domain id = slide position)."""
    bags = relabel_domains(train_bags)
    cfg = model_config_for(bags, base, num_classes, tcfg.dropout_rate)
    params = init_params(cfg, tcfg.seed if init_seed is None else init_seed)
    optimizer = make_optimizer(tcfg)
    losses = []
    t0 = time.perf_counter()
    for epoch in range(tcfg.epochs):
        if tcfg.lambda_override is not None:
            lam = float(tcfg.lambda_override)
        else:
            lam = lambda_schedule(epoch, tcfg.epochs, tcfg.alpha, tcfg.lambda_offset)
        rng = np.random.default_rng([tcfg.seed if init_seed is None else init_seed,
                                     epoch])
        ep = train_epoch(params, cfg, bags, optimizer, lam, rng, tcfg.adversarial)
        losses.append((epoch, ep.class_loss, ep.domain_loss, lam))
    elapsed = time.perf_counter() - t0
    profile = CostProfile(param_count(cfg), peak_resident_bytes(),
                          elapsed / tcfg.epochs)
    return FitResult(params, cfg, losses, profile)


# --------------------------------------------------------------------------
# folds and metrics


def stratified_kfold(labels, folds: int, seed: int) -> np.ndarray:
    """Fold index per sample: seeded shuffle, then round-robin within each class.

    The round-robin start rotates from class to class so fold totals stay
    balanced as well.
    """
    labels = np.asarray(labels)
    if folds < 2:
        raise ConfigError("folds must be >= 2")
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(labels), dtype=np.int64)
    start = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < folds:
            raise ConfigError(
                f"class {cls} has {len(idx)} members, fewer than {folds} folds")
        idx = idx[rng.permutation(len(idx))]
        assignment[idx] = (start + np.arange(len(idx))) % folds
        start = (start + len(idx)) % folds
    return assignment


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def binary_auroc(scores, positive) -> float:
    """Mann-Whitney U / (n_pos n_neg) with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    macro_f1: float
    auroc: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    confusion: np.ndarray
    absent_classes: list[int] = field(default_factory=list)
    losses: list[tuple[int, float, float, float]] = field(default_factory=list)
    profile: CostProfile | None = None


def classification_metrics(y_true, probs, num_classes: int) -> MetricsReport:
    y_true = np.asarray(y_true)
    probs = np.asarray(probs, dtype=np.float64)
    y_pred = probs.argmax(axis=1)
    cm = confusion_matrix(y_true, y_pred, num_classes)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm)
    precision, recall, f1 = [], [], []
    for c in range(num_classes):
        p = tp[c] / predicted[c] if predicted[c] else 0.0
        r = tp[c] / support[c] if support[c] else 0.0
        precision.append(float(p))
        recall.append(float(r))
        f1.append(float(2 * p * r / (p + r)) if p + r > 0 else 0.0)
    present = [c for c in range(num_classes) if support[c] > 0]
    absent = [c for c in range(num_classes) if support[c] == 0]
    macro_f1 = float(np.mean([f1[c] for c in present]))
    # one-vs-rest per present class; with two classes both terms are equal
    # (p0 = 1 - p1), so this reduces to the ordinary binary AUROC
    aucs = []
    for c in present:
        pos = y_true == c
        if not pos.all():
            aucs.append(binary_auroc(probs[:, c], pos))
    auroc = float(np.mean(aucs)) if aucs else float("nan")
    return MetricsReport(macro_f1, auroc, precision, recall, f1,
                         [int(s) for s in support], cm, absent)


def predict_proba(params, cfg: MixerConfig, bags) -> np.ndarray:
    return np.array([softmax(forward(b, params, cfg, "eval")[0]) for b in bags])


def evaluate(params, cfg: MixerConfig, bags) -> MetricsReport:
    if not bags:
        raise ValueError("evaluate needs at least one bag")
    probs = predict_proba(params, cfg, bags)
    report = classification_metrics([b.class_label for b in bags], probs,
                                    cfg.num_classes)
    if report.absent_classes:
        log.warning("classes absent from evaluation set: %s", report.absent_classes)
    return report


# --------------------------------------------------------------------------
# cross-validation


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class FoldResult:
    repeat: int
    fold: int
    train_ids: list[str]
    test_ids: list[str]
    metrics: MetricsReport


@dataclass
class CrossvalReport:
    rows: list[FoldResult]

    def _values(self, attr):
        return np.array([getattr(r.metrics, attr) for r in self.rows])

    @property
    def macro_f1_mean(self) -> float:
        return float(self._values("macro_f1").mean())

    @property
    def macro_f1_std(self) -> float:
        return float(self._values("macro_f1").std())

    @property
    def auroc_mean(self) -> float:
        return float(np.nanmean(self._values("auroc")))

    @property
    def auroc_std(self) -> float:
        return float(np.nanstd(self._values("auroc")))


def _run_fold(args) -> FoldResult:
    bags, base, tcfg, num_classes, r, f, assignment = args
    train = [b for b, a in zip(bags, assignment) if a != f]
    test = [b for b, a in zip(bags, assignment) if a == f]
    train_ids = {b.slide_id for b in train}
    assert not train_ids & {b.slide_id for b in test}
    result = fit(train, base, tcfg, num_classes,
                 init_seed=derive_seed(tcfg.seed, r, f))
    metrics = evaluate(result.params, result.config, test)
    metrics.losses = result.losses
    metrics.profile = result.profile
    return FoldResult(r, f, sorted(train_ids), [b.slide_id for b in test], metrics)


def run_crossval(bags, base: MixerConfig, tcfg: TrainConfig, num_classes: int,
                 fold_limit: int | None = None, jobs: int = 1) -> CrossvalReport:
    """Repeated stratified k-fold: fresh model per (repeat, fold).

    ``fold_limit`` runs only the first folds of each repeat (quick checks).
    """
    labels = [b.class_label for b in bags]
    tasks = []
    for r in range(tcfg.repeats):
        assignment = stratified_kfold(labels, tcfg.folds, derive_seed(tcfg.seed, r))
        n_folds = tcfg.folds if fold_limit is None else min(fold_limit, tcfg.folds)
        for f in range(n_folds):
            tasks.append((bags, base, tcfg, num_classes, r, f, assignment))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_fold, tasks))
    else:
        rows = [_run_fold(t) for t in tasks]
    return CrossvalReport(rows)


# --------------------------------------------------------------------------
# post-hoc domain probe


def domain_probe_accuracy(features, targets, seed: int = 0, folds: int = 5) -> float:
    """Cross-validated accuracy of a linear (logistic) probe."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import StratifiedKFold, cross_val_score
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    features = np.asarray(features)
    targets = np.asarray(targets)
    n_splits = min(folds, int(np.bincount(targets).min()))
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    cv = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=seed)
    return float(cross_val_score(probe, features, targets, cv=cv).mean())


def pooled_features(params, cfg, bags) -> np.ndarray:
    return np.array([pooled_representation(b, params, cfg) for b in bags])
