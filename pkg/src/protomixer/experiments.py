"""Reusable experiment drivers shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from . import clustering, data_io
from .bags import PrototypeBag
from .model import MixerConfig, init_params, loss_and_grads
from .training import (
    CrossvalReport, TrainConfig, domain_probe_accuracy, evaluate, fit,
    pooled_features, run_crossval, stratified_kfold,
)

# Small trunk that trains in seconds per fold on one CPU. The domain head is
# kept narrow: wider heads let the reversed gradient swamp the class signal
# under the printed (never-zero) lambda schedule.
SMALL_MODEL = MixerConfig(k=5, N=64, D_S=64, D_C=128, M=2, domain_hidden=16)
SMALL_TRAIN = TrainConfig(epochs=50, learning_rate=1e-4, folds=5)

E2E_CORPUS = data_io.SyntheticSpec(num_bags=60, num_classes=3, num_domains=4, N=64)

# Site offsets confounded with class. A wider domain head and plain momentum
# SGD give the slide-identity adversary enough grip to move a site probe;
# with Adam the reversed gradient is normalised away and the effect shrinks.
PROBE_CORPUS = data_io.SyntheticSpec(num_bags=60, num_classes=3, num_domains=4, N=64,
                                     domain_shift_magnitude=1.0,
                                     site_class_confound=0.5)
PROBE_MODEL = dataclasses.replace(SMALL_MODEL, domain_hidden=64)
PROBE_TRAIN = TrainConfig(epochs=50, optimizer="sgd_momentum", learning_rate=7e-4)


def reduced_corpus(spec: data_io.SyntheticSpec, k: int, workdir, seed: int = 0):
    """Generate ``spec`` under ``workdir`` and reduce every bag to k prototypes."""
    manifest, truth = data_io.gen_synthetic(spec, Path(workdir))
    bags = [clustering.reduce_bag(b, k, seed) for b in data_io.load_dataset(manifest)]
    return bags, truth


def end_to_end(workdir, spec=E2E_CORPUS, model=SMALL_MODEL, tcfg=SMALL_TRAIN,
               jobs: int = 1) -> tuple[CrossvalReport, float]:
    t0 = time.perf_counter()
    bags, _ = reduced_corpus(spec, model.k, workdir)
    report = run_crossval(bags, model, tcfg, spec.num_classes, jobs=jobs)
    return report, time.perf_counter() - t0


@dataclass
class ProbeRow:
    seed: int
    f1_adversarial: float
    f1_plain: float
    probe_adversarial: float
    probe_plain: float


@dataclass
class ProbeSummary:
    rows: list[ProbeRow]

    def mean(self, field: str) -> float:
        return float(np.mean([getattr(r, field) for r in self.rows]))

    @property
    def probe_drop(self) -> float:
        return self.mean("probe_plain") - self.mean("probe_adversarial")

    @property
    def f1_drop(self) -> float:
        return self.mean("f1_plain") - self.mean("f1_adversarial")


def adversarial_probe(bags: list[PrototypeBag], sites, num_classes: int,
                      model=PROBE_MODEL, tcfg=PROBE_TRAIN, seeds=range(5),
                      log=None) -> ProbeSummary:
    """Adversarial (scheduled lambda) against lambda pinned to 0, per seed.

    Each seed holds out one stratified fifth for macro-F1, then fits a
    post-hoc linear probe for ``sites`` on the pooled vectors of every bag.
    """
    sites = np.asarray(sites)
    labels = [b.class_label for b in bags]
    rows = []
    for seed in seeds:
        fold = stratified_kfold(labels, tcfg.folds, seed)
        train = [b for b, f in zip(bags, fold) if f != 0]
        test = [b for b, f in zip(bags, fold) if f == 0]
        out = {}
        for name, lam in (("adversarial", tcfg.lambda_override), ("plain", 0.0)):
            cfg = dataclasses.replace(tcfg, seed=seed, lambda_override=lam)
            res = fit(train, model, cfg, num_classes)
            out[f"f1_{name}"] = evaluate(res.params, res.config, test).macro_f1
            feats = pooled_features(res.params, res.config, bags)
            out[f"probe_{name}"] = domain_probe_accuracy(feats, sites, seed=seed)
        rows.append(ProbeRow(seed, **out))
        if log:
            log(rows[-1])
    return ProbeSummary(rows)


def time_step(cfg: MixerConfig, repeats: int = 7, seed: int = 0) -> float:
    """Best-of-``repeats`` wall time of one forward+backward pass."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    X = rng.standard_normal((cfg.k, cfg.N))
    loss_and_grads(X, params, cfg, 0, 0, 1.0)  # warm-up
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        loss_and_grads(X, params, cfg, 0, 0, 1.0)
        best = min(best, time.perf_counter() - t0)
    return best


@dataclass
class ScalingResult:
    ks: list[int]
    seconds: list[float]
    r2: float
    slope: float
    intercept: float

    @property
    def doubling_ratios(self) -> list[float]:
        return [b / a for a, b in zip(self.seconds, self.seconds[1:])]


# Weights stay cache-resident so BLAS time, not memory traffic, dominates.
SCALING_MODEL = MixerConfig(k=8, N=128, D_S=32, D_C=512, M=4, domain_hidden=16,
                            num_domains=8)


def k_scaling(ks=(8, 16, 32, 64), base=SCALING_MODEL, repeats=15) -> ScalingResult:
    seconds = [time_step(dataclasses.replace(base, k=k), repeats) for k in ks]
    fit_ = stats.linregress(ks, seconds)
    return ScalingResult(list(ks), seconds, fit_.rvalue ** 2, fit_.slope, fit_.intercept)
