"""Per-slide k-means reduction of patch embeddings to prototypes."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data_io
from .bags import EmbeddingBag, PrototypeBag
from .errors import DataError, ParameterError

log = logging.getLogger(__name__)

MAX_ITERS = 100
REL_TOL = 1e-6
RESTARTS = 5


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int
    history: list[float] = field(default_factory=list)


def _sq_dists(points: np.ndarray, centroids: np.ndarray, chunk: int = 2048) -> np.ndarray:
    # direct differences rather than the |x|^2 - 2xc + |c|^2 expansion so that
    # exact ties stay exact and go to the lowest index
    out = np.empty((points.shape[0], centroids.shape[0]))
    for start in range(0, points.shape[0], chunk):
        diff = points[start:start + chunk, None, :] - centroids[None, :, :]
        out[start:start + chunk] = np.einsum("kcn,kcn->kc", diff, diff)
    return out


def _update_centroids(points, assign, k):
    # fixed ascending point order per cluster keeps the sums reproducible
    centroids = np.zeros((k, points.shape[1]))
    for c in range(k):
        members = points[assign == c]
        if len(members):
            centroids[c] = members.mean(axis=0)
    return centroids


def _inertia(points, centroids, assign) -> float:
    diff = points - centroids[assign]
    return float(np.sum(diff * diff))


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    K = points.shape[0]
    chosen = [int(rng.integers(K))]
    closest = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining mass sits on existing centers
            idx = int(rng.integers(K))
        else:
            idx = int(rng.choice(K, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[[idx]])[:, 0])
    return points[chosen].copy()


def _repair_empty(points, centroids, assign, k):
    counts = np.bincount(assign, minlength=k)
    for c in np.flatnonzero(counts == 0):
        d = np.sum((points - centroids[assign]) ** 2, axis=1)
        # only steal from clusters that would not become empty themselves
        d[counts[assign] <= 1] = -1.0
        far = int(np.argmax(d))
        if d[far] < 0:
            break
        counts[assign[far]] -= 1
        assign[far] = c
        counts[c] = 1
        centroids[c] = points[far]
    return assign


def _hartigan_pass(points, centroids, assign, k) -> bool:
    """Single-point transfers that lower inertia; returns True if any moved.

    Moving x from cluster a (size n_a > 1) to b changes inertia by
    ``n_b/(n_b+1) |x-c_b|^2 - n_a/(n_a-1) |x-c_a|^2``. Lloyd cannot see these
    moves because it ignores how the centroids shift.
    """
    counts = np.bincount(assign, minlength=k)
    moved = False
    for i in range(points.shape[0]):
        a = assign[i]
        if counts[a] <= 1:
            continue
        x = points[i]
        d = np.sum((centroids - x) ** 2, axis=1)
        remove = counts[a] / (counts[a] - 1) * d[a]
        add = counts / (counts + 1.0) * d
        add[a] = np.inf
        b = int(np.argmin(add))
        if add[b] < remove * (1.0 - 1e-12):
            assign[i] = b
            centroids[a] = (centroids[a] * counts[a] - x) / (counts[a] - 1)
            centroids[b] = (centroids[b] * counts[b] + x) / (counts[b] + 1)
            counts[a] -= 1
            counts[b] += 1
            moved = True
    return moved


def _lloyd(points, k, rng, max_iters, rel_tol) -> KMeansResult:
    centroids = kmeans_pp_init(points, k, rng)
    assign = None
    history = []
    it = 0
    polish = True
    while it < max_iters:
        it += 1
        new_assign = np.argmin(_sq_dists(points, centroids), axis=1)
        new_assign = _repair_empty(points, centroids, new_assign, k)
        centroids = _update_centroids(points, new_assign, k)
        inertia = _inertia(points, centroids, new_assign)
        unchanged = assign is not None and np.array_equal(assign, new_assign)
        assign = new_assign
        history.append(inertia)
        converged = unchanged
        if len(history) > 1:
            prev = history[-2]
            converged |= prev == 0 or (prev - inertia) / prev < rel_tol
        if not converged:
            continue
        # Lloyd has settled; try single-point transfers before giving up
        if not polish or it >= max_iters:
            break
        trial = assign.copy()
        if not _hartigan_pass(points, centroids.copy(), trial, k):
            break
        refreshed = _update_centroids(points, trial, k)
        new_inertia = _inertia(points, refreshed, trial)
        if not new_inertia < inertia:
            break
        it += 1
        assign, centroids = trial, refreshed
        history.append(new_inertia)
    return KMeansResult(centroids, assign, history[-1], it, history)


def kmeans(points, k: int, seed: int = 0, max_iters: int = MAX_ITERS,
           rel_tol: float = REL_TOL, restarts: int = RESTARTS) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds; best of ``restarts`` runs.

    Ties in the nearest-centroid step go to the lowest cluster index. An
    empty cluster takes over the point farthest from its current centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ParameterError(f"points must be a K x N matrix, got {points.shape}")
    K = points.shape[0]
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if k > K:
        raise ParameterError(f"k={k} exceeds the number of points K={K}")
    if max_iters < 1 or restarts < 1:
        raise ParameterError("max_iters and restarts must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        res = _lloyd(points, k, rng, max_iters, rel_tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def bag_seed(global_seed: int, slide_id: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{slide_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def canonical_order(centroids: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Row order: larger clusters first, then smaller L2 norm, then first coordinate."""
    norms = np.linalg.norm(centroids, axis=1)
    # lexsort keys are listed least significant first
    return np.lexsort((centroids[:, 0], norms, -np.asarray(sizes)))


@dataclass
class Reduction:
    bag: PrototypeBag
    inertia: float
    iterations: int
    num_instances: int


def reduce_bag_detailed(bag: EmbeddingBag, k: int, seed: int = 0,
                        max_iters: int = MAX_ITERS, rel_tol: float = REL_TOL,
                        restarts: int = RESTARTS) -> Reduction:
    K = bag.num_instances
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    k_eff = min(k, K)
    res = kmeans(bag.features, k_eff, bag_seed(seed, bag.slide_id),
                 max_iters, rel_tol, restarts)
    sizes = np.bincount(res.assignments, minlength=k_eff)
    order = canonical_order(res.centroids, sizes)
    protos = res.centroids[order]
    sizes = sizes[order]
    degenerate = k > K
    if degenerate:
        reps = np.arange(k) % k_eff
        protos = protos[reps]
        sizes = np.where(np.arange(k) < k_eff, sizes[reps], 0)
    out = PrototypeBag(bag.slide_id, bag.class_label, bag.domain_id,
                       protos, sizes.astype(np.int64), degenerate)
    return Reduction(out, res.inertia, res.iterations, K)


def reduce_bag(bag: EmbeddingBag, k: int, seed: int = 0) -> PrototypeBag:
    """Reduce one bag to ``k`` canonically ordered prototypes.

    Bags with fewer than ``k`` patches are clustered with ``k = K`` and the
    ordered centroid list is repeated cyclically up to ``k`` rows; padded
    rows get cluster size 0 and the bag is marked ``degenerate``.
    """
    return reduce_bag_detailed(bag, k, seed).bag


@dataclass
class ReportRow:
    slide_id: str
    K: int
    k: int
    inertia: float
    iterations: int
    flag: str = ""


REPORT_COLUMNS = ("slide_id", "K", "k", "inertia", "iterations", "flag")


def write_report(rows: list[ReportRow], path) -> None:
    lines = [",".join(REPORT_COLUMNS)]
    for r in rows:
        inertia = "" if r.inertia != r.inertia else repr(r.inertia)
        lines.append(f"{r.slide_id},{r.K},{r.k},{inertia},{r.iterations},{r.flag}")
    Path(path).write_text("\n".join(lines) + "\n")


def reduce_dataset(manifest_path, k: int, seed: int, out_dir,
                   report_name: str = "report.csv") -> list[ReportRow]:
    """Reduce every bag of a manifest and write a prototype corpus.

    Bags that fail to load are reported and skipped; the run fails only when
    nothing could be reduced.
    """
    manifest = data_io.read_manifest(manifest_path)
    if not manifest.entries:
        raise DataError("no bags in manifest")
    out = Path(out_dir)
    (out / "prototypes").mkdir(parents=True, exist_ok=True)
    rows = []
    entries = []
    for entry in manifest.entries:
        try:
            bag = data_io.load_entry(manifest, entry)
        except (DataError, data_io.FormatError, OSError) as exc:
            log.warning("skipping %s: %s", entry.slide_id, exc)
            rows.append(ReportRow(entry.slide_id, 0, k, float("nan"), 0,
                                  f"error:{type(exc).__name__}"))
            continue
        red = reduce_bag_detailed(bag, k, seed)
        rel = f"prototypes/{entry.slide_id}.pmb"
        data_io.write_matrix(red.bag.prototypes, out / rel)
        data_io.write_matrix(red.bag.cluster_sizes[None, :].astype(np.float64),
                             data_io.sizes_path(out / rel))
        entries.append(data_io.ManifestEntry(entry.slide_id, entry.class_label,
                                             entry.domain_id, rel))
        rows.append(ReportRow(entry.slide_id, red.num_instances, k, red.inertia,
                              red.iterations,
                              "degenerate" if red.bag.degenerate else ""))
    if not entries:
        raise DataError("all bags failed to load")
    data_io.write_manifest(
        data_io.Manifest(manifest.dataset_name, manifest.num_classes, entries,
                         "prototype", out), out / "manifest.tsv")
    write_report(rows, out / report_name)
    return rows
