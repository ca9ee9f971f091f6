"""Transfer properties measured on a model under test.

Two property families:

* band coverage: per-neuron activation ranges from the model's train
  features are split into k sections; a test set's profile is the set of
  sections its fault-inducing inputs reach, and the property is the share
  of the objective profile that a reference profile covers.

* fault types: fault-inducing inputs from all test sets are embedded in the
  model's feature space (plus predicted/true label columns), reduced, and
  density-clustered; the property is the share of the objective's fault
  clusters that a reference test set also hits.

Profiles carry a run fingerprint so profiles from different band specs or
clustering runs refuse to mix.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateMatrix,
    EmptyObjective,
    MixedRuns,
    NoFaults,
    OutOfRange,
    ShapeMismatch,
    TooFewClusters,
)
from .workspace import fault_mask, predictions_of


# ---------------------------------------------------------------------------
# band coverage (KMNC-style)


@dataclass(frozen=True)
class BandSpec:
    lows: np.ndarray
    highs: np.ndarray
    k: int
    fingerprint: str = ""

    def __post_init__(self):
        if not self.fingerprint:
            h = hashlib.sha256()
            h.update(np.asarray(self.lows, dtype=np.float64).tobytes())
            h.update(np.asarray(self.highs, dtype=np.float64).tobytes())
            h.update(str(self.k).encode())
            object.__setattr__(self, "fingerprint", h.hexdigest()[:16])


def fit_bands(train_features, k: int = 10) -> BandSpec:
    """Per-neuron [min, max] over the train activations, split into k equal
    sections. A constant neuron keeps a single degenerate point-section."""
    if k < 1:
        raise OutOfRange(f"k must be >= 1, got {k}")
    m = np.asarray(train_features, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise DegenerateMatrix(f"need a non-empty 2-D activation matrix, got shape {m.shape}")
    return BandSpec(lows=m.min(axis=0), highs=m.max(axis=0), k=k)


def section_index(values, spec: BandSpec) -> np.ndarray:
    """Section index per element, -1 for out-of-range. Sections are
    [low + i*w, low + (i+1)*w) with the last one closed on the right;
    a degenerate neuron maps its single value to section 0."""
    v = np.asarray(values, dtype=np.float64)
    lows = spec.lows
    highs = spec.highs
    width = (highs - lows) / spec.k
    in_range = (v >= lows) & (v <= highs)
    degenerate = width == 0.0
    safe_width = np.where(degenerate, 1.0, width)
    idx = np.floor((v - lows) / safe_width).astype(np.int64)
    idx = np.minimum(idx, spec.k - 1)
    idx = np.where(degenerate, 0, idx)
    return np.where(in_range, idx, -1)


@dataclass(frozen=True)
class CoverageProfile:
    hits: np.ndarray  # bool, (neurons, k)
    spec_fingerprint: str

    def sections(self, neuron: int) -> set[int]:
        return set(np.flatnonzero(self.hits[neuron]).tolist())

    def total(self) -> int:
        return int(self.hits.sum())


def coverage_profile(features, spec: BandSpec, mask=None) -> CoverageProfile:
    """Sections reached per neuron by the selected rows (all rows when mask
    is None). Out-of-range activations contribute nothing."""
    m = np.asarray(features, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != spec.lows.shape[0]:
        raise ShapeMismatch(
            f"features have shape {m.shape}, band spec covers {spec.lows.shape[0]} neurons"
        )
    if mask is not None:
        m = m[np.asarray(mask, dtype=bool)]
    hits = np.zeros((spec.lows.shape[0], spec.k), dtype=bool)
    if m.shape[0]:
        idx = section_index(m, spec)
        neuron = np.broadcast_to(np.arange(m.shape[1]), idx.shape)
        valid = idx >= 0
        hits[neuron[valid], idx[valid]] = True
    return CoverageProfile(hits=hits, spec_fingerprint=spec.fingerprint)


def _check_same_run(a_fp, b_fp, what):
    if a_fp != b_fp:
        raise MixedRuns(f"{what} come from different runs ({a_fp} vs {b_fp})")


def kmnc_overlap(profile_r: CoverageProfile, profile_o: CoverageProfile) -> float:
    """Share of the objective's covered sections that the reference also
    covers, summed over neurons."""
    _check_same_run(profile_r.spec_fingerprint, profile_o.spec_fingerprint, "coverage profiles")
    denom = int(profile_o.hits.sum())
    if denom == 0:
        raise EmptyObjective("objective profile covers no sections")
    num = int((profile_r.hits & profile_o.hits).sum())
    return num / denom


def combine_coverage(profiles) -> CoverageProfile:
    """Union profile of several test sets (same band spec required)."""
    profiles = list(profiles)
    if not profiles:
        raise EmptyObjective("nothing to combine")
    fp = profiles[0].spec_fingerprint
    hits = np.zeros_like(profiles[0].hits)
    for p in profiles:
        _check_same_run(p.spec_fingerprint, fp, "coverage profiles")
        hits |= p.hits
    return CoverageProfile(hits=hits, spec_fingerprint=fp)


# ---------------------------------------------------------------------------
# fault space construction


@dataclass(frozen=True)
class ClusterConfig:
    reducer: str = "pca"  # "pca" | "none"
    reduced_dims: int = 2
    cluster_algo: str = "dbscan"  # "dbscan" | "hdbscan_lite"
    eps: float = 0.3
    min_pts: int = 4
    label_feature_scale: float = 1.0
    rng_seed: int = 0

    def fingerprint(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class FaultSpace:
    points: np.ndarray  # (rows, d + 2), standardized features + label columns
    testset_ids: list[str]  # per row
    row_index: np.ndarray  # per row, index in the owning test set


def build_fault_space(ws, mut: str, testsets, config: ClusterConfig | None = None) -> FaultSpace:
    """Pool the fault-inducing rows of the given test sets as seen by `mut`:
    its eval features, column-standardized over the pooled rows, with the
    predicted and true label appended as two scaled extra columns."""
    config = config or ClusterConfig()
    blocks = []
    ids: list[str] = []
    row_idx = []
    for tsid in testsets:
        mask = fault_mask(ws, mut, tsid)
        if not mask.any():
            continue
        feats = np.asarray(ws.eval_features(mut, tsid), dtype=np.float64)[mask]
        preds = predictions_of(ws, mut, tsid)[mask]
        labels = ws.testset_labels(tsid)[mask]
        blocks.append((feats, preds, labels))
        ids.extend([tsid] * feats.shape[0])
        row_idx.extend(np.flatnonzero(mask).tolist())
    if not blocks:
        raise NoFaults(f"no test set induces any fault on model {mut!r}")

    feats = np.vstack([b[0] for b in blocks])
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    feats = (feats - mean) / std
    preds = np.concatenate([b[1] for b in blocks]).astype(np.float64)
    labels = np.concatenate([b[2] for b in blocks]).astype(np.float64)
    scale = config.label_feature_scale
    points = np.column_stack([feats, preds * scale, labels * scale])
    return FaultSpace(points=points, testset_ids=ids, row_index=np.asarray(row_idx))


def reduce_dims(points, config: ClusterConfig | None = None) -> np.ndarray:
    """Project to config.reduced_dims principal components ("pca") or pass
    through ("none"). Component signs are fixed so the largest-magnitude
    loading is positive; short rank pads zero columns with a warning."""
    config = config or ClusterConfig()
    m = np.asarray(points, dtype=np.float64)
    if config.reducer == "none":
        return m.copy()
    if config.reducer != "pca":
        raise OutOfRange(f"unknown reducer {config.reducer!r}")
    dims = config.reduced_dims
    if dims < 1:
        raise OutOfRange(f"reduced_dims must be >= 1, got {dims}")
    centered = m - m.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int((s > s[0] * 1e-12).sum()) if s.size and s[0] > 0 else 0
    keep = min(dims, rank)
    comps = vt[:keep]
    for i in range(keep):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    reduced = centered @ comps.T
    if keep < dims:
        warnings.warn(
            f"rank {rank} is below reduced_dims {dims}; padding {dims - keep} zero columns",
            stacklevel=2,
        )
        reduced = np.column_stack([reduced, np.zeros((m.shape[0], dims - keep))])
    return reduced


# ---------------------------------------------------------------------------
# density clustering


def _pairwise_distances(points) -> np.ndarray:
    sq = (points**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    np.clip(d2, 0.0, None, out=d2)
    return np.sqrt(d2)


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Plain density clustering, deterministic by construction.

    A point is core when at least min_pts points (itself included) lie
    within eps. Clusters are the connected components of the core points;
    a non-core point joins the cluster of its lowest-index core neighbor,
    or stays noise (-1). Cluster ids follow scan order.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise DegenerateMatrix(f"need a non-empty 2-D point matrix, got shape {points.shape}")
    if eps <= 0 or min_pts < 1:
        raise OutOfRange(f"eps must be > 0 and min_pts >= 1, got {eps}, {min_pts}")
    dist = _pairwise_distances(points)
    return _dbscan_from_distances(dist, eps, min_pts)


def _dbscan_from_distances(dist, eps, min_pts) -> np.ndarray:
    n = dist.shape[0]
    within = dist <= eps
    core = within.sum(axis=1) >= min_pts
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for start in range(n):
        if not core[start] or labels[start] != -1:
            continue
        stack = [start]
        labels[start] = cluster
        while stack:
            p = stack.pop()
            for q in np.flatnonzero(within[p] & core):
                if labels[q] == -1:
                    labels[q] = cluster
                    stack.append(int(q))
        cluster += 1
    for p in range(n):
        if core[p] or labels[p] != -1:
            continue
        core_neighbors = np.flatnonzero(within[p] & core)
        if core_neighbors.size:
            labels[p] = labels[core_neighbors[0]]
    return labels


def hdbscan_lite(points, min_pts: int = 4, levels: int = 24) -> np.ndarray:
    """Density clustering without an eps knob: sweep eps over the range of
    mutual-reachability distances and keep the partition that persists the
    longest. Ties go to the partition covering more points, then smaller eps.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise DegenerateMatrix(f"need a non-empty 2-D point matrix, got shape {points.shape}")
    dist = _pairwise_distances(points)
    n = dist.shape[0]
    k = min(min_pts, n)
    core_dist = np.sort(dist, axis=1)[:, k - 1]
    mreach = np.maximum(dist, np.maximum(core_dist[:, None], core_dist[None, :]))
    positive = mreach[mreach > 0]
    if positive.size == 0:
        return np.zeros(n, dtype=np.int64)  # all points identical
    lo, hi = positive.min(), positive.max()
    eps_grid = np.geomspace(lo, hi, levels)

    runs = []  # (partition key, labels, run length, first eps)
    for eps in eps_grid:
        labels = _dbscan_from_distances(mreach, eps, min_pts)
        key = _canonical_partition(labels)
        if runs and runs[-1][0] == key:
            runs[-1][2] += 1
        else:
            runs.append([key, labels, 1, eps])
    candidates = [r for r in runs if (r[1] >= 0).any()]
    if not candidates:
        return runs[0][1]
    best = max(candidates, key=lambda r: (r[2], int((r[1] >= 0).sum()), -r[3]))
    return best[1]


def _canonical_partition(labels) -> tuple:
    remap: dict[int, int] = {}
    out = []
    for lab in labels:
        lab = int(lab)
        if lab == -1:
            out.append(-1)
            continue
        if lab not in remap:
            remap[lab] = len(remap)
        out.append(remap[lab])
    return tuple(out)


def silhouette(points, labels) -> float:
    """Mean silhouette over non-noise points; singleton clusters contribute
    0. Needs at least two non-noise clusters."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    keep = labels >= 0
    pts = points[keep]
    labs = labels[keep]
    clusters = np.unique(labs)
    if clusters.size < 2:
        raise TooFewClusters(f"need >= 2 clusters, got {clusters.size}")
    dist = _pairwise_distances(pts)
    scores = np.zeros(pts.shape[0])
    for i in range(pts.shape[0]):
        own = labs == labs[i]
        n_own = int(own.sum())
        if n_own == 1:
            continue  # singleton: score 0
        a = dist[i, own].sum() / (n_own - 1)
        b = min(dist[i, labs == c].mean() for c in clusters if c != labs[i])
        top = max(a, b)
        scores[i] = 0.0 if top == 0.0 else (b - a) / top
    return float(scores.mean())


# ---------------------------------------------------------------------------
# fault-type profiles


@dataclass(frozen=True)
class FaultTypeProfile:
    testset_id: str
    clusters: frozenset
    counts: tuple  # rows per cluster id, noise excluded
    run_id: str


@dataclass
class FaultClustering:
    mut: str
    labels: np.ndarray
    space: FaultSpace
    n_clusters: int
    profiles: dict[str, FaultTypeProfile] = field(default_factory=dict)
    silhouette: float | None = None
    run_id: str = ""


def fault_type_profiles(ws, mut: str, testsets, config: ClusterConfig | None = None) -> FaultClustering:
    """One clustering run over the pooled fault rows of all given test sets
    on `mut`, then a per-testset profile: which clusters it hits and how
    often. Noise rows belong to no cluster and count nowhere."""
    config = config or ClusterConfig()
    testsets = list(testsets)
    space = build_fault_space(ws, mut, testsets, config)
    reduced = reduce_dims(space.points, config)
    if config.cluster_algo == "dbscan":
        labels = dbscan(reduced, config.eps, config.min_pts)
    elif config.cluster_algo == "hdbscan_lite":
        labels = hdbscan_lite(reduced, config.min_pts)
    else:
        raise OutOfRange(f"unknown cluster_algo {config.cluster_algo!r}")
    n_clusters = int(labels.max()) + 1 if (labels >= 0).any() else 0
    run_id = hashlib.sha256(
        json.dumps([mut, sorted(testsets), config.fingerprint()]).encode()
    ).hexdigest()[:16]

    run = FaultClustering(mut=mut, labels=labels, space=space, n_clusters=n_clusters, run_id=run_id)
    ids = np.asarray(space.testset_ids)
    for tsid in testsets:
        member = labels[ids == tsid]
        member = member[member >= 0]
        counts = np.bincount(member, minlength=n_clusters) if n_clusters else np.zeros(0, dtype=int)
        run.profiles[tsid] = FaultTypeProfile(
            testset_id=tsid,
            clusters=frozenset(int(c) for c in np.unique(member)),
            counts=tuple(int(c) for c in counts),
            run_id=run_id,
        )
    try:
        run.silhouette = silhouette(reduced, labels)
    except TooFewClusters:
        run.silhouette = None
    return run


def fault_overlap(profile_r: FaultTypeProfile, profile_o: FaultTypeProfile) -> float:
    """Share of the objective's fault clusters that the reference hits."""
    _check_same_run(profile_r.run_id, profile_o.run_id, "fault profiles")
    if not profile_o.clusters:
        raise EmptyObjective(f"objective {profile_o.testset_id!r} hits no cluster")
    return len(profile_r.clusters & profile_o.clusters) / len(profile_o.clusters)


def combine_fault_profiles(profiles) -> FaultTypeProfile:
    """Union profile of several test sets from the same clustering run."""
    profiles = list(profiles)
    if not profiles:
        raise EmptyObjective("nothing to combine")
    run_id = profiles[0].run_id
    clusters = set()
    counts = np.zeros(len(profiles[0].counts), dtype=int)
    for p in profiles:
        _check_same_run(p.run_id, run_id, "fault profiles")
        clusters |= p.clusters
        counts += np.asarray(p.counts, dtype=int)
    return FaultTypeProfile(
        testset_id="+".join(p.testset_id for p in profiles),
        clusters=frozenset(clusters),
        counts=tuple(int(c) for c in counts),
        run_id=run_id,
    )
