"""Six similarity/distance metrics between models, plus the pairwise engine.

Representational metrics (pwcca, cka, ortho) compare feature matrices
extracted on the shared train inputs; functional metrics (acc, dis, jdiv)
compare train logits or accuracies. Orientation matters downstream: pwcca
grows with similarity, the other five grow with distance, and the pipeline
negates distance-oriented values before rank correlation.
"""

from __future__ import annotations

import hashlib
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateMatrix, OutOfRange, RowMismatch, SelfComparison

SIMILARITY_UP = "similarity_up"
DISTANCE_UP = "distance_up"

ORIENTATION = {
    "pwcca": SIMILARITY_UP,
    "cka": DISTANCE_UP,
    "ortho": DISTANCE_UP,
    "acc": DISTANCE_UP,
    "dis": DISTANCE_UP,
    "jdiv": DISTANCE_UP,
}
METRICS = tuple(ORIENTATION)
REPRESENTATIONAL = ("pwcca", "cka", "ortho")
FUNCTIONAL = ("acc", "dis", "jdiv")

# singular values below RANK_TOL * s_max are dropped before whitening; this
# is the stabilizer that stands in for a tiny ridge on the covariance blocks
RANK_TOL = 1e-10


@dataclass(frozen=True)
class MetricConfig:
    pwcca_symmetrize: bool = True
    prob_floor: float = 1e-7
    logit_space: str = "raw"  # "raw" logits get a softmax, "probabilities" renormalize
    acc_source: str = "auto"  # "auto" | "manifest" | "computed"

    def fingerprint(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def preprocess_features(m) -> np.ndarray:
    """Column-center, then scale the whole matrix to unit Frobenius norm.

    Output is float64. Raises DegenerateMatrix when nothing is left after
    centering (constant columns everywhere).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DegenerateMatrix(f"expected a 2-D feature matrix, got shape {m.shape}")
    m = m - m.mean(axis=0, keepdims=True)
    norm = np.sqrt((m * m).sum())
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateMatrix("feature matrix is constant: zero after centering")
    return m / norm


def _check_rows(m1, m2):
    if m1.shape[0] != m2.shape[0]:
        raise RowMismatch(f"row counts differ: {m1.shape[0]} vs {m2.shape[0]}")


# ---------------------------------------------------------------------------
# representational metrics


def _thin_svd(m):
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    keep = s > (RANK_TOL * s[0] if s.size else 0.0)
    return u[:, keep], s[keep], vt[keep]


def pwcca(f1, f2, symmetrize: bool = True) -> float:
    """Projection-weighted CCA similarity in [0, 1].

    Canonical correlations come from the SVDs of the preprocessed matrices;
    each correlation is weighted by how much of the first view's columns its
    canonical variate absorbs. The reported value averages both directions
    unless symmetrize is False.
    """
    m1 = preprocess_features(f1)
    m2 = preprocess_features(f2)
    _check_rows(m1, m2)
    v12 = _pwcca_directional(_thin_svd(m1), _thin_svd(m2))
    if not symmetrize:
        return v12
    v21 = _pwcca_directional(_thin_svd(m2), _thin_svd(m1))
    return 0.5 * (v12 + v21)


def _pwcca_directional(svd1, svd2) -> float:
    u1, s1, v1t = svd1
    u2, _, _ = svd2
    a, rho, _ = np.linalg.svd(u1.T @ u2)
    rho = np.clip(rho, 0.0, 1.0)
    # weight i = total absolute projection of view-1 columns on variate i;
    # variates are u1 @ a[:, i], so u1' m1 collapses to s1 * v1t
    proj = a.T @ (s1[:, None] * v1t)
    alpha = np.abs(proj).sum(axis=1)[: rho.size]
    total = alpha.sum()
    if total == 0.0:
        return 0.0
    return float((alpha / total) @ rho)


def cka_distance(f1, f2) -> float:
    """Linear CKA as a distance in [0, 1]: 0 means identical up to rotation
    and scale."""
    m1 = preprocess_features(f1)
    m2 = preprocess_features(f2)
    _check_rows(m1, m2)
    cross = m1.T @ m2
    num = float((cross * cross).sum())
    n1 = float(np.linalg.norm(m1.T @ m1))
    n2 = float(np.linalg.norm(m2.T @ m2))
    value = 1.0 - num / (n1 * n2)
    return float(min(max(value, 0.0), 1.0))


def ortho_distance(f1, f2) -> float:
    """Orthogonal Procrustes distance in [0, 2] on preprocessed matrices:
    ||m1||^2 + ||m2||^2 - 2 * nuclear(m1' m2)."""
    m1 = preprocess_features(f1)
    m2 = preprocess_features(f2)
    _check_rows(m1, m2)
    nuclear = float(np.linalg.svd(m1.T @ m2, compute_uv=False).sum())
    value = float((m1 * m1).sum() + (m2 * m2).sum() - 2.0 * nuclear)
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# functional metrics


def acc_diff(p1: float, p2: float) -> float:
    """Absolute accuracy gap; inputs are fractions in [0, 1]."""
    for p in (p1, p2):
        if not 0.0 <= p <= 1.0:
            raise OutOfRange(f"accuracy {p} outside [0, 1]")
    return abs(p1 - p2)


def disagreement(l1, l2) -> float:
    """Fraction of rows where the two logit matrices argmax differently
    (ties go to the lowest class index)."""
    l1 = np.asarray(l1)
    l2 = np.asarray(l2)
    _check_rows(l1, l2)
    if l1.shape[0] == 0:
        raise RowMismatch("empty logit matrices")
    return float(np.mean(np.argmax(l1, axis=1) != np.argmax(l2, axis=1)))


def _to_probabilities(logits, logit_space: str, floor: float) -> np.ndarray:
    m = np.asarray(logits, dtype=np.float64)
    if logit_space == "raw":
        m = m - m.max(axis=1, keepdims=True)
        m = np.exp(m)
        m = m / m.sum(axis=1, keepdims=True)
    elif logit_space == "probabilities":
        sums = m.sum(axis=1, keepdims=True)
        if np.any(sums <= 0):
            raise OutOfRange("probability rows must have positive sums")
        m = m / sums
    else:
        raise OutOfRange(f"unknown logit_space {logit_space!r}")
    m = np.clip(m, floor, 1.0)
    return m / m.sum(axis=1, keepdims=True)


def j_divergence(l1, l2, logit_space: str = "raw", prob_floor: float = 1e-7) -> float:
    """Symmetrized KL divergence averaged over rows, natural log.

    Rows are softmaxed when logit_space is "raw", renormalized when already
    probabilities; either way they are floored at prob_floor and renormalized
    so the logs stay finite.
    """
    l1 = np.asarray(l1)
    l2 = np.asarray(l2)
    _check_rows(l1, l2)
    if l1.shape[0] == 0:
        raise RowMismatch("empty logit matrices")
    p = _to_probabilities(l1, logit_space, prob_floor)
    q = _to_probabilities(l2, logit_space, prob_floor)
    log_ratio = np.log(p) - np.log(q)
    kl_pq = (p * log_ratio).sum(axis=1)
    kl_qp = (-q * log_ratio).sum(axis=1)
    return float((kl_pq + kl_qp).mean() / 2.0)


# ---------------------------------------------------------------------------
# pairwise engine over a workspace


@dataclass
class SimilarityScore:
    metric: str
    target: str
    other: str
    value: float
    orientation: str


class ScoreCache:
    """Keyed (pair, metric, config) score store. In-memory always; mirrors to
    a directory when given one. Writes are locked, one writer per key."""

    def __init__(self, directory=None):
        self._mem: dict[str, float] = {}
        self._lock = threading.Lock()
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(metric, a, b, fingerprint, ordered=False) -> str:
        pair = (a, b) if ordered else tuple(sorted((a, b)))
        blob = json.dumps([metric, pair, fingerprint])
        return hashlib.sha256(blob.encode()).hexdigest()

    def get(self, key):
        with self._lock:
            if key in self._mem:
                return self._mem[key]
        if self.directory:
            path = self.directory / f"{key}.json"
            if path.is_file():
                value = json.loads(path.read_text())["value"]
                with self._lock:
                    self._mem[key] = value
                return value
        return None

    def put(self, key, value):
        with self._lock:
            if key in self._mem:
                return
            self._mem[key] = value
        if self.directory:
            path = self.directory / f"{key}.json"
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps({"value": value}))
            tmp.replace(path)


class PairwiseEngine:
    """Computes metric values between models of one workspace, reusing
    preprocessed matrices and SVD factors across pairs."""

    def __init__(self, ws, config: MetricConfig | None = None, cache: ScoreCache | None = None):
        self.ws = ws
        self.config = config or MetricConfig()
        self.cache = cache or ScoreCache()
        self._prep: dict[str, np.ndarray] = {}
        self._svd: dict[str, tuple] = {}
        self._lock = threading.Lock()

    def _preprocessed(self, model_id):
        with self._lock:
            hit = self._prep.get(model_id)
        if hit is not None:
            return hit
        m = preprocess_features(self.ws.train_features(model_id))
        with self._lock:
            self._prep.setdefault(model_id, m)
        return m

    def _svd_of(self, model_id):
        with self._lock:
            hit = self._svd.get(model_id)
        if hit is not None:
            return hit
        fac = _thin_svd(self._preprocessed(model_id))
        with self._lock:
            self._svd.setdefault(model_id, fac)
        return fac

    def _accuracy(self, model_id):
        source = self.config.acc_source
        entry = self.ws.models[model_id]
        if source == "manifest":
            if entry.train_accuracy is None:
                raise OutOfRange(f"model {model_id!r} has no train_accuracy in the manifest")
            return float(entry.train_accuracy)
        if source == "computed":
            from .workspace import predictions_of

            preds = predictions_of(self.ws, model_id)
            return float(np.mean(preds == self.ws.train_labels(model_id)))
        return self.ws.train_accuracy(model_id)

    def value(self, metric: str, a: str, b: str) -> float:
        if metric not in ORIENTATION:
            raise OutOfRange(f"unknown metric {metric!r}")
        ordered = metric == "pwcca" and not self.config.pwcca_symmetrize
        key = ScoreCache.key(metric, a, b, self.config.fingerprint(), ordered)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        value = self._compute(metric, a, b)
        self.cache.put(key, value)
        return value

    def _compute(self, metric, a, b):
        if metric == "pwcca":
            v12 = _pwcca_directional(self._svd_of(a), self._svd_of(b))
            if not self.config.pwcca_symmetrize:
                return v12
            v21 = _pwcca_directional(self._svd_of(b), self._svd_of(a))
            return 0.5 * (v12 + v21)
        if metric in ("cka", "ortho"):
            m1 = self._preprocessed(a)
            m2 = self._preprocessed(b)
            _check_rows(m1, m2)
            cross = m1.T @ m2
            if metric == "cka":
                num = float((cross * cross).sum())
                n1 = float(np.linalg.norm(m1.T @ m1))
                n2 = float(np.linalg.norm(m2.T @ m2))
                return float(min(max(1.0 - num / (n1 * n2), 0.0), 1.0))
            nuclear = float(np.linalg.svd(cross, compute_uv=False).sum())
            return max(float((m1 * m1).sum() + (m2 * m2).sum() - 2.0 * nuclear), 0.0)
        if metric == "acc":
            return acc_diff(self._accuracy(a), self._accuracy(b))
        if metric == "dis":
            return disagreement(self.ws.train_logits(a), self.ws.train_logits(b))
        # jdiv
        return j_divergence(
            self.ws.train_logits(a),
            self.ws.train_logits(b),
            logit_space=self._logit_space(),
            prob_floor=self.config.prob_floor,
        )

    def _logit_space(self):
        space = self.ws.options.get("logit_space", self.config.logit_space)
        return space


def pairwise_similarity(
    ws,
    metric: str,
    target: str,
    candidates,
    config: MetricConfig | None = None,
    cache: ScoreCache | None = None,
    jobs: int = 1,
    engine: PairwiseEngine | None = None,
) -> list[SimilarityScore]:
    """Score `target` against each candidate with one metric.

    Candidates must not contain the target itself. Scores come back in
    candidate order, each tagged with the metric's orientation.
    """
    candidates = list(candidates)
    if target in candidates:
        raise SelfComparison(f"target {target!r} appears among the candidates")
    eng = engine or PairwiseEngine(ws, config, cache)

    def score(other):
        return SimilarityScore(
            metric=metric,
            target=target,
            other=other,
            value=eng.value(metric, target, other),
            orientation=ORIENTATION[metric],
        )

    if jobs > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(score, candidates))
    return [score(c) for c in candidates]


def oriented(value: float, metric: str) -> float:
    """Flip distance-oriented values so that bigger always means more
    similar; rank correlation against properties uses this view."""
    return value if ORIENTATION[metric] == SIMILARITY_UP else -value
