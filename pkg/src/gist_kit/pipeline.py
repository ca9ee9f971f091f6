"""Orchestration: offline metric validation and online test-set selection.

Offline, every reference model takes a turn as the objective: the property
of each other reference test set is measured on it, each metric scores the
same pairs, and rank correlation per metric decides which metrics actually
track the property. Online, a chosen metric ranks the reference test sets
for a new model under test and a strategy picks what to run.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    GistError,
    NotEnoughTypes,
    NoUsableProxy,
    OutOfRange,
    TooFewModels,
    TooFewSamples,
)
from .properties import (
    ClusterConfig,
    combine_coverage,
    combine_fault_profiles,
    coverage_profile,
    fault_overlap,
    fault_type_profiles,
    fit_bands,
    kmnc_overlap,
)
from .similarity import (
    METRICS,
    MetricConfig,
    PairwiseEngine,
    ScoreCache,
    oriented,
    pairwise_similarity,
)
from .stats import kendall_tau_b, quartiles, rank_vector
from .workspace import Workspace, fault_mask

PROPERTIES = ("kmnc", "fault_types")


@dataclass(frozen=True)
class Thresholds:
    min_median_tau: float = 0.2
    min_frac_significant: float = 0.7
    alpha: float = 0.1


@dataclass(frozen=True)
class OfflineOptions:
    property: str = "kmnc"
    metrics: tuple = METRICS
    exclude_same_type: bool = True
    k: int = 10  # coverage sections per neuron
    filter_objective_faults: bool = True
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    metric_config: MetricConfig = field(default_factory=MetricConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    jobs: int = 1


# ---------------------------------------------------------------------------
# property evaluation on one model under test


class PropertyEvaluator:
    """Property values of candidate test sets relative to a model's own
    test set, measured on that model. One instance = one prepared run."""

    def __init__(self, ws: Workspace, mut: str, candidate_testsets, options: OfflineOptions):
        self.ws = ws
        self.mut = mut
        self.candidates = list(candidate_testsets)
        self.options = options
        self.own = ws.testset_of(mut)
        if options.property == "kmnc":
            bands = fit_bands(ws.train_features(mut), options.k)
            own_mask = fault_mask(ws, mut, self.own) if options.filter_objective_faults else None
            self._bands = bands
            self._own_profile = coverage_profile(ws.eval_features(mut, self.own), bands, own_mask)
            self._profiles = {}
        elif options.property == "fault_types":
            run = fault_type_profiles(
                ws, mut, self.candidates + [self.own], options.cluster
            )
            self._run = run
        else:
            raise OutOfRange(f"unknown property {options.property!r}")

    def _profile(self, tsid):
        if tsid not in self._profiles:
            self._profiles[tsid] = coverage_profile(
                self.ws.eval_features(self.mut, tsid),
                self._bands,
                fault_mask(self.ws, self.mut, tsid),
            )
        return self._profiles[tsid]

    def value(self, tsid: str) -> float:
        if self.options.property == "kmnc":
            return kmnc_overlap(self._profile(tsid), self._own_profile)
        return fault_overlap(self._run.profiles[tsid], self._run.profiles[self.own])

    def combined(self, tsids) -> float:
        """Property of the union of several test sets."""
        tsids = list(tsids)
        if self.options.property == "kmnc":
            union = combine_coverage([self._profile(t) for t in tsids])
            return kmnc_overlap(union, self._own_profile)
        union = combine_fault_profiles([self._run.profiles[t] for t in tsids])
        return fault_overlap(union, self._run.profiles[self.own])


def eligible_references(ws: Workspace, mut: str, exclude_same_type: bool = True) -> list[str]:
    """Reference models usable for `mut`: never itself, never its own type
    when the exclusion protocol is on."""
    mut_type = ws.models[mut].model_type
    out = []
    for mid in ws.reference_models():
        if mid == mut:
            continue
        if exclude_same_type and ws.models[mid].model_type == mut_type:
            continue
        out.append(mid)
    return out


# ---------------------------------------------------------------------------
# offline validation


@dataclass
class CorrelationCell:
    objective: str
    metric: str
    tau: float | None = None
    p_value: float | None = None
    n: int = 0
    method: str = ""
    error: str | None = None


@dataclass
class MetricAggregate:
    metric: str
    median_tau: float | None
    q1: float | None
    q3: float | None
    frac_p_lt_005: float
    frac_p_lt_01: float
    frac_significant: float  # at thresholds.alpha
    mean_rank: float | None
    n_valid: int
    verdict: bool = False


@dataclass
class OfflineReport:
    property: str
    metrics: tuple
    thresholds: Thresholds
    cells: dict  # objective -> metric -> CorrelationCell
    aggregates: dict  # metric -> MetricAggregate
    chosen_proxy: str | None
    status: str  # "ok" | "no_usable_proxy"
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "property": self.property,
            "metrics": list(self.metrics),
            "thresholds": self.thresholds.__dict__,
            "status": self.status,
            "chosen_proxy": self.chosen_proxy,
            "warnings": list(self.warnings),
            "objectives": {
                obj: {
                    m: {
                        "tau": c.tau,
                        "p_value": c.p_value,
                        "n": c.n,
                        "method": c.method,
                        "error": c.error,
                    }
                    for m, c in row.items()
                }
                for obj, row in self.cells.items()
            },
            "aggregates": {
                m: {
                    "median_tau": a.median_tau,
                    "q1": a.q1,
                    "q3": a.q3,
                    "frac_p_lt_005": a.frac_p_lt_005,
                    "frac_p_lt_01": a.frac_p_lt_01,
                    "frac_significant": a.frac_significant,
                    "mean_rank": a.mean_rank,
                    "n_valid": a.n_valid,
                    "verdict": a.verdict,
                }
                for m, a in self.aggregates.items()
            },
        }

    def csv_rows(self, ws: Workspace) -> list[dict]:
        rows = []
        for obj in sorted(self.cells):
            entry = ws.models[obj]
            for metric in self.metrics:
                cell = self.cells[obj][metric]
                rows.append(
                    {
                        "metric": metric,
                        "mut": obj,
                        "mut_type": entry.model_type,
                        "seed": entry.seed,
                        "tau": "" if cell.tau is None else f"{cell.tau:.6f}",
                        "p": "" if cell.p_value is None else f"{cell.p_value:.6g}",
                        "n": cell.n,
                        "method": cell.method,
                        "error": cell.error or "",
                    }
                )
        return rows


def offline_validate(
    ws: Workspace,
    options: OfflineOptions | None = None,
    cache: ScoreCache | None = None,
) -> OfflineReport:
    """Run every reference model as objective and correlate each metric
    against the transfer property. Deterministic for a given workspace and
    options, whatever the job count."""
    options = options or OfflineOptions()
    if options.property not in PROPERTIES:
        raise OutOfRange(f"unknown property {options.property!r}")
    objectives = ws.reference_models()
    if len(objectives) < 2:
        raise TooFewModels("offline validation needs at least 2 reference models")
    engine = PairwiseEngine(ws, options.metric_config, cache)
    refs_of = {}
    for obj in objectives:
        refs = eligible_references(ws, obj, options.exclude_same_type)
        if len(refs) < 3:
            raise TooFewModels(
                f"objective {obj!r} keeps only {len(refs)} references after exclusion; "
                "rank correlation needs at least 3"
            )
        refs_of[obj] = refs

    warnings_log: list[str] = []

    def run_objective(obj):
        refs = refs_of[obj]
        cells = {}
        try:
            evaluator = PropertyEvaluator(ws, obj, [ws.testset_of(r) for r in refs], options)
            prop = {r: evaluator.value(ws.testset_of(r)) for r in refs}
        except GistError as exc:
            for metric in options.metrics:
                cells[metric] = CorrelationCell(obj, metric, error=f"{type(exc).__name__}: {exc}")
            return cells
        for metric in options.metrics:
            try:
                scores = pairwise_similarity(
                    ws, metric, obj, refs, engine=engine
                )
                proxy = [oriented(s.value, metric) for s in scores]
                result = kendall_tau_b([prop[r] for r in refs], proxy)
                cells[metric] = CorrelationCell(
                    obj, metric, result.tau, result.p_value, result.n, result.method
                )
            except GistError as exc:
                cells[metric] = CorrelationCell(obj, metric, error=f"{type(exc).__name__}: {exc}")
        return cells

    if options.jobs > 1:
        with ThreadPoolExecutor(max_workers=options.jobs) as pool:
            rows = list(pool.map(run_objective, objectives))
        cells = dict(zip(objectives, rows))
    else:
        cells = {obj: run_objective(obj) for obj in objectives}

    for obj in objectives:
        for metric in options.metrics:
            cell = cells[obj][metric]
            if cell.error:
                warnings_log.append(f"{obj}/{metric}: {cell.error}")

    aggregates = _aggregate(cells, objectives, options)
    try:
        chosen = check_correlation(aggregates, options.thresholds)
        status = "ok"
    except NoUsableProxy:
        chosen = None
        status = "no_usable_proxy"
    return OfflineReport(
        property=options.property,
        metrics=tuple(options.metrics),
        thresholds=options.thresholds,
        cells=cells,
        aggregates=aggregates,
        chosen_proxy=chosen,
        status=status,
        warnings=warnings_log,
    )


def _aggregate(cells, objectives, options: OfflineOptions) -> dict:
    metrics = list(options.metrics)
    alpha = options.thresholds.alpha
    n_objectives = len(objectives)

    rank_sum = {m: 0.0 for m in metrics}
    rank_cnt = {m: 0 for m in metrics}
    for obj in objectives:
        valid = [m for m in metrics if cells[obj][m].error is None]
        if len(valid) < 2:
            continue
        ranks = rank_vector([cells[obj][m].tau for m in valid], higher_is_better=True)
        for m, r in zip(valid, ranks):
            rank_sum[m] += float(r)
            rank_cnt[m] += 1

    out = {}
    for m in metrics:
        taus = [cells[obj][m].tau for obj in objectives if cells[obj][m].error is None]
        ps = [cells[obj][m].p_value for obj in objectives if cells[obj][m].error is None]
        if taus:
            q1, med, q3 = quartiles(taus)
        else:
            q1 = med = q3 = None
        # failed cells count as not significant: the denominator stays fixed
        out[m] = MetricAggregate(
            metric=m,
            median_tau=med,
            q1=q1,
            q3=q3,
            frac_p_lt_005=sum(p < 0.05 for p in ps) / n_objectives,
            frac_p_lt_01=sum(p < 0.1 for p in ps) / n_objectives,
            frac_significant=sum(p < alpha for p in ps) / n_objectives,
            mean_rank=(rank_sum[m] / rank_cnt[m]) if rank_cnt[m] else None,
            n_valid=len(taus),
        )
    return out


def check_correlation(aggregates: dict, thresholds: Thresholds | None = None) -> str:
    """Apply the verdict rule to each metric and pick the usable proxy.

    A metric passes when its median tau clears min_median_tau AND the share
    of objectives significant at alpha clears min_frac_significant. The
    winner is the passing metric with the best mean rank; ties break to the
    higher median tau, then the lexicographically first id. Raises
    NoUsableProxy when nothing passes (verdicts stay recorded).
    """
    thresholds = thresholds or Thresholds()
    passing = []
    for m, agg in aggregates.items():
        agg.verdict = (
            agg.median_tau is not None
            and agg.median_tau >= thresholds.min_median_tau
            and agg.frac_significant >= thresholds.min_frac_significant
        )
        if agg.verdict:
            passing.append(agg)
    if not passing:
        raise NoUsableProxy(
            "no metric clears the correlation thresholds "
            f"(median_tau >= {thresholds.min_median_tau}, "
            f"significant share >= {thresholds.min_frac_significant} at alpha {thresholds.alpha})"
        )
    ranked = sorted(
        passing,
        key=lambda a: (
            a.mean_rank if a.mean_rank is not None else float("inf"),
            -(a.median_tau if a.median_tau is not None else float("-inf")),
            a.metric,
        ),
    )
    return ranked[0].metric


# ---------------------------------------------------------------------------
# online selection


@dataclass(frozen=True)
class Strategy:
    name: str  # top1 | topn | obf | ebf | random
    n: int = 1
    reps: int = 30
    seed: int = 0

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        parts = text.split(":")
        name = parts[0]
        if name == "top1":
            if len(parts) != 1:
                raise OutOfRange(f"top1 takes no arguments, got {text!r}")
            return cls("top1", 1)
        if name in ("topn", "obf", "ebf"):
            if len(parts) != 2:
                raise OutOfRange(f"{name} needs exactly one argument, got {text!r}")
            return cls(name, _positive_int(parts[1], text))
        if name == "random":
            if len(parts) < 2 or len(parts) > 4:
                raise OutOfRange(f"random needs 1 to 3 arguments, got {text!r}")
            n = _positive_int(parts[1], text)
            reps = _positive_int(parts[2], text) if len(parts) > 2 else 30
            seed = int(parts[3]) if len(parts) > 3 else 0
            return cls("random", n, reps, seed)
        raise OutOfRange(f"unknown strategy {name!r}")


def _positive_int(text, ctx):
    try:
        value = int(text)
    except ValueError:
        raise OutOfRange(f"bad integer in strategy {ctx!r}") from None
    if value < 1:
        raise OutOfRange(f"strategy count must be >= 1 in {ctx!r}")
    return value


@dataclass
class SelectionPlan:
    mut: str
    metric: str
    strategy: Strategy
    ranking: list  # (model_id, testset_id, value, oriented_value), best first
    chosen: list  # list of testset ids, or list of lists for random
    exclude_same_type: bool

    def to_dict(self) -> dict:
        return {
            "mut": self.mut,
            "metric": self.metric,
            "strategy": self.strategy.__dict__,
            "exclude_same_type": self.exclude_same_type,
            "ranking": [
                {"model": m, "testset": t, "value": v, "oriented": o}
                for m, t, v, o in self.ranking
            ],
            "chosen": self.chosen,
        }


def online_select(
    ws: Workspace,
    mut: str,
    metric: str,
    strategy: Strategy,
    exclude_same_type: bool = True,
    metric_config: MetricConfig | None = None,
    cache: ScoreCache | None = None,
    jobs: int = 1,
) -> SelectionPlan:
    """Rank the eligible reference test sets for `mut` by one metric and
    apply the strategy. The mut's own test set is never eligible."""
    if mut not in ws.models:
        raise TooFewModels(f"unknown model {mut!r}")
    refs = eligible_references(ws, mut, exclude_same_type)
    if not refs:
        raise TooFewModels(f"no eligible reference models for {mut!r}")
    scores = pairwise_similarity(
        ws, metric, mut, refs, config=metric_config, cache=cache, jobs=jobs
    )
    ranked = sorted(
        ((s.other, ws.testset_of(s.other), s.value, oriented(s.value, metric)) for s in scores),
        key=lambda row: (-row[3], row[0]),
    )
    chosen = _apply_strategy(ws, ranked, strategy)
    return SelectionPlan(
        mut=mut,
        metric=metric,
        strategy=strategy,
        ranking=ranked,
        chosen=chosen,
        exclude_same_type=exclude_same_type,
    )


def _apply_strategy(ws, ranked, strategy: Strategy):
    n_eligible = len(ranked)
    if strategy.name == "top1":
        return [ranked[0][1]]
    if strategy.name in ("topn", "obf"):
        if strategy.n > n_eligible:
            raise TooFewModels(f"asked for {strategy.n} test sets, only {n_eligible} eligible")
        return [row[1] for row in ranked[: strategy.n]]
    if strategy.name == "ebf":
        best_by_type: dict[str, tuple] = {}
        for row in ranked:  # ranked is best-first, keep the first of each type
            mtype = ws.models[row[0]].model_type
            best_by_type.setdefault(mtype, row)
        if len(best_by_type) < strategy.n:
            raise NotEnoughTypes(
                f"asked for {strategy.n} model types, only {len(best_by_type)} present"
            )
        reps = sorted(best_by_type.values(), key=lambda row: (-row[3], row[0]))
        return [row[1] for row in reps[: strategy.n]]
    if strategy.name == "random":
        if strategy.n > n_eligible:
            raise TooFewModels(f"asked for {strategy.n} test sets, only {n_eligible} eligible")
        rng = np.random.default_rng(strategy.seed)
        testsets = [row[1] for row in ranked]
        draws = []
        for _ in range(strategy.reps):
            pick = rng.choice(n_eligible, size=strategy.n, replace=False)
            draws.append([testsets[i] for i in sorted(pick)])
        return draws
    raise OutOfRange(f"unknown strategy {strategy.name!r}")


# ---------------------------------------------------------------------------
# ranked-choice evaluation (offline ground truthing)


@dataclass
class TopKRow:
    j: int  # 0-based: j-th most similar
    model: str
    testset: str
    property_value: float
    beat_fraction: float


@dataclass
class TopKReport:
    mut: str
    metric: str
    property: str
    rows: list
    mean_beat_fraction: float
    mean_property: float

    def to_dict(self) -> dict:
        return {
            "mut": self.mut,
            "metric": self.metric,
            "property": self.property,
            "rows": [r.__dict__ for r in self.rows],
            "mean_beat_fraction": self.mean_beat_fraction,
            "mean_property": self.mean_property,
        }


def top_k_eval(
    ws: Workspace,
    mut: str,
    metric: str,
    options: OfflineOptions | None = None,
    k: int = 5,
    cache: ScoreCache | None = None,
) -> TopKReport:
    """How good were the k most similar references, property-wise?

    beat_fraction of a choice = share of the other eligible test sets whose
    property value strictly beats it (0 = the choice was the best possible).
    """
    options = options or OfflineOptions()
    refs = eligible_references(ws, mut, options.exclude_same_type)
    if len(refs) < 2:
        raise TooFewModels(f"top-k evaluation needs >= 2 eligible references for {mut!r}")
    if k > len(refs):
        raise TooFewModels(f"k={k} exceeds the {len(refs)} eligible references")
    evaluator = PropertyEvaluator(ws, mut, [ws.testset_of(r) for r in refs], options)
    prop = {r: evaluator.value(ws.testset_of(r)) for r in refs}
    scores = pairwise_similarity(ws, metric, mut, refs, config=options.metric_config, cache=cache)
    ranked = sorted(
        ((s.other, ws.testset_of(s.other), oriented(s.value, metric)) for s in scores),
        key=lambda row: (-row[2], row[0]),
    )
    rows = []
    for j in range(k):
        model, tsid, _ = ranked[j]
        value = prop[model]
        beat = sum(1 for r in refs if r != model and prop[r] > value)
        rows.append(
            TopKRow(
                j=j,
                model=model,
                testset=tsid,
                property_value=value,
                beat_fraction=beat / (len(refs) - 1),
            )
        )
    return TopKReport(
        mut=mut,
        metric=metric,
        property=options.property,
        rows=rows,
        mean_beat_fraction=float(np.mean([r.beat_fraction for r in rows])),
        mean_property=float(np.mean([r.property_value for r in rows])),
    )


# ---------------------------------------------------------------------------
# efficiency index


@dataclass(frozen=True)
class EfficiencyInput:
    coverage: float
    offline_seconds: float
    online_seconds_per_model: float
    generation_seconds: tuple  # one entry per model under test

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0:
            raise OutOfRange(f"coverage {self.coverage} outside [0, 1]")
        if self.offline_seconds <= 0 or self.online_seconds_per_model <= 0:
            raise OutOfRange("offline and online seconds must be positive")
        if not self.generation_seconds or any(g <= 0 for g in self.generation_seconds):
            raise OutOfRange("generation seconds must be a non-empty list of positives")


def efficiency_index(inp: EfficiencyInput) -> dict:
    """r = coverage / t where t compares selection cost against generating
    the test sets from scratch for the same models. r above 1 means the
    selection route beats generation per unit of coverage."""
    n_models = len(inp.generation_seconds)
    t = (inp.offline_seconds + n_models * inp.online_seconds_per_model) / sum(
        inp.generation_seconds
    )
    return {"t": t, "r": inp.coverage / t, "n_models": n_models}


# ---------------------------------------------------------------------------
# report helpers: rank heatmap and dendrogram


@dataclass
class Heatmap:
    types: list
    mean_values: np.ndarray  # (T, T), nan on the diagonal
    mean_ranks: np.ndarray  # (T, T), nan on the diagonal

    def to_csv_rows(self) -> list[list]:
        head = ["mut_type", *self.types]
        rows = [head]
        for i, t in enumerate(self.types):
            row = [t]
            for j in range(len(self.types)):
                v = self.mean_ranks[i, j]
                row.append("" if np.isnan(v) else f"{v:.3f}")
            rows.append(row)
        return rows


def rank_heatmap(ws: Workspace, scores, higher_is_better: bool) -> Heatmap:
    """Mean rank of each reference type per objective type.

    `scores` is an iterable of (objective_model, reference_model, value).
    Within one objective model the reference models are ranked (1 = best),
    ranks are averaged per (objective type, reference type) cell, and the
    diagonal stays empty: a type is never ranked against itself.
    """
    per_obj: dict[str, list] = {}
    for obj, ref, value in scores:
        per_obj.setdefault(obj, []).append((ref, value))
    types = sorted({ws.models[m].model_type for m in ws.models})
    t_index = {t: i for i, t in enumerate(types)}
    n = len(types)
    rank_acc = np.zeros((n, n))
    rank_cnt = np.zeros((n, n))
    value_acc = np.zeros((n, n))
    for obj, pairs in per_obj.items():
        obj_t = t_index[ws.models[obj].model_type]
        ranks = rank_vector([v for _, v in pairs], higher_is_better=higher_is_better)
        for (ref, value), rank in zip(pairs, ranks):
            ref_t = t_index[ws.models[ref].model_type]
            rank_acc[obj_t, ref_t] += rank
            value_acc[obj_t, ref_t] += value
            rank_cnt[obj_t, ref_t] += 1
    with np.errstate(invalid="ignore"):
        mean_ranks = np.where(rank_cnt > 0, rank_acc / np.maximum(rank_cnt, 1), np.nan)
        mean_values = np.where(rank_cnt > 0, value_acc / np.maximum(rank_cnt, 1), np.nan)
    return Heatmap(types=types, mean_values=mean_values, mean_ranks=mean_ranks)


@dataclass
class Dendrogram:
    leaves: list  # testset ids, in input order
    merges: list  # dicts: left, right, height, size (scipy node numbering)

    def to_dict(self) -> dict:
        return {"leaves": self.leaves, "merges": self.merges}


def fault_dendrogram(count_vectors: dict) -> Dendrogram:
    """Agglomerative average-linkage (euclidean) tree over per-testset fault
    cluster count vectors. Node numbering follows the usual convention:
    leaves are 0..n-1, merge i creates node n+i."""
    from scipy.cluster.hierarchy import linkage

    leaves = list(count_vectors)
    if len(leaves) < 2:
        raise TooFewSamples("a dendrogram needs at least 2 test sets")
    data = np.asarray([count_vectors[t] for t in leaves], dtype=np.float64)
    z = linkage(data, method="average", metric="euclidean")
    merges = [
        {"left": int(a), "right": int(b), "height": float(h), "size": int(s)}
        for a, b, h, s in z
    ]
    return Dendrogram(leaves=leaves, merges=merges)


# ---------------------------------------------------------------------------
# property scores for heatmaps


def property_scores(ws: Workspace, options: OfflineOptions | None = None) -> list:
    """(objective, reference, property value) triples over all objectives;
    feeds the heatmap with the transfer-property view."""
    options = options or OfflineOptions()
    out = []
    for obj in ws.reference_models():
        refs = eligible_references(ws, obj, options.exclude_same_type)
        if not refs:
            continue
        evaluator = PropertyEvaluator(ws, obj, [ws.testset_of(r) for r in refs], options)
        for r in refs:
            out.append((obj, r, evaluator.value(ws.testset_of(r))))
    return out


def similarity_scores(
    ws: Workspace,
    metric: str,
    exclude_same_type: bool = True,
    metric_config: MetricConfig | None = None,
    cache: ScoreCache | None = None,
) -> list:
    """(objective, reference, oriented similarity) triples over all
    objectives, for the metric view of the heatmap."""
    engine = PairwiseEngine(ws, metric_config, cache)
    out = []
    for obj in ws.reference_models():
        refs = eligible_references(ws, obj, exclude_same_type)
        for s in pairwise_similarity(ws, metric, obj, refs, engine=engine):
            out.append((obj, s.other, oriented(s.value, metric)))
    return out
