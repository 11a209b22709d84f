"""Evolutionary search: function sets first, then operations under a latency gate.

The objective of a candidate with validation accuracy ``acc`` and latency
``lat`` is ``0`` when ``lat >= C`` and ``alpha * acc - beta * lat / ref_ms``
otherwise.  Stage 1 evolves the (upper, lower) function-set pair by accuracy
alone; stage 2 fixes it and evolves the operation sequence by the objective,
asking for accuracy only when the latency is under the constraint.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .design_space import (
    OPS,
    Aggregate,
    Combine,
    Connect,
    FunctionSet,
    Genotype,
    Op,
    Sample,
    SpaceConfig,
    canonical_form,
    crossover,
    dgcnn_like_preset,
    mutate,
    random_genotype,
)
from .device_model import DeviceProfile, InputSpec, latency_ms

log = logging.getLogger(__name__)

LATENCY_SOURCES = ("oracle", "predictor")


# --- objective --------------------------------------------------------------


@dataclass(frozen=True)
class SearchObjective:
    alpha: float = 1.0
    beta: float = 0.1
    constraint: float = math.inf
    source: str = "oracle"
    ref_ms: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("alpha and beta must be non-negative with a positive sum")
        if not self.constraint > 0:
            raise ValueError("latency constraint must be > 0")
        if not self.ref_ms > 0:
            raise ValueError("ref_ms must be > 0")
        if self.source not in LATENCY_SOURCES:
            raise ValueError(f"latency source must be one of {LATENCY_SOURCES}")

    def to_dict(self):
        return {"alpha": self.alpha, "beta": self.beta, "constraint": _num(self.constraint),
                "source": self.source, "ref_ms": self.ref_ms}

    @classmethod
    def from_dict(cls, d) -> "SearchObjective":
        c = d.get("constraint", math.inf)
        return cls(float(d.get("alpha", 1.0)), float(d.get("beta", 0.1)),
                   math.inf if c is None else float(c), d.get("source", "oracle"), float(d.get("ref_ms", 1.0)))


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isinf(x)) else x


def f_obj(acc_val: float, lat_ms: float, o: SearchObjective) -> float:
    if lat_ms >= o.constraint:
        return 0.0
    return o.alpha * acc_val - o.beta * (lat_ms / o.ref_ms)


def f_obj_array(acc, lat, alpha, beta, constraint, ref_ms) -> np.ndarray:
    """Vectorized objective over broadcastable arrays."""
    acc, lat = np.asarray(acc, float), np.asarray(lat, float)
    val = alpha * acc - beta * (lat / ref_ms)
    return np.where(lat >= constraint, 0.0, val)


def default_ref_ms(spec: InputSpec, profile: DeviceProfile) -> float:
    """Latency of the DGCNN-like preset on ``profile`` (memory capacity ignored)."""
    from .device_model import oracle_latency

    g = dgcnn_like_preset(SpaceConfig(input_dim=spec.feature_dim))
    return oracle_latency(g, spec, profile, check_memory=False).total


# --- records ----------------------------------------------------------------


@dataclass
class ParetoRecord:
    genotype: Genotype
    acc_val: float | None
    latency_ms: float
    objective: float
    generation: int
    stage: str = "operation"

    def recompute(self, o: SearchObjective) -> float:
        if self.acc_val is None:
            return f_obj(0.0, self.latency_ms, o) if self.latency_ms >= o.constraint else math.nan
        return f_obj(self.acc_val, self.latency_ms, o)

    def to_dict(self):
        return {
            "stage": self.stage,
            "generation": self.generation,
            "acc_val": self.acc_val,
            "latency_ms": _num(self.latency_ms),
            "objective": self.objective,
            "genotype": self.genotype.to_dict(),
        }


def pareto_front(history: Iterable[ParetoRecord]) -> list[ParetoRecord]:
    """Records not dominated in (accuracy up, latency down), ordered by latency."""
    recs = [r for r in history if r.acc_val is not None and math.isfinite(r.latency_ms)]
    recs.sort(key=lambda r: (r.latency_ms, -r.acc_val))
    front = []
    best_acc = -math.inf
    for r in recs:
        # sorted by latency, so r is dominated iff an earlier record is at least as accurate
        if r.acc_val > best_acc:
            front.append(r)
            best_acc = r.acc_val
        elif r.acc_val == best_acc and front and front[-1].latency_ms == r.latency_ms:
            front.append(r)
    return front


# --- evolutionary engine ----------------------------------------------------


@dataclass(frozen=True)
class EAConfig:
    population: int = 20
    iterations: int = 1000
    parent_fraction: float = 0.25
    mutation_rate: float = 0.1
    crossover_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("parent_fraction", "mutation_rate", "crossover_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d) -> "EAConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class Scored:
    candidate: object
    fitness: float
    latency: float
    tiebreak: tuple

    def rank_key(self):
        return (-self.fitness, self.latency, self.tiebreak)


@dataclass
class EAResult:
    best: Scored
    population: list[Scored]
    evaluations: int
    best_by_generation: list[float]


def evolve(
    sample: Callable[[np.random.Generator], object],
    vary: Callable[[object, object | None, np.random.Generator], object],
    evaluate: Callable[[list[object], int], list[Scored]],
    key: Callable[[object], Hashable],
    ea: EAConfig,
    budget: int,
    rng: np.random.Generator,
    stall_limit: int = 20,
) -> EAResult:
    """(mu + lambda) EA with top-k parents; ``budget`` caps distinct evaluations.

    ``vary(a, b, rng)`` builds a child from one or two parents (``b`` is None
    for mutation only).  ``evaluate`` receives a batch of unseen candidates
    and the generation index.
    """
    if budget < 1:
        raise ValueError("evaluation budget must be >= 1")
    cache: dict[Hashable, Scored] = {}
    evals = 0

    def run(batch, gen):
        nonlocal evals
        fresh = []
        for c in batch:
            k = key(c)
            if k not in cache and k not in {key(f) for f in fresh}:
                fresh.append(c)
        fresh = fresh[: budget - evals]
        if fresh:
            for c, s in zip(fresh, evaluate(fresh, gen)):
                cache[key(c)] = s
            evals += len(fresh)
        return [cache[key(c)] for c in batch if key(c) in cache]

    init = []
    seen = set()
    for _ in range(50 * ea.population):
        if len(init) >= ea.population:
            break
        c = sample(rng)
        if key(c) not in seen:
            seen.add(key(c))
            init.append(c)
    pop = sorted(run(init, 0), key=Scored.rank_key)[: ea.population]
    history = [pop[0].fitness]
    stalled = 0
    for gen in range(1, ea.iterations + 1):
        if evals >= budget:
            break
        n_par = max(2, math.ceil(ea.parent_fraction * len(pop))) if len(pop) > 1 else 1
        parents = pop[:n_par]
        children = []
        for _ in range(ea.population):
            child = None
            for _attempt in range(10):
                a = parents[int(rng.integers(len(parents)))].candidate
                b = None
                if len(parents) > 1 and rng.random() < ea.crossover_prob:
                    b = parents[int(rng.integers(len(parents)))].candidate
                child = vary(a, b, rng)
                if key(child) not in cache:
                    break
            children.append(child)
        before = evals
        scored = run(children, gen)
        stalled = stalled + 1 if evals == before else 0
        merged = {key(s.candidate): s for s in pop + scored}
        pop = sorted(merged.values(), key=Scored.rank_key)[: ea.population]
        history.append(pop[0].fitness)
        if stalled >= stall_limit:
            log.debug("no unseen candidates for %d generations; stopping", stalled)
            break
    return EAResult(pop[0], pop, evals, history)


def _rng_for(seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *[int(p) & 0xFFFFFFFF for p in parts]])


# --- stage 1: function sets -------------------------------------------------


FunctionSetEvaluator = Callable[[FunctionSet, np.random.Generator], float]


def _fset_sampler(space: SpaceConfig):
    per_op = [space.functions(op) for op in OPS]

    def sample(rng):
        genes = [fs[int(rng.integers(len(fs)))] for _ in range(2) for fs in per_op]
        return FunctionSet.from_genes(genes)

    def vary(a, b, rng):
        genes = list(a.genes())
        if b is not None:
            cut = int(rng.integers(len(genes) + 1))
            genes = genes[:cut] + list(b.genes())[cut:]
        for i in range(len(genes)):
            if rng.random() < rate_holder[0]:
                fs = per_op[i % len(OPS)]
                genes[i] = fs[int(rng.integers(len(fs)))]
        return FunctionSet.from_genes(genes)

    rate_holder = [0.1]
    return sample, vary, rate_holder


@dataclass
class StageOneResult:
    function_set: FunctionSet
    acc_val: float
    history: list[tuple[FunctionSet, float, int]]
    evaluations: int


def function_search(space: SpaceConfig, evaluator: FunctionSetEvaluator, ea: EAConfig, budget: int) -> StageOneResult:
    """EA over (upper, lower) function-set pairs, fitness = accuracy only."""
    sample, vary, rate = _fset_sampler(space)
    rate[0] = ea.mutation_rate
    history = []

    def evaluate(batch, gen):
        out = []
        for i, fs in enumerate(batch):
            acc = float(evaluator(fs, _rng_for(ea.seed, 1, gen, i)))
            history.append((fs, acc, gen))
            out.append(Scored(fs, acc, 0.0, fs.key()))
        return out

    res = evolve(sample, vary, evaluate, lambda f: f.key(), ea, budget, _rng_for(ea.seed, 1))
    return StageOneResult(res.best.candidate, res.best.fitness, history, res.evaluations)


# --- stage 2: operations ----------------------------------------------------


class LatencySource:
    """Latency per genotype with caching; ``many`` batches where possible."""

    def __init__(self, fn: Callable[[Genotype], float], many_fn: Callable[[list[Genotype]], Sequence[float]] | None = None):
        self.fn = fn
        self.many_fn = many_fn
        self.cache: dict[Genotype, float] = {}

    def __call__(self, g: Genotype) -> float:
        return self.many([g])[0]

    def many(self, gs: Sequence[Genotype]) -> list[float]:
        todo = [g for g in dict.fromkeys(gs) if g not in self.cache]
        if todo:
            vals = self.many_fn(todo) if self.many_fn else [self.fn(g) for g in todo]
            self.cache.update(zip(todo, (float(v) for v in vals)))
        return [self.cache[g] for g in gs]


def oracle_source(spec: InputSpec, profile: DeviceProfile) -> LatencySource:
    return LatencySource(lambda g: latency_ms(g, spec, profile))


def predictor_source(model, spec: InputSpec, profile: DeviceProfile) -> LatencySource:
    from .predictor import encode

    def many(gs):
        return model.predict_graphs([encode(g, spec, profile, model.mode) for g in gs])

    return LatencySource(lambda g: many([g])[0], many)


class AccuracyCache:
    """Accuracy keyed by canonical genotype, with a call counter."""

    def __init__(self, fn: Callable[[Genotype], float]):
        self.fn = fn
        self.cache: dict[Genotype, float] = {}
        self.calls = 0
        self.evaluated: list[Genotype] = []

    def __call__(self, g: Genotype) -> float:
        k = canonical_form(g)
        if k not in self.cache:
            self.calls += 1
            self.evaluated.append(g)
            self.cache[k] = float(self.fn(g))
        return self.cache[k]


@dataclass
class SearchResult:
    best: ParetoRecord
    history: list[ParetoRecord]
    evaluations: int
    accuracy_evaluations: int
    feasible: bool
    function_set: FunctionSet | None = None
    best_by_generation: list[float] = field(default_factory=list)

    def summary(self, objective: SearchObjective) -> dict:
        return {
            "best": self.best.to_dict(),
            "function_set": self.function_set.to_dict() if self.function_set else None,
            "feasible": self.feasible,
            "evaluations": self.evaluations,
            "accuracy_evaluations": self.accuracy_evaluations,
            "objective": objective.to_dict(),
            "front": [r.to_dict() for r in pareto_front(self.history)],
            "best_by_generation": self.best_by_generation,
        }

    def history_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.history)


def _genotype_search(
    sample, vary, to_genotype, key, objective, ea, budget, latency: LatencySource, accuracy: AccuracyCache, rng, stage
) -> SearchResult:
    history: list[ParetoRecord] = []

    def evaluate(batch, gen):
        gs = [to_genotype(c) for c in batch]
        lats = latency.many(gs)
        out = []
        for c, g, lat in zip(batch, gs, lats):
            if lat >= objective.constraint:
                acc, obj = None, 0.0  # gated: never evaluated for accuracy
            else:
                acc = accuracy(g)
                obj = f_obj(acc, lat, objective)
            history.append(ParetoRecord(g, acc, lat, obj, gen, stage))
            out.append(Scored(c, obj, lat, g.sort_key()))
        return out

    res = evolve(sample, vary, evaluate, key, ea, budget, rng)
    best_g = to_genotype(res.best.candidate)
    best = next(r for r in reversed(history) if r.genotype == best_g)
    feasible = any(r.acc_val is not None for r in history)
    return SearchResult(best, history, res.evaluations, accuracy.calls, feasible,
                        best_by_generation=res.best_by_generation)


def operation_search(
    space: SpaceConfig,
    function_set: FunctionSet,
    objective: SearchObjective,
    ea: EAConfig,
    latency: LatencySource,
    accuracy: Callable[[Genotype], float] | AccuracyCache,
    budget: int,
) -> SearchResult:
    """EA over operation sequences with ``function_set`` fixed."""
    accuracy = accuracy if isinstance(accuracy, AccuracyCache) else AccuracyCache(accuracy)
    ops = space.ops
    n = space.num_positions

    def sample(rng):
        return tuple(ops[i] for i in rng.integers(len(ops), size=n))

    def vary(a, b, rng):
        child = list(a)
        if b is not None:
            cut = int(rng.integers(n + 1))
            child = child[:cut] + list(b)[cut:]
        for i in np.flatnonzero(rng.random(n) < ea.mutation_rate):
            child[i] = ops[int(rng.integers(len(ops)))]
        return tuple(child)

    res = _genotype_search(
        sample, vary, lambda o: function_set.apply(o, space), lambda o: tuple(x.value for x in o),
        objective, ea, budget, latency, accuracy, _rng_for(ea.seed, 2), "operation",
    )
    res.function_set = function_set
    return res


def one_stage_baseline(
    space: SpaceConfig,
    objective: SearchObjective,
    ea: EAConfig,
    latency: LatencySource,
    accuracy: Callable[[Genotype], float] | AccuracyCache,
    budget: int,
) -> SearchResult:
    """EA straight over per-position (operation, function) assignments."""
    accuracy = accuracy if isinstance(accuracy, AccuracyCache) else AccuracyCache(accuracy)

    def vary(a, b, rng):
        child = crossover(a, b, rng) if b is not None else a
        return mutate(child, ea.mutation_rate, rng, space)

    return _genotype_search(
        lambda rng: random_genotype(space, rng), vary, lambda g: g, lambda g: g,
        objective, ea, budget, latency, accuracy, _rng_for(ea.seed, 3), "one_stage",
    )


def run_multistage(
    space: SpaceConfig,
    objective: SearchObjective,
    stage1_evaluator: FunctionSetEvaluator,
    accuracy_for: Callable[[FunctionSet], Callable[[Genotype], float]],
    latency: LatencySource,
    ea1: EAConfig,
    ea2: EAConfig,
    budget: int,
    stage1_share: float = 0.25,
) -> SearchResult:
    """Stage 1 picks the function sets, ``accuracy_for`` prepares stage-2 accuracy
    (e.g. re-initializes and pre-trains a supernet), stage 2 picks operations.

    ``budget`` is the total number of candidate evaluations across both stages.
    """
    b1 = max(1, int(round(stage1_share * budget)))
    one = function_search(space, stage1_evaluator, ea1, min(b1, budget))
    two = operation_search(space, one.function_set, objective, ea2, latency,
                           accuracy_for(one.function_set), max(1, budget - one.evaluations))
    stage1 = [ParetoRecord(Genotype((), space.input_dim, space.num_classes), acc, math.nan, acc, gen, "function")
              for _, acc, gen in one.history]
    two.history = stage1 + two.history
    two.evaluations += one.evaluations
    return two


def history_hash(result: SearchResult) -> str:
    return hashlib.sha256(result.history_jsonl().encode()).hexdigest()


# --- surrogate accuracy -----------------------------------------------------


AGGREGATOR_GAIN = {"max": 1.0, "mean": 0.8, "sum": 0.65, "min": 0.5}
MESSAGE_GAIN = {
    "full": 1.0,
    "source_rel": 0.92,
    "target_rel": 0.85,
    "rel_pos": 0.75,
    "source_pos": 0.55,
    "distance": 0.4,
    "target_pos": 0.15,
}
SAMPLE_GAIN = {"knn": 1.0, "random": 0.4}


@dataclass(frozen=True)
class SurrogateAccuracy:
    """Deterministic stand-in for supernet accuracy with point-cloud priors.

    Neighbourhood aggregation is what lifts accuracy; its value scales with
    the aggregator, the message type and the quality of the edge list (KNN
    beats random; rebuilding KNN on learned features earns a bonus).
    Combines add capacity growing with log width, repeated layers give
    diminishing returns, and the score saturates between ``base`` and ``top``.
    """

    base: float = 0.25
    top: float = 0.95
    scale: float = 1.5
    decay: float = 0.6
    dynamic_bonus: float = 0.6
    combine_gain: float = 0.35
    skip_gain: float = 0.03

    def score(self, g: Genotype) -> float:
        edges = None
        learned = False
        n_agg = n_comb = 0
        s = 0.0
        for p in canonical_form(g).positions:
            f = p.func
            if isinstance(f, Sample):
                edges = SAMPLE_GAIN[f.mode] * (1.0 + (self.dynamic_bonus if learned and f.mode == "knn" else 0.0))
                edges *= min(1.0, f.k / 16.0) ** 0.25
            elif isinstance(f, Aggregate):
                if edges is None:
                    edges = SAMPLE_GAIN["knn"]  # implicit KNN on the raw input
                s += AGGREGATOR_GAIN[f.aggregator] * MESSAGE_GAIN[f.message] * edges * self.decay**n_agg
                n_agg += 1
                learned = True
            elif isinstance(f, Combine):
                s += self.combine_gain * math.log2(f.width) / 8.0 * self.decay**n_comb
                n_comb += 1
                learned = True
            elif isinstance(f, Connect) and f.mode == "skip" and learned:
                s += self.skip_gain
        return s

    def __call__(self, g: Genotype) -> float:
        return self.base + (self.top - self.base) * (1.0 - math.exp(-self.score(g) / self.scale))


def surrogate_stage1(space: SpaceConfig, surrogate: SurrogateAccuracy, paths: int = 16, seed: int = 0) -> FunctionSetEvaluator:
    """Function-set fitness: mean surrogate accuracy over random operation paths,
    the analogue of evaluating sampled sub-networks of a briefly trained supernet.

    Every candidate is scored on the same ``paths`` operation sequences
    (common random numbers), so comparisons between sets are not swamped by
    path-sampling noise.
    """
    rng = np.random.default_rng(seed)
    seqs = [[space.ops[i] for i in rng.integers(len(space.ops), size=space.num_positions)] for _ in range(paths)]

    def evaluate(fs: FunctionSet, _rng: np.random.Generator) -> float:
        return float(np.mean([surrogate(fs.apply(ops, space)) for ops in seqs]))

    return evaluate


# --- supernet accuracy ------------------------------------------------------


def _op_paths(space: SpaceConfig, paths: int, seed: int) -> list[list[Op]]:
    rng = np.random.default_rng(seed)
    return [[space.ops[i] for i in rng.integers(len(space.ops), size=space.num_positions)] for _ in range(paths)]


def supernet_stage1(space: SpaceConfig, data, epochs: int, hidden: int = 32, paths: int = 8, seed: int = 0,
                    lr: float = 0.01) -> FunctionSetEvaluator:
    """Function-set fitness from a briefly trained supernet with that set fixed:
    mean validation accuracy over common random operation paths."""
    from .supernet import Supernet, eval_genotype, path_sampler, train_supernet

    seqs = _op_paths(space, paths, seed)

    def evaluate(fs: FunctionSet, _rng: np.random.Generator) -> float:
        net = Supernet(space, hidden, seed)
        train_supernet(net, data, epochs, seed, lr=lr, sampler=path_sampler(space, fs))
        return float(np.mean([eval_genotype(net, fs.apply(ops, space), data, seed, train=False).acc_val
                              for ops in seqs]))

    return evaluate


class SupernetAccuracy:
    """Re-initialize and pre-train a supernet with ``fs`` fixed, then score
    genotypes by inherited-weight validation accuracy."""

    def __init__(self, space: SpaceConfig, data, epochs: int, hidden: int = 32, seed: int = 0, lr: float = 0.01):
        self.space, self.data, self.epochs = space, data, epochs
        self.hidden, self.seed, self.lr = hidden, seed, lr
        self.net = None

    def __call__(self, fs: FunctionSet) -> Callable[[Genotype], float]:
        from .supernet import Supernet, eval_genotype, path_sampler, train_supernet

        self.net = Supernet(self.space, self.hidden, self.seed)
        train_supernet(self.net, self.data, self.epochs, self.seed, lr=self.lr, sampler=path_sampler(self.space, fs))
        net = self.net
        return lambda g: eval_genotype(net, g, self.data, self.seed, train=False).acc_val
