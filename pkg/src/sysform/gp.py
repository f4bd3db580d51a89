"""Genetic-programming search over candidate expressions.

Fitness of a raw candidate is the mean per-system fit residual (L1) of its
dimensionalized template.  Candidates are deduplicated by the canonical
string of the simplified template, and each unique template is fitted once;
the cache doubles as the leaderboard.  Evaluation can fan out over worker
processes, with per-candidate random streams derived from
``(seed, candidate_id)`` so results do not depend on scheduling.
"""
from __future__ import annotations

import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .expr import (
    DEFAULT_PRIMITIVES,
    Expression,
    canonical_string,
    full_expression,
    node_count,
    preorder,
    prune_to_depth,
    random_expression,
    replace_at,
    subtree_at,
)
from .fit import DEFAULT_OPTIONS, FitOptions, FitResult, fit_all
from .lmetric import L2Report
from .transform import Template, dimensionalize

__all__ = ["GpConfig", "CandidateRecord", "crossover", "mutate", "evolve", "candidate_rng"]


@dataclass(frozen=True)
class GpConfig:
    seed: int
    population_size: int = 200
    generations: int = 30
    crossover_prob: float = 0.7
    mutation_prob: float = 0.2
    tournament_size: int = 5
    max_depth: int = 6
    elite_count: int = 1
    primitives: tuple[str, ...] = DEFAULT_PRIMITIVES
    n_jobs: int = 1

    def __post_init__(self):
        if not 0.0 <= self.crossover_prob <= 1.0 or not 0.0 <= self.mutation_prob <= 1.0:
            raise ValueError("probabilities must be in [0, 1]")
        if self.crossover_prob + self.mutation_prob > 1.0:
            raise ValueError("crossover_prob + mutation_prob must be <= 1")
        if self.population_size < self.tournament_size:
            raise ValueError("population_size must be >= tournament_size")
        if self.elite_count < 1:
            raise ValueError("elite_count must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


@dataclass(frozen=True)
class CandidateRecord:
    """One leaderboard row: raw candidate, its template and fit statistics."""

    expression: Expression
    template: Template
    fit_result: FitResult
    l2: float | None = None
    total_l: float | None = None
    l2_report: L2Report | None = None

    @property
    def mean_l1(self) -> float:
        return self.fit_result.mean_l1

    @property
    def key(self) -> str:
        return canonical_string(self.template.expression)

    def rescored(self, report: L2Report) -> "CandidateRecord":
        return replace(
            self,
            l2=report.l2_total,
            total_l=self.fit_result.mean_l1 + report.l2_total,
            l2_report=report,
        )


def sort_key(record: CandidateRecord):
    """Leaderboard ordering: metric, then smaller T, then canonical string."""
    metric = record.total_l if record.total_l is not None else record.mean_l1
    return (metric, record.template.param_count, record.key)


# ---------------------------------------------------------------------------
# genetic operators


def crossover_at(a: Expression, b: Expression, i: int, j: int):
    """Swap the preorder-``i`` subtree of ``a`` with the preorder-``j`` of ``b``."""
    sa = subtree_at(a, i)
    sb = subtree_at(b, j)
    return replace_at(a, i, sb), replace_at(b, j, sa)


def crossover(a: Expression, b: Expression, rng, max_depth: int = 6):
    """Swap uniformly chosen subtrees; children exceeding ``max_depth`` are
    truncated by replacing offending deep subtrees with leaves."""
    i = int(rng.integers(node_count(a)))
    j = int(rng.integers(node_count(b)))
    c1, c2 = crossover_at(a, b, i, j)
    return prune_to_depth(c1, max_depth, rng), prune_to_depth(c2, max_depth, rng)


def mutate(a: Expression, rng, primitives=DEFAULT_PRIMITIVES, max_depth: int = 6) -> Expression:
    """Replace a uniformly chosen subtree with a random one that fits the
    remaining depth budget."""
    nodes = preorder(a)
    i = int(rng.integers(len(nodes)))
    budget = max(1, max_depth - nodes[i][1] + 1)
    return replace_at(a, i, random_expression(primitives, budget, rng))


def _initial_population(config: GpConfig, rng) -> list[Expression]:
    """Ramped half-and-half over depths 2..max_depth, deduplicated by raw
    canonical string where possible."""
    depths = list(range(2, config.max_depth + 1)) or [1]
    seen: set[str] = set()
    pop: list[Expression] = []
    k = 0
    while len(pop) < config.population_size:
        d = depths[k % len(depths)]
        grow = k % 2 == 0
        k += 1
        expr = None
        for _ in range(10):
            cand = (random_expression(config.primitives, d, rng) if grow
                    else full_expression(config.primitives, d, rng))
            key = canonical_string(cand)
            if key not in seen:
                seen.add(key)
                expr = cand
                break
            expr = cand
        pop.append(expr)
    return pop


# ---------------------------------------------------------------------------
# candidate evaluation (serial or process pool)


def candidate_rng(seed: int, candidate_id: int) -> np.random.Generator:
    """The random stream owned by one candidate evaluation."""
    return np.random.default_rng(np.random.SeedSequence((seed, candidate_id)))


_WORKER: dict = {}


def _worker_init(datasets, options, seed):
    _WORKER["datasets"] = datasets
    _WORKER["options"] = options
    _WORKER["seed"] = seed


def _worker_eval(task):
    candidate_id, template = task
    rng = candidate_rng(_WORKER["seed"], candidate_id)
    return fit_all(template, _WORKER["datasets"], rng, _WORKER["options"])


class _Evaluator:
    def __init__(self, datasets, options: FitOptions, seed: int, n_jobs: int):
        self.datasets = list(datasets)
        self.options = options
        self.seed = seed
        jobs = n_jobs if n_jobs and n_jobs > 0 else (multiprocessing.cpu_count() or 1)
        self.pool = None
        if jobs > 1:
            self.pool = ProcessPoolExecutor(
                max_workers=jobs,
                initializer=_worker_init,
                initargs=(self.datasets, self.options, self.seed),
            )

    def evaluate(self, tasks: list[tuple[int, Template]]) -> list[FitResult]:
        if not tasks:
            return []
        if self.pool is None:
            out = []
            for candidate_id, template in tasks:
                rng = candidate_rng(self.seed, candidate_id)
                out.append(fit_all(template, self.datasets, rng, self.options))
            return out
        return list(self.pool.map(_worker_eval, tasks, chunksize=1))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


# ---------------------------------------------------------------------------
# evolution loop


def evolve(
    datasets,
    config: GpConfig,
    rng: np.random.Generator | None = None,
    fit_options: FitOptions = DEFAULT_OPTIONS,
    progress=None,
) -> list[CandidateRecord]:
    """Run the search and return every evaluated unique candidate, sorted by
    mean L1 ascending (ties: smaller T, then canonical string).

    ``progress``, when given, is called once per generation with
    ``(generation, best_mean_l1, candidates_evaluated)``.  Two runs with the
    same config and datasets produce identical leaderboards.
    """
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one dataset")
    if rng is None:
        rng = np.random.default_rng(config.seed)

    cache: dict[str, CandidateRecord] = {}
    next_id = 0
    evaluator = _Evaluator(datasets, fit_options, config.seed, config.n_jobs)
    try:
        population = _initial_population(config, rng)
        for generation in range(config.generations + 1):
            keys = []
            pending: dict[str, tuple[int, Expression, Template]] = {}
            for expr in population:
                template = dimensionalize(expr)
                key = canonical_string(template.expression)
                keys.append(key)
                if key not in cache and key not in pending:
                    pending[key] = (next_id, expr, template)
                    next_id += 1
            tasks = sorted(pending.values(), key=lambda p: p[0])
            results = evaluator.evaluate([(cid, tpl) for cid, _, tpl in tasks])
            for (cid, expr, template), fit_result in zip(tasks, results):
                key = canonical_string(template.expression)
                cache[key] = CandidateRecord(expr, template, fit_result)

            fitness = [cache[k].mean_l1 for k in keys]
            best = min(fitness)
            if progress is not None:
                progress(generation, best, len(cache))
            if generation == config.generations:
                break

            ranked = sorted(
                range(len(population)),
                key=lambda i: (fitness[i], cache[keys[i]].template.param_count, keys[i], i),
            )
            children = [population[i] for i in ranked[: config.elite_count]]

            def pick() -> Expression:
                contenders = rng.integers(0, len(population), size=config.tournament_size)
                winner = min(contenders, key=lambda i: (fitness[i], int(i)))
                return population[winner]

            while len(children) < config.population_size:
                u = rng.random()
                if u < config.crossover_prob:
                    c1, c2 = crossover(pick(), pick(), rng, config.max_depth)
                    children.append(c1)
                    if len(children) < config.population_size:
                        children.append(c2)
                elif u < config.crossover_prob + config.mutation_prob:
                    children.append(mutate(pick(), rng, config.primitives, config.max_depth))
                else:
                    children.append(pick())
            population = children
    finally:
        evaluator.close()

    return sorted(cache.values(), key=sort_key)
