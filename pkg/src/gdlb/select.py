"""Choosing which layers keep softmax attention in a hybrid student.

Every strategy works on sets of layer indices and talks to a scorer: a
callable mapping a ``frozenset`` layout to a :class:`SelectionScore` (or
a plain float).  :class:`LayoutScorer` is the standard one; it splices
teacher blocks into a fully linear student and measures perplexity on three
suites without any retraining.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .data import DatasetRecord
from .evaluate import eval_perplexity
from .model import HybridLayout, Model, splice

STRATEGIES = ("beam_add", "beam_replace", "greedy", "uniform", "greedy_aggregate")

# Layouts reported for the 28-layer reference model; kept as documentation
# fixtures, never recomputed.
REFERENCE_LAYOUTS = {
    "beam_add_k7": (0, 2, 6, 11, 13, 18, 21),
    "uniform_k9": (0, 3, 6, 9, 12, 15, 18, 21, 24),
    # published "uniform" rows that a floor(i*n/k) rule does not reproduce
    "uniform_k5": (0, 6, 11, 16, 21),
    "uniform_k7": (0, 5, 9, 13, 17, 21, 25),
}


@dataclass(frozen=True)
class SelectionScore:
    ar_ppl: float
    domain_a_ppl: float
    domain_b_ppl: float

    @property
    def aggregate(self) -> float:
        return (self.ar_ppl + self.domain_a_ppl + self.domain_b_ppl) / 3.0

    def to_dict(self) -> dict:
        return {**asdict(self), "aggregate": self.aggregate}


def aggregate_of(score) -> float:
    return float(score.aggregate if hasattr(score, "aggregate") else score)


@dataclass
class SelectionSuite:
    ar: Sequence[DatasetRecord]
    domain_a: Sequence[DatasetRecord]
    domain_b: Sequence[DatasetRecord]


class LayoutScorer:
    """Perplexity of ``splice(teacher, linear_student, layout)`` on the AR
    answers and the two Markov domains, memoized per layout set."""

    def __init__(self, teacher: Model, linear_student: Model, suite: SelectionSuite, seq_len: int | None = None,
                 batch: int = 16):
        if teacher is None or linear_student is None:
            raise ValueError("layout scoring needs both the teacher and the fully linear student")
        if linear_student.cfg.attention_indices():
            raise ValueError("linear_student must not contain attention layers")
        self.teacher, self.linear, self.suite = teacher, linear_student, suite
        self.seq_len, self.batch = seq_len, batch
        self.n_layers = teacher.cfg.n_layers
        self.cache: dict[frozenset, SelectionScore] = {}
        self.calls = 0

    def model_for(self, layout) -> Model:
        return splice(self.teacher, self.linear, HybridLayout.of(sorted(layout), self.n_layers))

    def __call__(self, layout) -> SelectionScore:
        key = frozenset(int(i) for i in layout)
        if key not in self.cache:
            self.calls += 1
            m = self.model_for(key)
            ppl = lambda recs, scope: eval_perplexity(m, recs, scope, self.seq_len, self.batch)  # noqa: E731
            self.cache[key] = SelectionScore(ppl(self.suite.ar, "answer_tokens"),
                                             ppl(self.suite.domain_a, "all_tokens"),
                                             ppl(self.suite.domain_b, "all_tokens"))
        return self.cache[key]


def score_layout(layout, teacher: Model, linear_student: Model, suite: SelectionSuite, **kw) -> SelectionScore:
    return LayoutScorer(teacher, linear_student, suite, **kw)(layout)


@dataclass
class BeamState:
    beam: list[tuple[tuple[int, ...], float]]
    width: int
    step: int


@dataclass
class SelectionResult:
    layout: HybridLayout
    score: float
    trace: list[dict] = field(default_factory=list)

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for row in self.trace:
                f.write(json.dumps(row, sort_keys=True) + "\n")


def _check(n_layers: int, k: int, width: int = 1) -> None:
    if not 0 <= k <= n_layers:
        raise ValueError(f"budget k={k} outside [0, {n_layers}]")
    if width < 1:
        raise ValueError("beam width must be >= 1")


def _beam(scorer: Callable, n_layers: int, start: frozenset, rounds: int, width: int, add: bool,
          trace: list) -> tuple[frozenset, float, list[BeamState]]:
    beam = [(start, aggregate_of(scorer(start)))]
    states = []
    for r in range(rounds):
        # layout -> (score, moved index); the same layout reached from two
        # parents keeps the lowest moved index
        cands: dict[frozenset, tuple[float, int]] = {}
        for layout, _ in beam:
            pool = range(n_layers) if add else sorted(layout)
            for i in pool:
                if add and i in layout:
                    continue
                new = layout | {i} if add else layout - {i}
                if new in cands:
                    cands[new] = (cands[new][0], min(cands[new][1], i))
                    continue
                cands[new] = (aggregate_of(scorer(new)), i)
        ranked = sorted(cands.items(), key=lambda kv: (kv[1][0], kv[1][1], tuple(sorted(kv[0]))))
        for rank, (lay, (s, i)) in enumerate(ranked):
            trace.append({"round": r, "layout": sorted(lay), "moved": i, "aggregate": s, "kept": rank < width})
        beam = [(lay, s) for lay, (s, _) in ranked[:width]]
        states.append(BeamState([(tuple(sorted(lay)), s) for lay, s in beam], width, r))
    best, score = beam[0]
    return best, score, states


def beam_search_add(scorer: Callable, n_layers: int, k: int, width: int) -> SelectionResult:
    """Start from no attention; each round add one layer to every beam
    member, keep the ``width`` best.  Ties: lower score, then lowest added
    index, then lexicographic layout."""
    _check(n_layers, k, width)
    trace: list[dict] = []
    best, score, _ = _beam(scorer, n_layers, frozenset(), k, width, True, trace)
    return SelectionResult(HybridLayout.of(sorted(best), n_layers), score, trace)


def beam_search_replace(scorer: Callable, n_layers: int, k: int, width: int) -> SelectionResult:
    """Start from all attention; each round turn one more layer linear."""
    _check(n_layers, k, width)
    trace: list[dict] = []
    best, score, _ = _beam(scorer, n_layers, frozenset(range(n_layers)), n_layers - k, width, False, trace)
    return SelectionResult(HybridLayout.of(sorted(best), n_layers), score, trace)


def greedy_select(scorer: Callable, n_layers: int, k: int) -> SelectionResult:
    """Score each single-layer layout once and keep the ``k`` best."""
    _check(n_layers, k)
    singles = [(aggregate_of(scorer(frozenset({i}))), i) for i in range(n_layers)]
    singles.sort()
    trace = [{"round": 0, "layout": [i], "moved": i, "aggregate": s, "kept": r < k} for r, (s, i) in enumerate(singles)]
    chosen = frozenset(i for _, i in singles[:k])
    return SelectionResult(HybridLayout.of(sorted(chosen), n_layers), aggregate_of(scorer(chosen)), trace)


def uniform_select(n_layers: int, k: int) -> HybridLayout:
    """Indices ``floor(i * n / k)`` for ``i < k``."""
    _check(n_layers, k)
    return HybridLayout.of([i * n_layers // k for i in range(k)], n_layers)


def exhaustive_best(scorer: Callable, n_layers: int, k: int) -> tuple[frozenset, float]:
    """Minimum over all size-``k`` subsets (lexicographic tie-break)."""
    from itertools import combinations
    best = min(combinations(range(n_layers), k), key=lambda c: (aggregate_of(scorer(frozenset(c))), c))
    return frozenset(best), aggregate_of(scorer(frozenset(best)))


def greedy_aggregate(teacher: Model, linear_student: Model, k: int, micro_budget: int,
                     train: Sequence[DatasetRecord], heldout: Sequence[DatasetRecord], total_budget: int | None = None,
                     seq_len: int = 64, batch_size: int = 8, max_lr: float = 1e-3, heldout_batches: int = 4,
                     seed: int = 0) -> SelectionResult:
    """Greedy addition where every candidate is briefly distilled (attention
    frozen, ``micro_budget`` tokens) before scoring held-out KL to the
    teacher.  When ``total_budget`` runs out the best layout so far is
    returned with a warning."""
    from .distill import StageConfig, fixed_batches, heldout_kl, run_stage
    n = teacher.cfg.n_layers
    _check(n, k)
    held = fixed_batches(heldout, seq_len, batch_size, "full", heldout_batches)
    spent = 0
    chosen: frozenset = frozenset()
    best_kl = float("nan")
    trace: list[dict] = []
    for r in range(k):
        results = []
        for i in range(n):
            if i in chosen:
                continue
            if total_budget is not None and spent + micro_budget > total_budget:
                warnings.warn(f"greedy_aggregate: token budget exhausted after {r} of {k} rounds")
                return SelectionResult(HybridLayout.of(sorted(chosen), n), best_kl, trace)
            cand = chosen | {i}
            m = splice(teacher, linear_student, HybridLayout.of(sorted(cand), n)).clone()
            if micro_budget > 0:
                cfg = StageConfig("s3a", micro_budget, max_lr, seq_len=seq_len, batch_size=batch_size,
                                  eval_every=10**9, heldout_batches=0, seed=seed)
                run_stage(teacher, m, cfg, train, [])
                spent += cfg.steps() * seq_len * batch_size
            kl = heldout_kl(teacher, m, held)
            results.append((kl, i))
            trace.append({"round": r, "layout": sorted(cand), "moved": i, "aggregate": kl})
        kl, i = min(results)
        chosen, best_kl = chosen | {i}, kl
    return SelectionResult(HybridLayout.of(sorted(chosen), n), best_kl, trace)


def select_layers(strategy: str, k: int, scorer: Callable | None = None, n_layers: int | None = None,
                  width: int | str = 1, **kw) -> SelectionResult:
    """Dispatch by name; ``width='all'`` means unbounded beam."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; valid: {STRATEGIES}")
    n = n_layers if n_layers is not None else scorer.n_layers
    if width == "all":
        width = 10**9
    if strategy == "beam_add":
        return beam_search_add(scorer, n, k, int(width))
    if strategy == "beam_replace":
        return beam_search_replace(scorer, n, k, int(width))
    if strategy == "greedy":
        return greedy_select(scorer, n, k)
    if strategy == "uniform":
        lay = uniform_select(n, k)
        return SelectionResult(lay, aggregate_of(scorer(frozenset(lay.attention_indices))) if scorer else float("nan"))
    return greedy_aggregate(k=k, **kw)

