"""Log-likelihood ranking, generation accuracy, perplexity and the
teacher-student gap report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import (AR_VALUES, DIGITS, DOMAIN_A, DOMAIN_B, EOS, SEP, DatasetRecord, pack_sequences)
from .model import Greedy, Model, Sample, generate
from .rng import substream

PARSERS = ("first_answer_span", "exact_match")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def _forward_np(model: Model, tokens: np.ndarray, seg=None) -> np.ndarray:
    with T.no_grad():
        return model.forward(tokens, seg).data


# ---------------------------------------------------------------------------
# Multiple choice by log-likelihood
# ---------------------------------------------------------------------------

def candidate_scores(model: Model, rec: DatasetRecord, length_norm: bool = False) -> np.ndarray:
    """Sum (or per-token mean) of candidate log-probs given the prompt."""
    if rec.candidates is None:
        raise ValueError("record has no candidates")
    prompt = rec.prompt.tolist()
    cands = rec.candidates
    width = len(prompt) + max(len(c) for c in cands)
    toks = np.zeros((len(cands), width), dtype=np.int64)
    for j, c in enumerate(cands):
        toks[j, : len(prompt) + len(c)] = prompt + list(c)
    lp = _log_softmax(_forward_np(model, toks))
    out = np.empty(len(cands))
    P = len(prompt)
    for j, c in enumerate(cands):
        pos = np.arange(P - 1, P - 1 + len(c))
        s = float(lp[j, pos, np.asarray(c)].sum())
        out[j] = s / len(c) if length_norm else s
    return out


def mcq_correct(scores: np.ndarray, gold: int) -> bool:
    """Correct only when the gold candidate is the unique maximum."""
    best = scores.max()
    return bool(scores[gold] == best and np.sum(scores == best) == 1)


def eval_mcq_loglik(model: Model, tasks: Sequence[DatasetRecord], length_norm: bool = False) -> float:
    """Fraction of tasks whose gold candidate scores strictly highest; ties
    count as incorrect."""
    if not tasks:
        raise ValueError("no tasks")
    hits = [mcq_correct(candidate_scores(model, r, length_norm), r.gold) for r in tasks]
    return float(np.mean(hits))


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def reference_answer(rec: DatasetRecord) -> list[int]:
    if "answer" in rec.meta:
        return [int(t) for t in rec.meta["answer"]]
    c = rec.completion.tolist()
    return c[:-1] if c and c[-1] == EOS else c


def parse_answer(prompt: Sequence[int], generated: Sequence[int], parser: str, ref_len: int) -> list[int] | None:
    """Extract the answer from ``prompt + generated``; ``None`` marks a parser
    failure.  ``first_answer_span`` reads from the first SEP at or after the
    end of the prompt up to the next EOS."""
    gen = [int(t) for t in generated]
    if parser == "exact_match":
        return gen[:ref_len]
    if parser != "first_answer_span":
        raise ValueError(f"unknown parser {parser!r}; valid: {PARSERS}")
    seq = [int(t) for t in prompt] + gen
    start = None
    for i in range(max(len(prompt) - 1, 0), len(seq)):
        if seq[i] == SEP:
            start = i
            break
    if start is None:
        return None
    try:
        end = seq.index(EOS, start + 1)
    except ValueError:
        return None
    return seq[start + 1 : end]


@dataclass
class GenResult:
    accuracy: float
    per_seed: list[float]
    parser_failures: int
    n: int


def _generate_all(model: Model, tasks: Sequence[DatasetRecord], max_new: int, decode, batch: int) -> list[list[int]]:
    outs: list[list[int] | None] = [None] * len(tasks)
    by_len: dict[int, list[int]] = {}
    for i, r in enumerate(tasks):
        by_len.setdefault(len(r.prompt), []).append(i)
    for L, idx in sorted(by_len.items()):
        for s in range(0, len(idx), batch):
            chunk = idx[s : s + batch]
            prompts = np.stack([tasks[i].prompt for i in chunk])
            # each chunk gets its own stream so results do not depend on batching order
            d = replace(decode, seed=int(substream(decode.seed, "gen", L, s).integers(2**31))) \
                if isinstance(decode, Sample) else decode
            gen = generate(model, prompts, max_new, d, eos=EOS)
            for i, row in zip(chunk, gen):
                outs[i] = row.tolist()
    return outs  # type: ignore[return-value]


def eval_generation(model: Model, tasks: Sequence[DatasetRecord], decode=Greedy(), seeds: Sequence[int] = (1, 2, 3),
                    parser: str = "first_answer_span", max_new: int | None = None, batch: int = 64) -> GenResult:
    """Exact-match accuracy of parsed generations, averaged over ``seeds``
    (greedy decoding is evaluated once)."""
    if not tasks:
        raise ValueError("no tasks")
    refs = [reference_answer(r) for r in tasks]
    if any(not a for a in refs):
        raise ValueError("every generation task needs a non-empty reference answer")
    max_new = max_new or max(len(a) for a in refs) + 1
    runs = [decode] if isinstance(decode, Greedy) else [replace(decode, seed=int(s)) for s in seeds]
    accs, failures = [], 0
    for d in runs:
        outs = _generate_all(model, tasks, max_new, d, batch)
        hits = 0
        for r, ref, out in zip(tasks, refs, outs):
            ans = parse_answer(r.prompt.tolist(), out, parser, len(ref))
            if ans is None:
                failures += 1
            elif ans == ref:
                hits += 1
        accs.append(hits / len(tasks))
    if isinstance(decode, Greedy):
        accs = accs * len(seeds)
        failures *= len(seeds)
    return GenResult(float(np.mean(accs)), accs, failures, len(tasks))


# ---------------------------------------------------------------------------
# Perplexity
# ---------------------------------------------------------------------------

def answer_mask(tokens: np.ndarray, loss_mask: np.ndarray) -> np.ndarray:
    """Completion positions without the closing EOS."""
    return loss_mask & (tokens != EOS)


def nll_sum(model: Model, records: Sequence[DatasetRecord], scope: str = "all_tokens", seq_len: int | None = None,
            batch: int = 16) -> tuple[float, int]:
    """Total next-token NLL (nats) and token count over the scoped targets."""
    if scope not in ("all_tokens", "answer_tokens"):
        raise ValueError("scope must be 'all_tokens' or 'answer_tokens'")
    seq_len = seq_len or max(len(r) for r in records)
    mode = "full" if scope == "all_tokens" else "completion_only"
    total, count = 0.0, 0
    for b in pack_sequences(records, seq_len, mode, batch):
        m = b.loss_mask if scope == "all_tokens" else answer_mask(b.tokens, b.loss_mask)
        tm = m[:, 1:] & (b.seg[:, 1:] == b.seg[:, :-1])
        if not tm.any():
            continue
        lp = _log_softmax(_forward_np(model, b.tokens, b.seg)[:, :-1])
        tgt = b.tokens[:, 1:]
        picked = np.take_along_axis(lp, tgt[..., None], -1)[..., 0]
        total -= float(picked[tm].sum())
        count += int(tm.sum())
    return total, count


def eval_perplexity(model: Model, corpus: Sequence[DatasetRecord], scope: str = "all_tokens",
                    seq_len: int | None = None, batch: int = 16) -> float:
    """``exp`` of the mean NLL over the scoped target tokens."""
    if not corpus:
        raise ValueError("empty corpus")
    total, count = nll_sum(model, corpus, scope, seq_len, batch)
    if count == 0:
        raise ValueError(f"no target tokens in scope {scope!r}")
    return float(np.exp(total / count))


# ---------------------------------------------------------------------------
# Candidates for families without a natural multiple-choice form
# ---------------------------------------------------------------------------

def distractor_pool(rec: DatasetRecord) -> tuple[int, int]:
    task, kind = rec.meta.get("task"), rec.meta.get("kind", "")
    if task == "ar" or kind == "prose_uuid":
        return AR_VALUES
    if task == "niah":
        return DIGITS
    return (DOMAIN_A[0], DOMAIN_B[1])


def with_candidates(recs: Sequence[DatasetRecord], n_candidates: int, seed: int) -> list[DatasetRecord]:
    """Gold answer plus distractors that differ from it in one position;
    every candidate ends with EOS so ranking also prices the stop."""
    rng = substream(seed, "candidates")
    out = []
    for r in recs:
        gold = reference_answer(r)
        lo, hi = distractor_pool(r)
        cands = [gold + [EOS]]
        seen = {tuple(cands[0])}
        while len(cands) < n_candidates:
            c = list(gold)
            j = int(rng.integers(len(c)))
            c[j] = int(rng.integers(lo, hi))
            c = c + [EOS]
            if tuple(c) not in seen:
                seen.add(tuple(c))
                cands.append(c)
        order = rng.permutation(n_candidates)
        shuffled = [cands[i] for i in order]
        gold_idx = int(np.flatnonzero(order == 0)[0])
        out.append(DatasetRecord(r.tokens, r.bounds, r.spans, dict(r.meta), shuffled, gold_idx))
    return out


# ---------------------------------------------------------------------------
# Gap report
# ---------------------------------------------------------------------------

@dataclass
class FamilyResult:
    loglik: dict[str, float]
    generation: dict[str, float]
    parser_failures: dict[str, int] = field(default_factory=dict)

    @property
    def loglik_gap(self) -> float:
        return self.loglik["teacher"] - self.loglik["student"]

    @property
    def generation_gap(self) -> float:
        return self.generation["teacher"] - self.generation["student"]


@dataclass
class EvalReport:
    families: dict[str, FamilyResult]
    meta: dict = field(default_factory=dict)

    def gaps(self) -> dict[str, dict[str, float]]:
        return {f: {"loglik": r.loglik_gap, "generation": r.generation_gap,
                    "gap_of_gaps": r.generation_gap - r.loglik_gap} for f, r in self.families.items()}

    def summary(self) -> dict[str, float]:
        g = self.gaps().values()
        ll = float(np.mean([x["loglik"] for x in g])) if self.families else 0.0
        gen = float(np.mean([x["generation"] for x in g])) if self.families else 0.0
        return {"mean_loglik_gap": ll, "mean_generation_gap": gen, "gap_of_gaps": gen - ll}

    def to_dict(self) -> dict:
        return {"families": {k: asdict(v) for k, v in self.families.items()}, "meta": self.meta,
                "gaps": self.gaps(), "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        fam = {k: FamilyResult(v["loglik"], v["generation"], v.get("parser_failures", {}))
               for k, v in d["families"].items()}
        return cls(fam, d.get("meta", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def table(self) -> str:
        head = f"{'family':<14}{'LL-T':>8}{'LL-S':>8}{'LL gap':>9}{'Gen-T':>8}{'Gen-S':>8}{'Gen gap':>9}"
        lines = [head, "-" * len(head)]
        for f, r in self.families.items():
            lines.append(f"{f:<14}{r.loglik['teacher']:>8.3f}{r.loglik['student']:>8.3f}{r.loglik_gap:>+9.3f}"
                         f"{r.generation['teacher']:>8.3f}{r.generation['student']:>8.3f}{r.generation_gap:>+9.3f}")
        s = self.summary()
        lines.append("-" * len(head))
        lines.append(f"mean gap: loglik {s['mean_loglik_gap']:+.3f}, generation {s['mean_generation_gap']:+.3f}, "
                     f"difference {s['gap_of_gaps']:+.3f}")
        return "\n".join(lines)


def gap_report(teacher: Model, student: Model, suite: dict[str, Sequence[DatasetRecord]], decode=Greedy(),
               seeds: Sequence[int] = (1, 2, 3), n_candidates: int = 4, seed: int = 0,
               length_norm: bool = False) -> EvalReport:
    """Both protocols, both models, every family.  Families whose records lack
    candidates get one-position distractors for the log-likelihood protocol."""
    fams = {}
    for name, recs in suite.items():
        mcq = recs if all(r.candidates is not None for r in recs) else with_candidates(recs, n_candidates, seed)
        ll, gen, fails = {}, {}, {}
        for who, m in (("teacher", teacher), ("student", student)):
            ll[who] = eval_mcq_loglik(m, mcq, length_norm)
            res = eval_generation(m, recs, decode, seeds)
            gen[who] = res.accuracy
            fails[who] = res.parser_failures
        fams[name] = FamilyResult(ll, gen, fails)
    return EvalReport(fams, {"n_candidates": n_candidates, "length_norm": length_norm,
                             "decode": type(decode).__name__, "seeds": list(seeds)})
