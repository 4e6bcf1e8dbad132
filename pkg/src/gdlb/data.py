"""Synthetic corpora, benchmark records, packing and dataset files.

Vocabulary layout (512 ids at desk scale)::

    0..3      PAD, BOS, EOS, SEP
    4..15     task / marker tokens
    16..207   Markov domain A words
    208..399  Markov domain B words
    400..463  associative-recall keys
    464..511  associative-recall values (first ten double as digits)

Every record uses the chat frame ``BOS prompt SEP completion EOS`` when it
has a completion; pretraining documents are ``BOS words EOS``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .rng import stable_hash, substream

PAD, BOS, EOS, SEP = 0, 1, 2, 3
TASK_AR, TASK_COPY, TASK_REVERSE, TASK_CONT, TASK_NIAH = 4, 5, 6, 7, 8
NEEDLE, QUERY = 9, 10
DOMAIN_A = (16, 208)
DOMAIN_B = (208, 400)
AR_KEYS = (400, 464)
AR_VALUES = (464, 512)
DIGITS = (464, 474)
VOCAB_SIZE = 512


class DataError(ValueError):
    """Malformed dataset record or file."""


@dataclass
class DatasetRecord:
    tokens: np.ndarray
    bounds: list[int] = field(default_factory=lambda: [0])
    spans: list[tuple[int, int, str]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    candidates: list[list[int]] | None = None
    gold: int | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.spans = [(int(a), int(b), str(r)) for a, b, r in self.spans]
        self.bounds = [int(b) for b in self.bounds]

    def __len__(self) -> int:
        return len(self.tokens)

    def validate(self, vocab_size: int = VOCAB_SIZE) -> None:
        n = len(self.tokens)
        if n == 0:
            raise DataError("empty record")
        if self.tokens.min() < 0 or self.tokens.max() >= vocab_size:
            raise DataError("token id outside vocabulary")
        if self.bounds != sorted(self.bounds) or (self.bounds and (self.bounds[0] < 0 or self.bounds[-1] >= n)):
            raise DataError(f"bad document bounds {self.bounds}")
        last = 0
        for a, b, r in sorted(self.spans):
            if r not in ("prompt", "completion"):
                raise DataError(f"unknown span role {r!r}")
            if not (0 <= a <= b <= n) or a < last:
                raise DataError(f"span ({a},{b}) overlaps or is out of bounds")
            last = b
        if self.candidates is not None:
            if self.gold is None or not 0 <= self.gold < len(self.candidates):
                raise DataError("gold index out of range")
            if len(self.candidates) < 2 or len({tuple(c) for c in self.candidates}) != len(self.candidates):
                raise DataError("candidates must be >= 2 distinct sequences")

    def role_mask(self, role: str) -> np.ndarray:
        m = np.zeros(len(self.tokens), dtype=bool)
        for a, b, r in self.spans:
            if r == role:
                m[a:b] = True
        return m

    @property
    def prompt(self) -> np.ndarray:
        """Tokens up to the end of the prompt span (the whole record if none)."""
        ends = [b for a, b, r in self.spans if r == "prompt"]
        return self.tokens[: max(ends)] if ends else self.tokens

    @property
    def completion(self) -> np.ndarray:
        return self.tokens[self.role_mask("completion")]

    def to_json(self) -> dict:
        d = {"tokens": self.tokens.tolist(), "bounds": self.bounds, "spans": [list(s) for s in self.spans]}
        if self.meta:
            d["meta"] = self.meta
        if self.candidates is not None:
            d["candidates"] = self.candidates
            d["gold"] = self.gold
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetRecord":
        try:
            return cls(d["tokens"], d.get("bounds", [0]), [tuple(s) for s in d.get("spans", [])],
                       d.get("meta", {}), d.get("candidates"), d.get("gold"))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bad record: {e}") from e


def chat_record(prompt: Sequence[int], completion: Sequence[int], meta: dict | None = None) -> DatasetRecord:
    """``BOS prompt SEP completion EOS`` with the prompt span covering BOS..SEP."""
    toks = [BOS, *prompt, SEP, *completion, EOS]
    p_end = len(prompt) + 2
    return DatasetRecord(toks, [0], [(0, p_end, "prompt"), (p_end, len(toks), "completion")], dict(meta or {}))


# ---------------------------------------------------------------------------
# Markov corpora
# ---------------------------------------------------------------------------

@dataclass
class MarkovChain:
    """Sparse chain over ``vocab = range(lo, hi)``.  Each state (one or two
    previous tokens) has ``fanout`` successors with Dirichlet weights."""

    lo: int
    hi: int
    order: int
    succ: np.ndarray       # [n_states, fanout] absolute token ids
    probs: np.ndarray      # [n_states, fanout]

    @classmethod
    def make(cls, seed: int, vocab: tuple[int, int], order: int = 1, fanout: int = 4,
             concentration: float = 1.0) -> "MarkovChain":
        if order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        lo, hi = vocab
        n = hi - lo
        rng = substream(seed, "markov-chain", lo, hi, order)
        n_states = n ** order
        succ = np.stack([rng.choice(n, size=fanout, replace=False) for _ in range(n_states)]) + lo
        probs = rng.dirichlet(np.full(fanout, concentration), size=n_states)
        return cls(lo, hi, order, succ, probs)

    @property
    def n(self) -> int:
        return self.hi - self.lo

    def state(self, prev2: np.ndarray, prev1: np.ndarray) -> np.ndarray:
        s = prev1 - self.lo
        return s if self.order == 1 else (prev2 - self.lo) * self.n + s

    def transition_matrix(self) -> np.ndarray:
        """Dense first-order matrix ``P[i, j]`` (order 1 only)."""
        if self.order != 1:
            raise ValueError("dense transition matrix is only defined for order 1")
        P = np.zeros((self.n, self.n))
        rows = np.repeat(np.arange(self.n), self.succ.shape[1])
        np.add.at(P, (rows, (self.succ - self.lo).ravel()), self.probs.ravel())
        return P

    def sample(self, rng, n_docs: int, lengths: np.ndarray, start: np.ndarray | None = None) -> list[np.ndarray]:
        """Run ``n_docs`` chains in parallel; doc ``i`` has ``lengths[i]`` words."""
        Lmax = int(lengths.max())
        out = np.empty((n_docs, Lmax), dtype=np.int64)
        if start is None:
            start = rng.integers(self.lo, self.hi, size=(n_docs, 2))
        prev2, prev1 = start[:, 0].copy(), start[:, 1].copy()
        cum = np.cumsum(self.probs, axis=1)
        cum[:, -1] = 1.0
        for t in range(Lmax):
            s = self.state(prev2, prev1)
            u = rng.random(n_docs)
            j = (u[:, None] > cum[s]).sum(axis=1)
            nxt = self.succ[s, j]
            out[:, t] = nxt
            prev2, prev1 = prev1, nxt
        return [out[i, : lengths[i]] for i in range(n_docs)]


def gen_markov_corpus(seed: int, n_tokens: int, order: int = 1, vocab: tuple[int, int] = DOMAIN_A,
                      mean_doc_len: int = 96, min_doc_len: int = 8, max_doc_len: int = 400,
                      chain: MarkovChain | None = None, batch_docs: int = 256) -> list[DatasetRecord]:
    """Documents ``BOS w1..wn EOS`` with geometric word counts until the corpus
    holds at least ``n_tokens`` tokens."""
    chain = chain or MarkovChain.make(seed, vocab, order)
    rng = substream(seed, "markov-docs", vocab[0], vocab[1], order)
    docs: list[DatasetRecord] = []
    total = 0
    while total < n_tokens:
        lengths = np.clip(rng.geometric(1.0 / mean_doc_len, size=batch_docs), min_doc_len, max_doc_len)
        for words in chain.sample(rng, batch_docs, lengths):
            rec = DatasetRecord(np.concatenate([[BOS], words, [EOS]]), [0], [],
                                {"task": "markov", "domain": f"{vocab[0]}-{vocab[1]}"})
            docs.append(rec)
            total += len(rec)
            if total >= n_tokens:
                break
    return docs


def bigram_tv(chain: MarkovChain, docs: Iterable[DatasetRecord]) -> float:
    """Stationary-weighted mean total-variation distance between empirical and
    true transition rows (order-1 chains)."""
    P = chain.transition_matrix()
    C = np.zeros_like(P)
    for d in docs:
        w = d.tokens[1:-1] - chain.lo
        np.add.at(C, (w[:-1], w[1:]), 1.0)
    visits = C.sum(1)
    seen = visits > 0
    emp = C[seen] / visits[seen, None]
    tv = 0.5 * np.abs(emp - P[seen]).sum(1)
    return float((tv * visits[seen]).sum() / visits[seen].sum())


def unigram_entropy(docs: Iterable[DatasetRecord]) -> float:
    """Order-0 entropy (nats/token) of the predicted tokens (all but BOS)."""
    counts: dict[int, int] = {}
    for d in docs:
        u, c = np.unique(d.tokens[1:], return_counts=True)
        for a, b in zip(u.tolist(), c.tolist()):
            counts[a] = counts.get(a, 0) + b
    c = np.array(list(counts.values()), dtype=float)
    p = c / c.sum()
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# Associative recall
# ---------------------------------------------------------------------------

def gen_ar_examples(n_pairs: int, n_examples: int, seed: int, key_space: tuple[int, int] = AR_KEYS,
                    value_space: tuple[int, int] = AR_VALUES) -> list[DatasetRecord]:
    """``BOS k1 v1 .. kn vn kq SEP vq EOS``; keys are distinct within a record."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    nk = key_space[1] - key_space[0]
    if n_pairs > nk:
        raise ValueError(f"{n_pairs} distinct keys requested from a space of {nk}")
    rng = substream(seed, "ar", n_pairs)
    recs = []
    for _ in range(n_examples):
        keys = rng.choice(nk, size=n_pairs, replace=False) + key_space[0]
        vals = rng.integers(value_space[0], value_space[1], size=n_pairs)
        qi = int(rng.integers(n_pairs))
        body = np.empty(2 * n_pairs, dtype=np.int64)
        body[0::2], body[1::2] = keys, vals
        recs.append(chat_record([*body.tolist(), int(keys[qi])], [int(vals[qi])],
                                {"task": "ar", "n_pairs": n_pairs, "answer": [int(vals[qi])]}))
    return recs


def ar_lookup(rec: DatasetRecord) -> int:
    """Reference solver: find the queried key among the pairs."""
    p = rec.prompt
    pairs, q = p[1:-2], int(p[-2])
    keys, vals = pairs[0::2], pairs[1::2]
    hits = np.flatnonzero(keys == q)
    if len(hits) != 1:
        raise DataError("queried key must appear exactly once")
    return int(vals[hits[0]])


def ar_as_mcq(recs: Sequence[DatasetRecord], n_candidates: int, seed: int,
              value_space: tuple[int, int] = AR_VALUES) -> list[DatasetRecord]:
    """Multiple-choice view: the gold value plus distractor values."""
    rng = substream(seed, "ar-mcq")
    out = []
    for r in recs:
        gold_v = int(r.completion[0])
        others = [v for v in range(*value_space) if v != gold_v]
        cands = [gold_v] + rng.choice(others, size=n_candidates - 1, replace=False).tolist()
        order = rng.permutation(n_candidates)
        cands = [[int(cands[i]), EOS] for i in order]
        gold = int(np.flatnonzero(order == 0)[0])
        out.append(DatasetRecord(r.tokens, r.bounds, r.spans, dict(r.meta), cands, gold))
    return out


def gen_repeat_docs(seed: int, n_docs: int, min_span: int = 3, max_span: int = 16,
                    vocab: tuple[int, int] = (AR_KEYS[0], AR_VALUES[1])) -> list[DatasetRecord]:
    """``BOS x1..xn x1..xn EOS`` with random tokens and a random span length.

    Because the repeat offset varies, the second half can only be predicted
    by looking up what followed the current token earlier, which is the same
    lookup associative recall needs.  Mixed into pretraining, these documents
    let a small teacher pick up recall in hundreds of steps instead of
    stalling at chance.  The second copy is marked as the completion.
    """
    if not 1 <= min_span <= max_span:
        raise ValueError("need 1 <= min_span <= max_span")
    rng = substream(seed, "repeat", min_span, max_span)
    out = []
    for _ in range(n_docs):
        n = int(rng.integers(min_span, max_span + 1))
        x = rng.integers(vocab[0], vocab[1], size=n).tolist()
        out.append(DatasetRecord([BOS, *x, *x, EOS], spans=[(0, n + 1, "prompt"), (n + 1, 2 * n + 2, "completion")],
                                 meta={"task": "repeat"}))
    return out


# ---------------------------------------------------------------------------
# Needle in a haystack
# ---------------------------------------------------------------------------

NIAH_KINDS = ("repeated_haystack_number", "prose_number", "prose_uuid")


def gen_niah(context_len: int, needle_kind: str, seed: int, chain: MarkovChain | None = None,
             number_len: int = 4, uuid_len: int = 6) -> DatasetRecord:
    """Haystack of ``context_len`` prompt tokens with one ``NEEDLE x1..xm``
    inserted; the record asks ``QUERY NEEDLE SEP`` and answers ``x1..xm EOS``."""
    if needle_kind not in NIAH_KINDS:
        raise ValueError(f"needle_kind must be one of {NIAH_KINDS}")
    rng = substream(seed, "niah", needle_kind, context_len)
    m = uuid_len if needle_kind == "prose_uuid" else number_len
    needle_len = m + 1
    n_hay = context_len - needle_len - 3   # TASK_NIAH, QUERY, NEEDLE
    if n_hay < 1:
        raise ValueError("context_len too small for needle and query")
    if needle_kind == "prose_uuid":
        answer = rng.integers(AR_VALUES[0], AR_VALUES[1], size=m)
    else:
        answer = rng.integers(DIGITS[0], DIGITS[1], size=m)
    if needle_kind == "repeated_haystack_number":
        sentence = rng.integers(DOMAIN_A[0], DOMAIN_A[1], size=8)
        hay = np.resize(sentence, n_hay)
    else:
        chain = chain or MarkovChain.make(0, DOMAIN_A, 1)
        hay = chain.sample(rng, 1, np.array([n_hay]))[0]
    pos = int(rng.integers(0, n_hay + 1))
    prompt = np.concatenate([[TASK_NIAH], hay[:pos], [NEEDLE], answer, hay[pos:], [QUERY, NEEDLE]])
    return chat_record(prompt.tolist(), answer.tolist(),
                       {"task": "niah", "kind": needle_kind, "depth": pos / n_hay, "answer": answer.tolist()})


# ---------------------------------------------------------------------------
# Instruction-style records
# ---------------------------------------------------------------------------

TEMPLATES = ("ar", "copy", "reverse", "continue")


def template_prompt(template: str, rng, chain_a: MarkovChain | None = None, ar_pairs: int = 8,
                    span: tuple[int, int] = (4, 10)) -> tuple[list[int], list[int]]:
    """A templated prompt and its ground-truth completion."""
    if template == "ar":
        r = gen_ar_examples(ar_pairs, 1, int(rng.integers(2**31)))[0]
        return r.prompt[1:-1].tolist(), r.completion[:-1].tolist()
    n = int(rng.integers(span[0], span[1] + 1))
    if template in ("copy", "reverse"):
        w = rng.integers(DOMAIN_A[0], DOMAIN_B[1], size=n).tolist()
        tok = TASK_COPY if template == "copy" else TASK_REVERSE
        return [tok, *w], (w if template == "copy" else w[::-1])
    if template == "continue":
        chain_a = chain_a or MarkovChain.make(0, DOMAIN_A, 1)
        w = chain_a.sample(rng, 1, np.array([2 * n]))[0].tolist()
        return [TASK_CONT, *w[:n]], w[n:]
    raise ValueError(f"unknown template {template!r}; valid: {TEMPLATES}")


def gen_task_records(templates: Sequence[str], n: int, seed: int, chain_a: MarkovChain | None = None,
                     ar_pairs: int = 8) -> list[DatasetRecord]:
    """Templated records with ground-truth completions (teacher pretraining)."""
    rng = substream(seed, "tasks", *templates)
    out = []
    for i in range(n):
        t = templates[i % len(templates)]
        p, c = template_prompt(t, rng, chain_a, ar_pairs)
        out.append(chat_record(p, c, {"task": t, "template": t}))
    return out


@dataclass
class InstructResult:
    records: list[DatasetRecord]
    dropped_empty: int = 0


def gen_instruct_pairs(teacher, templates: Sequence[str], n: int, seed: int, max_new: int = 16,
                       chain_a: MarkovChain | None = None, ar_pairs: int = 8, batch: int = 64) -> InstructResult:
    """Templated prompts answered greedily by ``teacher`` (completions end at
    the teacher's EOS, or are closed with EOS at ``max_new``)."""
    from .model import generate

    rng = substream(seed, "instruct", *templates)
    prompts = []
    for i in range(n):
        t = templates[i % len(templates)]
        p, _ = template_prompt(t, rng, chain_a, ar_pairs)
        prompts.append((t, [BOS, *p, SEP]))
    by_len: dict[int, list[int]] = {}
    for i, (_, p) in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    comps: dict[int, list[int]] = {}
    for L, idx in sorted(by_len.items()):
        for s in range(0, len(idx), batch):
            chunk = idx[s : s + batch]
            gen = generate(teacher, np.array([prompts[i][1] for i in chunk]), max_new, eos=EOS)
            for i, row in zip(chunk, gen):
                row = row.tolist()
                comps[i] = row[: row.index(EOS)] if EOS in row else row
    out, dropped = [], 0
    for i, (t, p) in enumerate(prompts):
        c = comps[i]
        if not c:
            dropped += 1
            continue
        out.append(chat_record(p[1:-1], c, {"task": t, "template": t}))
    return InstructResult(out, dropped)


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------

@dataclass
class PackedBatch:
    tokens: np.ndarray      # [B, T] int
    seg: np.ndarray         # [B, T] document id per position; padding positions get unique negative ids
    loss_mask: np.ndarray   # [B, T] bool over target tokens
    source: np.ndarray | None = None   # [B, T] source-dataset index (-1 for padding)

    @property
    def shape(self):
        return self.tokens.shape

    def target_mask(self) -> np.ndarray:
        """``[B, T-1]`` mask over logit positions: logit ``t`` predicts token
        ``t+1`` and counts when that token is selected and in the same doc."""
        same = self.seg[:, 1:] == self.seg[:, :-1]
        return self.loss_mask[:, 1:] & same

    def nonpad(self) -> np.ndarray:
        return self.seg >= 0


@dataclass
class PackStats:
    packed_tokens: int = 0
    dropped_records: int = 0
    dropped_tokens: int = 0
    rows: int = 0


def pack_rows(records: Iterable[DatasetRecord], seq_len: int, mask_mode: str = "full",
              stats: PackStats | None = None, per_record_auto: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Sequential packing into rows of ``seq_len``; records are never split,
    over-long records are dropped and counted.  With ``per_record_auto`` a
    record that has a completion span is masked completion-only and any other
    record fully."""
    if mask_mode not in ("full", "completion_only"):
        raise ValueError("mask_mode must be 'full' or 'completion_only'")
    stats = stats if stats is not None else PackStats()
    toks, seg, mask, src = [], [], [], []
    doc = 0

    def flush():
        n = len(toks)
        pad = seq_len - n
        row = (np.array(toks + [PAD] * pad, dtype=np.int64),
               np.array(seg + [-(1 + n + i) for i in range(pad)], dtype=np.int64),
               np.array(mask + [False] * pad, dtype=bool),
               np.array(src + [-1] * pad, dtype=np.int64))
        stats.rows += 1
        return row

    for rec in records:
        n = len(rec)
        if n > seq_len:
            stats.dropped_records += 1
            stats.dropped_tokens += n
            continue
        if len(toks) + n > seq_len:
            yield flush()
            toks, seg, mask, src = [], [], [], []
        comp = rec.role_mask("completion")
        if per_record_auto:
            m = comp if comp.any() else np.ones(n, dtype=bool)
        else:
            m = np.ones(n, dtype=bool) if mask_mode == "full" else comp
        starts = set(rec.bounds)
        ids = []
        for i in range(n):
            if i in starts and i > 0:
                doc += 1
            ids.append(doc)
        doc += 1
        toks += rec.tokens.tolist()
        seg += ids
        mask += m.tolist()
        src += [int(rec.meta.get("source", 0))] * n
        stats.packed_tokens += n
    if toks:
        yield flush()


def pack_sequences(records: Iterable[DatasetRecord], seq_len: int, mask_mode: str = "full",
                   batch_size: int = 8, stats: PackStats | None = None,
                   drop_last: bool = False, per_record_auto: bool = False) -> Iterator[PackedBatch]:
    rows = []
    for r in pack_rows(records, seq_len, mask_mode, stats, per_record_auto):
        rows.append(r)
        if len(rows) == batch_size:
            yield _stack(rows)
            rows = []
    if rows and not drop_last:
        yield _stack(rows)


def _stack(rows) -> PackedBatch:
    t, s, m, src = (np.stack(x) for x in zip(*rows))
    return PackedBatch(t, s, m, src)


# ---------------------------------------------------------------------------
# Mixing and splits
# ---------------------------------------------------------------------------

@dataclass
class MixSpec:
    parts: list[tuple[str, float]]

    def __post_init__(self):
        if not self.parts:
            raise ValueError("empty mix")
        total = float(sum(r for _, r in self.parts))
        if total <= 0 or any(r < 0 for _, r in self.parts):
            raise ValueError("mix ratios must be non-negative with a positive sum")
        self.parts = [(n, r / total) for n, r in self.parts]

    @property
    def ratios(self) -> np.ndarray:
        return np.array([r for _, r in self.parts])


def mix_datasets(spec: MixSpec, datasets: dict[str, Sequence[DatasetRecord]], seed: int,
                 n: int | None = None) -> Iterator[DatasetRecord]:
    """Seeded categorical interleaving; each source is cycled in order.
    Yields ``n`` records (default: until every source with positive ratio has
    been fully used once)."""
    rng = substream(seed, "mix")
    names = [nm for nm, _ in spec.parts]
    p = spec.ratios
    for nm, r in spec.parts:
        if r > 0 and not datasets[nm]:
            raise ValueError(f"dataset {nm!r} is empty")
    cursor = {nm: 0 for nm in names}
    count = 0
    while True:
        if n is not None and count >= n:
            return
        if n is None and all(cursor[nm] >= len(datasets[nm]) for nm, r in spec.parts if r > 0):
            return
        j = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
        j = min(j, len(names) - 1)
        nm = names[j]
        ds = datasets[nm]
        rec = ds[cursor[nm] % len(ds)]
        cursor[nm] += 1
        count += 1
        meta = dict(rec.meta)
        meta["source"] = j
        yield DatasetRecord(rec.tokens, rec.bounds, rec.spans, meta, rec.candidates, rec.gold)


def is_heldout(index: int, seed: int, frac: float = 0.02) -> bool:
    return (stable_hash("heldout", seed, index) % 10_000) < int(round(frac * 10_000))


def split_heldout(records: Sequence[DatasetRecord], seed: int, frac: float = 0.02):
    train, held = [], []
    for i, r in enumerate(records):
        (held if is_heldout(i, seed, frac) else train).append(r)
    return train, held


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_records(path: str | Path, records: Iterable[DatasetRecord]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True, separators=(",", ":")))
            f.write("\n")
            n += 1
    return n


def read_records(path: str | Path, vocab_size: int = VOCAB_SIZE) -> list[DatasetRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{ln}: invalid JSON ({e.msg})") from e
            if not isinstance(d, dict) or "tokens" not in d:
                raise DataError(f"{path}:{ln}: record needs a 'tokens' field")
            r = DatasetRecord.from_json(d)
            try:
                r.validate(vocab_size)
            except DataError as e:
                raise DataError(f"{path}:{ln}: {e}") from e
            out.append(r)
    return out
