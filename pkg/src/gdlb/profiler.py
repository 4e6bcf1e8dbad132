"""Cache-memory arithmetic and wall-clock measurements of prefill, decode and
batch throughput."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .mixers import CONV_WIDTH
from .model import Model, ModelConfig

WARMUP = 3
REPS = 5


class InfeasibleError(ValueError):
    """The memory budget cannot hold even a batch of one."""


@dataclass
class MemoryModel:
    cfg: ModelConfig
    bytes_per_elem: int = 4

    @property
    def n_attention(self) -> int:
        return sum(m == "attention" for m in self.cfg.mixers)

    @property
    def n_linear(self) -> int:
        return self.cfg.n_layers - self.n_attention

    def kv_bytes(self, seq: int, batch: int = 1) -> int:
        c = self.cfg
        return 2 * self.n_attention * c.n_kv_heads * c.head_dim * seq * batch * self.bytes_per_elem

    def conv_state_elems(self) -> int:
        c = self.cfg
        return (CONV_WIDTH - 1) * (c.n_q_heads + 2 * c.n_kv_heads) * c.head_dim

    def state_bytes(self, batch: int = 1, seq: int | None = None) -> int:
        """Recurrent memory plus short-convolution tails; ``seq`` is accepted
        only to make the independence from it explicit."""
        c = self.cfg
        per_layer = c.n_kv_heads * c.head_dim * c.head_dim + self.conv_state_elems()
        return self.n_linear * per_layer * batch * self.bytes_per_elem

    def cache_bytes(self, seq: int, batch: int = 1) -> int:
        return self.kv_bytes(seq, batch) + self.state_bytes(batch)

    def activation_bytes(self, seq: int, batch: int) -> int:
        """Rough estimate: two ``[batch, seq, d_model]`` buffers per layer."""
        return 2 * batch * seq * self.cfg.d_model * self.bytes_per_elem * self.cfg.n_layers


@dataclass
class CacheReport:
    kv_bytes: int
    state_bytes: int
    reduction_fraction: float


def cache_memory(cfg: ModelConfig, seq: int, batch: int = 1, bytes_per_elem: int = 4) -> CacheReport:
    """KV and recurrent-state bytes of ``cfg`` and the KV reduction relative
    to the same geometry with attention everywhere (``1 - a / L``)."""
    mm = MemoryModel(cfg, bytes_per_elem)
    reduction = 1.0 - mm.n_attention / cfg.n_layers
    return CacheReport(mm.kv_bytes(seq, batch), mm.state_bytes(batch), reduction)


def instrumented_cache_bytes(caches: list) -> int:
    """Bytes actually held by a model's decode caches."""
    total = 0
    for c in caches:
        stack = [c]
        while stack:
            x = stack.pop()
            if isinstance(x, np.ndarray):
                total += x.nbytes
            elif isinstance(x, dict):
                stack.extend(x.values())
    return total


@dataclass
class ThroughputSample:
    context: int
    batch: int
    tokens_per_sec: float
    ttft_ms: float
    peak_bytes: int
    spread_ms: float = 0.0


def _time(fn, warmup: int, reps: int) -> tuple[float, float]:
    for _ in range(warmup):
        fn()
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts)), float(np.max(ts) - np.min(ts))


def _prompt(vocab: int, batch: int, n: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(4, vocab, size=(batch, n))


def measure_prefill(model: Model, seq_lens: Sequence[int], batch: int = 1, warmup: int = WARMUP,
                    reps: int = REPS) -> list[ThroughputSample]:
    """Median time to first token (a full prefill) per prompt length."""
    out = []
    mm = MemoryModel(model.cfg, np.dtype(model.dtype).itemsize)
    for n in seq_lens:
        toks = _prompt(model.cfg.vocab_size, batch, n)
        med, spread = _time(lambda: model.prefill(toks, n), warmup, reps)
        out.append(ThroughputSample(n, batch, batch * n / med, med * 1e3,
                                    mm.cache_bytes(n, batch) + mm.activation_bytes(n, batch), spread * 1e3))
    return out


def scaling_exponent(samples: Sequence[ThroughputSample]) -> float:
    """Least-squares slope of log TTFT against log length."""
    x = np.log([s.context for s in samples])
    y = np.log([s.ttft_ms for s in samples])
    return float(np.polyfit(x, y, 1)[0])


def measure_decode(model: Model, contexts: Sequence[int], n_steps: int = 16, batch: int = 1,
                   warmup: int = WARMUP, reps: int = REPS) -> list[ThroughputSample]:
    """Decode tokens/sec after a prefill of each context length.  Each rep
    restores the post-prefill caches, so only the steps are timed."""
    out = []
    mm = MemoryModel(model.cfg, np.dtype(model.dtype).itemsize)
    for n in contexts:
        toks = _prompt(model.cfg.vocab_size, batch, n)
        _, caches = model.prefill(toks, n + n_steps)
        feed = _prompt(model.cfg.vocab_size, batch, n_steps, seed=1)

        def run():
            cs = _copy_caches(caches)
            for j in range(n_steps):
                model.step(feed[:, j], cs)

        med, spread = _time(run, warmup, reps)
        # the copy is outside what decoding needs; time it alone and subtract
        copy_med, _ = _time(lambda: _copy_caches(caches), 1, reps)
        dt = max(med - copy_med, 1e-9)
        out.append(ThroughputSample(n, batch, batch * n_steps / dt, 0.0, mm.cache_bytes(n + n_steps, batch),
                                    spread * 1e3))
    return out


def _copy_caches(caches):
    def cp(x):
        if isinstance(x, np.ndarray):
            return x.copy()
        if isinstance(x, dict):
            return {k: cp(v) for k, v in x.items()}
        return x
    return [cp(c) for c in caches]


def batch_sweep(model: Model, context: int, memory_budget: float, hard_cap: int = 64, n_steps: int = 4,
                warmup: int = 1, reps: int = 3) -> ThroughputSample:
    """Double the batch while the analytic footprint fits ``memory_budget``
    (``math.inf`` stops at ``hard_cap``); return the fastest sample."""
    mm = MemoryModel(model.cfg, np.dtype(model.dtype).itemsize)

    def footprint(b):
        return mm.cache_bytes(context + n_steps, b) + mm.activation_bytes(context, b)

    if footprint(1) > memory_budget:
        raise InfeasibleError(f"budget {memory_budget} bytes < batch-1 footprint {footprint(1)} bytes")
    best = None
    b = 1
    while b <= hard_cap and footprint(b) <= memory_budget:
        s = measure_decode(model, [context], n_steps, b, warmup, reps)[0]
        s.peak_bytes = footprint(b)
        if best is None or s.tokens_per_sec > best.tokens_per_sec:
            best = s
        b *= 2
    return best


def max_batch(cfg: ModelConfig, context: int, memory_budget: float, hard_cap: int = 1 << 20,
              bytes_per_elem: int = 4) -> int:
    """Largest power-of-two batch whose analytic footprint fits the budget."""
    mm = MemoryModel(cfg, bytes_per_elem)
    b = 0
    nb = 1
    while nb <= hard_cap and mm.cache_bytes(context, nb) + mm.activation_bytes(context, nb) <= memory_budget:
        b, nb = nb, nb * 2
    return b


def write_table(path: str | Path, rows: Sequence[ThroughputSample], metric: str, label: str = "") -> None:
    """Tab-separated ``label context batch metric`` rows for plotting."""
    new = not Path(path).exists()
    with open(path, "a") as f:
        if new:
            f.write("label\tcontext\tbatch\tmetric\tvalue\n")
        for r in rows:
            f.write(f"{label}\t{r.context}\t{r.batch}\t{metric}\t{asdict(r)[metric]:.6g}\n")


def memory_table(cfg: ModelConfig, seqs: Sequence[int], batch: int = 1) -> list[dict]:
    mm = MemoryModel(cfg)
    full = MemoryModel(_all_attention(cfg))
    return [{"seq": s, "kv_bytes": mm.kv_bytes(s, batch), "state_bytes": mm.state_bytes(batch),
             "teacher_kv_bytes": full.kv_bytes(s, batch),
             "ratio": mm.cache_bytes(s, batch) / full.cache_bytes(s, batch)} for s in seqs]


def _all_attention(cfg: ModelConfig) -> ModelConfig:
    d = cfg.to_dict()
    d["mixers"] = ["attention"] * cfg.n_layers
    return ModelConfig.from_dict(d)


def relative_spread(values: Sequence[float]) -> float:
    """``max / min - 1``: how far apart the extremes are, relative to the slowest."""
    v = np.asarray(values, dtype=float)
    return float(v.max() / v.min() - 1.0) if len(v) else math.nan
