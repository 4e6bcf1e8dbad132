"""Teacher transformer, hybrid student assembly, checkpoints and decoding."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path

import numpy as np

from . import tensor as T
from .mixers import (
    MIXER_KINDS,
    RECURRENT_KINDS,
    Attention,
    Mixer,
    MixerGeometry,
    Recurrent,
    build_mixer,
    mixer_param_shapes,
)
from .rng import substream
from .tensor import Tensor


class FormatError(ValueError):
    """A checkpoint or data file does not follow its declared format."""


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 8
    n_q_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 16
    mlp_dim: int = 192
    vocab_size: int = 512
    rope_theta: float = 1e4
    rmsnorm_eps: float = 1e-6
    tie_embeddings: bool = True
    mixers: tuple[str, ...] = ()
    max_seq_len: int = 512
    gate_activation: str = "silu"
    use_post_norm: bool = False
    qk_norm: bool = True
    chunk_size: int = 16
    scan_mode: str = "sequential"

    def __post_init__(self):
        if not self.mixers:
            self.mixers = ("attention",) * self.n_layers
        self.mixers = tuple(self.mixers)
        self.validate()

    def validate(self) -> None:
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError("n_q_heads must be divisible by n_kv_heads")
        if len(self.mixers) != self.n_layers:
            raise ValueError(f"{len(self.mixers)} mixer kinds for {self.n_layers} layers")
        bad = [m for m in self.mixers if m not in MIXER_KINDS]
        if bad:
            raise ValueError(f"unknown mixer kinds {bad}; valid: {MIXER_KINDS}")
        if self.scan_mode not in ("sequential", "chunked"):
            raise ValueError("scan_mode must be 'sequential' or 'chunked'")
        for name in ("d_model", "n_layers", "head_dim", "mlp_dim", "vocab_size", "chunk_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def reference_scale(cls) -> "ModelConfig":
        """Reference dimensions of the 0.6B teacher (never trained here)."""
        return cls(d_model=1024, n_layers=28, n_q_heads=16, n_kv_heads=8, head_dim=128,
                   mlp_dim=3072, vocab_size=151936, rope_theta=1e6, max_seq_len=4096, chunk_size=128)

    def geometry(self) -> MixerGeometry:
        return MixerGeometry(self.d_model, self.n_q_heads, self.n_kv_heads, self.head_dim,
                             self.rope_theta, self.rmsnorm_eps, self.gate_activation,
                             self.use_post_norm, self.qk_norm, self.chunk_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mixers"] = list(self.mixers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    def attention_indices(self) -> tuple[int, ...]:
        return tuple(i for i, m in enumerate(self.mixers) if m == "attention")


@dataclass(frozen=True)
class HybridLayout:
    attention_indices: tuple[int, ...]
    n_layers: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.attention_indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"layout indices must be strictly increasing: {idx}")
        if idx and (idx[0] < 0 or idx[-1] >= self.n_layers):
            raise ValueError(f"layout indices out of range for {self.n_layers} layers: {idx}")
        object.__setattr__(self, "attention_indices", idx)

    @classmethod
    def of(cls, indices, n_layers: int) -> "HybridLayout":
        return cls(tuple(sorted(set(int(i) for i in indices))), n_layers)

    def mixers(self, linear_kind: str = "kda") -> tuple[str, ...]:
        s = set(self.attention_indices)
        return tuple("attention" if i in s else linear_kind for i in range(self.n_layers))

    def __len__(self) -> int:
        return len(self.attention_indices)


class InitMode(str, Enum):
    VO = "VO"
    QKVO = "QKVO"
    RANDOM = "RANDOM"


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter implied by a config, in canonical order."""
    g = cfg.geometry()
    d = cfg.d_model
    s: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    for i, kind in enumerate(cfg.mixers):
        s[f"layers.{i}.norm1"] = (d,)
        for n, shape in mixer_param_shapes(kind, g).items():
            s[f"layers.{i}.mixer.{n}"] = shape
        s[f"layers.{i}.norm2"] = (d,)
        s[f"layers.{i}.mlp.gate"] = (d, cfg.mlp_dim)
        s[f"layers.{i}.mlp.up"] = (d, cfg.mlp_dim)
        s[f"layers.{i}.mlp.down"] = (cfg.mlp_dim, d)
    s["final_norm"] = (d,)
    if not cfg.tie_embeddings:
        s["lm_head"] = (d, cfg.vocab_size)
    return s


def count_params(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


class Model:
    """Pre-norm decoder: ``h = x + mixer(norm1 x)``, ``out = h + mlp(norm2 h)``."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], meta: dict | None = None):
        cfg.validate()
        expected = param_shapes(cfg)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter set mismatch; missing {missing[:5]}, extra {extra[:5]}")
        for n, shape in expected.items():
            if params[n].shape != shape:
                raise ValueError(f"parameter {n} has shape {params[n].shape}, expected {shape}")
            params[n].name = n
        self.cfg = cfg
        self.params = {n: params[n] for n in expected}
        self.meta = dict(meta or {})
        g = cfg.geometry()
        self.mixers: list[Mixer] = []
        for i, kind in enumerate(cfg.mixers):
            pre = f"layers.{i}.mixer."
            mp = {n[len(pre):]: t for n, t in self.params.items() if n.startswith(pre)}
            self.mixers.append(Attention(g, mp) if kind == "attention" else Recurrent(g, mp, kind))

    # -- parameters ---------------------------------------------------------

    @property
    def dtype(self):
        return self.params["embed"].dtype

    @property
    def head(self) -> Tensor:
        return self.params["embed"] if self.cfg.tie_embeddings else self.params["lm_head"]

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            self.params[n].data[...] = arr

    def clone(self) -> "Model":
        params = {n: T.parameter(t.data.copy(), name=n) for n, t in self.params.items()}
        return Model(copy.deepcopy(self.cfg), params, dict(self.meta))

    def astype(self, dtype) -> "Model":
        params = {n: T.parameter(t.data.astype(dtype), name=n) for n, t in self.params.items()}
        return Model(copy.deepcopy(self.cfg), params, dict(self.meta))

    # -- forward ------------------------------------------------------------

    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise T.DomainError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        return T.embedding(self.params["embed"], tokens)

    def mixer_input(self, i: int, x: Tensor) -> Tensor:
        return T.rmsnorm(x, self.params[f"layers.{i}.norm1"], self.cfg.rmsnorm_eps)

    def mixer_out(self, i: int, x: Tensor, seg=None) -> Tensor:
        """Mixer sub-block output (before the residual add) for layer input ``x``."""
        return self.mixers[i].forward(self.mixer_input(i, x), seg, mode=self.cfg.scan_mode)

    def mlp(self, i: int, h: Tensor) -> Tensor:
        p, pre = self.params, f"layers.{i}.mlp."
        z = T.rmsnorm(h, p[f"layers.{i}.norm2"], self.cfg.rmsnorm_eps)
        return T.linear(T.mul(T.silu(T.linear(z, p[pre + "gate"])), T.linear(z, p[pre + "up"])), p[pre + "down"])

    def block(self, i: int, x: Tensor, seg=None, trace: dict | None = None) -> Tensor:
        m = self.mixer_out(i, x, seg)
        h = T.add(x, m)
        out = T.add(h, self.mlp(i, h))
        if trace is not None:
            trace["mix"], trace["out"] = m, out
        return out

    def final_logits(self, h: Tensor) -> Tensor:
        z = T.rmsnorm(h, self.params["final_norm"], self.cfg.rmsnorm_eps)
        if self.cfg.tie_embeddings:
            return T.matmul(z, T.transpose(self.params["embed"]))
        return T.linear(z, self.params["lm_head"])

    def forward(self, tokens, seg=None, traces: list | None = None) -> Tensor:
        """Next-token logits ``[B, T, vocab]`` for ``tokens[B, T]`` (or ``[T]``)."""
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
            seg = None if seg is None else np.asarray(seg)[None]
        x = self.embed(tokens)
        for i in range(self.cfg.n_layers):
            tr = None
            if traces is not None:
                tr = {"x": x}
                traces.append(tr)
            x = self.block(i, x, seg, tr)
        logits = self.final_logits(x)
        return T.reshape(logits, logits.shape[1:]) if squeeze else logits

    __call__ = forward

    # -- incremental decoding ----------------------------------------------

    def prefill(self, tokens: np.ndarray, capacity: int):
        """Run the prompt ``tokens[B, T]`` as one document and return
        ``(last-position logits [B, V], caches)``."""
        tokens = np.asarray(tokens)
        caches = []
        with T.no_grad():
            x = self.embed(tokens)
            for i, mixer in enumerate(self.mixers):
                z = self.mixer_input(i, x)
                m, cache = mixer.forward(z, None, mode=self.cfg.scan_mode, return_cache=True, capacity=capacity)
                caches.append(cache)
                h = T.add(x, m)
                x = T.add(h, self.mlp(i, h))
            last = x[:, -1:]
            logits = self.final_logits(last).data[:, 0]
        return logits, caches

    def step(self, token: np.ndarray, caches: list) -> np.ndarray:
        """Feed one token per row; returns next logits ``[B, V]``."""
        with T.no_grad():
            x = self.embed(np.asarray(token)[:, None])
            for i, mixer in enumerate(self.mixers):
                z = self.mixer_input(i, x)
                m = T.tensor(mixer.step(z.data[:, 0], caches[i])[:, None])
                h = T.add(x, m)
                x = T.add(h, self.mlp(i, h))
            return self.final_logits(x).data[:, 0]


def _init_params(cfg: ModelConfig, rng, dtype) -> dict[str, Tensor]:
    g = cfg.geometry()
    params: dict[str, Tensor] = {}
    shapes = param_shapes(cfg)
    for n, shape in shapes.items():
        if n.endswith(("norm1", "norm2", "final_norm")):
            params[n] = T.parameter(np.ones(shape, dtype=dtype))
        elif ".mixer." not in n:
            params[n] = T.parameter((rng.standard_normal(shape) * 0.02).astype(dtype))
    for i, kind in enumerate(cfg.mixers):
        m = build_mixer(kind, g, rng, dtype)
        for n, t in m.p.items():
            params[f"layers.{i}.mixer.{n}"] = t
    return {n: params[n] for n in shapes}


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> Model:
    return Model(cfg, _init_params(cfg, substream(seed, "init"), dtype), {"stage": "init", "seed": seed})


def build_teacher(cfg: ModelConfig, seed: int, dtype=np.float32) -> Model:
    if any(m != "attention" for m in cfg.mixers):
        raise ValueError("teacher config must use attention in every layer")
    return build_model(cfg, seed, dtype)


def build_student_from_teacher(teacher: Model, layout: HybridLayout, mixer_kind: str = "kda",
                               init_mode: InitMode | str = InitMode.VO, seed: int = 0,
                               **mixer_options) -> Model:
    """Hybrid student: layers in ``layout`` keep the teacher's attention; the
    rest get a fresh ``mixer_kind`` mixer with conv/gate identity init and
    projections copied per ``init_mode``.  Embeddings, norms and MLPs are
    copied.  ``mixer_options`` may override gate_activation / use_post_norm /
    qk_norm for the new mixers."""
    init_mode = InitMode(init_mode)
    if mixer_kind not in RECURRENT_KINDS:
        raise ValueError(f"student mixer kind must be one of {RECURRENT_KINDS}")
    tc = teacher.cfg
    if layout.n_layers != tc.n_layers:
        raise ValueError("layout size does not match teacher depth")
    if any(m != "attention" for m in tc.mixers):
        raise ValueError("teacher must be all-attention")
    cfg = copy.deepcopy(tc)
    for k, v in mixer_options.items():
        if k not in ("gate_activation", "use_post_norm", "qk_norm", "chunk_size", "scan_mode"):
            raise ValueError(f"unknown mixer option {k!r}")
        setattr(cfg, k, v)
    cfg.mixers = layout.mixers(mixer_kind)
    cfg.validate()
    rng = substream(seed, "init", "student")
    g = cfg.geometry()
    tp = teacher.params
    params: dict[str, Tensor] = {}
    copy_names = {InitMode.VO: ("v_proj", "o_proj"), InitMode.QKVO: ("q_proj", "k_proj", "v_proj", "o_proj"),
                  InitMode.RANDOM: ()}[init_mode]
    for n in param_shapes(cfg):
        if ".mixer." not in n:
            params[n] = T.parameter(tp[n].data.copy())
    for i, kind in enumerate(cfg.mixers):
        pre = f"layers.{i}.mixer."
        if kind == "attention":
            for n in Attention.param_shapes(g):
                params[pre + n] = T.parameter(tp[pre + n].data.copy())
            continue
        m = Recurrent.init(g, rng, kind, teacher.dtype)
        for n, t in m.p.items():
            if n in copy_names:
                t.data[...] = tp[pre + n].data
            params[pre + n] = t
    meta = {"stage": "student-init", "seed": seed, "init_mode": init_mode.value, "layout": list(layout.attention_indices)}
    return Model(cfg, {n: params[n] for n in param_shapes(cfg)}, meta)


def splice(teacher: Model, linear_student: Model, layout: HybridLayout) -> Model:
    """Blocks in ``layout`` from the teacher, everything else from the student
    (no copies: tensors are shared, so the result is for evaluation only).
    A layout covering every layer also takes the non-block tensors from the
    teacher, so it reproduces the teacher exactly."""
    sc = linear_student.cfg
    cfg = copy.deepcopy(sc)
    kind = next((m for m in sc.mixers if m != "attention"), "kda")
    cfg.mixers = layout.mixers(kind)
    s = set(layout.attention_indices)
    params = {}
    for n in param_shapes(cfg):
        if n.startswith("layers."):
            i = int(n.split(".")[1])
            src = teacher if i in s else linear_student
        else:
            src = teacher if len(s) == cfg.n_layers else linear_student
        params[n] = src.params[n]
    m = Model.__new__(Model)
    m.cfg, m.params, m.meta = cfg, params, {"stage": "splice", "layout": list(layout.attention_indices)}
    g = cfg.geometry()
    m.mixers = []
    for i, k in enumerate(cfg.mixers):
        pre = f"layers.{i}.mixer."
        mp = {n[len(pre):]: t for n, t in params.items() if n.startswith(pre)}
        m.mixers.append(Attention(g, mp) if k == "attention" else Recurrent(g, mp, k))
    return m


# ---------------------------------------------------------------------------
# Parameter groups (used by freezing rules)
# ---------------------------------------------------------------------------

GROUPS = ("embeddings", "layer_norms", "mlps", "attention_layers", "mixer_qk", "mixer_other")


def param_group(model: Model, name: str) -> str:
    if name in ("embed", "lm_head"):
        return "embeddings"
    if name == "final_norm" or name.endswith((".norm1", ".norm2")):
        return "layer_norms"
    if ".mlp." in name:
        return "mlps"
    i = int(name.split(".")[1])
    if model.cfg.mixers[i] == "attention":
        return "attention_layers"
    if name.endswith((".q_proj", ".k_proj")):
        return "mixer_qk"
    return "mixer_other"


def grouped(model: Model) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {g: [] for g in GROUPS}
    for n in model.params:
        out[param_group(model, n)].append(n)
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"GDLB1"


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Magic, u64 header length, UTF-8 JSON header, little-endian f32 payloads."""
    directory, offset, blobs = [], 0, []
    for n, t in model.params.items():
        b = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        directory.append({"name": n, "shape": list(t.shape), "offset": offset, "nbytes": len(b)})
        offset += len(b)
        blobs.append(b)
    header = {"format": 1, "config": model.cfg.to_dict(), "meta": model.meta, "tensors": directory}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    try:
        (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
        start = len(MAGIC) + 8
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        tensors = header["tensors"]
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: corrupt header ({e})") from e
    base = start + hlen
    expected = param_shapes(cfg)
    params = {}
    for ent in tensors:
        n, shape = ent["name"], tuple(ent["shape"])
        if n not in expected:
            raise FormatError(f"{path}: unexpected tensor {n}")
        if expected[n] != shape:
            raise FormatError(f"{path}: tensor {n} has shape {shape}, config implies {expected[n]}")
        lo = base + ent["offset"]
        hi = lo + ent["nbytes"]
        if hi > len(raw) or ent["nbytes"] != 4 * int(np.prod(shape)):
            raise FormatError(f"{path}: truncated payload for {n}")
        arr = np.frombuffer(raw[lo:hi], dtype="<f4").reshape(shape).astype(np.float32)
        params[n] = T.parameter(arr, name=n)
    missing = set(expected) - set(params)
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)[:5]}")
    return Model(cfg, params, header.get("meta", {}))


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Greedy:
    pass


@dataclass(frozen=True)
class Sample:
    temperature: float = 0.7
    top_p: float = 0.8
    top_k: int = 20
    seed: int = 42


def _sample_row(logits: np.ndarray, d: Sample, rng) -> int:
    if d.temperature <= 0:
        return int(np.argmax(logits))
    with np.errstate(over="ignore", invalid="ignore"):
        z = logits.astype(np.float64) / d.temperature
        z = z - z.max()
    if not np.all(np.isfinite(z)):
        return int(np.argmax(logits))
    order = np.argsort(-z, kind="stable")
    if d.top_k and d.top_k > 0:
        order = order[: d.top_k]
    zs = z[order]
    p = np.exp(zs - zs[0])
    p /= p.sum()
    if d.top_p < 1.0:
        keep = int(np.searchsorted(np.cumsum(p), d.top_p) + 1)
        p = p[:keep] / p[:keep].sum()
        order = order[:keep]
    j = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return int(order[min(j, len(order) - 1)])


def generate(model: Model, prompts, max_new: int, decode=Greedy(), eos: int | None = None,
             pad: int = 0) -> np.ndarray:
    """Continue each prompt row of ``prompts[B, T]`` by ``max_new`` tokens.

    Rows that emit ``eos`` are padded with ``pad`` afterwards; decoding stops
    early once every row has finished.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    prompts = np.atleast_2d(np.asarray(prompts))
    B, T0 = prompts.shape
    rng = np.random.default_rng(decode.seed) if isinstance(decode, Sample) else None
    logits, caches = model.prefill(prompts, capacity=T0 + max_new)
    out = np.full((B, max_new), pad, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    for j in range(max_new):
        if isinstance(decode, Sample):
            nxt = np.array([_sample_row(logits[b], decode, rng) for b in range(B)])
        else:
            nxt = np.argmax(logits, axis=-1)
        nxt = np.where(done, pad, nxt)
        out[:, j] = nxt
        if eos is not None:
            done |= nxt == eos
            if done.all():
                break
        if j + 1 < max_new:
            logits = model.step(nxt, caches)
    return out
