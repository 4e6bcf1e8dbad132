"""Sequence mixers: matrix-memory recurrences and causal softmax attention.

Four recurrences share one memory layout ``S[..., d_k, d_v]`` read as
``o = S^T q`` after each write:

* linear attention  ``S' = S + k v^T``
* delta rule        ``S' = (I - b k k^T) S + b k v^T``
* gated delta       ``S' = a (I - b k k^T) S + b k v^T``        (scalar a)
* KDA               ``S' = (I - b k k^T) Diag(a) S + b k v^T``   (vector a)

Layer inputs are batch-first ``[B, T, d_model]``.  Document structure is
given per position as segment ids ``seg[B, T]``; a new document starts
wherever the id changes, which resets recurrent state, masks convolution
taps and blocks attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import tensor as T
from .tensor import NumericError, ShapeError, Tensor

RECURRENT_KINDS = ("kda", "gdn", "delta", "linear_attn")
MIXER_KINDS = ("attention",) + RECURRENT_KINDS
CONV_WIDTH = 4


# ---------------------------------------------------------------------------
# Single-step recurrences (plain numpy; used as oracles and for decoding)
# ---------------------------------------------------------------------------

def _check_step(S, k, v, q):
    dk, dv = S.shape[-2:]
    if k.shape[-1] != dk or q.shape[-1] != dk or v.shape[-1] != dv:
        raise ShapeError(f"state {S.shape} incompatible with k {k.shape}, v {v.shape}, q {q.shape}")


def _readout(S, q):
    return np.einsum("...kv,...k->...v", S, q)


def linear_attention_step(S, k, v, q):
    """``S' = S + k v^T``; returns ``(S', S'^T q)``."""
    S, k, v, q = map(np.asarray, (S, k, v, q))
    _check_step(S, k, v, q)
    S = S + k[..., :, None] * v[..., None, :]
    return S, _readout(S, q)


def delta_rule_step(S, k, v, q, beta):
    """``S' = (I - b k k^T) S + b k v^T``."""
    return kda_step(S, k, v, q, beta, np.ones(np.shape(k)))


def gdn_step(S, k, v, q, beta, alpha):
    """``S' = a (I - b k k^T) S + b k v^T`` with scalar ``a``."""
    alpha = np.asarray(alpha, dtype=float)
    return kda_step(S, k, v, q, beta, np.broadcast_to(alpha[..., None], np.shape(k)))


def kda_step(S, k, v, q, beta, alpha):
    """``S' = (I - b k k^T) Diag(a) S + b k v^T`` with per-channel ``a``."""
    S, k, v, q, alpha = map(np.asarray, (S, k, v, q, alpha))
    _check_step(S, k, v, q)
    beta = np.asarray(beta, dtype=S.dtype)
    St = alpha[..., :, None] * S
    u = v - np.einsum("...k,...kv->...v", k, St)
    S = St + (beta[..., None, None] * k[..., :, None]) * u[..., None, :]
    return S, _readout(S, q)


# ---------------------------------------------------------------------------
# Document structure helpers
# ---------------------------------------------------------------------------

def run_ids(seg: np.ndarray | None, B: int, Tn: int) -> np.ndarray:
    """Contiguous-run document ids ``[B, T]`` (a reused id never re-joins)."""
    if seg is None:
        return np.zeros((B, Tn), dtype=np.int64)
    seg = np.asarray(seg)
    if seg.shape != (B, Tn):
        raise ShapeError(f"segment ids {seg.shape} do not match input ({B}, {Tn})")
    change = np.ones((B, Tn), dtype=bool)
    change[:, 1:] = seg[:, 1:] != seg[:, :-1]
    return np.cumsum(change, axis=1)


def resets(runs: np.ndarray) -> np.ndarray:
    r = np.ones(runs.shape, dtype=bool)
    r[:, 1:] = runs[:, 1:] != runs[:, :-1]
    return r


def positions(runs: np.ndarray) -> np.ndarray:
    """Position of each token inside its own document."""
    Tn = runs.shape[1]
    idx = np.broadcast_to(np.arange(Tn), runs.shape)
    start = np.maximum.accumulate(np.where(resets(runs), idx, 0), axis=1)
    return idx - start


# ---------------------------------------------------------------------------
# Fused ops with hand-written backward rules
# ---------------------------------------------------------------------------

def _conv_masks(runs: np.ndarray, width: int) -> list[np.ndarray]:
    masks = []
    for s in range(1, width):
        m = np.zeros(runs.shape, dtype=bool)
        m[:, s:] = runs[:, s:] == runs[:, :-s]
        masks.append(m)
    return masks


def _shift(x: np.ndarray, s: int) -> np.ndarray:
    out = np.zeros_like(x)
    out[:, s:] = x[:, :-s]
    return out


def short_conv(x: Tensor, kernel: Tensor, runs: np.ndarray | None = None) -> Tensor:
    """Causal depthwise convolution over time.

    ``y[t] = sum_i kernel[i] * x[t - (W-1) + i]`` with zero left padding; taps
    that reach into a previous document read zero.  ``x`` is ``[B, T, C]`` or
    ``[T, C]``; ``kernel`` is ``[W, C]``.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1, *x.shape))
    B, Tn, C = x.shape
    W = kernel.shape[0]
    if kernel.shape != (W, C):
        raise ShapeError(f"conv kernel {kernel.shape} does not match channels {C}")
    if runs is None:
        runs = np.zeros((B, Tn), dtype=np.int64)
    masks = _conv_masks(runs, W)
    xd, kd = x.data, kernel.data
    out = xd * kd[W - 1]
    for s, m in enumerate(masks, start=1):
        out = out + _shift(xd, s) * m[..., None] * kd[W - 1 - s]

    def bw(g):
        gx = g * kd[W - 1] if x.requires_grad else None
        gk = np.zeros_like(kd)
        gk[W - 1] = (g * xd).reshape(-1, C).sum(0)
        for s, m in enumerate(masks, start=1):
            gm = g * m[..., None]
            if x.requires_grad:
                gx[:, :-s] += gm[:, s:] * kd[W - 1 - s]
            gk[W - 1 - s] = (gm * _shift(xd, s)).reshape(-1, C).sum(0)
        return gx, gk

    y = T.record(out, (x, kernel), bw)
    return T.reshape(y, (Tn, C)) if squeeze else y


def _rotate_half(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([x[..., h:], -x[..., :h]], axis=-1)


def rope_tables(pos: np.ndarray, head_dim: int, theta: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    inv = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = pos[..., None].astype(np.float64) * inv
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary embedding on ``x[B, T, H, d]`` with tables ``[B, T, d]``."""
    c, s = cos[:, :, None, :], sin[:, :, None, :]
    out = x.data * c + _rotate_half(x.data) * s
    return T.record(out, (x,), lambda g: (g * c + _rotate_half_t(g * s),))


def kda_scan(q: Tensor, k: Tensor, v: Tensor, beta: Tensor | None, alpha: Tensor | None,
             reset: np.ndarray, delta: bool = True, S0: np.ndarray | None = None):
    """Token-by-token recurrence as one taped op.

    Shapes: ``q[B,T,H,G,dk]`` (G query heads per memory head), ``k[B,T,H,dk]``,
    ``v[B,T,H,dv]``, ``beta[B,T,H]``, ``alpha[B,T,H,dk]``, ``reset[B,T]``.
    ``beta=None`` means 1, ``alpha=None`` means no decay, ``delta=False``
    drops the corrective term (plain linear attention).
    Returns ``(o[B,T,H,G,dv], final state ndarray)``.
    """
    qd, kd, vd = q.data, k.data, v.data
    B, Tn, H, G, dk = qd.shape
    dv = vd.shape[-1]
    dt = qd.dtype
    bd = beta.data if beta is not None else np.ones((B, Tn, H), dtype=dt)
    ad = alpha.data if alpha is not None else None
    S = np.zeros((B, H, dk, dv), dtype=dt) if S0 is None else np.array(S0, dtype=dt)
    pre = np.empty((Tn, B, H, dk, dv), dtype=dt)
    o = np.empty((B, Tn, H, G, dv), dtype=dt)
    for t in range(Tn):
        r = reset[:, t]
        if r.any():
            S = np.where(r[:, None, None, None], 0.0, S).astype(dt, copy=False)
        pre[t] = S
        St = S * ad[:, t, :, :, None] if ad is not None else S
        kt = kd[:, t]
        if delta:
            u = vd[:, t] - (kt[:, :, None, :] @ St)[:, :, 0]
        else:
            u = vd[:, t]
        S = St + (bd[:, t, :, None, None] * kt[..., None]) * u[:, :, None, :]
        o[:, t] = qd[:, t] @ S

    def bw(g):
        gq = np.empty_like(qd)
        gk = np.empty_like(kd)
        gv = np.empty_like(vd)
        gb = np.empty_like(bd)
        ga = np.empty_like(ad) if ad is not None else None
        dS = np.zeros((B, H, dk, dv), dtype=dt)
        for t in range(Tn - 1, -1, -1):
            P = pre[t]
            St = P * ad[:, t, :, :, None] if ad is not None else P
            kt, bt = kd[:, t], bd[:, t]
            if delta:
                u = vd[:, t] - (kt[:, :, None, :] @ St)[:, :, 0]
            else:
                u = vd[:, t]
            S_t = St + (bt[:, :, None, None] * kt[..., None]) * u[:, :, None, :]
            gt = g[:, t]
            gq[:, t] = gt @ np.swapaxes(S_t, -1, -2)
            dS = dS + np.swapaxes(qd[:, t], -1, -2) @ gt
            dSu = (dS @ u[..., None])[..., 0]                     # [B,H,dk]
            gb[:, t] = np.einsum("bhk,bhk->bh", kt, dSu)
            dk_ = bt[..., None] * dSu
            du = bt[..., None] * (kt[:, :, None, :] @ dS)[:, :, 0]  # [B,H,dv]
            gv[:, t] = du
            dSt = dS
            if delta:
                dw = -du
                dk_ = dk_ + (St @ dw[..., None])[..., 0]
                dSt = dS + kt[..., None] * dw[:, :, None, :]
            gk[:, t] = dk_
            if ad is not None:
                ga[:, t] = np.einsum("bhkv,bhkv->bhk", dSt, P)
                dS = dSt * ad[:, t, :, :, None]
            else:
                dS = dSt
            r = reset[:, t]
            if r.any():
                dS = np.where(r[:, None, None, None], 0.0, dS).astype(dt, copy=False)
        out = [gq, gk, gv]
        if beta is not None:
            out.append(gb)
        if alpha is not None:
            out.append(ga)
        return tuple(out)

    parents = [q, k, v] + ([beta] if beta is not None else []) + ([alpha] if alpha is not None else [])
    return T.record(o, tuple(parents), bw), S


def _decay_pairs(L: Tensor, valid: np.ndarray) -> Tensor:
    """``E[b,h,t,s,c] = exp(L[b,t,h,c] - L[b,s,h,c])`` where valid, else 0."""
    Ld = L.data
    diff = Ld[:, :, None] - Ld[:, None, :]                      # [B,t,s,H,c]
    diff = np.transpose(diff, (0, 3, 1, 2, 4))                  # [B,H,t,s,c]
    m = valid[:, None, :, :, None]
    E = np.exp(np.where(m, diff, -np.inf))

    def bw(g):
        h = g * E
        gL = h.sum(axis=3) - h.sum(axis=2)                      # [B,H,t,c]
        return (np.transpose(gL, (0, 2, 1, 3)),)

    return T.record(E, (L,), bw)


def kda_chunked(q: Tensor, k: Tensor, v: Tensor, beta: Tensor | None, log_alpha: Tensor | None,
                reset: np.ndarray, chunk_size: int, delta: bool = True,
                S0: np.ndarray | None = None):
    """Chunk-parallel form of :func:`kda_scan` built from taped primitives.

    Inside a chunk the recurrence is solved in closed form: with cumulative
    log-decays ``L``, the corrected values satisfy the unit-lower-triangular
    system ``(I + A) U = diag(b) (V - K_hat S0)`` and outputs combine an
    inter-chunk term ``S0^T (exp(L_t) * q_t)`` with an intra-chunk term.
    State is carried across chunks.  Takes ``log_alpha`` rather than
    ``alpha`` so long chunks stay in log space.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    B, Tn, H, G, dk = q.shape
    dv = v.shape[-1]
    dt = q.dtype
    S = T.tensor(np.zeros((B, H, dk, dv), dtype=dt) if S0 is None else np.asarray(S0, dtype=dt))
    outs = []
    for c0 in range(0, Tn, chunk_size):
        c1 = min(Tn, c0 + chunk_size)
        C = c1 - c0
        qc, kc, vc = q[:, c0:c1], k[:, c0:c1], v[:, c0:c1]
        rc = reset[:, c0:c1]
        run = np.cumsum(rc, axis=1)
        tri = np.tril(np.ones((C, C), dtype=bool))
        valid = tri[None] & (run[:, :, None] == run[:, None, :])
        sees0 = run == 0
        if log_alpha is not None:
            L = T.cumsum(log_alpha[:, c0:c1], axis=1)
        else:
            L = T.tensor(np.zeros((B, C, H, dk), dtype=dt))
        E = _decay_pairs(L, valid)                                       # [B,H,t,s,c]
        gam = T.exp(T.masked_fill(L, ~sees0[:, :, None, None], -np.inf))  # [B,C,H,c]
        KE = T.einsum("bshc,bhtsc->bhtsc", kc, E)
        Bm = T.einsum("bthgc,bhtsc->bhgts", qc, KE)
        if delta:
            Ap = T.einsum("bthc,bhtsc->bhts", kc, KE)
            bc = beta[:, c0:c1] if beta is not None else T.tensor(np.ones((B, C, H), dtype=dt))
            A = T.einsum("bth,bhts->bhts", bc, Ap)
            KS = T.einsum("bthc,bthc,bhcv->bhtv", kc, gam, S)
            R = T.einsum("bth,bhtv->bhtv", bc, T.sub(T.transpose(vc, (0, 2, 1, 3)), KS))
            U = T.tri_solve(A, R)
        else:
            bc = beta[:, c0:c1] if beta is not None else None
            U = T.transpose(vc, (0, 2, 1, 3))
            if bc is not None:
                U = T.einsum("bth,bhtv->bhtv", bc, U)
        o = T.add(T.einsum("bhgts,bhsv->bthgv", Bm, U),
                  T.einsum("bthgc,bthc,bhcv->bthgv", qc, gam, S))
        outs.append(o)
        E_last = E[:, :, C - 1]                                          # [B,H,s,c]
        S = T.add(T.einsum("bhc,bhcv->bhcv", gam[:, C - 1], S),
                  T.einsum("bhsc,bshc,bhsv->bhcv", E_last, kc, U))
    o = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
    return o, S.data


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass
class MixerGeometry:
    d_model: int
    n_q_heads: int
    n_kv_heads: int
    head_dim: int
    rope_theta: float = 1e4
    eps: float = 1e-6
    gate_activation: str = "silu"
    use_post_norm: bool = False
    qk_norm: bool = True
    chunk_size: int = 16

    @property
    def group(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    def validate(self) -> None:
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError("n_q_heads must be divisible by n_kv_heads")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary embeddings")
        if self.gate_activation not in ("silu", "sigmoid"):
            raise ValueError(f"unknown gate activation {self.gate_activation!r}")


def silu_identity_bias() -> float:
    """The ``b`` with ``b * sigmoid(b) = 1``; a SiLU gate with zero weights and
    this bias multiplies its input by 1."""
    return brentq(lambda b: b / (1.0 + math.exp(-b)) - 1.0, 0.0, 5.0, xtol=1e-15)


def _normal(rng, shape, dtype, std=0.02):
    return (rng.standard_normal(shape) * std).astype(dtype)


class Mixer:
    """Common parameter plumbing."""

    kind = ""

    def __init__(self, geom: MixerGeometry, params: dict[str, Tensor]):
        geom.validate()
        self.geom = geom
        self.p = params

    def params(self) -> dict[str, Tensor]:
        return self.p

    @property
    def dtype(self):
        return self.p["o_proj"].dtype


class Attention(Mixer):
    """Causal GQA softmax attention with per-head q/k RMSNorm and RoPE."""

    kind = "attention"

    @staticmethod
    def param_shapes(g: MixerGeometry) -> dict[str, tuple[int, ...]]:
        d, hq, hk, hd = g.d_model, g.n_q_heads, g.n_kv_heads, g.head_dim
        return {"q_proj": (d, hq * hd), "k_proj": (d, hk * hd), "v_proj": (d, hk * hd),
                "o_proj": (hq * hd, d), "q_norm": (hd,), "k_norm": (hd,)}

    @classmethod
    def init(cls, g: MixerGeometry, rng, dtype=np.float32) -> "Attention":
        p = {}
        for name, shape in cls.param_shapes(g).items():
            data = np.ones(shape, dtype=dtype) if name.endswith("norm") else _normal(rng, shape, dtype)
            p[name] = T.parameter(data, name=name)
        return cls(g, p)

    def _qkv(self, x: Tensor, pos: np.ndarray):
        g, p = self.geom, self.p
        B, Tn, _ = x.shape
        q = T.reshape(T.linear(x, p["q_proj"]), (B, Tn, g.n_q_heads, g.head_dim))
        k = T.reshape(T.linear(x, p["k_proj"]), (B, Tn, g.n_kv_heads, g.head_dim))
        v = T.reshape(T.linear(x, p["v_proj"]), (B, Tn, g.n_kv_heads, g.head_dim))
        q = T.rmsnorm(q, p["q_norm"], g.eps)
        k = T.rmsnorm(k, p["k_norm"], g.eps)
        cos, sin = rope_tables(pos, g.head_dim, g.rope_theta, x.dtype)
        return rope(q, cos, sin), rope(k, cos, sin), v

    def forward(self, x: Tensor, seg=None, return_cache: bool = False, capacity: int | None = None, **_):
        g = self.geom
        B, Tn, _ = x.shape
        runs = run_ids(seg, B, Tn)
        q, k, v = self._qkv(x, positions(runs))
        G, hk, hd = g.group, g.n_kv_heads, g.head_dim
        qh = T.reshape(T.transpose(T.reshape(q, (B, Tn, hk, G, hd)), (0, 2, 3, 1, 4)), (B, hk, G * Tn, hd))
        kh = T.transpose(k, (0, 2, 3, 1))                                   # [B,hk,hd,T]
        vh = T.transpose(v, (0, 2, 1, 3))                                   # [B,hk,T,hd]
        scores = T.scale(T.matmul(qh, kh), 1.0 / math.sqrt(hd))
        allowed = np.tril(np.ones((Tn, Tn), dtype=bool))[None] & (runs[:, :, None] == runs[:, None, :])
        blocked = ~np.tile(allowed, (1, G, 1))[:, None]
        probs = T.softmax(T.masked_fill(scores, blocked, -np.inf))
        o = T.matmul(probs, vh)                                             # [B,hk,G*T,hd]
        o = T.reshape(T.transpose(T.reshape(o, (B, hk, G, Tn, hd)), (0, 3, 1, 2, 4)), (B, Tn, g.n_q_heads * hd))
        out = T.linear(o, self.p["o_proj"])
        if not return_cache:
            return out
        cap = capacity or Tn
        kc = np.zeros((B, hk, cap, hd), dtype=x.dtype)
        vc = np.zeros((B, hk, cap, hd), dtype=x.dtype)
        kc[:, :, :Tn] = np.transpose(k.data, (0, 2, 1, 3))
        vc[:, :, :Tn] = vh.data
        return out, {"k": kc, "v": vc, "len": Tn}

    def empty_cache(self, B: int, capacity: int) -> dict:
        g = self.geom
        z = np.zeros((B, g.n_kv_heads, capacity, g.head_dim), dtype=self.dtype)
        return {"k": z, "v": z.copy(), "len": 0}

    def step(self, x: np.ndarray, cache: dict) -> np.ndarray:
        """One decoding step for ``x[B, d_model]``; mutates ``cache``."""
        g = self.geom
        B = x.shape[0]
        n = cache["len"]
        if n >= cache["k"].shape[2]:
            raise ValueError("attention cache capacity exhausted")
        with T.no_grad():
            q, k, v = self._qkv(T.tensor(x[:, None]), np.full((B, 1), n))
        cache["k"][:, :, n] = k.data[:, 0]
        cache["v"][:, :, n] = v.data[:, 0]
        cache["len"] = n + 1
        K, V = cache["k"][:, :, : n + 1], cache["v"][:, :, : n + 1]
        qh = q.data[:, 0].reshape(B, g.n_kv_heads, g.group, g.head_dim)
        s = (qh @ np.swapaxes(K, -1, -2)) * np.asarray(1.0 / math.sqrt(g.head_dim), dtype=x.dtype)
        s = s - s.max(-1, keepdims=True)
        w = np.exp(s)
        w = w / w.sum(-1, keepdims=True)
        o = (w @ V).reshape(B, g.n_q_heads * g.head_dim)
        return o @ self.p["o_proj"].data


class Recurrent(Mixer):
    """Matrix-memory mixer: projections, short convs, L2-normalized q/k, one of
    the four recurrences, output gate, optional per-head norm, output proj."""

    def __init__(self, geom: MixerGeometry, params: dict[str, Tensor], kind: str):
        if kind not in RECURRENT_KINDS:
            raise ValueError(f"unknown recurrent mixer kind {kind!r}")
        super().__init__(geom, params)
        self.kind = kind

    @staticmethod
    def param_shapes(g: MixerGeometry, kind: str) -> dict[str, tuple[int, ...]]:
        d, hq, hk, hd = g.d_model, g.n_q_heads, g.n_kv_heads, g.head_dim
        s = {"q_proj": (d, hq * hd), "k_proj": (d, hk * hd), "v_proj": (d, hk * hd),
             "o_proj": (hq * hd, d),
             "q_conv": (CONV_WIDTH, hq * hd), "k_conv": (CONV_WIDTH, hk * hd), "v_conv": (CONV_WIDTH, hk * hd)}
        if kind in ("kda", "gdn", "delta"):
            s["beta_proj"] = (d, hk)
            s["beta_bias"] = (hk,)
        if kind == "kda":
            s["alpha_proj"] = (d, hk * hd)
            s["alpha_bias"] = (hk * hd,)
        elif kind == "gdn":
            s["alpha_proj"] = (d, hk)
            s["alpha_bias"] = (hk,)
        s["gate_proj"] = (d, hq * hd)
        s["gate_bias"] = (hq * hd,)
        if g.use_post_norm:
            s["post_norm"] = (hd,)
        return s

    @classmethod
    def init(cls, g: MixerGeometry, rng, kind: str = "kda", dtype=np.float32) -> "Recurrent":
        p = {}
        for name, shape in cls.param_shapes(g, kind).items():
            if name.endswith("_conv"):
                data = np.zeros(shape, dtype=dtype)
                data[-1] = 1.0
            elif name == "gate_proj":
                data = np.zeros(shape, dtype=dtype)
            elif name == "gate_bias":
                b = silu_identity_bias() if g.gate_activation == "silu" else 0.0
                data = np.full(shape, b, dtype=dtype)
            elif name == "beta_bias":
                data = np.zeros(shape, dtype=dtype)
            elif name == "alpha_bias":
                keep = rng.uniform(0.9, 0.999, size=shape)
                data = np.log(keep / (1.0 - keep)).astype(dtype)
            elif name == "post_norm":
                data = np.ones(shape, dtype=dtype)
            else:
                data = _normal(rng, shape, dtype)
            p[name] = T.parameter(data, name=name)
        return cls(g, p, kind)

    # -- shared pieces ------------------------------------------------------

    def _gates(self, x: Tensor, log_space: bool):
        """Returns (beta[B,T,H] or None, alpha-or-log-alpha[B,T,H,dk] or None)."""
        g, p = self.geom, self.p
        B, Tn, _ = x.shape
        beta = alpha = None
        if "beta_proj" in p:
            beta = T.sigmoid(T.linear(x, p["beta_proj"], p["beta_bias"]))
        if "alpha_proj" in p:
            z = T.linear(x, p["alpha_proj"], p["alpha_bias"])
            a = T.log_sigmoid(z) if log_space else T.sigmoid(z)
            if self.kind == "gdn":
                a = T.matmul(T.reshape(a, (B, Tn, g.n_kv_heads, 1)),
                             T.tensor(np.ones((1, g.head_dim), dtype=x.dtype)))
            else:
                a = T.reshape(a, (B, Tn, g.n_kv_heads, g.head_dim))
            alpha = a
        return beta, alpha

    def _finish(self, o: Tensor, x: Tensor) -> Tensor:
        g, p = self.geom, self.p
        B, Tn, _ = x.shape
        o = T.reshape(o, (B, Tn, g.n_q_heads * g.head_dim))
        z = T.linear(x, p["gate_proj"], p["gate_bias"])
        gate = T.silu(z) if g.gate_activation == "silu" else T.sigmoid(z)
        o = T.mul(o, gate)
        if g.use_post_norm:
            o = T.reshape(T.rmsnorm(T.reshape(o, (B, Tn, g.n_q_heads, g.head_dim)), p["post_norm"], g.eps),
                          (B, Tn, g.n_q_heads * g.head_dim))
        return T.linear(o, p["o_proj"])

    def forward(self, x: Tensor, seg=None, mode: str = "chunked", chunk_size: int | None = None,
                return_cache: bool = False, **_):
        g, p = self.geom, self.p
        B, Tn, _ = x.shape
        runs = run_ids(seg, B, Tn)
        rs = resets(runs)
        qx, kx, vx = (T.linear(x, p[n]) for n in ("q_proj", "k_proj", "v_proj"))
        q = short_conv(qx, p["q_conv"], runs)
        k = short_conv(kx, p["k_conv"], runs)
        v = short_conv(vx, p["v_conv"], runs)
        q = T.reshape(q, (B, Tn, g.n_kv_heads, g.group, g.head_dim))
        k = T.reshape(k, (B, Tn, g.n_kv_heads, g.head_dim))
        v = T.reshape(v, (B, Tn, g.n_kv_heads, g.head_dim))
        if g.qk_norm:
            q, k = T.l2_normalize(q), T.l2_normalize(k)
        delta = self.kind != "linear_attn"
        if mode == "sequential":
            beta, alpha = self._gates(x, log_space=False)
            o, S = kda_scan(q, k, v, beta, alpha, rs, delta=delta)
        elif mode == "chunked":
            beta, log_alpha = self._gates(x, log_space=True)
            o, S = kda_chunked(q, k, v, beta, log_alpha, rs, chunk_size or g.chunk_size, delta=delta)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        bad = ~np.isfinite(o.data)
        if bad.any():
            t = int(np.argwhere(bad.reshape(B, Tn, -1).any(axis=(0, 2)))[0, 0])
            raise NumericError(f"non-finite {self.kind} output at step {t}")
        out = self._finish(o, x)
        if not return_cache:
            return out
        cache = {"S": S.copy(), "conv": {}}
        for name, pre in (("q", qx), ("k", kx), ("v", vx)):
            tail = np.zeros((B, CONV_WIDTH - 1, pre.shape[-1]), dtype=x.dtype)
            n = min(Tn, CONV_WIDTH - 1)
            if n:
                tail[:, CONV_WIDTH - 1 - n:] = pre.data[:, Tn - n:]
            cache["conv"][name] = tail
        return out, cache

    def empty_cache(self, B: int, capacity: int = 0) -> dict:
        g = self.geom
        dt = self.dtype
        widths = {"q": g.n_q_heads * g.head_dim, "k": g.n_kv_heads * g.head_dim, "v": g.n_kv_heads * g.head_dim}
        return {"S": np.zeros((B, g.n_kv_heads, g.head_dim, g.head_dim), dtype=dt),
                "conv": {n: np.zeros((B, CONV_WIDTH - 1, w), dtype=dt) for n, w in widths.items()}}

    def step(self, x: np.ndarray, cache: dict) -> np.ndarray:
        """One decoding step for ``x[B, d_model]``; mutates ``cache``."""
        g, p = self.geom, self.p
        B = x.shape[0]
        feats = {}
        for name in ("q", "k", "v"):
            cur = x @ p[f"{name}_proj"].data
            win = np.concatenate([cache["conv"][name], cur[:, None]], axis=1)   # [B,W,C]
            feats[name] = np.einsum("bwc,wc->bc", win, p[f"{name}_conv"].data)
            cache["conv"][name] = win[:, 1:]
        q = feats["q"].reshape(B, g.n_kv_heads, g.group, g.head_dim)
        k = feats["k"].reshape(B, g.n_kv_heads, g.head_dim)
        v = feats["v"].reshape(B, g.n_kv_heads, g.head_dim)
        if g.qk_norm:
            q = q / np.sqrt((q * q).sum(-1, keepdims=True) + T.L2_EPS)
            k = k / np.sqrt((k * k).sum(-1, keepdims=True) + T.L2_EPS)
        with T.no_grad():
            xt = T.tensor(x[:, None])
            beta, alpha = self._gates(xt, log_space=False)
        S = cache["S"]
        if self.kind == "linear_attn":
            S = S + k[..., :, None] * v[..., None, :]
        else:
            b = beta.data[:, 0]
            a = alpha.data[:, 0] if alpha is not None else np.ones_like(k)
            St = S * a[..., None]
            u = v - (k[:, :, None, :] @ St)[:, :, 0]
            S = St + (b[..., None, None] * k[..., None]) * u[:, :, None, :]
        cache["S"] = S
        o = q @ S                                                             # [B,H,G,dv]
        with T.no_grad():
            out = self._finish(T.tensor(o.reshape(B, 1, -1)), T.tensor(x[:, None]))
        return out.data[:, 0]


def build_mixer(kind: str, geom: MixerGeometry, rng, dtype=np.float32) -> Mixer:
    if kind == "attention":
        return Attention.init(geom, rng, dtype)
    return Recurrent.init(geom, rng, kind, dtype)


def mixer_param_shapes(kind: str, geom: MixerGeometry) -> dict[str, tuple[int, ...]]:
    if kind == "attention":
        return Attention.param_shapes(geom)
    return Recurrent.param_shapes(geom, kind)


def kda_layer_forward(mixer: Recurrent, x: Tensor, seg=None) -> Tensor:
    """Token-by-token evaluation (the reference path)."""
    return mixer.forward(x, seg, mode="sequential")


def kda_layer_chunked(mixer: Recurrent, x: Tensor, seg=None, chunk_size: int = 16) -> Tensor:
    return mixer.forward(x, seg, mode="chunked", chunk_size=chunk_size)


def attention_forward(mixer: Attention, x: Tensor, seg=None) -> Tensor:
    return mixer.forward(x, seg)
