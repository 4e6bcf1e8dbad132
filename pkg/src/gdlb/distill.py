"""Multi-stage distillation: mixer alignment, block alignment, end-to-end KD.

Stage ids: ``s1`` (mixer L2, only recurrent q/k projections train), ``s2``
(block L2, recurrent mixers and MLPs train, norms frozen), ``s3a`` /
``s3b`` (forward-KL on logits, attention layers and embeddings frozen by
default; ``s3b`` uses completion-only masks) and ``combined`` (one KD phase
over a pretrain/instruct mixture).  ``teacher`` is plain cross-entropy
pretraining with everything trainable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .data import DataError, DatasetRecord, MixSpec, PackedBatch, mix_datasets, pack_sequences
from .losses import kd_loss, lm_targets, masked_mse, sft_loss
from .model import GROUPS, Model, grouped
from .optim import AdamW, AdamWConfig, wsd_schedule
from .rng import substream
from .tensor import ContractError, NumericError

STAGES = ("teacher", "s1", "s2", "s3a", "s3b", "combined")
LOSSES = ("l2_mixer", "l2_block", "kl", "ce", "kl+ce")
STAGE_ORDER = {"s1": 0, "s2": 1, "s3a": 2, "s3b": 3, "combined": 2}

# Reference learning rates and token budgets of the full-scale recipe.
REFERENCE_LR = {"s1": 5e-4, "s2": 1e-4, "s3a": 2.5e-5, "s3b": 2.5e-5}
REFERENCE_TOKENS = {"s1": 30_000_000, "s2": 30_000_000, "s3a": 500_000_000, "s3b": 500_000_000}
# Desk budgets keep the 30:30:500:500 proportions at 1/60 scale.
DESK_TOKENS = {"s1": 500_000, "s2": 500_000, "s3a": 4_000_000, "s3b": 4_000_000}


@dataclass
class StageConfig:
    stage: str
    tokens: int
    max_lr: float
    seq_len: int = 128
    batch_size: int = 16
    warmup_frac: float = 0.1
    decay_frac: float = 0.1
    min_lr_ratio: float = 0.02
    loss: str = ""
    kd_temperature: float = 1.0
    top_k: int | None = None
    alpha_ce: float = 0.0
    mask_mode: str = ""
    frozen: tuple[str, ...] | None = None
    freeze_attn: bool = True
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.95)
    eval_every: int = 50
    heldout_batches: int = 4
    mix: tuple[tuple[str, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; valid: {STAGES}")
        defaults = {"teacher": ("ce", "full"), "s1": ("l2_mixer", "full"), "s2": ("l2_block", "full"),
                    "s3a": ("kl", "full"), "s3b": ("kl", "completion_only"), "combined": ("kl", "auto")}
        loss, mask = defaults[self.stage]
        self.loss = self.loss or loss
        self.mask_mode = self.mask_mode or mask
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss == "kl+ce" and self.alpha_ce <= 0:
            raise ValueError("loss kl+ce needs alpha_ce > 0")
        if self.frozen is None:
            self.frozen = self.default_frozen()
        self.frozen = tuple(self.frozen)
        bad = set(self.frozen) - set(GROUPS)
        if bad:
            raise ValueError(f"unknown parameter groups {sorted(bad)}; valid: {GROUPS}")
        self.betas = tuple(self.betas)
        self.mix = tuple(tuple(m) for m in self.mix)
        if self.stage == "combined" and not self.mix:
            raise ValueError("combined stage needs a mix spec")

    def default_frozen(self) -> tuple[str, ...]:
        s = self.stage
        if s == "teacher":
            return ()
        if s == "s1":
            return tuple(g for g in GROUPS if g != "mixer_qk")
        if s == "s2":
            return ("embeddings", "layer_norms", "attention_layers")
        return ("attention_layers", "embeddings") if self.freeze_attn else ("embeddings",)

    def steps(self) -> int:
        return max(1, self.tokens // (self.batch_size * self.seq_len))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        d["mix"] = [list(m) for m in self.mix]
        d["betas"] = list(self.betas)
        return d


@dataclass
class StageReport:
    stage: str
    steps: int = 0
    metrics: list[dict] = field(default_factory=list)
    heldout_entry: float = float("nan")
    heldout_exit: float = float("nan")
    kl_entry: float = float("nan")
    kl_exit: float = float("nan")
    checksums_before: dict[str, str] = field(default_factory=dict)
    checksums_after: dict[str, str] = field(default_factory=dict)
    per_source: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def frozen_intact(self) -> bool:
        return self.checksums_before == self.checksums_after

    def to_dict(self) -> dict:
        return asdict(self)


def checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# Data iteration
# ---------------------------------------------------------------------------

def batch_stream(records: Sequence[DatasetRecord], seq_len: int, batch_size: int, mask_mode: str,
                 seed: int) -> Iterator[PackedBatch]:
    """Endless stream: reshuffle every epoch with a seeded permutation."""
    if not records:
        raise DataError("no training records")
    epoch = 0
    while True:
        order = substream(seed, "epoch", epoch).permutation(len(records))
        produced = False
        for b in pack_sequences((records[i] for i in order), seq_len, _pack_mode(mask_mode), batch_size,
                                drop_last=True, per_record_auto=mask_mode == "auto"):
            produced = True
            yield b
        if not produced:
            raise DataError("records too few or too long to fill one batch")
        epoch += 1


def _pack_mode(mask_mode: str) -> str:
    return "full" if mask_mode == "auto" else mask_mode


def fixed_batches(records: Sequence[DatasetRecord], seq_len: int, batch_size: int, mask_mode: str,
                  n_batches: int) -> list[PackedBatch]:
    out = []
    for b in pack_sequences(records, seq_len, _pack_mode(mask_mode), batch_size,
                            per_record_auto=mask_mode == "auto"):
        out.append(b)
        if len(out) == n_batches:
            break
    return out


# ---------------------------------------------------------------------------
# Losses per stage
# ---------------------------------------------------------------------------

def replaced_layers(student: Model) -> list[int]:
    return [i for i, k in enumerate(student.cfg.mixers) if k != "attention"]


def teacher_traces(teacher: Model, batch: PackedBatch) -> list[dict]:
    traces: list[dict] = []
    with T.no_grad():
        teacher.forward(batch.tokens, batch.seg, traces=traces)
    return traces


def alignment_loss(teacher: Model, student: Model, batch: PackedBatch, kind: str) -> T.Tensor:
    """Mean over replaced layers of the L2 gap under teacher forcing: each
    student layer reads the teacher's hidden state entering that layer."""
    layers = replaced_layers(student)
    traces = teacher_traces(teacher, batch)
    mask = batch.nonpad()
    total = None
    for i in layers:
        x = T.tensor(traces[i]["x"].data)
        if kind == "l2_mixer":
            out = student.mixer_out(i, x, batch.seg)
            target = traces[i]["mix"].data
        else:
            out = student.block(i, x, batch.seg)
            target = traces[i]["out"].data
        li = masked_mse(out, target, mask)
        total = li if total is None else T.add(total, li)
    if total is None:
        return T.tensor(np.zeros((), dtype=student.dtype))
    return T.scale(total, 1.0 / len(layers))


def stage_loss(cfg: StageConfig, teacher: Model | None, student: Model, batch: PackedBatch) -> T.Tensor:
    if cfg.loss in ("l2_mixer", "l2_block"):
        return alignment_loss(teacher, student, batch, cfg.loss)
    labels, mask = lm_targets(batch.tokens, batch.target_mask())
    logits = student.forward(batch.tokens, batch.seg)
    if cfg.loss == "ce":
        return sft_loss(logits, labels, mask)
    with T.no_grad():
        tl = teacher.forward(batch.tokens, batch.seg).data
    return kd_loss(tl, logits, mask, cfg.kd_temperature, cfg.top_k,
                   cfg.alpha_ce if cfg.loss == "kl+ce" else 0.0, labels)


def heldout_kl(teacher: Model, student: Model, batches: Sequence[PackedBatch], temperature: float = 1.0) -> float:
    """Token-weighted mean forward KL over the batches' target positions."""
    tot, n = 0.0, 0
    with T.no_grad():
        for b in batches:
            _, mask = lm_targets(b.tokens, b.target_mask())
            k = int(mask.sum())
            if k == 0:
                continue
            tl = teacher.forward(b.tokens, b.seg).data
            sl = student.forward(b.tokens, b.seg)
            tot += kd_loss(tl, sl, mask, temperature).item() * k
            n += k
    return tot / n if n else float("nan")


def per_source_kl(teacher: Model, student: Model, batches: Sequence[PackedBatch]) -> dict[str, float]:
    sums: dict[int, list[float]] = {}
    with T.no_grad():
        for b in batches:
            _, mask = lm_targets(b.tokens, b.target_mask())
            tl = teacher.forward(b.tokens, b.seg).data
            sl = student.forward(b.tokens, b.seg)
            src = np.zeros_like(mask, dtype=np.int64)
            src[:, :-1] = b.source[:, 1:]
            for s in np.unique(src[mask]):
                m = mask & (src == s)
                acc = sums.setdefault(int(s), [0.0, 0])
                acc[0] += kd_loss(tl, sl, m).item() * int(m.sum())
                acc[1] += int(m.sum())
    return {str(s): v[0] / v[1] for s, v in sorted(sums.items()) if v[1]}


def evaluate_loss(cfg: StageConfig, teacher, student, batches) -> float:
    if not batches:
        return float("nan")
    with T.no_grad():
        vals = [stage_loss(cfg, teacher, student, b).item() for b in batches]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def trainable_names(model: Model, cfg: StageConfig) -> list[str]:
    groups = grouped(model)
    frozen = set(cfg.frozen)
    return [n for g, names in groups.items() if g not in frozen for n in names]


def run_stage(teacher: Model | None, student: Model, cfg: StageConfig, train: Sequence[DatasetRecord],
              heldout: Sequence[DatasetRecord], datasets: dict[str, Sequence[DatasetRecord]] | None = None,
              metrics_path: str | Path | None = None, log=None) -> StageReport:
    """Train ``student`` in place for one stage and report."""
    if cfg.stage != "teacher" and teacher is None:
        raise ContractError(f"stage {cfg.stage} needs a teacher")
    if cfg.stage == "combined":
        if not datasets:
            raise ContractError("combined stage needs named datasets for its mix")
        spec = MixSpec(list(cfg.mix))
        n = sum(len(datasets[nm]) for nm, _ in spec.parts)
        train = list(mix_datasets(spec, datasets, cfg.seed, n=n))
    report = StageReport(cfg.stage, config=cfg.to_dict())
    train_names = set(trainable_names(student, cfg))
    frozen_names = [n for n in student.params if n not in train_names]
    report.checksums_before = {n: checksum(student.params[n].data) for n in frozen_names}
    for n, p in student.params.items():
        p.requires_grad = n in train_names
    opt = AdamW({n: student.params[n] for n in student.params if n in train_names},
                AdamWConfig(cfg.betas, 1e-8, cfg.weight_decay, cfg.grad_clip))
    held = fixed_batches(heldout, cfg.seq_len, cfg.batch_size, cfg.mask_mode, cfg.heldout_batches)
    kl_batches = fixed_batches(heldout, cfg.seq_len, cfg.batch_size, "full", cfg.heldout_batches)
    if cfg.stage != "teacher":
        report.kl_entry = heldout_kl(teacher, student, kl_batches)
    report.heldout_entry = evaluate_loss(cfg, teacher, student, held)
    total = cfg.steps()
    stream = batch_stream(train, cfg.seq_len, cfg.batch_size, cfg.mask_mode, cfg.seed)
    snapshot = {n: student.params[n].data.copy() for n in train_names}
    out = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    running = []
    try:
        for step in range(total):
            batch = next(stream)
            lr = wsd_schedule(step, total, cfg.max_lr, cfg.warmup_frac, cfg.decay_frac, cfg.min_lr_ratio)
            with T.Tape() as tape:
                loss = stage_loss(cfg, teacher, student, batch)
            lv = loss.item()
            if not np.isfinite(lv):
                for n, arr in snapshot.items():
                    student.params[n].data[...] = arr
                raise NumericError(f"stage {cfg.stage}: non-finite loss at step {step}; restored last good parameters")
            grads = T.backward(tape, loss)
            gmap = {}
            for n, p in student.params.items():
                g = grads.get(p)
                if g is None:
                    continue
                if n in train_names:
                    gmap[n] = g
            opt.step(gmap, lr)
            running.append(lv)
            last = step == total - 1
            if (step + 1) % cfg.eval_every == 0 or last:
                h = evaluate_loss(cfg, teacher, student, held)
                rec = {"stage": cfg.stage, "step": step + 1, "lr": lr, "train_loss": float(np.mean(running)),
                       "heldout_loss": h}
                running = []
                report.metrics.append(rec)
                if out:
                    out.write(json.dumps(rec, sort_keys=True) + "\n")
                    out.flush()
                if log:
                    log(rec)
                if np.isfinite(h):
                    snapshot = {n: student.params[n].data.copy() for n in train_names}
    finally:
        if out:
            out.close()
        for p in student.params.values():
            p.requires_grad = True
    report.steps = total
    report.heldout_exit = report.metrics[-1]["heldout_loss"] if report.metrics else report.heldout_entry
    if cfg.stage != "teacher":
        report.kl_exit = heldout_kl(teacher, student, kl_batches)
    if cfg.stage == "combined":
        report.per_source = per_source_kl(teacher, student, kl_batches)
    report.checksums_after = {n: checksum(student.params[n].data) for n in frozen_names}
    if not report.frozen_intact():
        changed = [n for n in frozen_names if report.checksums_before[n] != report.checksums_after[n]]
        raise ContractError(f"frozen parameters changed during {cfg.stage}: {changed[:5]}")
    return report


def validate_plan(stages: Sequence[str]) -> None:
    """Stages must follow s1 -> s2 -> (s3a -> s3b | combined); any may be skipped."""
    last = -1
    seen = set()
    for s in stages:
        if s not in STAGE_ORDER:
            raise ContractError(f"stage {s!r} cannot appear in a distillation plan")
        if STAGE_ORDER[s] <= last:
            raise ContractError(f"stage order violation at {s!r} in {list(stages)}")
        if s == "combined" and ({"s3a", "s3b"} & seen):
            raise ContractError("combined stage replaces s3a/s3b")
        if s in ("s3a", "s3b") and "combined" in seen:
            raise ContractError("combined stage replaces s3a/s3b")
        last = STAGE_ORDER[s]
        seen.add(s)


def run_pipeline(teacher: Model, student: Model, plan: Sequence[StageConfig],
                 data_for: dict[str, tuple[Sequence[DatasetRecord], Sequence[DatasetRecord]]],
                 datasets: dict[str, Sequence[DatasetRecord]] | None = None, out_dir: str | Path | None = None,
                 log=None) -> tuple[Model, list[StageReport]]:
    """Run stages in order; ``data_for[stage] = (train, heldout)``.  With
    ``out_dir`` a checkpoint and report are written after each stage."""
    from .model import save_checkpoint

    validate_plan([c.stage for c in plan])
    reports = []
    for cfg in plan:
        train, held = data_for[cfg.stage]
        mpath = Path(out_dir) / "metrics.jsonl" if out_dir else None
        rep = run_stage(teacher, student, cfg, train, held, datasets, mpath, log)
        student.meta["stage"] = cfg.stage
        reports.append(rep)
        if out_dir:
            save_checkpoint(student, Path(out_dir) / f"student_{cfg.stage}.gdlb")
            with open(Path(out_dir) / f"report_{cfg.stage}.json", "w") as f:
                json.dump(rep.to_dict(), f, sort_keys=True, indent=1)
    return student, reports
