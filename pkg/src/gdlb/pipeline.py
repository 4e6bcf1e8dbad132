"""Command implementations behind the ``gdlb`` CLI.

Every command takes a flat, fully resolved config (``dict`` of scalars) and
an output root, writes its artifacts plus a ``<name>.config`` snapshot next
to them, and returns a small summary dict.  Layout of the output root::

    data/        generated datasets + manifest.json
    teacher/     model.gdlb, report.json, metrics.jsonl, instruct_*.jsonl
    students/N/  <stage>.gdlb, <stage>.report.json, metrics.jsonl
    select/      layout.json, trace.jsonl
    eval/        <student>-<stage>.json / .txt
    profile/     memory.tsv, prefill.tsv, decode.tsv, summary.json
    report/      report.md, summary.json
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import data as D
from .distill import DESK_TOKENS, STAGE_ORDER, StageConfig, run_stage
from .evaluate import EvalReport, eval_generation, gap_report
from .model import (HybridLayout, InitMode, Model, ModelConfig, build_student_from_teacher, build_teacher,
                    load_checkpoint, save_checkpoint)
from .rng import subseed

log = logging.getLogger("gdlb")


class UsageError(ValueError):
    """Bad command line or config (exit code 1)."""


class MissingInput(D.DataError):
    """A prerequisite file is absent (exit code 2)."""


# ---------------------------------------------------------------------------
# Config keys and presets
# ---------------------------------------------------------------------------

COMMON = {"seed": 0}

DEFAULTS: dict[str, dict] = {
    "gen-data": {
        "markov_tokens": 30000, "mean_doc_len": 48, "ar_pairs": 8, "ar_train": 6000, "repeat_docs": 6000,
        "task_records": 1500, "niah_train": 400, "niah_train_len": 64, "ar_eval": 200, "niah_eval_len": 96,
        "niah_eval_per_kind": 20, "heldout_tokens": 6000,
    },
    "train-teacher": {
        "steps": 900, "lr": 3e-3, "seq_len": 128, "batch_size": 16, "eval_every": 100, "dtype": "float32",
    },
    "distill": {
        "stage": "s1", "student": "hybrid", "layout": "select", "k": 2, "kind": "kda", "init": "VO",
        "freeze_attn": True, "from": "auto", "seq_len": 128, "batch_size": 16, "eval_every": 50,
        "s1_tokens": DESK_TOKENS["s1"], "s2_tokens": DESK_TOKENS["s2"], "s3a_tokens": DESK_TOKENS["s3a"],
        "s3b_tokens": DESK_TOKENS["s3b"], "combined_tokens": DESK_TOKENS["s3a"],
        "s1_lr": 2e-3, "s2_lr": 1e-3, "s3a_lr": 1e-3, "s3b_lr": 5e-4, "combined_lr": 1e-3,
        "instruct_prompts": 1500, "instruct_max_new": 16, "instruct_source": "teacher", "pretrain_share": 0.15,
    },
    "select-layers": {
        "strategy": "beam_add", "k": 2, "width": "all", "linear_student": "linear", "linear_stage": "latest",
        "suite_ar": 100, "suite_tokens": 4000, "micro_budget": 0, "total_budget": 0,
    },
    "eval": {
        "student": "hybrid", "stage": "latest", "n_candidates": 4, "seeds": "1,2,3", "decode": "greedy",
        "families": "ar,niah,instruct", "instruct_eval": 100,
    },
    "profile": {
        "student": "linear", "stage": "latest", "prefill_lengths": "256,512,1024,2048,4096",
        "decode_contexts": "256,1024,4096", "decode_steps": 16, "warmup": 3, "reps": 5,
        "budget_bytes": 64_000_000, "sweep_context": 1024, "hard_cap": 64,
    },
    "report": {},
}

# Reduced budgets for a single-core machine; ``desk`` is the default above.
PRESETS: dict[str, dict[str, dict]] = {
    "desk": {},
    "acceptance": {
        "train-teacher": {"steps": 900},
        "distill": {"s1_tokens": 80_000, "s2_tokens": 80_000, "s3a_tokens": 400_000, "s3b_tokens": 160_000,
                    "instruct_prompts": 600},
        "select-layers": {"suite_ar": 64, "suite_tokens": 2000},
        "eval": {"instruct_eval": 48},
        "profile": {"warmup": 1, "reps": 3},
    },
    "smoke": {
        "gen-data": {"markov_tokens": 3000, "ar_train": 300, "repeat_docs": 300, "task_records": 100,
                     "niah_train": 20, "ar_eval": 16, "niah_eval_per_kind": 2, "heldout_tokens": 1500},
        "train-teacher": {"steps": 6, "eval_every": 3, "seq_len": 64, "batch_size": 4},
        "distill": {"s1_tokens": 1024, "s2_tokens": 1024, "s3a_tokens": 1024, "s3b_tokens": 1024,
                    "combined_tokens": 1024, "seq_len": 64, "batch_size": 4, "eval_every": 2,
                    "instruct_prompts": 16, "instruct_max_new": 4, "instruct_source": "reference"},
        "select-layers": {"suite_ar": 8, "suite_tokens": 300},
        "eval": {"instruct_eval": 8, "seeds": "1"},
        "profile": {"prefill_lengths": "16,32", "decode_contexts": "16,32", "decode_steps": 2, "warmup": 0,
                    "reps": 1, "sweep_context": 16, "hard_cap": 2, "budget_bytes": 10_000_000},
    },
}


def _coerce(key: str, raw, default):
    if isinstance(raw, str) and not isinstance(default, str):
        r = raw.strip()
        try:
            if isinstance(default, bool):
                if r.lower() in ("true", "1", "yes"):
                    return True
                if r.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(r)
            if isinstance(default, int):
                return int(r)
            if isinstance(default, float):
                return float(r)
        except ValueError:
            raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def resolve(command: str, preset: str = "desk", files: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- preset <- config file <- overrides; unknown keys rejected."""
    if command not in DEFAULTS:
        raise UsageError(f"unknown command {command!r}")
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; valid: {sorted(PRESETS)}")
    base = {**COMMON, **DEFAULTS[command], **PRESETS[preset].get(command, {})}
    out = dict(base)
    for src in (files or {}), (overrides or {}):
        for k, v in src.items():
            if k not in base:
                raise UsageError(f"unknown config key {k!r} for {command}; valid: {sorted(base)}")
            out[k] = _coerce(k, v, base[k])
    out["preset"] = preset
    return out


def read_config(path: str | Path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def write_config(path: Path, cfg: dict, command: str) -> None:
    lines = [f"# gdlb {command}"] + [f"{k} = {cfg[k]}" for k in sorted(cfg) if k != "preset"]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _ints(s) -> list[int]:
    return [int(x) for x in str(s).split(",") if x.strip()]


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} already exists; pass --force to overwrite")


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"missing {what}: {path}")
    return path


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

DATA_FILES = ("pretrain_a", "pretrain_b", "ar_train", "repeat", "tasks", "niah_train", "heldout", "ar_eval",
              "niah_eval")
TRAIN_FILES = ("pretrain_a", "pretrain_b", "ar_train", "repeat", "tasks", "niah_train")


def chains(seed: int):
    return (D.MarkovChain.make(subseed(seed, "data", "chain-a"), D.DOMAIN_A, 1),
            D.MarkovChain.make(subseed(seed, "data", "chain-b"), D.DOMAIN_B, 1))


def cmd_gen_data(cfg: dict, out: Path, force: bool = False) -> dict:
    ddir = out / "data"
    if ddir.exists() and any(ddir.iterdir()) and not force:
        raise UsageError(f"{ddir} is not empty; pass --force to overwrite")
    s = int(cfg["seed"])
    ca, cb = chains(s)
    sd = lambda name: subseed(s, "data", name)  # noqa: E731
    L = int(cfg["mean_doc_len"])
    sets = {
        "pretrain_a": D.gen_markov_corpus(sd("a"), cfg["markov_tokens"], chain=ca, vocab=D.DOMAIN_A, mean_doc_len=L),
        "pretrain_b": D.gen_markov_corpus(sd("b"), cfg["markov_tokens"], chain=cb, vocab=D.DOMAIN_B, mean_doc_len=L),
        "ar_train": D.gen_ar_examples(cfg["ar_pairs"], cfg["ar_train"], sd("ar")),
        "repeat": D.gen_repeat_docs(sd("repeat"), cfg["repeat_docs"]),
        "tasks": D.gen_task_records(D.TEMPLATES, cfg["task_records"], sd("tasks"), ca, cfg["ar_pairs"]),
        "niah_train": [D.gen_niah(cfg["niah_train_len"], D.NIAH_KINDS[i % 3], sd("niah") + i, ca)
                       for i in range(cfg["niah_train"])],
        "heldout": (D.gen_markov_corpus(sd("held-a"), cfg["heldout_tokens"] // 2, chain=ca, vocab=D.DOMAIN_A,
                                        mean_doc_len=L)
                    + D.gen_markov_corpus(sd("held-b"), cfg["heldout_tokens"] // 2, chain=cb, vocab=D.DOMAIN_B,
                                          mean_doc_len=L)
                    + D.gen_ar_examples(cfg["ar_pairs"], max(1, cfg["heldout_tokens"] // 100), sd("held-ar"))),
        "ar_eval": D.gen_ar_examples(cfg["ar_pairs"], cfg["ar_eval"], sd("ar-eval")),
        "niah_eval": [D.gen_niah(cfg["niah_eval_len"], kind, sd("niah-eval") + i, ca)
                      for kind in D.NIAH_KINDS for i in range(cfg["niah_eval_per_kind"])],
    }
    ddir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, recs in sets.items():
        path = ddir / f"{name}.jsonl"
        D.write_records(path, recs)
        files[name] = {"records": len(recs), "tokens": int(sum(len(r) for r in recs)), "sha256": _sha(path)}
    manifest = {"seed": s, "files": files}
    _dump(ddir / "manifest.json", manifest)
    write_config(ddir / "gen-data.config", cfg, "gen-data")
    return manifest


def load_data(out: Path, names) -> dict[str, list[D.DatasetRecord]]:
    return {n: D.read_records(_need(out / "data" / f"{n}.jsonl", f"dataset {n} (run gen-data)")) for n in names}


# ---------------------------------------------------------------------------
# train-teacher
# ---------------------------------------------------------------------------

def teacher_path(out: Path) -> Path:
    return out / "teacher" / "model.gdlb"


def load_teacher(out: Path) -> Model:
    return load_checkpoint(_need(teacher_path(out), "teacher checkpoint (run train-teacher)"))


def cmd_train_teacher(cfg: dict, out: Path, force: bool = False) -> dict:
    path = teacher_path(out)
    _guard(path, force)
    data = load_data(out, TRAIN_FILES + ("heldout",))
    train = [r for n in TRAIN_FILES for r in data[n]]
    dtype = np.dtype(cfg["dtype"])
    model = build_teacher(ModelConfig.desk(), subseed(cfg["seed"], "init", "teacher"), dtype)
    sc = StageConfig("teacher", cfg["steps"] * cfg["batch_size"] * cfg["seq_len"], cfg["lr"],
                     seq_len=cfg["seq_len"], batch_size=cfg["batch_size"], eval_every=cfg["eval_every"],
                     mask_mode="auto", seed=subseed(cfg["seed"], "train", "teacher"))
    tdir = path.parent
    tdir.mkdir(parents=True, exist_ok=True)
    metrics = tdir / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    rep = run_stage(None, model, sc, train, data["heldout"], metrics_path=metrics, log=_progress)
    model.meta.update({"stage": "teacher"})
    save_checkpoint(model, path)
    ar = eval_generation(model, load_data(out, ["ar_eval"])["ar_eval"])
    summary = {"steps": rep.steps, "heldout_exit": rep.heldout_exit, "ar_gen_accuracy": ar.accuracy}
    _dump(tdir / "report.json", {**rep.to_dict(), **summary})
    write_config(tdir / "train-teacher.config", cfg, "train-teacher")
    return summary


def _progress(rec: dict) -> None:
    log.info("%s step %d  train %.4f  heldout %.4f", rec["stage"], rec["step"], rec["train_loss"],
             rec["heldout_loss"])


# ---------------------------------------------------------------------------
# distill
# ---------------------------------------------------------------------------

def stage_file(out: Path, student: str, tag: str) -> Path:
    return out / "students" / student / f"{tag}.gdlb"


def stage_tag(stage: str, freeze_attn: bool) -> str:
    return stage if freeze_attn or stage not in ("s3a", "s3b", "combined") else f"{stage}_unfrozen"


def latest_stage(out: Path, student: str) -> str:
    have = [s for s in ("s3b", "combined", "s3a", "s2", "s1") if stage_file(out, student, s).exists()]
    if not have:
        raise MissingInput(f"no checkpoints for student {student!r}")
    return have[0]


def load_student(out: Path, student: str, stage: str = "latest") -> Model:
    if student == "teacher":
        return load_teacher(out)
    tag = latest_stage(out, student) if stage == "latest" else stage
    return load_checkpoint(_need(stage_file(out, student, tag), f"checkpoint {student}/{tag}"))


def resolve_layout(cfg: dict, out: Path, n_layers: int) -> HybridLayout:
    spec = str(cfg["layout"]).strip()
    if spec == "none":
        return HybridLayout.of([], n_layers)
    if spec == "uniform":
        from .select import uniform_select
        return uniform_select(n_layers, cfg["k"])
    if spec == "select":
        sel = json.loads(_need(out / "select" / "layout.json", "layer selection (run select-layers)").read_text())
        return HybridLayout.of(sel["layout"], n_layers)
    try:
        return HybridLayout.of(_ints(spec), n_layers)
    except ValueError as e:
        raise UsageError(f"bad layout {spec!r}: {e}") from e


def instruct_records(out: Path, teacher: Model, cfg: dict) -> list[D.DatasetRecord]:
    """Teacher-answered instruction pairs, generated once and cached."""
    src = cfg["instruct_source"]
    if src not in ("teacher", "reference"):
        raise UsageError("instruct_source must be 'teacher' or 'reference'")
    path = out / "teacher" / f"instruct_{src}.jsonl"
    if path.exists():
        return D.read_records(path)
    ca, _ = chains(cfg["seed"])
    seed = subseed(cfg["seed"], "data", "instr")
    if src == "reference":
        recs = D.gen_task_records(D.TEMPLATES, cfg["instruct_prompts"], seed, ca)
    else:
        res = D.gen_instruct_pairs(teacher, D.TEMPLATES, cfg["instruct_prompts"], seed, cfg["instruct_max_new"], ca)
        log.info("instruct pairs: %d kept, %d dropped empty", len(res.records), res.dropped_empty)
        recs = res.records
    if not recs:
        raise D.DataError("the teacher answered every instruction prompt with an empty completion")
    D.write_records(path, recs)
    return recs


def cmd_distill(cfg: dict, out: Path, force: bool = False) -> dict:
    stage = cfg["stage"]
    if stage not in STAGE_ORDER:
        raise UsageError(f"unknown stage {stage!r}; valid: {sorted(STAGE_ORDER)}")
    tag = stage_tag(stage, cfg["freeze_attn"])
    dest = stage_file(out, cfg["student"], tag)
    _guard(dest, force)
    teacher = load_teacher(out)
    # prerequisite: explicit ``from`` or the latest earlier frozen stage, else a fresh copy of the teacher
    src = cfg["from"]
    if src == "auto":
        earlier = [s for s in ("s1", "s2", "s3a") if STAGE_ORDER[s] < STAGE_ORDER[stage]
                   and stage_file(out, cfg["student"], s).exists()]
        src = earlier[-1] if earlier else "teacher"
    if src == "teacher":
        layout = resolve_layout(cfg, out, teacher.cfg.n_layers)
        try:
            init = InitMode(cfg["init"])
        except ValueError:
            raise UsageError(f"unknown init {cfg['init']!r}; valid: {[m.value for m in InitMode]}") from None
        student = build_student_from_teacher(teacher, layout, cfg["kind"], init,
                                             seed=subseed(cfg["seed"], "init", cfg["student"]))
    else:
        student = load_checkpoint(_need(stage_file(out, cfg["student"], src), f"prerequisite checkpoint {src}"))
    held = load_data(out, ["heldout"])["heldout"]
    if stage in ("s3b",):
        train = instruct_records(out, teacher, cfg)
    elif stage == "combined":
        train = []
    else:
        data = load_data(out, TRAIN_FILES)
        train = [r for n in TRAIN_FILES for r in data[n]]
    datasets = None
    mix = ()
    if stage == "combined":
        data = load_data(out, TRAIN_FILES)
        datasets = {"pretrain": [r for n in TRAIN_FILES for r in data[n]], "instruct": instruct_records(out, teacher, cfg)}
        p = float(cfg["pretrain_share"])
        mix = (("pretrain", p), ("instruct", 1.0 - p))
    sc = StageConfig(stage, cfg[f"{stage}_tokens"], cfg[f"{stage}_lr"], seq_len=cfg["seq_len"],
                     batch_size=cfg["batch_size"], freeze_attn=cfg["freeze_attn"], eval_every=cfg["eval_every"],
                     mix=mix, seed=subseed(cfg["seed"], "train", cfg["student"], stage))
    sdir = dest.parent
    sdir.mkdir(parents=True, exist_ok=True)
    metrics = sdir / f"{tag}.metrics.jsonl"
    metrics.unlink(missing_ok=True)
    rep = run_stage(teacher, student, sc, train, held, datasets, metrics, _progress)
    student.meta.update({"stage": tag, "from": src})
    save_checkpoint(student, dest)
    summary = {"stage": tag, "from": src, "steps": rep.steps, "kl_entry": rep.kl_entry, "kl_exit": rep.kl_exit,
               "frozen_intact": rep.frozen_intact(), "layout": list(student.cfg.attention_indices())}
    _dump(sdir / f"{tag}.report.json", {**rep.to_dict(), **summary})
    write_config(sdir / f"{tag}.config", cfg, "distill")
    return summary


# ---------------------------------------------------------------------------
# select-layers
# ---------------------------------------------------------------------------

def selection_suite(out: Path, cfg: dict):
    from .select import SelectionSuite
    data = load_data(out, ["ar_eval", "heldout"])
    held = data["heldout"]

    def take(lo, hi):
        picked, n = [], 0
        for r in held:
            body = r.tokens[1:-1]
            if len(body) and lo <= body.min() and body.max() < hi and not r.spans:
                picked.append(r)
                n += len(r)
                if n >= cfg["suite_tokens"]:
                    break
        return picked

    return SelectionSuite(data["ar_eval"][: cfg["suite_ar"]], take(*D.DOMAIN_A), take(*D.DOMAIN_B))


def cmd_select_layers(cfg: dict, out: Path, force: bool = False) -> dict:
    from .select import LayoutScorer, select_layers
    sdir = out / "select"
    _guard(sdir / "layout.json", force)
    teacher = load_teacher(out)
    stage = cfg["linear_stage"]
    linear = load_student(out, cfg["linear_student"], stage)
    width = cfg["width"] if cfg["width"] == "all" else int(cfg["width"])
    strategy = cfg["strategy"]
    if strategy == "greedy_aggregate":
        data = load_data(out, TRAIN_FILES + ("heldout",))
        res = select_layers(strategy, cfg["k"], n_layers=teacher.cfg.n_layers, teacher=teacher,
                            linear_student=linear, micro_budget=cfg["micro_budget"],
                            train=[r for n in TRAIN_FILES for r in data[n]], heldout=data["heldout"],
                            total_budget=cfg["total_budget"] or None, seed=subseed(cfg["seed"], "train", "select"))
    else:
        try:
            scorer = LayoutScorer(teacher, linear, selection_suite(out, cfg))
            res = select_layers(strategy, cfg["k"], scorer, width=width)
        except ValueError as e:
            if isinstance(e, D.DataError):
                raise
            raise UsageError(str(e)) from e
    sdir.mkdir(parents=True, exist_ok=True)
    res.write_trace(sdir / "trace.jsonl")
    summary = {"strategy": strategy, "k": cfg["k"], "width": cfg["width"],
               "layout": list(res.layout.attention_indices), "score": res.score}
    _dump(sdir / "layout.json", summary)
    write_config(sdir / "select-layers.config", cfg, "select-layers")
    return summary


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

FAMILIES = ("ar", "niah", "instruct")


def eval_suite(out: Path, cfg: dict) -> dict[str, list[D.DatasetRecord]]:
    fams = [f.strip() for f in str(cfg["families"]).split(",") if f.strip()]
    bad = set(fams) - set(FAMILIES)
    if bad:
        raise UsageError(f"unknown families {sorted(bad)}; valid: {FAMILIES}")
    data = load_data(out, ["ar_eval", "niah_eval"])
    suite = {}
    if "ar" in fams:
        # scored both ways: the MCQ view only adds candidates
        suite["ar"] = D.ar_as_mcq(data["ar_eval"], cfg["n_candidates"], subseed(cfg["seed"], "eval", "ar-mcq"))
    if "niah" in fams:
        suite["niah"] = data["niah_eval"]
    if "instruct" in fams:
        ca, _ = chains(cfg["seed"])
        suite["instruct"] = D.gen_task_records(D.TEMPLATES, cfg["instruct_eval"],
                                               subseed(cfg["seed"], "eval", "instruct"), ca)
    return suite


def cmd_eval(cfg: dict, out: Path, force: bool = False) -> dict:
    from .model import Greedy, Sample
    teacher = load_teacher(out)
    name = cfg["student"]
    student = load_student(out, name, cfg["stage"])
    stage = "teacher" if name == "teacher" else (latest_stage(out, name) if cfg["stage"] == "latest" else cfg["stage"])
    decode = {"greedy": Greedy(), "sample": Sample()}.get(cfg["decode"])
    if decode is None:
        raise UsageError("decode must be 'greedy' or 'sample'")
    rep = gap_report(teacher, student, eval_suite(out, cfg), decode, _ints(cfg["seeds"]), cfg["n_candidates"],
                     subseed(cfg["seed"], "eval", "candidates"))
    rep.meta.update({"student": name, "stage": stage})
    edir = out / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    stem = f"{name}-{stage}"
    (edir / f"{stem}.json").write_text(rep.to_json() + "\n")
    (edir / f"{stem}.txt").write_text(rep.table() + "\n")
    write_config(edir / f"{stem}.config", cfg, "eval")
    return {"student": name, "stage": stage, **rep.summary()}


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------

def cmd_profile(cfg: dict, out: Path, force: bool = False) -> dict:
    from . import profiler as P
    teacher = load_teacher(out)
    student = load_student(out, cfg["student"], cfg["stage"])
    pdir = out / "profile"
    pdir.mkdir(parents=True, exist_ok=True)
    for f in ("memory.tsv", "prefill.tsv", "decode.tsv"):
        (pdir / f).unlink(missing_ok=True)
    with open(pdir / "memory.tsv", "w") as f:
        f.write("label\tseq\tkv_bytes\tstate_bytes\n")
        for label, m in (("teacher", teacher), (cfg["student"], student)):
            mm = P.MemoryModel(m.cfg)
            for s in _ints(cfg["prefill_lengths"]):
                f.write(f"{label}\t{s}\t{mm.kv_bytes(s)}\t{mm.state_bytes()}\n")
    summary = {"reduction_fraction": P.cache_memory(student.cfg, 1).reduction_fraction}
    for label, m in (("teacher", teacher), (cfg["student"], student)):
        pre = P.measure_prefill(m, _ints(cfg["prefill_lengths"]), warmup=cfg["warmup"], reps=cfg["reps"])
        dec = P.measure_decode(m, _ints(cfg["decode_contexts"]), cfg["decode_steps"], warmup=cfg["warmup"],
                               reps=cfg["reps"])
        P.write_table(pdir / "prefill.tsv", pre, "ttft_ms", label)
        P.write_table(pdir / "decode.tsv", dec, "tokens_per_sec", label)
        peak = P.batch_sweep(m, cfg["sweep_context"], cfg["budget_bytes"], cfg["hard_cap"])
        summary[label] = {"prefill_exponent": P.scaling_exponent(pre) if len(pre) > 1 else math.nan,
                          "decode_spread": P.relative_spread([s.tokens_per_sec for s in dec]),
                          "peak_tokens_per_sec": peak.tokens_per_sec, "peak_batch": peak.batch}
    _dump(pdir / "summary.json", summary)
    write_config(pdir / "profile.config", cfg, "profile")
    return summary


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(cfg: dict, out: Path, force: bool = False) -> dict:
    rdir = out / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    lines = ["# Distillation report", ""]
    summary: dict = {"eval": {}, "stages": {}}
    tpath = out / "teacher" / "report.json"
    if tpath.exists():
        t = json.loads(tpath.read_text())
        summary["teacher"] = {"ar_gen_accuracy": t.get("ar_gen_accuracy"), "heldout_exit": t.get("heldout_exit")}
        lines += [f"Teacher AR generation accuracy: {t.get('ar_gen_accuracy', float('nan')):.3f}", ""]
    sroot = out / "students"
    if sroot.exists():
        lines += ["## Held-out KL per stage", "", "| student | stage | KL entry | KL exit | frozen intact |",
                  "|---|---|---|---|---|"]
        for sd in sorted(p for p in sroot.iterdir() if p.is_dir()):
            for rp in sorted(sd.glob("*.report.json"), key=lambda p: (STAGE_ORDER.get(p.name.split(".")[0].split("_")[0], 9), p.name)):
                r = json.loads(rp.read_text())
                tag = rp.name[: -len(".report.json")]
                summary["stages"].setdefault(sd.name, {})[tag] = {"kl_entry": r["kl_entry"], "kl_exit": r["kl_exit"]}
                lines.append(f"| {sd.name} | {tag} | {r['kl_entry']:.4f} | {r['kl_exit']:.4f} | {r['frozen_intact']} |")
        lines.append("")
    edir = out / "eval"
    if edir.exists():
        for ep in sorted(edir.glob("*.json")):
            rep = EvalReport.from_dict(json.loads(ep.read_text()))
            summary["eval"][ep.stem] = {"gaps": rep.gaps(), "summary": rep.summary(),
                                        "accuracy": {f: {"loglik": r.loglik, "generation": r.generation}
                                                     for f, r in rep.families.items()}}
            lines += [f"## Protocol gaps: {ep.stem}", "", "```", rep.table(), "```", ""]
    sel = out / "select" / "layout.json"
    if sel.exists():
        s = json.loads(sel.read_text())
        summary["selection"] = s
        lines += ["## Layer selection", "", f"{s['strategy']} k={s['k']} width={s['width']}: layout {s['layout']}", ""]
    prof = out / "profile" / "summary.json"
    if prof.exists():
        summary["profile"] = json.loads(prof.read_text())
        lines += ["## Efficiency", "", "```", json.dumps(summary["profile"], indent=1, sort_keys=True), "```", ""]
    (rdir / "report.md").write_text("\n".join(lines))
    _dump(rdir / "summary.json", summary)
    write_config(rdir / "report.config", cfg, "report")
    return summary


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "select-layers": cmd_select_layers,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "report": cmd_report,
}
