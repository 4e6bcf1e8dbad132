"""One test per acceptance criterion.  Each prints a single PASS/FAIL line
with the measured values, then asserts."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

from gdlb import data as D
from gdlb import losses as L
from gdlb import mixers as M
from gdlb import tensor as T
from gdlb.distill import StageConfig, alignment_loss, fixed_batches, run_stage, trainable_names
from gdlb.gradcheck import grad_check
from gdlb.model import HybridLayout, ModelConfig, build_student_from_teacher, build_teacher, grouped
from gdlb.profiler import MemoryModel, cache_memory, measure_decode, measure_prefill, relative_spread, scaling_exponent
from gdlb.select import LayoutScorer, SelectionSuite, exhaustive_best, greedy_select, select_layers

from .conftest import VERDICTS, run_canonical
from .oracles import dense_kda_layer, dense_step
from .test_select import linear_of, planted_teacher, redundancy_scorer, small_suite, teacher_samples


def verdict(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name}: {detail}"
    VERDICTS.append(line)
    print("\n" + line)


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------

def test_criterion_1_recurrence_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    steps = {"kda": M.kda_step, "gdn": M.gdn_step, "delta": M.delta_rule_step, "linear_attn": M.linear_attention_step}
    worst_step = worst_layer = worst_chunk = 0.0
    for i in range(200):
        kind = M.RECURRENT_KINDS[i % 4]
        dk, dv = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        S = rng.standard_normal((dk, dv))
        Sref = S.copy()
        for _ in range(6):
            k, v, q = unit(rng.standard_normal(dk)), rng.standard_normal(dv), rng.standard_normal(dk)
            beta, a = rng.uniform(), rng.uniform()
            alpha = {"kda": rng.uniform(size=dk), "gdn": np.full(dk, a)}.get(kind, np.ones(dk))
            args = {"kda": (beta, alpha), "gdn": (beta, a), "delta": (beta,), "linear_attn": ()}[kind]
            S, o = steps[kind](S, k, v, q, *args)
            Sref, oref = dense_step(Sref, k, v, q, beta, alpha, kind)
            worst_step = max(worst_step, np.max(np.abs(o - oref)), np.max(np.abs(S - Sref)))
        # full layer against the loop reference, 64-bit
        geom = M.MixerGeometry(d_model=8, n_q_heads=2, n_kv_heads=1, head_dim=4)
        m = M.build_mixer(kind, geom, rng, np.float64)
        for p in m.p.values():
            p.data += 0.3 * rng.standard_normal(p.shape)
        Tn = int(rng.integers(3, 40))
        x = rng.standard_normal((1, Tn, 8))
        seg = np.zeros((1, Tn), int)
        seg[0, int(rng.integers(1, Tn)):] = 1
        out = m.forward(T.tensor(x), seg, mode="sequential").data
        worst_layer = max(worst_layer, np.max(np.abs(out - dense_kda_layer(m, x, seg))))
        # chunked vs sequential, 32-bit, lengths not divisible by the chunk
        m32 = M.Recurrent(geom, {n: T.parameter(p.data.astype(np.float32)) for n, p in m.p.items()}, kind)
        x32 = x.astype(np.float32)
        a = m32.forward(T.tensor(x32), seg, mode="sequential").data
        b = m32.forward(T.tensor(x32), seg, mode="chunked", chunk_size=int(rng.integers(2, 9))).data
        worst_chunk = max(worst_chunk, np.max(np.abs(a - b)))
    dt = time.perf_counter() - t0
    ok = worst_step <= 1e-10 and worst_layer <= 1e-10 and worst_chunk <= 1e-5 and dt < 60
    verdict(1, "recurrence oracles", ok, f"step {worst_step:.1e}, layer {worst_layer:.1e} (<=1e-10), "
            f"chunked {worst_chunk:.1e} (<=1e-5), {dt:.1f}s")
    assert ok


def test_criterion_2_reduction_chain():
    rng = np.random.default_rng(7)
    exact_kda_gdn = exact_gdn_delta = True
    overwrite = 0.0
    for _ in range(200):
        dk, dv = 6, 5
        S = rng.standard_normal((dk, dv))
        k, v, q = unit(rng.standard_normal(dk)), rng.standard_normal(dv), rng.standard_normal(dk)
        b, a = rng.uniform(), rng.uniform()
        S1, o1 = M.kda_step(S, k, v, q, b, np.full(dk, a))
        S2, o2 = M.gdn_step(S, k, v, q, b, a)
        exact_kda_gdn &= np.array_equal(S1, S2) and np.array_equal(o1, o2)
        S3, o3 = M.gdn_step(S, k, v, q, b, 1.0)
        S4, o4 = M.delta_rule_step(S, k, v, q, b)
        exact_gdn_delta &= np.array_equal(S3, S4) and np.array_equal(o3, o4)
        S5, _ = M.delta_rule_step(S, k, v, k, 1.0)
        overwrite = max(overwrite, np.max(np.abs(S5.T @ k - v)))
    ok = exact_kda_gdn and exact_gdn_delta and overwrite <= 1e-12
    verdict(2, "reduction chain", ok, f"kda->gdn exact={exact_kda_gdn}, gdn->delta exact={exact_gdn_delta}, "
            f"overwrite err {overwrite:.1e} (<=1e-12)")
    assert ok


def test_criterion_3_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    results = {}
    geom = M.MixerGeometry(d_model=12, n_q_heads=4, n_kv_heads=2, head_dim=4, use_post_norm=True)
    seg = np.array([[0] * 4 + [1] * 5, [0] * 9])
    proj = T.tensor(rng.standard_normal((2, 9, 12)))
    for kind in M.MIXER_KINDS:
        m = M.build_mixer(kind, geom, rng, np.float64)
        for p in m.p.values():
            p.data += 0.3 * rng.standard_normal(p.shape)
        x = T.parameter(rng.standard_normal((2, 9, 12)))
        modes = ("sequential",) if kind == "attention" else ("sequential", "chunked")
        for mode in modes:
            rep = grad_check(lambda: T.sum(T.mul(m.forward(x, seg, mode=mode, chunk_size=4), proj)),
                             [x, *m.p.values()], max_coords=16)
            results[f"{kind}/{mode}"] = rep.worst
    tl = rng.standard_normal((2, 3, 7))
    s = T.parameter(rng.standard_normal((2, 3, 7)))
    mask = np.array([[True, True, False], [True, False, True]])
    labels = rng.integers(0, 7, (2, 3))
    results["kd_loss"] = grad_check(lambda: L.kd_loss(tl, s, mask, 2.0, 4), [s]).worst
    results["sft_loss"] = grad_check(lambda: L.sft_loss(s, labels, mask), [s]).worst
    cfg = ModelConfig(d_model=16, n_layers=3, n_q_heads=4, n_kv_heads=2, head_dim=4, mlp_dim=24)
    teacher = build_teacher(cfg, 0, np.float64)
    student = build_student_from_teacher(teacher, HybridLayout.of([0], 3))
    batch = fixed_batches(D.gen_markov_corpus(0, 3000), 12, 2, "full", 1)[0]
    params = [student.params[n] for n in ("layers.1.mixer.q_proj", "layers.2.mixer.k_proj",
                                          "layers.1.mixer.v_proj", "layers.2.mlp.up")]
    for kind in ("l2_mixer", "l2_block"):
        results[kind] = grad_check(lambda: alignment_loss(teacher, student, batch, kind), params, max_coords=12).worst
    dt = time.perf_counter() - t0
    worst = max(results, key=results.get)
    ok = all(v <= 1e-4 for v in results.values()) and dt < 300
    verdict(3, "gradient suite", ok, f"{len(results)} checks, worst {worst} {results[worst]:.1e} (<=1e-4), {dt:.1f}s")
    assert ok


def test_criterion_4_freezing_and_masking():
    cfg = ModelConfig(d_model=16, n_layers=3, n_q_heads=4, n_kv_heads=2, head_dim=4, mlp_dim=24)
    docs = D.gen_markov_corpus(0, 3000)
    inst = D.gen_task_records(["copy", "reverse"], 60, seed=1)
    teacher = build_teacher(cfg, 0)
    student = build_student_from_teacher(teacher, HybridLayout.of([1], 3))
    intact = {}
    s1_support = None
    for stage in ("s1", "s2", "s3a", "s3b"):
        sc = StageConfig(stage, 4 * 32 * 4, 3e-3, seq_len=32, batch_size=4, eval_every=2, heldout_batches=1)
        before = {n: p.data.copy() for n, p in student.params.items()}
        data = inst if stage == "s3b" else docs
        rep = run_stage(teacher, student, sc, data, data[:8])
        frozen = {n for g in sc.frozen for n in grouped(student)[g]}
        moved = {n for n, p in student.params.items() if not np.array_equal(before[n], p.data)}
        intact[stage] = rep.frozen_intact() and not (moved & frozen)
        if stage == "s1":
            s1_support = moved <= {n for n in trainable_names(student, sc)} and all(
                n.endswith((".q_proj", ".k_proj")) and ".mixer." in n for n in moved) and bool(moved)
    # completion-only masking: zero gradient on logits whose target is a prompt token
    t64 = build_teacher(cfg, 0, np.float64)
    s64 = build_student_from_teacher(t64, HybridLayout.of([1], 3))
    b = fixed_batches(inst, 48, 4, "completion_only", 1)[0]
    _, mask = L.lm_targets(b.tokens, b.target_mask())
    logits = T.parameter(s64.forward(b.tokens, b.seg).data)
    with T.Tape() as tape:
        loss = L.kd_loss(t64.forward(b.tokens, b.seg).data, logits, mask)
    g = T.backward(tape, loss)[logits]
    prompt_target = np.zeros_like(mask)
    prompt_target[:, :-1] = b.nonpad()[:, 1:] & ~b.loss_mask[:, 1:]
    zero_prompt = bool(prompt_target.any()) and float(np.abs(g[prompt_target]).max()) == 0.0
    ok = all(intact.values()) and bool(s1_support) and zero_prompt
    verdict(4, "freezing/masking", ok, f"frozen intact {intact}, S1 support q/k only={s1_support}, "
            f"prompt gradients exactly zero={zero_prompt}")
    assert ok


def test_criterion_5_kd_properties():
    from scipy.special import log_softmax, softmax
    rng = np.random.default_rng(5)
    t, s = rng.standard_normal((2, 4, 6, 13)) * 2  # each [4, 6, 13]
    mask = np.ones((4, 6), bool)
    kls = [L.kd_loss(t[i], T.tensor(s[i]), mask[i]).item() for i in range(4)]
    nonneg = min(kls) >= 0
    zero = abs(L.kd_loss(t, T.tensor(t), mask).item()) < 1e-12
    full = L.kd_loss(t, T.tensor(s), mask).item()
    topk = abs(L.kd_loss(t, T.tensor(s), mask, top_k=13).item() - full)
    oracle = np.mean(np.sum(softmax(t, -1) * (log_softmax(t, -1) - log_softmax(s, -1)), -1))
    hand = L.kd_loss(np.array([[0.0, np.log(3.0)]]), T.tensor(np.array([[0.0, 0.0]])), np.array([True])).item()
    labels = rng.integers(0, 13, (4, 6))
    one_hot = np.full((4, 6, 13), -1e4)
    np.put_along_axis(one_hot, labels[..., None], 0.0, axis=-1)
    sft_gap = abs(L.sft_loss(T.tensor(s), labels, mask).item() - L.kd_loss(one_hot, T.tensor(s), mask).item())
    ok = nonneg and zero and topk <= 1e-7 and abs(full - oracle) < 1e-9 and abs(hand - 0.1308) < 1e-3 and sft_gap < 1e-6
    verdict(5, "KD properties", ok, f"KL>=0 {nonneg}, zero at equality {zero}, top-K=V diff {topk:.1e}, "
            f"two-logit {hand:.4f}, SFT vs one-hot KD {sft_gap:.1e}")
    assert ok


def test_criterion_6_layer_selection_oracle():
    t0 = time.perf_counter()
    n = 6
    t = build_teacher(ModelConfig.desk(n_layers=n), seed=3, dtype=np.float64)
    rng = np.random.default_rng(4)
    for name, p in t.params.items():
        if ".mixer." in name:
            p.data += 0.15 * rng.standard_normal(p.shape)
    scorer = LayoutScorer(t, linear_of(t), small_suite(), seq_len=64, batch=16)
    oracle = {}
    for k in (1, 2, 3):
        best, score = exhaustive_best(scorer, n, k)
        add = select_layers("beam_add", k, scorer, width="all")
        rep = select_layers("beam_replace", k, scorer, width="all")
        oracle[k] = (set(add.layout.attention_indices) == set(best) == set(rep.layout.attention_indices)
                     and add.score == rep.score == score)
    planted = {}
    for layer in (1, 4):
        pt = planted_teacher(layer)
        samples = teacher_samples(pt, 24, 20, seed=layer)
        sc = LayoutScorer(pt, linear_of(pt), SelectionSuite(samples[:8], samples[8:16], samples[16:]), seq_len=64)
        planted[layer] = select_layers("beam_add", 1, sc, width=4).layout.attention_indices == (layer,)
    g = greedy_select(redundancy_scorer, n, 2).score
    b = select_layers("beam_add", 2, redundancy_scorer, n, width="all").score
    dt = time.perf_counter() - t0
    ok = all(oracle.values()) and all(planted.values()) and b < g and dt < 600
    verdict(6, "layer-selection oracle", ok, f"beam==exhaustive {oracle}, planted recovered {planted}, "
            f"greedy {g:.1f} vs wide beam {b:.1f}, {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------

def _eval(run: Path, stem: str) -> dict:
    return json.loads((run / "eval" / f"{stem}.json").read_text())


def test_criterion_7_end_to_end_directions(canonical_run):
    run = canonical_run
    teacher_acc = json.loads((run / "teacher/report.json").read_text())["ar_gen_accuracy"]
    rep = {s: json.loads((run / f"students/hybrid/{s}.report.json").read_text()) for s in ("s1", "s2", "s3a")}
    kl = [rep["s1"]["kl_entry"], rep["s1"]["kl_exit"], rep["s2"]["kl_exit"], rep["s3a"]["kl_exit"]]
    a = all(x > y for x, y in zip(kl, kl[1:]))
    hyb = _eval(run, "hybrid-s3b")["families"]["ar"]
    lin = _eval(run, "linear-s3b")
    unf = _eval(run, "hybrid-s3b_unfrozen")["families"]["ar"]
    h_acc, l_acc = hyb["generation"]["student"], lin["families"]["ar"]["generation"]["student"]
    b = h_acc - l_acc >= 0.10
    gap = lin["gaps"]["ar"]
    c = gap["generation"] >= gap["loglik"]
    d = h_acc >= unf["generation"]["student"]
    gate = teacher_acc >= 0.95
    ok = gate and a and b and c and d
    verdict(7, "end-to-end directions", ok,
            f"teacher AR {teacher_acc:.3f} (gate 0.95); (a) KL {' > '.join(f'{x:.4f}' for x in kl)} {a}; "
            f"(b) hybrid {h_acc:.3f} - linear {l_acc:.3f} = {h_acc - l_acc:+.3f} (>=0.10) {b}; "
            f"(c) linear AR gen gap {gap['generation']:+.3f} vs loglik gap {gap['loglik']:+.3f} {c}; "
            f"(d) frozen {h_acc:.3f} vs unfrozen {unf['generation']['student']:.3f} {d}")
    assert ok


def test_criterion_8_efficiency_model():
    red_ref = cache_memory(ModelConfig.desk(n_layers=28, mixers=HybridLayout.of(range(0, 28, 4), 28).mixers()),
                           4096).reduction_fraction
    red_desk = cache_memory(ModelConfig.desk(mixers=HybridLayout.of([2, 5], 8).mixers()), 4096).reduction_fraction
    mm = MemoryModel(ModelConfig.desk(mixers=HybridLayout.of([2, 5], 8).mixers()))
    state_const = len({mm.state_bytes(1, s) for s in (1, 256, 4096, 1 << 20)}) == 1
    teacher = build_teacher(ModelConfig.desk(), 0)
    linear = build_student_from_teacher(teacher, HybridLayout.of([], 8))
    lengths = [512, 1024, 2048, 4096]
    e_t = scaling_exponent(measure_prefill(teacher, lengths, warmup=1, reps=3))
    e_l = scaling_exponent(measure_prefill(linear, lengths, warmup=1, reps=3))
    dec = measure_decode(linear, [256, 1024, 4096], n_steps=32, warmup=2, reps=7)
    spread = relative_spread([s.tokens_per_sec for s in dec])
    ok = (red_ref == 0.75 and red_desk == 0.75 and state_const and abs(e_t - 2) <= 0.4 and abs(e_l - 1) <= 0.3
          and spread <= 0.2)
    verdict(8, "efficiency model", ok, f"reduction 7/28 {red_ref}, 2/8 {red_desk}, state constant {state_const}, "
            f"prefill exponent teacher {e_t:.2f} (2+-0.4) linear {e_l:.2f} (1+-0.3), "
            f"linear decode spread {spread:.1%} (<=20%)")
    assert ok


# Profiling output is wall-clock time and is left out of the comparison.
TIMING_FILES = {"profile/prefill.tsv", "profile/decode.tsv", "profile/summary.json", "report/report.md",
                "report/summary.json"}


def _metric_files(root: Path) -> dict[str, bytes]:
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and rel not in TIMING_FILES and p.suffix in (".json", ".jsonl", ".tsv", ".gdlb", ".txt"):
            out[rel] = p.read_bytes()
    return out


def _report_without_timing(root: Path) -> dict:
    s = json.loads((root / "report/summary.json").read_text())
    s.pop("profile", None)
    return s


def test_criterion_9_determinism(tmp_path):
    a = run_canonical("smoke", tmp_path / "a")
    b = run_canonical("smoke", tmp_path / "b")
    fa, fb = _metric_files(a), _metric_files(b)
    differ = sorted(k for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k))
    same_report = _report_without_timing(a) == _report_without_timing(b)
    ok = not differ and same_report and len(fa) > 20
    verdict(9, "determinism", ok, f"{len(fa)} metric/checkpoint files compared, {len(differ)} differ {differ[:3]}, "
            f"report equal {same_report}")
    assert ok
