"""Acceptance suite: one PASS/FAIL line per criterion, printed at the end of the run.

Run with ``pytest tests/test_acceptance.py -v``.  The extended end-to-end ANP
check is opt-in: set ``NPSEG_EXTENDED_CKPT`` to a fully trained checkpoint.
"""
import json
import os
import time

import numpy as np
import pytest

from _oracles import brute_force_segment, pair_count_ari
from conftest import ACCEPTANCE_LINES
from npseg import anp, datagen
from npseg import grad as G
from npseg.cli import main, stream_rng, stream_seed
from npseg.cluster import (
    DpConfig,
    InfeasibleConfig,
    dp_segment,
    evaluate_pattern,
    np_affiliation,
    physics_affiliation,
)
from npseg.config import RunConfig
from npseg.evalgrid import ari, grid_search, select_combos
from npseg.physics import RockParams, sigma_archie, sigma_sgs, sigma_ws


def record(key, passed, detail):
    ACCEPTANCE_LINES.append((key, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {key}: {detail}")
    assert passed, detail


# ------------------------------------------------------------------ 1


def _op_cases(rng):
    """(name, f, inputs) for every primitive on fresh random data."""
    def T(*shape, lo=None, hi=None):
        data = rng.normal(size=shape) if lo is None else rng.uniform(lo, hi, size=shape)
        return G.Tensor(data)

    S = G.sum_over_axis
    return [
        ("add", lambda a, b: S(G.square(G.add(a, b))), [T(3, 4), T(1, 4)]),
        ("sub", lambda a, b: S(G.square(G.sub(a, b))), [T(3, 4), T(3, 1)]),
        ("mul", lambda a, b: S(G.mul(a, b)), [T(2, 3), T(2, 3)]),
        ("div", lambda a, b: S(G.div(a, b)), [T(2, 3), T(2, 3, lo=0.5, hi=2.0)]),
        ("matmul", lambda a, b: S(G.square(G.matmul(a, b))), [T(3, 4), T(4, 2)]),
        ("relu", lambda a: S(G.mul(G.relu(a), a)), [T(4, 3)]),
        ("softplus", lambda a: S(G.square(G.softplus(a))), [T(4, 3)]),
        ("exp", lambda a: S(G.exp(a)), [T(3, 3)]),
        ("log", lambda a: S(G.square(G.log(a))), [T(3, 3, lo=0.2, hi=3.0)]),
        ("square", lambda a: S(G.square(a)), [T(5)]),
        ("mean_over_axis", lambda a: S(G.square(G.mean_over_axis(a, axis=0))), [T(4, 3)]),
        ("sum_over_axis", lambda a: S(G.square(G.sum_over_axis(a, axis=1))), [T(4, 3)]),
        ("softmax_over_axis", lambda a, w: S(G.mul(G.softmax_over_axis(a, axis=1), w)), [T(3, 4), T(3, 4)]),
        ("concat", lambda a, b: S(G.square(G.concat([a, b], axis=1))), [T(3, 2), T(3, 1)]),
        ("broadcast_add_row", lambda a, r: S(G.square(G.broadcast_add_row(a, r))), [T(3, 4), T(4)]),
        ("transpose", lambda a, b: S(G.square(G.matmul(G.transpose(a), b))), [T(3, 2), T(3, 4)]),
    ]


def test_1_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {}
    for _ in range(50):
        for name, f, inputs in _op_cases(rng):
            worst[name] = max(worst.get(name, 0.0), G.grad_check(f, inputs))
        weights = anp.init_weights(rng)
        real = datagen.gen_realization(datagen.sample_params(rng), 12, rng=rng)
        ctx_idx = rng.choice(12, size=int(rng.integers(3, 8)), replace=False)
        eps = rng.standard_normal(16)
        ctx, tgt = (real.x[ctx_idx], real.y[ctx_idx]), (real.x, real.y)
        names = sorted(weights.tensors)
        params = [weights[n] for n in names]

        def elbo(*ps):
            w = anp.AnpWeights(dict(zip(names, ps)), weights.hyper)
            return anp.elbo_loss(ctx, tgt, w, eps=eps).loss

        err = G.grad_check(elbo, params, max_entries=60, rng=rng)
        worst["elbo"] = max(worst.get("elbo", 0.0), err)
    top = max(worst.values())
    elapsed = time.perf_counter() - t0
    record("1 gradient correctness", top < 1e-4 and elapsed < 60,
           f"max rel err {top:.2e} over {len(worst)} graphs x 50 instances (ELBO: {worst['elbo']:.2e}), "
           f"{elapsed:.1f}s")


# ------------------------------------------------------------------ 2


def test_2_reduction_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(10_000):
        p = RockParams(m=rng.uniform(1.7, 2.6), n=rng.uniform(1.6, 2.6), rho_w=rng.uniform(0.025, 0.06), cec=0.0,
                       temperature_c=rng.uniform(10, 90))
        phi, sw, fc = rng.uniform(0.05, 0.35), rng.uniform(0.2, 1.0), rng.uniform(0.0, 0.4)
        a = sigma_archie(phi, sw, p)
        for v in (sigma_ws(phi, sw, fc, p), sigma_sgs(phi, sw, fc, p.replace(equation="SGS"))):
            worst = max(worst, abs(v - a) / abs(a))
    record("2 physics reduction identity", worst < 1e-12,
           f"max rel diff {worst:.1e} over 10000 inputs, {time.perf_counter() - t0:.1f}s")


# ------------------------------------------------------------------ 3


def test_3_dp_optimality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    done = cost_bad = pattern_bad = 0
    while done < 500:
        L = int(rng.integers(2, 15))
        cfg = DpConfig(c=int(rng.integers(1, 4)), n=int(rng.integers(0, 4)), l_min=int(rng.integers(1, 4)))
        try:
            cfg.check(L)
        except InfeasibleConfig:
            continue
        cm = rng.normal(size=(L, cfg.c))
        if done % 2:
            cm[:, -1] += 3.0  # push the unconstrained optimum away from using every label
        total, labels = brute_force_segment(cm, cfg.c, cfg.n, cfg.l_min)
        if labels is None:
            continue
        pattern, got = dp_segment(cm, cfg)
        cost_bad += got != total
        pattern_bad += not np.array_equal(pattern.labels, labels)
        done += 1
    elapsed = time.perf_counter() - t0
    record("3 DP optimality oracle", cost_bad == 0 and pattern_bad == 0 and elapsed < 60,
           f"500 instances, {cost_bad} cost mismatches, {pattern_bad} pattern mismatches, {elapsed:.1f}s")


# ------------------------------------------------------------------ 4


def test_4_ari_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    worst, relabel_ok = 0.0, True
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        a = rng.integers(0, int(rng.integers(1, 7)), n)
        b = rng.integers(0, int(rng.integers(1, 7)), n)
        worst = max(worst, abs(ari(a, b) - pair_count_ari(a, b)))
        relabel = rng.permutation(10)
        relabel_ok &= ari(a, relabel[a]) == 1.0
    record("4 ARI oracle", worst <= 1e-12 and relabel_ok,
           f"max |diff| {worst:.1e} over 1000 pairs, relabel -> 1 exactly: {relabel_ok}, "
           f"{time.perf_counter() - t0:.1f}s")


# ------------------------------------------------------------------ 5


def test_5_physics_baseline_end_to_end():
    t0 = time.perf_counter()
    cfg = RunConfig()
    series = datagen.build_preset("WS-3", noise=cfg.noise(), rng=stream_rng(0, "datagen"))
    n_true = len(series.blocks) - 1
    prov = physics_affiliation("WS", seed=stream_seed(0, "provider"))
    base = DpConfig(c=1, n=0, l_min=cfg.l_min, restarts=cfg.restarts, max_iters=cfg.max_iters,
                    seed=stream_seed(0, "grid"))
    res = grid_search(series.x, series.y, prov, [8], [n_true], base, parallelism=1)
    sel = select_combos(res.cells, cfg.eps_rel)
    score = ari(sel.lowest_cost.pattern.labels, series.labels)
    truth_cost = evaluate_pattern(series.labels, series.x, series.y, prov)
    elapsed = time.perf_counter() - t0
    record("5 physics baseline WS-3", score >= 0.90 and elapsed < 600,
           f"C=8 N={n_true}: lowest-cost ARI {score:.3f} (need >= 0.90), cost_pred "
           f"{sel.lowest_cost.cost_per_point:.5f} vs cost_true {truth_cost:.5f}, {elapsed:.0f}s")


# ------------------------------------------------------------------ 6


def test_6_training_smoke():
    t0 = time.perf_counter()
    result = anp.train(anp.TrainConfig(epochs=5, sets_per_epoch=200), np.random.default_rng(606))
    nll = [row["nll"] for row in result.curve]
    smooth = np.convolve(nll, np.ones(2) / 2, mode="valid")
    improves = nll[-1] < nll[0] and smooth[-1] < smooth[0]

    rng = np.random.default_rng(607)
    reals = [datagen.gen_realization(datagen.sample_params(rng), 200, rng=rng) for _ in range(50)]
    shift = rng.permutation(50)
    shift = np.where(shift == np.arange(50), (shift + 1) % 50, shift)
    coherent, mismatched = [], []
    for i, real in enumerate(reals):
        batch = datagen.make_training_batch(real, rng)
        coherent.append(anp.predict_nll(batch.context, batch.targets, result.weights)[1])
        other = reals[shift[i]]
        mismatched.append(anp.predict_nll(batch.context, (other.x, other.y), result.weights)[1])
    gap_ok = np.mean(coherent) < np.mean(mismatched)
    elapsed = time.perf_counter() - t0
    record("6 training smoke", improves and gap_ok and elapsed < 1200,
           f"epoch NLL {' > '.join(f'{v:.3f}' for v in nll)}; coherent {np.mean(coherent):.3f} vs mismatched "
           f"{np.mean(mismatched):.3f}; {elapsed:.0f}s")


# ------------------------------------------------------------------ 7


def test_7_determinism(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    fast = ["--set", "restarts=2", "--set", "max_iters=4", "--set", "fit_restarts=3", "--set", "fit_iters=200"]
    steps = [
        ["gen", "--preset", "WS-2", "--seed", "3", "--out", "s.csv"],
        ["train", "--epochs", "2", "--sets-per-epoch", "15", "--seed", "3", "--quiet", "--out", "m.anpc"],
        ["cluster", "s.csv", "--provider", "anp:m.anpc", "--c", "3", "--n", "4", "--seed", "3", "--out", "anp.json",
         *fast],
        ["cluster", "s.csv", "--provider", "physics:WS", "--c", "3", "--n", "4", "--seed", "3", "--out", "ws.json",
         *fast],
        ["grid", "s.csv", "--provider", "anp:m.anpc", "--c-min", "2", "--c-max", "3", "--n-min", "3", "--n-max", "4",
         "--seed", "3", "--threads", "1", "--out", "grid.json", *fast],
        ["eval", "grid.json", "s.csv", "--out", "conf.csv"],
    ]
    outputs = {}
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        monkeypatch.chdir(d)  # identical argv, including relative paths, in each rerun
        for argv in steps:
            assert main(argv) == 0, argv
        outputs[run] = {p.name: p.read_bytes() for p in sorted(d.iterdir())
                        if p.suffix in (".csv", ".json", ".anpc")}
    diff = [k for k in outputs["a"] if outputs["a"][k] != outputs["b"].get(k)]
    record("7 determinism", not diff and outputs["a"].keys() == outputs["b"].keys(),
           f"{len(outputs['a'])} CSV/JSON/checkpoint files byte-identical across reruns"
           + (f"; differing: {diff}" if diff else "") + f", {time.perf_counter() - t0:.0f}s")


# ------------------------------------------------------------------ 8


def test_8_permutation_invariance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(808)
    weights = anp.init_weights(rng)
    real = datagen.gen_realization(datagen.sample_params(rng), 60, rng=rng)
    ctx = (real.x[:40], real.y[:40])
    tgt = (real.x, real.y)
    eps = rng.standard_normal(16)
    ref_lat = anp.latent_encode(ctx, weights)
    ref_det = anp.det_encode(ctx, tgt[0], weights).data
    ref_loss = float(anp.elbo_loss(ctx, tgt, weights, eps=eps).loss.data)
    ref_nll = anp.predict_nll(ctx, tgt, weights)[0]
    worst = 0.0
    for _ in range(200):
        p = rng.permutation(40)
        q = rng.permutation(60)
        pc = (ctx[0][p], ctx[1][p])
        lat = anp.latent_encode(pc, weights)
        worst = max(
            worst,
            np.max(np.abs(lat.mu.data - ref_lat.mu.data)),
            np.max(np.abs(lat.sigma.data - ref_lat.sigma.data)),
            np.max(np.abs(anp.det_encode(pc, tgt[0], weights).data - ref_det)),
            abs(float(anp.elbo_loss(pc, (tgt[0][q], tgt[1][q]), weights, eps=eps).loss.data) - ref_loss),
            np.max(np.abs(anp.predict_nll(pc, tgt, weights)[0] - ref_nll)),
        )
    record("8 ANP permutation invariance", worst < 1e-10,
           f"max |diff| {worst:.1e} over 200 permutations, {time.perf_counter() - t0:.1f}s")


# ------------------------------------------------------------------ extended (non-gating)


@pytest.mark.skipif(not os.environ.get("NPSEG_EXTENDED_CKPT"), reason="set NPSEG_EXTENDED_CKPT to run")
def test_extended_anp_ws3():
    weights = anp.load_checkpoint(os.environ["NPSEG_EXTENDED_CKPT"])
    cfg = RunConfig()
    series = datagen.build_preset("WS-3", noise=cfg.noise(), rng=stream_rng(0, "datagen"))
    n_true = len(series.blocks) - 1
    prov = np_affiliation(weights, cfg.context_cap, stream_seed(0, "provider"))
    base = DpConfig(c=1, n=0, l_min=cfg.l_min, restarts=cfg.restarts, max_iters=cfg.max_iters,
                    seed=stream_seed(0, "grid"))
    res = grid_search(series.x, series.y, prov, [6, 7, 8], [n_true - 1, n_true, n_true + 1], base)
    sel = select_combos(res.cells, cfg.eps_rel)
    lc = ari(sel.lowest_cost.pattern.labels, series.labels)
    mc = ari(sel.most_common.pattern.labels, series.labels)
    ACCEPTANCE_LINES.append(("9 extended ANP WS-3 (non-gating)", lc >= 0.85,
                             f"lowest-cost ARI {lc:.3f} at C={sel.lowest_cost.c} N={sel.lowest_cost.n} "
                             f"(need >= 0.85), most-common ARI {mc:.3f}"))
    print(json.dumps({"lowest_cost_ari": lc, "most_common_ari": mc}))
