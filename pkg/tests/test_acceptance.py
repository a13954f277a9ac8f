"""Acceptance suite.  Each test carries a ``criterion`` marker; the conftest
prints one PASS/FAIL line per criterion at the end of the run.

Criterion 7 trains the desk-scale benchmark on five seeds (about ten seconds
per seed on one core) and shares the runs between its three sub-checks.
"""

import hashlib
import math
import time

import numpy as np
import pytest

from xiplus import formats
from xiplus.cli import main
from xiplus.gausscore import pool_arrays
from xiplus.losses import AamParams, SvlParams, aam_loss, build_centroids, kappa, svl_loss
from xiplus.momentprop import BnState, FcParams, ProjectedGaussian, TwinBranch, bn_forward, bn_var_forward, fc_var_forward
from xiplus.scoring import compute_eer, compute_min_dcf, cosine_score, evaluate, rho_policy
from xiplus.synthbench import (Architecture, SynthConfig, TrainConfig, XiPlusModel, centroids_from_model,
                               finetune_svl, generate, pretrain, uncertainty_diagnostics)
from xiplus.uhead import estimate_beliefs, init_uhead_params, uhead_backward

from _oracles import (brute_eer, brute_min_dcf, central_diff, mc_pushforward, rel_err,
                      sequential_pool)

SEEDS = (0, 1, 2, 3, 4)


# -- 1. pooling ----------------------------------------------------------------


@pytest.mark.criterion("1")
def test_pooling_oracle(record_property):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        T, d = int(rng.integers(0, 21)), int(rng.integers(1, 17))
        z = rng.normal(size=(T, d)) * rng.uniform(0.1, 10)
        L = np.exp(rng.uniform(-3, 3, size=(T, d)))
        zp, Lp = rng.normal(size=d), np.exp(rng.uniform(-2, 2, size=d))
        phi, tot = pool_arrays(z, L, zp, Lp)
        m, p = sequential_pool(z, L, zp, Lp)
        worst = max(worst, rel_err(phi, m, floor=0), rel_err(tot, p, floor=0))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max rel err {worst:.1e}, {elapsed:.2f}s")
    assert worst <= 1e-12
    assert elapsed < 5


# -- 2. moment propagation -----------------------------------------------------


@pytest.mark.criterion("2")
def test_moment_propagation_monte_carlo(record_property):
    rng = np.random.default_rng(202)
    n = 200_000
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        d, d_out = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        state = BnState(1 + 0.5 * rng.normal(size=d), rng.normal(size=d), np.zeros(d), np.ones(d))
        fc = FcParams(rng.normal(size=(d_out, d)), rng.normal(size=d_out))
        phi = rng.normal(size=(8, d)) * 2
        prec = np.exp(rng.uniform(-1, 2, size=(8, d)))
        _, stats = bn_forward(state, phi, update_running=False)
        cov_bn = bn_var_forward(state, prec, stats)[0]
        sigma = fc_var_forward(fc, cov_bn)
        _, sigma_s = mc_pushforward(phi[0], prec[0], stats.mean, stats.var, state.gamma, state.beta,
                                        state.eps, fc.weight, fc.bias, n, rng)
        # one random direction and the trace, each against its exact standard error
        u = rng.normal(size=d_out)
        u /= np.linalg.norm(u)
        v = u @ sigma @ u
        z_dir = abs(u @ sigma_s @ u - v) / (v * math.sqrt(2 / (n - 1)))
        z_tr = abs(np.trace(sigma_s) - np.trace(sigma)) / math.sqrt(2 * np.sum(sigma * sigma) / (n - 1))
        worst = max(worst, z_dir, z_tr)
    elapsed = time.perf_counter() - start
    record_property("detail", f"max |z| {worst:.2f}, {elapsed:.1f}s")
    assert worst <= 3.0
    assert elapsed < 60


# -- 3. gradients --------------------------------------------------------------


def _grad_ok(analytic, f, arr, floor=1e-8):
    return rel_err(analytic, central_diff(f, arr), floor=floor)


@pytest.mark.criterion("3")
def test_gradient_integrity(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    errs = {}

    # uncertainty head
    p = init_uhead_params(8, 3, 2, rng)
    p.w_prec[...] = 0.3 * rng.normal(size=p.w_prec.shape)
    x = rng.normal(size=(2, 4, 8))
    gm, gl = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))
    beliefs, cache = estimate_beliefs(p, x)
    grads, dx = uhead_backward(p, cache, gm, gl)

    def f_head():
        b, _ = estimate_beliefs(p, x)
        return float(np.sum(gm * b.means) + np.sum(gl * b.log_precisions))

    errs["uhead"] = max([_grad_ok(grads[k], f_head, a) for k, a in p.named().items()] + [_grad_ok(dx, f_head, x)])

    # moment propagation, full and diagonal
    worst = 0.0
    for diagonal in (False, True):
        twin = TwinBranch(BnState(1 + 0.3 * rng.normal(size=4), rng.normal(size=4), np.zeros(4), np.ones(4)),
                          FcParams(rng.normal(size=(3, 4)), rng.normal(size=3)))
        phi, prec = rng.normal(size=(5, 4)), rng.uniform(0.5, 3, size=(5, 4))
        gmean = rng.normal(size=(5, 3))
        gcov = rng.normal(size=(5, 3) if diagonal else (5, 3, 3))
        _, _, mc = twin.forward(phi, prec, "train", diagonal, update_running=False)
        g = twin.backward(mc, gmean, gcov)

        def f_twin():
            m, c, _ = twin.forward(phi, prec, "train", diagonal, update_running=False)
            return float(np.sum(gmean * m) + np.sum(gcov * c))

        for key, arr in (("phi", phi), ("precision", prec), ("gamma", twin.bn.gamma), ("beta", twin.bn.beta),
                         ("weight", twin.fc.weight), ("bias", twin.fc.bias)):
            worst = max(worst, _grad_ok(g[key], f_twin, arr))
    errs["momentprop"] = worst

    # variance loss, away from the absolute-value kink
    spk = ["a", "b", "a", "c"]
    table = build_centroids([(s, rng.normal(size=3)) for s in "abc"])
    mean, var = rng.normal(size=(4, 3)), rng.uniform(0.2, 2, size=(4, 3))
    la = np.array(math.log(0.2))
    assert np.abs(mean - table.lookup(spk)).min() > 1e-6
    res = svl_loss(mean, var, spk, table, SvlParams(float(la)))

    def f_svl():
        return svl_loss(mean, var, spk, table, SvlParams(float(la))).loss

    errs["svl"] = max(_grad_ok(res.grad_mean, f_svl, mean), _grad_ok(res.grad_var, f_svl, var),
                      _grad_ok(res.grad_log_alpha, f_svl, la))

    # angular-margin softmax
    emb, w = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
    y = rng.integers(0, 3, size=5)
    ap = AamParams(w, 8.0, 0, 10, 0.2)
    ar = aam_loss(emb, y, ap, epoch=5)

    def f_aam():
        return aam_loss(emb, y, ap, epoch=5).loss

    errs["aam"] = max(_grad_ok(ar.grad_embeddings, f_aam, emb), _grad_ok(ar.grad_weight, f_aam, w))

    # whole model: frames -> encoder -> head -> pooling -> twin branch -> CE + kappa*SVL
    arch = Architecture(frame_dim=4, num_classes=3, enc_hidden=5, model_dim=8, heads=2, pool_dim=4, embed_dim=3,
                        aam_scale=8.0)
    model = XiPlusModel.init(arch, rng, (0, 10, 0.2))
    model.head.w_prec[...] = 0.3 * rng.normal(size=model.head.w_prec.shape)
    frames = rng.normal(size=(4, 6, 4))
    labels = np.array([0, 1, 2, 1])
    speakers = ["a", "b", "c", "b"]
    out, _, _ = model.forward(frames, update_running=False)
    cent = build_centroids([(s, o + rng.normal(size=3)) for s, o in zip(speakers, out)])

    def f_model():
        return model.loss_and_grads(frames, labels, 5, speakers, cent, 0.7, (0.5, 1, 10), update_running=False)[0].total

    _, mg = model.loss_and_grads(frames, labels, 5, speakers, cent, 0.7, (0.5, 1, 10), update_running=False)
    # O(10) loss: ~1e-9 finite-difference noise, so exactly-zero gradients need a floor
    errs["pipeline"] = max(_grad_ok(mg[k], f_model, a, floor=1e-4) for k, a in model.parameters().items())

    elapsed = time.perf_counter() - start
    record_property("detail", ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {elapsed:.1f}s")
    assert max(errs.values()) <= 1e-4
    assert elapsed < 120


# -- 4. scoring degeneracy -----------------------------------------------------


@pytest.mark.criterion("4")
def test_scoring_degeneracy(record_property):
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 17))
        a, b = rng.normal(size=d), rng.normal(size=d)
        plain = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        m1, m2 = rng.normal(size=(d, d)), rng.normal(size=(d, d))
        e1, e2 = ProjectedGaussian(a, m1 @ m1.T), ProjectedGaussian(b, m2 @ m2.T)
        z1, z2 = ProjectedGaussian(a, np.zeros((d, d))), ProjectedGaussian(b, np.zeros((d, d)))
        worst = max(worst, abs(cosine_score(e1, e2, 0.0) - plain),
                    abs(cosine_score(z1, z2, float(rng.uniform(0, 10))) - plain))
    phi = np.array([1.0, 0.0])
    cov = np.diag([3.0, 1.0])
    q = phi @ np.linalg.solve(np.eye(2) + cov, phi)  # independent dense solve
    hand = cosine_score(ProjectedGaussian(phi, cov), ProjectedGaussian(phi, cov), 1.0)
    record_property("detail", f"max deviation {worst:.1e}, hand case {hand!r}")
    assert worst <= 1e-12
    assert q == 0.25
    assert abs(hand - 1.0 / q) <= 1e-12 and abs(hand - 4.0) <= 1e-12


# -- 5. metric oracles ---------------------------------------------------------


@pytest.mark.criterion("5")
def test_metric_oracles(record_property):
    rng = np.random.default_rng(505)
    sizes = list(range(2, 41)) + [int(s) for s in rng.integers(41, 1001, size=40)] + [1000]
    worst = 0.0
    for n in sizes:
        n_tar = int(rng.integers(1, n))
        scores = rng.normal(size=n)
        if rng.random() < 0.5:
            scores = np.round(scores, int(rng.integers(0, 3)))  # ties
        scores[:n_tar] += rng.uniform(0, 3)
        tar, non = scores[:n_tar].tolist(), scores[n_tar:].tolist()
        worst = max(worst, abs(compute_eer(tar, non)[0] - brute_eer(tar, non)),
                    abs(compute_min_dcf(tar, non)[0] - brute_min_dcf(tar, non)))
    record_property("detail", f"{len(sizes)} lists up to 1000 trials, max deviation {worst:.1e}")
    assert worst <= 1e-9


# -- 6. schedules --------------------------------------------------------------


@pytest.mark.criterion("6")
def test_schedule_fidelity():
    lam = 0.01
    p = SvlParams(lam=lam, ep_svl=70, ep_max=150)
    assert kappa(70, p) == 0.0
    assert abs(kappa(150, p) - lam) <= 1e-15
    assert abs(kappa(110, p) - lam / 2) <= 1e-15
    assert abs(AamParams(np.eye(2), 32.0, 20, 40, 0.2).margin(30) - 0.1) <= 1e-15


# -- 7. desk-scale benchmark ---------------------------------------------------


def _bench_one(seed):
    ds = generate(SynthConfig(seed=seed))
    cfg = TrainConfig.desk_scale(seed=seed)
    stage1 = pretrain(ds, cfg)
    table = centroids_from_model(stage1.model, ds.train, source="stage1")
    stage2 = finetune_svl(ds, stage1, table, cfg)
    model = stage2.model
    store = dict(zip(ds.eval.ids, model.embed(ds.eval.frames)))
    dim = next(iter(store.values())).dim
    eer0 = evaluate(ds.trials, store, 0.0).eer
    eer_a = evaluate(ds.trials, store, rho_policy("alpha", dim, stage2.alpha)).eer
    diag = uncertainty_diagnostics(model, ds.eval)
    alphas = np.array([r["alpha"] for r in stage2.history[-10:]])
    prec = diag.frame_precision_by_sigma
    return dict(seed=seed, spearman=diag.spearman, prec_low=prec[min(prec)], prec_high=prec[max(prec)], eer0=eer0, eer_alpha=eer_a, alpha=stage2.alpha,
                alpha_range=float(np.ptp(alphas) / np.mean(alphas)), alphas=alphas)


@pytest.fixture(scope="module")
def bench():
    return [_bench_one(s) for s in SEEDS]


@pytest.mark.criterion("7a")
def test_benchmark_uncertainty_tracks_noise(bench, record_property):
    rho = [b["spearman"] if b["spearman"] is not None else float("nan") for b in bench]
    record_property("detail", "spearman " + " ".join(f"{r:+.2f}" for r in rho) + ", mean frame precision low/high noise "
                    + " ".join(f"{np.mean(b['prec_low']):.3g}/{np.mean(b['prec_high']):.3g}" for b in bench))
    assert all(r > 0.5 for r in rho)


def test_benchmark_noisy_frames_get_less_precision(bench):
    # directional pooling invariant, exercised on the same trained models
    for b in bench:
        assert np.mean(b["prec_high"]) < np.mean(b["prec_low"]), b["seed"]


@pytest.mark.criterion("7b")
def test_benchmark_uncertainty_scoring_helps(bench, record_property):
    wins = [b["eer_alpha"] <= b["eer0"] for b in bench]
    record_property("detail", "EER rho=0/rho=alpha " + " ".join(f"{b['eer0']:.3f}/{b['eer_alpha']:.3f}" for b in bench)
                    + f", {sum(wins)}/5 runs")
    assert sum(wins) >= 4


@pytest.mark.criterion("7c")
def test_benchmark_alpha_is_stable(bench, record_property):
    record_property("detail", "alpha " + " ".join(f"{b['alpha']:.3g}" for b in bench)
                    + ", range/mean " + " ".join(f"{b['alpha_range']:.3f}" for b in bench))
    for b in bench:
        assert np.all(np.isfinite(b["alphas"])) and np.all(b["alphas"] > 0)
        assert b["alpha_range"] < 0.5


# -- 8. determinism ------------------------------------------------------------


def _pipeline(root, config):
    c = ["-q", "--config", str(config)]
    steps = [
        ["gen", *c, "--out", str(root / "data")],
        ["train", *c, "--data", str(root / "data"), "--out", str(root / "s1")],
        ["centroids", "-q", "--checkpoint", str(root / "s1/checkpoint.jsonl"), "--data", str(root / "data"),
         "--out", str(root / "s1")],
        ["train", *c, "--data", str(root / "data"), "--stage", "svl", "--init", str(root / "s1/checkpoint.jsonl"),
         "--centroids", str(root / "s1/centroids.jsonl"), "--out", str(root / "s2")],
        ["embed", "-q", "--checkpoint", str(root / "s2/checkpoint.jsonl"), "--data", str(root / "data"),
         "--out", str(root / "emb")],
        ["score", "-q", "--embeddings", str(root / "emb/embeddings.jsonl"), "--trials", str(root / "data/trials.txt"),
         "--rho", "alpha", "--checkpoint", str(root / "s2/checkpoint.jsonl"), "--out", str(root / "score")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    digests = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            digests[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return digests


@pytest.mark.criterion("8")
def test_determinism(tmp_path, record_property):
    config = tmp_path / "reference.txt"
    config.write_text(formats.format_config(TrainConfig.desk_scale(seed=7)))
    first = _pipeline(tmp_path / "run1", config)
    second = _pipeline(tmp_path / "run2", config)
    record_property("detail", f"{len(first)} files compared")
    assert first == second
    assert {"data/truth.jsonl", "s2/checkpoint.jsonl", "score/scores.csv"} <= set(first)
