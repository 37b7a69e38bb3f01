"""End-to-end acceptance criteria 1-11.

Each test appends a one-line verdict to ``conftest.ACCEPTANCE_LINES`` before
asserting; the lines are echoed in the pytest terminal summary.
"""

import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
from angioflow import pipeline, tensorfile
from angioflow.config import derived_seed, load_config
from angioflow.features import (circle_lens_area, compute_features, foreshortening_angle,
                                foreshortening_map, overlap_map, overlap_ratios)
from angioflow.hemo import (InjectionParams, TransportConfig, WaveformParams, inlet_concentration,
                            injection_rate, simulate_transport, solve_transport, total_flow, waveform)
from angioflow.metrics import (BranchCase, ErrorRecord, aggregate, correlation_table, error_record, mae,
                               mape)
from angioflow.nn.model import ModelConfig, init_params, model_forward
from angioflow.nn.tensor import Tensor, add, conv2d_same, instance_norm, leaky_relu, mae_loss, weighted_sum
from angioflow.nn.train import overfit
from angioflow.projector import CArmTrajectory, forward_project, ray_cylinder_chord, rotation_z
from angioflow.vessel_tree import TreeGenParams, decompose, generate_tree
from conftest import straight_tree, y_tree
from oracles import chord_by_marching, finite_difference_check, inside_cylinder, random_hitting_config, \
    stratified_lens

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.ini"
TINY = ROOT / "configs" / "tiny.ini"


def record(n, ok, detail):
    conftest.ACCEPTANCE_LINES.append(f"[criterion {n:>2}] {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def desk_tree(cfg, gid="g00"):
    return generate_tree(pipeline.tree_params(cfg), derived_seed(cfg.seed, gid), gamma=cfg.generate.flow_gamma)


def test_c01_transport_conservation():
    cfg = load_config(DESK)
    tree = desk_tree(cfg)
    wave, inj, _ = pipeline.boundary_conditions(cfg, "g00", 0)
    inj = dataclasses.replace(inj, t_start=1.0)
    tcfg = TransportConfig(diffusion=cfg.simulate.diffusion, t_end=5.0, max_dt=cfg.simulate.max_dt,
                           frame_rate=cfg.simulate.frame_rate)
    start = time.perf_counter()
    conc = simulate_transport(tree, wave, inj, tcfg)
    elapsed = time.perf_counter() - start
    rel = abs(conc.meta["mass_residual"]) / conc.meta["injected"]
    record(1, rel < 1e-3 and elapsed < 60.0,
           f"P={tree.n_nodes} nodes, 5 s: mass residual {rel:.2e} of injected (< 1e-3), {elapsed:.1f} s (< 60 s)")


def test_c02_advection_and_diffusion():
    h = 0.46
    tree = straight_tree(length=150.0, radius=1.5, h=h)
    u = 1000.0 * 4.0 / (math.pi * 1.5 ** 2)
    res = solve_transport(tree, lambda t: 4.0, lambda t: 1.0,
                          TransportConfig(diffusion=0.0, t_end=0.3, frame_rate=5000.0))
    i = int(np.argmin(np.abs(tree.arc_pos - 100.0)))
    c, t = res.conc.values[i], res.conc.frame_times
    k = int(np.argmax(c >= 0.5))
    t_cross = t[k - 1] + (0.5 - c[k - 1]) * (t[k] - t[k - 1]) / (c[k] - c[k - 1])
    front_err = abs(t_cross - tree.arc_pos[i] / u) / (h / u)

    D, sigma0 = 1.0, 2.0
    line = straight_tree(length=200.0, radius=1.0, h=h)
    x = line.arc_pos - 100.0
    res = solve_transport(line, lambda t: 0.0, lambda t: 0.0,
                          TransportConfig(diffusion=D, t_end=6.0, max_dt=0.05, frame_rate=1.0),
                          c0=np.exp(-0.5 * (x / sigma0) ** 2))
    worst = 0.0
    for k, t in enumerate(res.conc.frame_times):
        c = res.conc.values[:, k]
        m = np.sum(c * x) / c.sum()
        sigma = math.sqrt(np.sum(c * (x - m) ** 2) / c.sum())
        worst = max(worst, abs(sigma / math.sqrt(sigma0 ** 2 + 2 * D * t) - 1))
    record(2, front_err <= 2.0 and worst < 0.01,
           f"front at 100 mm off by {front_err:.2f} node spacings (<= 2); "
           f"sigma(t) worst rel err {worst:.2e} (< 1e-2)")


def test_c03_injection_and_mixing():
    t = np.linspace(0.0, 4.0, 401)
    inj = InjectionParams(q_max=2.5, t_start=1.0, t_lag=0.25, mixing=0.3)
    direct_q = np.where(t >= 1.0, 2.5 * (1.0 - np.exp(-(t - 1.0) / 0.25)), 0.0)
    q_ca = np.array([injection_rate(inj, s) for s in t])
    err5 = np.max(np.abs(q_ca - direct_q))
    wave = WaveformParams(4.0, 0.9, "elderly", 3)
    q_b = np.array([waveform(wave, s) for s in t])
    err4 = np.max(np.abs(np.array([total_flow(b, a, 0.3) for b, a in zip(q_b, q_ca)]) - (q_b + 0.3 * q_ca)))
    c = np.array([inlet_concentration(inj, wave, s) for s in t])
    err6 = np.max(np.abs(c - direct_q / (q_b + 0.3 * direct_q)))
    anchors = (abs(injection_rate(inj, 1.25) - 2.5 * (1 - math.exp(-1))) + abs(total_flow(4.0, 2.5, 0.3) - 4.75))
    worst = max(err4, err5, err6, anchors)
    record(3, worst <= 1e-12, f"inflow algebra vs direct evaluation: max deviation {worst:.1e} (<= 1e-12)")


def test_c04_projector_geometry():
    rng = np.random.default_rng(2024)
    worst_rel = 0.0
    for _ in range(1000):
        o, d, a, b, r, tau = random_hitting_config(rng)
        ref = chord_by_marching(o, d, a, b, r, tau)
        got = ray_cylinder_chord(o, d, a, b, r)
        worst_rel = max(worst_rel, abs(got - ref) / ref)
    # unconstrained rays: dense marching to find an interior point, else the chord must be tiny
    n_miss, worst_miss, worst_free = 0, 0.0, 0.0
    samples = np.linspace(0.0, 40.0, 4001)
    for _ in range(1000):
        a, b = rng.uniform(-4, 4, 3), rng.uniform(-4, 4, 3)
        r = rng.uniform(0.2, 2.0)
        o = rng.uniform(-15, 15, 3)
        d = (a + b) / 2 + rng.normal(0, 3, 3) - o
        d /= np.linalg.norm(d)
        inside = inside_cylinder(o + samples[:, None] * d, a, b, r)
        got = ray_cylinder_chord(o, d, a, b, r)
        if inside.any():
            ref = chord_by_marching(o, d, a, b, r, samples[np.argmax(inside)])
            worst_free = max(worst_free, abs(got - ref) / ref)
        else:
            n_miss += 1
            worst_miss = max(worst_miss, got)
    analytic = [
        (ray_cylinder_chord([-10, 0, 0], [1, 0, 0], [0, 0, -5], [0, 0, 5], 1.0), 2.0),
        (ray_cylinder_chord([-10, 0.6, 0], [1, 0, 0], [0, 0, -5], [0, 0, 5], 1.0), 1.6),
        (ray_cylinder_chord([-10 * math.sin(math.pi / 6), 0, -10 * math.cos(math.pi / 6)],
                            [math.sin(math.pi / 6), 0, math.cos(math.pi / 6)], [0, 0, -50], [0, 0, 50], 1.0), 4.0),
    ]
    analytic_err = max(abs(g - e) for g, e in analytic)

    tree = y_tree()
    traj = CArmTrajectory(det_rows=48, det_cols=48, n_frames=2, alpha0=10.0, beta=15.0)
    c1 = rng.uniform(0, 1, (tree.n_nodes, 2))
    c2 = rng.uniform(0, 1, (tree.n_nodes, 2))
    g = lambda c, tr=tree, tj=traj: forward_project(tr, c, tj).frames
    lin_err = np.max(np.abs(g(0.4 * c1 + 1.5 * c2) - (0.4 * g(c1) + 1.5 * g(c2))))
    turned = forward_project(tree.rotated(rotation_z(23.0)), c1,
                             dataclasses.replace(traj, alpha0=33.0)).frames
    rot_err = np.max(np.abs(turned - g(c1)))
    ok = (worst_rel < 1e-3 and worst_free < 1e-3 and worst_miss < samples[1] and analytic_err <= 1e-9
          and lin_err < 1e-9 and rot_err < 1e-6)
    record(4, ok, f"chord vs marching oracle: max rel {max(worst_rel, worst_free):.1e} over 2000 rays "
                  f"({n_miss} misses, max miss chord {worst_miss:.1e}); analytic err {analytic_err:.1e}; "
                  f"linearity {lin_err:.1e}; rotation {rot_err:.1e}")


def test_c05_overlap_map():
    iso = overlap_ratios(np.array([[3.0, 4.0]]), np.array([1.7]))[0]
    pair = overlap_ratios(np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([1.3, 1.3]))
    rng = np.random.default_rng(7)
    mc_worst = 0.0
    for r1, r2, d in [(1.0, 1.0, 1.0), (0.7, 1.3, 1.1), (2.0, 0.9, 2.5)]:
        ref, n = stratified_lens(r1, r2, d, 10_000_000, rng)
        assert n >= 10_000_000
        mc_worst = max(mc_worst, abs(circle_lens_area(r1, r2, d) / ref - 1))
    cfg = load_config(DESK)
    lo, hi, cases = np.inf, 0.0, 0
    for gid in pipeline.geometry_ids(cfg):
        tree = desk_tree(cfg, gid)
        for j in range(len(cfg.project.trajectories)):
            u = overlap_map(tree, pipeline.trajectory(cfg, j))
            lo, hi = min(lo, u.min()), max(hi, u.max() / tree.n_nodes)
            cases += 1
    ok = iso == 1.0 and np.all(pair == 2.0) and mc_worst < 1e-3 and lo >= 1.0 - 1e-12 and hi <= 1.0
    record(5, ok, f"isolated u={iso!r}, coincident u={pair.tolist()}, lens vs 1e7-sample MC rel {mc_worst:.1e} "
                  f"(< 1e-3), min u {lo:.6f} >= 1 and max u/P {hi:.3f} <= 1 on {cases} desk cases")


def test_c06_foreshortening():
    ray = np.array([1.0, 0.0, 0.0])
    cases = [(np.array([0.0, 1.0, 0.0]), math.pi / 2), (np.array([1.0, 0.0, 0.0]), 0.0),
             (np.array([math.sqrt(0.5), math.sqrt(0.5), 0.0]), math.pi / 4)]
    exact = max(abs(float(foreshortening_angle(ray, t)) - v) for t, v in cases)
    rng = np.random.default_rng(3)
    in_range, folded = True, True
    for seed in range(5):
        tree = generate_tree(TreeGenParams(depth=3), seed=seed)
        traj = CArmTrajectory(alpha0=rng.uniform(-90, 90), beta=rng.uniform(-30, 30), n_frames=6,
                              delta_alpha=10.0)
        v = foreshortening_map(tree, traj)
        flipped = dataclasses.replace(tree, tangents=-tree.tangents)
        in_range &= bool(np.all((v >= 0) & (v <= math.pi / 2)))
        folded &= bool(np.array_equal(v, foreshortening_map(flipped, traj)))
    record(6, exact <= 1e-9 and in_range and folded,
           f"reference angles err {exact:.1e} (<= 1e-9); range [0, pi/2] {in_range}; "
           f"sign-fold {folded} on 5 trees")


def test_c07_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    errs = {}
    x = Tensor(rng.normal(size=(3, 7, 9)), True)
    w = Tensor(rng.normal(size=(4, 3, 5, 5)), True)
    b = Tensor(rng.normal(size=4), True)
    errs["conv2d"] = finite_difference_check(
        lambda: weighted_sum(conv2d_same(x, w, b), rng_probe((4, 7, 9))), [x, w, b], rng)
    g, be = Tensor(rng.normal(size=3), True), Tensor(rng.normal(size=3), True)
    errs["instance_norm"] = finite_difference_check(
        lambda: weighted_sum(instance_norm(x, g, be), rng_probe((3, 7, 9))), [x, g, be], rng)
    errs["leaky_relu"] = finite_difference_check(
        lambda: weighted_sum(leaky_relu(x, 0.01), rng_probe((3, 7, 9))), [x], rng)
    y = Tensor(rng.normal(size=(3, 7, 9)), True)
    errs["add"] = finite_difference_check(lambda: weighted_sum(add(x, y), rng_probe((3, 7, 9))), [x, y], rng)
    errs["mae_loss"] = finite_difference_check(lambda: mae_loss(x, rng_probe((3, 7, 9))), [x], rng)

    cfg = ModelConfig()  # five residual blocks, 16-32-64-64-64 channels, 5x5 kernels
    params = init_params(cfg, 1)
    for p in params.values():  # move off the zero-bias / unit-affine symmetric start
        p.data += rng.normal(0.0, 0.05, p.shape)
    z = Tensor(rng.uniform(0, 1, (3, 6, 10)), True)
    tensors = [z] + list(params.values())
    # mean-scaled probe keeps the loss O(1), so central-difference round-off stays
    # far below the 1e-6 gradient floor (the pre-norm conv biases have zero gradient)
    probe = rng_probe((1, 6, 10)) / 60
    errs["model (weighted sum)"] = finite_difference_check(
        lambda: weighted_sum(model_forward(cfg, params, z), probe), tensors, rng, n_samples=4)
    target = rng.uniform(0, 1, (1, 6, 10))
    errs["model (MAE loss)"] = finite_difference_check(
        lambda: mae_loss(model_forward(cfg, params, z), target), tensors, rng, n_samples=4)
    elapsed = time.perf_counter() - start
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record(7, worst < 1e-4 and elapsed < 300,
           f"max rel err {worst:.1e} (< 1e-4) in {elapsed:.0f} s (< 300 s): {detail}")


_PROBES = {}


def rng_probe(shape):
    # fixed probe per shape so every loss evaluation sees the same weights
    if shape not in _PROBES:
        _PROBES[shape] = np.random.default_rng(len(_PROBES) + 100).normal(size=shape)
    return _PROBES[shape]


def capacity_branch():
    """A 16-node, 64-frame branch cut from a simulated desk-preset case."""
    cfg = load_config(DESK)
    cfg = dataclasses.replace(cfg, simulate=dataclasses.replace(cfg.simulate, n_frames=64))
    tree = desk_tree(cfg)
    wave, inj, tcfg = pipeline.boundary_conditions(cfg, "g00", 0)
    conc = simulate_transport(tree, wave, inj, tcfg)
    traj = pipeline.trajectory(cfg, 0)
    atten = pipeline.attenuation(cfg)
    feats = compute_features(tree, forward_project(tree, conc.values, traj, atten), atten.mu_eff)
    idx = decompose(tree)[0].indices[:16]
    return feats.values[:, idx, :], conc.values[idx]


def test_c08_capacity():
    z, x = capacity_branch()
    losses = overfit(z, x, ModelConfig(), steps=2000, lr=1e-3, schedule="cosine")
    final = losses[-1]
    record(8, final < 1e-3, f"single-branch overfit ({z.shape[1]}x{z.shape[2]}), 2000 Adam steps with cosine "
                            f"step size: train MAE {final:.2e} (< 1e-3)")


@pytest.mark.slow
def test_c09_end_to_end(tmp_path):
    cfg = load_config(DESK)
    g = cfg.global_
    assert (g.n_geometries, g.n_train, g.n_val, g.n_test) == (8, 5, 1, 2)
    assert cfg.simulate.n_bcs == 2 and len(cfg.project.trajectories) == 3
    start = time.perf_counter()
    summary = pipeline.run_all(cfg, tmp_path)
    minutes = (time.perf_counter() - start) / 60
    test = summary["splits"]["test"]
    ratio = test["mae"] / test["baseline_mae"]
    ok = ratio <= 0.6 and test["mae"] <= 0.05 and minutes <= 90
    record(9, ok, f"desk preset test MAE {test['mae']:.4f} (<= 0.05), baseline {test['baseline_mae']:.4f}, "
                  f"ratio {ratio:.3f} (<= 0.6), MAPE {test['mape']:.2f}% ({test['n_excluded']} points <= 0.01 "
                  f"excluded), R2 {test['r2']:.3f}, runtime {minutes:.1f} min (<= 90)")


def test_c10_metric_fidelity():
    checks = {
        "mae": mae([0.0, 1.0], [0.5, 0.5]) == 0.5,
        "mape exclusion": abs(mape([0.005, 0.5], [0.9, 0.55]).percent - 10.0) < 1e-12,
        "mape": abs(mape([0.5], [0.6]).percent - 20.0) < 1e-12,
    }
    rows = []
    for branch in ("b0", "b1", "b2"):
        for k in range(6):
            p = 0.2 * k + (0.1 if branch == "b1" else 0.0)
            rows.append(BranchCase(f"c{k}", branch, 0.5, 0.5, 0.0, 1.0, p, p, p, p, p, p, p))
    cells = correlation_table(rows)
    checks["correlation 1.0"] = all(abs(c.mean_r - 1.0) < 1e-12 and c.n_branches == 3 for c in cells)
    rng = np.random.default_rng(5)
    gap = 0.0
    for _ in range(50):
        # targets above the MAPE threshold keep the groups equal-sized for both metrics
        recs = [error_record(f"c{i}", f"b{j}", rng.uniform(0.02, 1, (8, 5)), rng.uniform(0, 1, (8, 5)))
                for i in range(4) for j in range(3)]
        for metric in ("mae", "mape"):
            by_branch = aggregate(recs, "by_branch", metric).mean
            gap = max(gap, abs(by_branch - aggregate(recs, "by_case", metric).mean))
    checks["equal grand means"] = gap < 1e-9
    record(10, all(checks.values()), ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items())
           + f" (split gap {gap:.1e})")


def test_c11_determinism(tmp_path):
    cfg = load_config(TINY)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        pipeline.run_all(cfg, out)
    tensors = [{p.relative_to(o).as_posix(): p.read_bytes() for p in sorted(o.rglob("*.f32t"))} for o in outs]
    history = [(o / "model" / "loss_history.csv").read_bytes() for o in outs]
    ok = tensors[0] == tensors[1] and history[0] == history[1] and len(tensors[0]) > 0
    record(11, ok, f"two full tiny-preset runs: {len(tensors[0])} tensor files byte-identical "
                   f"{tensors[0] == tensors[1]}, loss history identical {history[0] == history[1]}")
