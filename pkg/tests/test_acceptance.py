"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) before
asserting.  Solver outputs produced along the way are collected and
re-checked by the shape-prior criterion, which runs last.
"""

import resource
import time

import numpy as np

from gvfcut.gvf import (GvfParams, binary_gradient, build_flow, compute_gvf,
                        path_violations)
from gvfcut.harness import (C_SHAPE, PerturbParams, PhantomSpec, make_phantom, nested_rings_pipeline,
                            perturb_labels, prior_value_experiment, rasterize, sensitivity_experiment)
from gvfcut.maxflow import INF, SExcessGraph, solve_s_excess
from gvfcut.metrics import assd, dsc
from gvfcut.mrf import (PairwiseTerm, ShapePrior, log_likelihood_unary, pairwise_edges, solve_binary)
from gvfcut.multiobject import segment_joint, verify_constraints
from gvfcut.volume import LabelVolume

from conftest import brute_assd, brute_sexcess, random_joint, random_mrf, random_sexcess, record

# (labels, flow) pairs and (labels, constraints, spacing, flows, masks) tuples
PRIOR_OUTPUTS = []
JOINT_OUTPUTS = []


def test_criterion_01_single_object_exactness():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    mismatches = count = 0
    for dims in ((3, 3), (2, 2, 2)):
        for i in range(200):
            penalty = [np.inf, None, float(rng.uniform(0.1, 3.0))][i % 3]
            unary, edges, prior, best = random_mrf(rng, dims, penalty)
            sol = solve_binary(unary, edges, prior)
            mismatches += sol.energy != best
            count += 1
            if prior is not None and prior.infinite:
                PRIOR_OUTPUTS.append((sol.labels, prior.flow))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10
    record(1, ok, f"{count} instances, {mismatches} energy mismatches, {elapsed:.2f}s (< 10s)")
    assert ok


def test_criterion_02_joint_exactness():
    t0 = time.perf_counter()
    mismatches, per_kind = 0, {}
    for kind, seed in (("inclusion", 201), ("exclusion", 202), ("max_distance", 203)):
        rng = np.random.default_rng(seed)
        per_kind[kind] = 0
        for _ in range(200):
            n = int(rng.integers(2, 9))
            objects, c, spacing, best = random_joint(rng, kind, (1, n))
            sol = segment_joint(objects, [c], spacing)
            mismatches += sol.energy != best
            per_kind[kind] += 1
            flows = {o.id: o.prior.flow for o in objects if o.prior is not None}
            JOINT_OUTPUTS.append((sol.labels.data, [c], spacing, flows, sol.masks))
            for o in objects:
                if o.prior is not None:
                    PRIOR_OUTPUTS.append((sol.masks[o.id], o.prior.flow))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30 and min(per_kind.values()) >= 200
    record(2, ok, f"{per_kind}, {mismatches} energy mismatches, {elapsed:.2f}s (< 30s)")
    assert ok


def test_criterion_03_s_excess_oracle():
    rng = np.random.default_rng(301)
    mismatches = with_inf = 0
    for _ in range(500):
        n, w, edges = random_sexcess(rng, 16)
        g = SExcessGraph(n, w)
        if edges:
            g.add_edges([e[0] for e in edges], [e[1] for e in edges],
                        [INF if e[2] is None else e[2] for e in edges])
        with_inf += any(e[2] is None for e in edges)
        mismatches += solve_s_excess(g).objective != brute_sexcess(n, w, edges)
    ok = mismatches == 0
    record(3, ok, f"500 graphs ({with_inf} with INF edges), {mismatches} mismatches")
    assert ok


def test_criterion_05_gvf_solver():
    details, ok = [], True
    for name, mask in (("disc", rasterize(PhantomSpec("disc", (64, 64), radii=(10.0,)))[0]),
                       ("c-shape", rasterize(C_SHAPE)[0])):
        g = binary_gradient(LabelVolume(mask), 1)
        hist = []
        compute_gvf(g, GvfParams(), history=hist)  # raises on any increase
        mono = bool(np.all(np.diff(hist) <= 0))
        ok &= mono
        details.append(f"{name}: {len(hist) - 1} iters monotone={mono}")

    g = binary_gradient(LabelVolume(rasterize(C_SHAPE)[0]), 1)
    h = compute_gvf(g, GvfParams(mu=0.0))
    band = np.sum(g.vectors**2, axis=0) > 0
    err0 = float(np.abs(h.vectors - g.vectors)[:, band].max())
    ok &= err0 == 0.0

    from scipy.linalg import solve_banded
    prof = np.zeros(30, np.uint8)
    prof[6:20] = 1
    g1 = binary_gradient(LabelVolume(prof[None, :]), 1)
    mu = 1.0
    h1 = compute_gvf(g1, GvfParams(mu=mu, max_iters=500_000, tol=1e-13))
    gx = g1.vectors[1, 0]
    ab = np.zeros((3, gx.size))
    ab[0, 1:] = ab[2, :-1] = -mu
    deg = np.full(gx.size, 2.0)
    deg[[0, -1]] = 1.0
    ab[1] = gx**2 + mu * deg
    err1 = float(np.abs(h1.vectors[1, 0] - solve_banded((1, 1), ab, gx**3)).max())
    ok &= err1 < 1e-3
    record(5, ok, "; ".join(details) + f"; mu=0 max err {err0:g}; 1D vs tridiagonal {err1:.2e} (< 1e-3)")
    assert ok


def test_criterion_06_prior_value():
    t0 = time.perf_counter()
    with_prior, without = prior_value_experiment(range(10))
    elapsed = time.perf_counter() - t0
    gain = float(with_prior.mean() - without.mean())
    ok = gain >= 0.05 and elapsed < 60
    record(6, ok, f"DSC with prior {with_prior.mean():.4f}, without {without.mean():.4f}, "
                  f"gain {gain:.4f} (>= 0.05), {elapsed:.1f}s (< 60s)")
    assert ok


def _sensitivity(spec):
    rows, cells = sensitivity_experiment(spec, (0, 2, 5, 10), range(10), return_cells=True)
    for _, _, lab, prior in cells:
        PRIOR_OUTPUTS.append((lab.data, prior.flow))
    pre_drop = rows[0].preseg_dsc - rows[-1].preseg_dsc
    fin_drop = rows[0].final_dsc - rows[-1].final_dsc
    above = all(r.final_dsc >= r.preseg_dsc for r in rows)
    ratio = fin_drop / pre_drop if pre_drop > 0 else float("inf")
    return rows, ratio, above, fin_drop <= 0.5 * pre_drop


def test_criterion_07_sensitivity_trend():
    t0 = time.perf_counter()
    spec3 = PhantomSpec("c-shape", (32, 32, 32), radii=(5.0, 12.0), gap=6.0, noise=0.5, hole_rate=0.05)
    parts, ok = [], True
    for name, spec in (("64^2", C_SHAPE), ("32^3", spec3)):
        rows, ratio, above, within = _sensitivity(spec)
        ok &= above and within
        table = " ".join(f"s={r.sigma_ptb:g}:{r.preseg_dsc:.3f}->{r.final_dsc:.3f}" for r in rows)
        parts.append(f"{name} drop ratio {ratio:.3f} (<= 0.5), final>=preseg {above} [{table}]")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 300
    record(7, ok, "; ".join(parts) + f"; {elapsed:.1f}s (< 300s)")
    assert ok


def test_criterion_08_metrics_oracle():
    rng = np.random.default_rng(801)
    worst = 0.0
    for i in range(100):
        ndim = 2 + i % 2
        hi = 13
        dims = tuple(int(x) for x in rng.integers(2, hi, ndim))
        spacing = tuple(float(s) for s in rng.choice([0.5, 1.0, 1.25, 2.0], ndim))
        a = rng.random(dims) < rng.uniform(0.05, 0.7)
        b = rng.random(dims) < rng.uniform(0.05, 0.7)
        a.ravel()[0] = b.ravel()[-1] = True
        worst = max(worst, abs(assd(a, b, None, spacing) - brute_assd(a, b, spacing)))
    sq_a = np.zeros((8, 8), bool)
    sq_b = np.zeros((8, 8), bool)
    sq_c = np.zeros((8, 8), bool)
    sq_a[1:3, 1:3] = True
    sq_b[1:3, 2:4] = True
    sq_c[5:7, 5:7] = True
    hand = (dsc(sq_a, sq_a, None), dsc(sq_a, sq_c, None), dsc(sq_a, sq_b, None))
    ok = worst < 1e-9 and hand == (1.0, 0.0, 0.5)
    record(8, ok, f"100 random pairs, max |ASSD - all-pairs| {worst:.1e} (< 1e-9); DSC hand cases {hand}")
    assert ok


def test_criterion_09_nested_rings():
    ph, sol, report, scores, flow = nested_rings_pipeline(delta=1.0, max_dist=6.0)
    JOINT_OUTPUTS.append((sol.labels.data, report_constraints(), sol.labels.spacing,
                          {1: flow, 2: flow}, sol.masks))
    for k in (1, 2):
        PRIOR_OUTPUTS.append((sol.masks[k], flow))
    ok = report.ok and min(scores.values()) >= 0.95
    record(9, ok, f"violations {len(report.violations)}, DSC inner {scores[1]:.4f} outer {scores[2]:.4f} (>= 0.95)")
    assert ok


def report_constraints():
    from gvfcut.multiobject import InteractionConstraint
    return [InteractionConstraint("inclusion", 1, 2, 1.0), InteractionConstraint("max_distance", 1, 2, 6.0)]


def test_criterion_10_performance():
    spec = PhantomSpec("disc", (128, 128, 128), radii=(40.0,), noise=0.3)
    ph = make_phantom(spec, seed=0)
    preseg = perturb_labels(ph.ground_truth, PerturbParams((20, 20, 20), 2.0, seed=1))
    t0 = time.perf_counter()
    _, _, flow = build_flow(preseg, 1)
    t_gvf = time.perf_counter() - t0

    t0 = time.perf_counter()
    unary = log_likelihood_unary(ph.prob.data)
    edges = pairwise_edges(ph.observation, PairwiseTerm(lam=2.0, sigma=0.1, alpha=0.25, beta=0.5))
    sol = solve_binary(unary, edges, ShapePrior(flow))
    t_cut = time.perf_counter() - t0
    peak_gb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 2**20
    score = dsc(sol.labels, ph.ground_truth.data, 1)
    viol = path_violations(sol.labels, flow).size
    PRIOR_OUTPUTS.append((sol.labels, flow))
    ok = t_cut < 60 and peak_gb < 8
    record(10, ok, f"128^3 build+solve {t_cut:.1f}s (< 60s), peak RSS {peak_gb:.2f} GB (< 8), "
                   f"DSC {score:.4f}, prior violations {viol}; GVF prior from pre-seg took {t_gvf:.1f}s")
    assert ok


def test_criterion_04_shape_prior_guarantee():
    # fresh outputs so the check is meaningful when run on its own
    rng = np.random.default_rng(401)
    for _ in range(50):
        unary, edges, prior, _ = random_mrf(rng, (3, 4))
        PRIOR_OUTPUTS.append((solve_binary(unary, edges, prior).labels, prior.flow))
    for kind in ("inclusion", "exclusion", "max_distance"):
        for _ in range(30):
            objects, c, spacing, _ = random_joint(rng, kind, (3, 3))
            sol = segment_joint(objects, [c], spacing)
            flows = {o.id: o.prior.flow for o in objects if o.prior is not None}
            JOINT_OUTPUTS.append((sol.labels.data, [c], spacing, flows, sol.masks))
            for o in objects:
                if o.prior is not None:
                    PRIOR_OUTPUTS.append((sol.masks[o.id], o.prior.flow))

    path_bad = sum(path_violations(lab, flow).size for lab, flow in PRIOR_OUTPUTS)
    cons_bad = 0
    for labels, cons, spacing, flows, masks in JOINT_OUTPUTS:
        cons_bad += len(verify_constraints(labels, cons, spacing, flows, masks).violations)
    ok = path_bad == 0 and cons_bad == 0
    record(4, ok, f"{len(PRIOR_OUTPUTS)} outputs path-scanned: {path_bad} prior violations; "
                  f"{len(JOINT_OUTPUTS)} joint outputs checked: {cons_bad} constraint violations")
    assert ok
