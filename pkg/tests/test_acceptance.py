"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import time

import mpmath
import numpy as np
import pytest

from replica_sync.cli import main as cli_main
from replica_sync.diffusion import (GaussianMixture, LinearScore, make_vp_schedule, simulate_coupled_ou,
                                    uv_transform)
from replica_sync.dit import DiT, DitConfig, gating_functions
from replica_sync.linear_response import (LayerRef, Perturbation, effective_attention_width,
                                          mean_projector, measure_attention_difference, random_attention,
                                          repartition_propagator, residual_scaling, routing_dominance_bound,
                                          softmax_jacobian_apply)
from replica_sync.numerics import rng_stream
from replica_sync.protocols import (build_mode_basis, capture_trajectory, default_bands, mode_energies,
                                    protocol2_from_captures, protocol2_init, run_protocol1)
from replica_sync.speciation import (ModalProjection, RoutingDominantModel, fixed_point_residual,
                                     fixed_point_residual_repartitioned, kappa, positivity_margin, snr,
                                     snr_expanded, solve_self_consistency)


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, detail


def unit(rng, shape):
    h = rng.standard_normal(shape)
    return h / np.linalg.norm(h)


def test_01_linearization_completeness(capsys):
    model = DiT(DitConfig())
    rng = rng_stream(0, "acceptance-1")
    t0 = time.perf_counter()
    slopes = []
    for state in range(20):
        ref = LayerRef.at(model, state % model.cfg.layers, float(rng.uniform(0, 1000)))
        H0 = rng.standard_normal((model.cfg.tokens, model.cfg.d_model))
        h = unit(rng, H0.shape)
        for g in (0.0, 0.3, 0.7, 1.0):
            slopes.append(residual_scaling(ref, H0, h, g, (1e-1, 1e-2, 1e-3, 1e-4))[1])
    elapsed = time.perf_counter() - t0
    slopes = np.asarray(slopes)
    ok = bool(np.all((slopes >= 1.9) & (slopes <= 2.1))) and elapsed < 60
    report(capsys, 1, ok, f"residual log-log slopes in [{slopes.min():.3f}, {slopes.max():.3f}] "
                          f"(required [1.9, 2.1]) over 80 cases, {elapsed:.1f}s")


def test_02_prefactor_recovery(capsys):
    model = DiT(DitConfig())
    rng = rng_stream(0, "acceptance-2")
    worst_rho = worst_xi = 0.0
    for layer in range(model.cfg.layers):
        ref = LayerRef.at(model, layer, float(rng.uniform(0, 1000)))
        H0 = rng.standard_normal((model.cfg.tokens, model.cfg.d_model))
        h = unit(rng, H0.shape)
        for g in np.linspace(0.0, 1.0, 11):
            rho, xi = gating_functions(g)
            a, b = measure_attention_difference(ref, H0, Perturbation(h, 1e-5), g).fit_prefactors()
            # rho(1) = 0: the relative error is taken against max(rho, 1)
            worst_rho = max(worst_rho, abs(a - rho) / max(rho, 1.0))
            worst_xi = max(worst_xi, abs(b - xi) / xi)
    ok = worst_rho <= 1e-6 and worst_xi <= 1e-6
    report(capsys, 2, ok, f"max relative prefactor error rho {worst_rho:.2e}, xi {worst_xi:.2e} (tol 1e-6)")


def test_03_softmax_identities_and_bound(capsys):
    rng = rng_stream(0, "acceptance-3")
    n = 16
    P0 = mean_projector(n)
    rowsum = a0p0 = 0.0
    for _ in range(10 ** 4):
        A0 = random_attention(rng, n, rng.uniform(0.1, 3.0))
        dA = softmax_jacobian_apply(A0, rng.standard_normal((n, n)))
        rowsum = max(rowsum, float(np.abs(dA.sum(axis=1)).max()))
        a0p0 = max(a0p0, float(np.abs(A0 @ P0 - P0).max()))
    in_regime = violations = 0
    while in_regime < 1000:
        A0 = random_attention(rng, n, rng.uniform(0.1, 3.0))
        V0 = rng.standard_normal(4) + 0.3 * rng.standard_normal((n, 4))
        dV = rng.standard_normal(4) + 0.1 * rng.standard_normal((n, 4))
        res = routing_dominance_bound(A0, V0, 0.1 * rng.standard_normal((n, n)), dV)
        if res.in_regime:
            in_regime += 1
            violations += int(not res.holds)
    one_hot = effective_attention_width(np.eye(n))
    uniform = effective_attention_width(np.full((n, n), 1.0 / n))
    endpoints = bool(np.all(one_hot == 1.0) and np.all(uniform == float(n)))
    ok = rowsum <= 1e-14 and a0p0 <= 1e-12 and violations == 0 and endpoints
    report(capsys, 3, ok, f"max |dA 1| {rowsum:.1e}, max |A0P0-P0| {a0p0:.1e} on 1e4; "
                          f"{violations} violations on {in_regime} in-regime; N_eff endpoints exact={endpoints}")


def test_04_bifurcation_solver(capsys):
    mpmath.mp.dps = 40
    oracle = float(mpmath.findroot(lambda u: u - 2 * mpmath.tanh(u), 1.9))
    err2 = abs(solve_self_consistency(2.0) - oracle)
    rng = rng_stream(0, "acceptance-4")
    sub = all(solve_self_consistency(k) == 0.0 for k in rng.uniform(0.0, 1.0, 100))
    eps = 1e-4
    near = solve_self_consistency(1 + eps) / np.sqrt(3 * eps)
    ok = err2 <= 1e-10 and sub and abs(near - 1) <= 0.1
    report(capsys, 4, ok, f"|u*(2) - oracle| {err2:.1e}; subcritical zero={sub}; "
                          f"u*/sqrt(3 eps) = {near:.4f} at eps=1e-4")


def test_05_snr_coherence(capsys):
    rng = rng_stream(0, "acceptance-5")
    worst_forms = worst_kappa = worst_rep = 0.0
    count = 0
    while count < 1000:
        g = rng.uniform(0, 1)
        proj = ModalProjection.from_components(rng.uniform(0.1, 3.0), rng.normal(0, 2), rng.normal(0, 0.3),
                                               rng.normal(0, 0.5), rng.normal(0, 0.5), g)
        gamma = rng.uniform(0.1, 3.0)
        if positivity_margin(proj, gamma) <= 1e-2:
            continue
        count += 1
        s = snr(proj, gamma)
        scale = max(1.0, abs(s))
        worst_forms = max(worst_forms, abs(s - snr_expanded(proj, gamma, g)) / scale)
        k = kappa(proj, gamma)
        worst_kappa = max(worst_kappa, abs(k - gamma * s) / max(1.0, abs(k)))
        n = int(rng.integers(2, 7))
        a = rng.standard_normal((n, n))
        mix = GaussianMixture(rng.standard_normal(n), a @ a.T / n + np.eye(n))
        K = 0.5 * rng.standard_normal((n, n))
        v = rng.standard_normal(n)
        r1 = fixed_point_residual(v, K, mix, gamma)
        r2 = fixed_point_residual_repartitioned(v, repartition_propagator(K, mix, gamma), mix, gamma)
        worst_rep = max(worst_rep, abs(r1 - r2))
    ok = worst_forms <= 1e-12 and worst_kappa <= 1e-12 and worst_rep <= 1e-10
    report(capsys, 5, ok, f"SNR forms {worst_forms:.1e}, kappa-gamma*SNR {worst_kappa:.1e}, "
                          f"repartition {worst_rep:.1e} over 1000 instances")


G_GRID = [round(0.1 * i, 10) for i in range(11)]


def test_06a_snr_split_proportional_to_rho(capsys):
    model = RoutingDominantModel()
    ratios = np.array([model.snr_split(g) / gating_functions(g)[0] for g in G_GRID[:-1]])
    spread = float(np.ptp(ratios) / np.abs(ratios).mean())
    report(capsys, "6a", spread <= 1e-9,
           f"relative spread of (SNR_hi - SNR_lo)/rho over g in [0, 0.9] = {spread:.3e} (tol 1e-9)")


def test_06b_gap_non_increasing(capsys):
    model = RoutingDominantModel()
    gaps = [model.gap_report(g).gap for g in G_GRID]
    ok = all(x is not None for x in gaps) and bool(np.all(np.diff(gaps) <= 0))
    report(capsys, "6b", ok, "gap steps " + ", ".join(f"{x:.2f}" for x in gaps))


def test_07_coupled_ou_damping(capsys):
    sched = make_vp_schedule(100, 0.1, 20.0, horizon=1.0)
    score = LinearScore(sched, 0.5)
    mid = sched.S // 2
    t0 = time.perf_counter()
    v_var = []
    for g in (0.0, 0.25, 0.5, 0.75, 1.0):
        traj = simulate_coupled_ou(sched, score.score, g, 10 ** 4, 4, 1.0, rng_seed=0, record_steps=[mid])
        _, v = uv_transform(traj[mid])
        v_var.append(float(np.var(v, axis=0).mean()))
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(np.diff(v_var) < 0)) and elapsed < 120
    report(capsys, 7, ok, "mid-trajectory v variance " + ", ".join(f"{x:.4f}" for x in v_var)
           + f" ({elapsed:.1f}s)")


def test_08_gram_equivalence(capsys):
    worst = 0.0
    unit_energy = True
    for seed in range(5):
        rng = rng_stream(seed, "acceptance-8")
        V0 = rng.standard_normal((32, 512)) * rng.uniform(0.1, 2.0, 512)
        basis = build_mode_basis(V0, 32)
        primal = np.sort(np.linalg.eigvalsh(V0.T @ V0 / 32))[::-1][:32]
        worst = max(worst, float(np.max(np.abs(basis.eigenvalues - primal) / primal)))
        unit_energy &= bool(np.all(mode_energies(V0, basis) == 1.0))
    ok = worst <= 1e-8 and unit_energy
    report(capsys, 8, ok, f"max relative eigenvalue mismatch {worst:.1e}; lambda_k(0) == 1 exactly: {unit_energy}")


@pytest.fixture(scope="module")
def protocol1_runs(analytic_backend, sched, mixture):
    t0 = time.perf_counter()
    runs = [run_protocol1(analytic_backend, sched, g, np.arange(0, sched.S + 1, 2), M=32, mix=mixture)
            for g in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)]
    return runs, time.perf_counter() - t0


def test_09_protocol1_trend(capsys, protocol1_runs):
    runs, elapsed = protocol1_runs
    taus = [r.tau_spec for r in runs]
    pairs = int(np.sum(np.diff(taus) <= 0))
    # six grid points give five adjacent pairs; all of them are required
    ok = pairs >= 5 and elapsed < 600
    report(capsys, 9, ok, "tau_spec " + ", ".join(f"{t:.2f}" for t in taus)
           + f"; non-increasing pairs {pairs}/5 ({elapsed:.0f}s)")


def test_10_output_gap(capsys, protocol1_runs):
    runs, _ = protocol1_runs
    ok = all(r.tau_g < r.tau_l for r in runs)
    report(capsys, 10, ok, "delta_tau " + ", ".join(f"{r.delta_tau:.2f}" for r in runs))


def test_11_uncoupled_protocol2(capsys, dit_backend, sched):
    zA, zB = protocol2_init(dit_backend, 32, 1.0, 0)
    joint = capture_trajectory(dit_backend, sched, zA, zB, 0.0)
    indep = capture_trajectory(dit_backend, sched, zA, zB, 0.0, independent=True)
    layers = list(range(dit_backend.layers))
    a = protocol2_from_captures(joint, 0.0, 50, layers, 16, default_bands(16))
    b = protocol2_from_captures(indep, 0.0, 50, layers, 16, default_bands(16))
    worst = max(float(np.max(np.abs(a.energies[l] - b.energies[l]))) for l in layers)
    report(capsys, 11, worst <= 1e-10, f"max energy difference {worst:.1e} over {len(layers)} layers")


DETERMINISM = {
    "simulate-ou": ["--seeds", "500"],
    "verify-linearization": ["--n-states", "1", "--n-bound", "20"],
    "bounds-check": ["--instances", "200"],
    "bifurcation": [],
    "protocol1": ["--seeds", "8", "--t-stride", "10", "--n-boot", "100"],
    "protocol2": ["--seeds", "16", "--modes", "8", "--tau-spec", "40"],
    "calibrate": ["--n-samples", "640"],
}


def test_12_determinism(capsys, tmp_path, monkeypatch):
    mismatched = []
    for command, extra in DETERMINISM.items():
        outputs = []
        for i, threads in enumerate(("1", "1", "3")):
            monkeypatch.setenv("REPLICA_SYNC_THREADS", threads)
            out = tmp_path / f"{command}-{i}"
            assert cli_main([command, "--out", str(out), *extra]) == 0
            outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        if not (outputs[0] == outputs[1] == outputs[2]):
            mismatched.append(command)
    report(capsys, 12, not mismatched,
           f"{len(DETERMINISM) - len(mismatched)}/{len(DETERMINISM)} subcommands bit-identical "
           "across reruns and thread caps 1/3" + (f"; mismatched: {mismatched}" if mismatched else ""))
