"""Acceptance criteria, each at its stated tolerance and runtime.

Every test prints one ``criterion N: PASS|FAIL`` line before asserting.
"""

import time

import numpy as np
import pytest

from conftest import coordinate_planes_r3, cross_r2, linear
from test_transversality import common_normal_oracle, random_pair
from strataflow.cw import assemble_cw, branch_coherence, homology_from_cw, skeleton_distance
from strataflow.flows import TranslationFlow
from strataflow.morse import FlowedSet, MorseModel, build_tube_system, deviation_slope, magic_fact_deviation, \
    tilted_seed
from strataflow.scenarios import TWO_PI, get_scenario
from strataflow.strata import (Chart, ConeBundle, ConicSet, Link, Linear, RadialCone, StratifiedSet, Stratum,
                               alexander_rescale, empty_link, hausdorff, point_link, unit_sphere_strata)
from strataflow.synthesis import (ChartedPartition, FunctionSection, SumSection, adversarial_perturbation,
                                  c1_distance, circle_stratum, normal_section, openness_margin,
                                  sample_generic_section, section_is_generic, synthesize_immediate_flow,
                                  tubular_section_flow)
from strataflow.tolerances import DEFAULT
from strataflow.transversality import (coplanarity_test, critical_value_test, default_t_grid,
                                       flow_family_transversality, generic_translation_sample,
                                       immediate_transversality_verify)


@pytest.fixture
def say(capsys):
    def emit(n, ok, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
        return ok
    return emit


def test_1_coplanarity_oracle(say):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    agree = 0
    for _ in range(1000):
        t1, t2, n = random_pair(rng)
        agree += coplanarity_test(t1, t2, n, DEFAULT.with_overrides(rank_tol=1e-8)) == common_normal_oracle(t1, t2, n)
    took = time.perf_counter() - start
    assert say(1, agree == 1000 and took < 10, f"agree={agree}/1000 time={took:.2f}s")


def random_cone(rng):
    n = int(rng.integers(2, 4))
    strata = []
    for i in range(int(rng.integers(1, 5))):
        d = 1 if n == 2 else int(rng.integers(1, 3))
        basis = rng.standard_normal((d, n))
        kind = rng.random()
        if d == 1 and kind < 0.3:
            lo, hi = [0.0], [np.inf]
        elif d == 1 and kind < 0.5:
            lo, hi = [-np.inf], [0.0]
        else:
            lo, hi = None, None
        strata.append(linear(f"s{i}", basis, np.zeros(n), lo, hi))
    return StratifiedSet(n, strata)


def test_2_critical_set_conicity(say):
    rng = np.random.default_rng(99)
    start = time.perf_counter()
    checked = agree = critical = 0
    for _ in range(200):
        c = random_cone(rng)
        u = rng.standard_normal((50, c.ambient_dim))
        # half the samples lie in a stratum direction, where the translate overlaps
        for j in range(25):
            s = c.strata[j % len(c.strata)]
            u[j] = rng.standard_normal(s.dim) @ s.rep.basis
        base = critical_value_test(c, c, u)
        critical += int(np.sum(base))
        for sc in (0.5, 2.0, 10.0):
            agree += int(np.sum(critical_value_test(c, c, sc * u) == base))
            checked += 50
    took = time.perf_counter() - start
    ok = agree == checked and critical > 0 and took < 30
    assert say(2, ok, f"agree={agree}/{checked} critical={critical} time={took:.2f}s")


def test_3_step_one_genericity(say):
    rates = {}
    failures = 0
    for name, sigma in (("cross", cross_r2()), ("planes", coordinate_planes_r3())):
        within = 0
        for seed in range(1000):
            u, tries = generic_translation_sample(sigma, rng_seed=seed)
            within += tries <= 5
            cert = immediate_transversality_verify(sigma, TranslationFlow(u), 1.0, default_t_grid(1.0, 16))
            failures += not cert.passed
        rates[name] = within / 1000
    ok = min(rates.values()) >= 0.99 and failures == 0
    assert say(3, ok, f"within5={rates} failed_certificates={failures}")


def test_4_magic_fact(say):
    m = MorseModel(3, 1)
    start = time.perf_counter()
    rows = magic_fact_deviation(FlowedSet(m, tilted_seed(m, np.pi / 4)), [m.r_minus, 0.0, 0.0],
                                [2.0 ** -i for i in range(1, 11)])
    took = time.perf_counter() - start
    d = [v for _, v in rows]
    slope = deviation_slope(rows)
    ok = all(b < a for a, b in zip(d, d[1:])) and d[-1] < 1e-2 and slope >= 0.9 and took < 5
    assert say(4, ok, f"final={d[-1]:.3g} slope={slope:.3f} time={took:.2f}s")


def perturbed_cone_catalog():
    plane = Link(2, StratifiedSet(3, unit_sphere_strata(np.eye(3)[:2], "eq")))
    tilted = Link(2, StratifiedSet(3, unit_sphere_strata(np.array([[1.0, 0.0, 0.3], [0.0, 1.0, -0.2]]), "tq")))
    return {
        "parabola": ConicSet(RadialCone(point_link([[1.0, 0.0]])), push=np.array([0.0, 1.0])),
        "sheared tripod": ConicSet(RadialCone(point_link([[1.0, 0.0], [0.0, 1.0], [-0.6, -0.8]])),
                                   linear=np.array([[1.0, 0.2], [0.0, 1.0]]), push=np.array([0.3, -0.4])),
        "bent cross": ConicSet(RadialCone(point_link([[1, 0], [-1, 0], [0, 1], [0, -1]])),
                               push=np.array([0.5, 0.5])),
        "paraboloid": ConicSet(RadialCone(plane), push=np.array([0.0, 0.0, 0.5])),
        "tilted bowl": ConicSet(RadialCone(tilted), push=np.array([0.1, -0.2, 0.4])),
        "space tripod": ConicSet(RadialCone(point_link(np.eye(3))), push=np.array([-0.2, 0.3, 0.25])),
    }


def test_5_alexander_linearization(say):
    ratios = {}
    for name, c in perturbed_cone_catalog().items():
        radial = 2048 if c.cone.ambient_dim == 2 else 512
        tc = c.tangent().sample(radial=radial)
        d1 = hausdorff(alexander_rescale(c, 1.0).sample(radial=radial), tc)
        d10 = hausdorff(alexander_rescale(c, 2.0 ** -10).sample(radial=radial), tc)
        ratios[name] = d10 / d1
    worst = max(ratios.values())
    assert say(5, worst < 1e-2, f"worst ratio={worst:.3g} over {len(ratios)} cones")


def test_6_cw_oracle(say):
    start = time.perf_counter()
    out = {}
    exact = True
    for name in ("sphere_height", "torus_height"):
        model = assemble_cw(name)
        for k in model.boundaries:
            if k + 1 in model.boundaries and model.boundaries[k].size and model.boundaries[k + 1].size:
                exact &= not np.any(model.boundaries[k] @ model.boundaries[k + 1])
        out[name] = homology_from_cw(model)
    took = time.perf_counter() - start
    ok = (out["sphere_height"] == [(1, []), (0, []), (1, [])]
          and out["torus_height"] == [(1, []), (2, []), (1, [])] and exact and took < 60)
    betti = {k: tuple(b for b, _ in v) for k, v in out.items()}
    assert say(6, ok, f"betti={betti} time={took:.2f}s")


def test_7_attaching_coherence(say):
    ts = build_tube_system(get_scenario("torus_height"))
    worst, pts = branch_coherence(ts, count=10 ** 4)
    off = float(np.max(skeleton_distance(ts.scenario, pts)))
    ok = worst <= 1e-6 and off <= 1e-6 and len(pts) >= 10 ** 4
    assert say(7, ok, f"branch gap={worst:.3g} skeleton={off:.3g} samples={len(pts)}")


def test_8_pipeline(say):
    start = time.perf_counter()
    bad = []
    kappas = []
    for seed in range(20):
        cert = synthesize_immediate_flow("torus_height", rng_seed=seed).certificate
        kappas.append(cert.kappa_hat)
        linear_ok = all(r.min_angle >= 0.5 * cert.kappa_hat * r.t for r in cert.rows)
        if not (cert.passed and cert.kappa_hat > 0 and linear_ok):
            bad.append(seed)
    took = time.perf_counter() - start
    ok = not bad and took < 300
    assert say(8, ok, f"failing seeds={bad} min kappa={min(kappas):.3g} time={took:.1f}s")


def test_9_toy_example(say):
    s = circle_stratum()
    u = normal_section(s, lambda a: np.sin(2 * a))
    eps = 0.1
    _, coarse = tubular_section_flow(s, u, eps, default_t_grid(eps, 16))
    _, fine = tubular_section_flow(s, u, eps, eps * 2.0 ** -np.arange(0, 15.5, 0.5))
    stable = abs(fine.slope / coarse.slope - 1) <= 0.2
    ok = coarse.passed and fine.passed and coarse.slope > 0 and stable
    assert say(9, ok, f"slope coarse={coarse.slope:.4f} fine={fine.slope:.4f}")


def circle_bundle():
    base = Stratum("base", 1, 1, Linear([[1.0]], [0.0], [0.0], [TWO_PI]))
    return ConeBundle(base, RadialCone(empty_link(1)), [Chart([-np.inf], [np.inf])], (TWO_PI,))


def test_10_openness(say):
    cb = circle_bundle()
    part = ChartedPartition.uniform(0.0, TWO_PI, 4, 0.5, period=(TWO_PI,))
    sigma = sample_generic_section(cb, 5, 20, part, 1.0)
    margin = openness_margin(sigma, cb)
    xs = np.linspace(0.0, TWO_PI, 1024)[:, None]
    zero = FunctionSection(lambda x: 0.0 * x)
    rng = np.random.default_rng(10)
    passed = 0
    for _ in range(100):
        a, b = rng.standard_normal((2, 5))

        def raw(x, a=a, b=b):
            k = np.arange(5)
            return np.sum(a * np.cos(k * x) + b * np.sin(k * x), axis=1, keepdims=True)

        size = c1_distance(FunctionSection(raw), zero, xs)
        delta = FunctionSection(lambda x, raw=raw, size=size: raw(x) * (margin / 4) / size)
        passed += section_is_generic(cb, SumSection(sigma, delta))
    adv = adversarial_perturbation(sigma, cb, 4 * margin)
    control = adv is not None and not section_is_generic(cb, SumSection(sigma, adv))
    ok = passed == 100 and control
    assert say(10, ok, f"margin={margin:.3g} small passed={passed}/100 adversarial rejected={control}")


def test_11_flow_family(say):
    cases = [(cross_r2(), [1.0, 2.0]), (cross_r2().translated([0.3, 0.7]), [0.4, -1.1])]
    for seed in range(10):
        for sigma in (cross_r2(), coordinate_planes_r3()):
            cases.append((sigma, generic_translation_sample(sigma, rng_seed=seed)[0]))
    certified = held = 0
    for sigma, u in cases:
        flow = TranslationFlow(u)
        if not immediate_transversality_verify(sigma, flow, 1.0).passed:
            continue
        certified += 1
        held += flow_family_transversality(sigma, flow, 0.5, 1.0, grid=8)
    ok = certified > 0 and held == certified
    assert say(11, ok, f"held={held}/{certified}")
