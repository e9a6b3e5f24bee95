import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import linear
from strataflow.errors import (ExhaustedTries, NonTransverseZero, NotLinearized, PerturbationTooLarge,
                               SplitIllConditioned, StageError)
from strataflow.morse import build_tube_system
from strataflow.scenarios import TWO_PI, get_scenario
from strataflow.strata import Chart, ConeBundle, RadialCone, empty_link, point_link
from strataflow.synthesis import (ChartedPartition, SumSection, adversarial_perturbation, ConstantSection, FunctionSection, GluedSection,
                                  TranslationField, balanced_reduce, c1_distance, circle_stratum,
                                  glue_relative, homogeneity_check, normal_section, openness_margin,
                                  reduce_field, sample_generic_section, section_is_generic,
                                  synthesize_immediate_flow, translation_action, tubular_section_flow,
                                  verify_gluing)
from strataflow.transversality import default_t_grid


def line_bundle(lo=0.0, hi=1.0, matrix=None, period=None):
    base = linear("b", [1.0], [0.0], [lo], [hi])
    cone = RadialCone(point_link([[1.0, 0.0], [-1.0, 0.0]]))
    return ConeBundle(base, cone, [Chart([-np.inf], [np.inf], matrix or {"kind": "identity"})], period)


def point_bundle(lo=0.0, hi=1.0):
    base = linear("b", [1.0], [0.0], [lo], [hi])
    return ConeBundle(base, RadialCone(empty_link(1)), [Chart([-np.inf], [np.inf])])


def everywhere(count=1):
    return ChartedPartition([[-np.inf]] * count, [[np.inf]] * count, [0.0] * count)


class TestPartition:
    def test_uniform_covers(self):
        p = ChartedPartition.uniform(0.0, 1.0, 4)
        xs = np.linspace(0, 1, 101)[:, None]
        assert p.covers(xs)
        vals = p.rho_all(xs)
        assert np.all((vals >= 0) & (vals <= 1))

    def test_zero_outside_chart(self):
        p = ChartedPartition([[0.0]], [[1.0]], [0.1])
        assert np.all(p.rho(0, [[-0.5], [1.5]]) == 0.0)
        assert p.rho(0, [[0.5]])[0] == 1.0

    def test_periodic_wraps(self):
        p = ChartedPartition([[5.5]], [[7.0]], [0.1], period=(TWO_PI,))
        assert p.rho(0, [[0.3]])[0] == 1.0

    def test_fast_path_agrees(self):
        p = ChartedPartition.uniform(0.0, 1.0, 5)
        xs = np.random.default_rng(0).uniform(-0.2, 1.2, (50, 1))
        slow = np.stack([p.rho(a, xs) for a in range(len(p))], axis=1)
        assert np.allclose(p.rho_all(xs), slow, atol=1e-15)


class TestTranslationAction:
    def test_single_chart(self):
        cb = line_bundle()
        out = translation_action([[0.2, -0.3]], cb, [[0.5, 0.1, 0.1]], everywhere())
        assert np.allclose(out, [[0.5, 0.3, -0.2]])

    def test_outside_supports(self):
        cb = line_bundle(-5.0, 5.0)
        part = ChartedPartition([[0.0]], [[1.0]], [0.1])
        out = translation_action([[0.2, -0.3]], cb, [[3.0, 0.1, 0.1]], part)
        assert np.array_equal(out, [[3.0, 0.1, 0.1]])

    def test_two_plateaus_add(self):
        cb = line_bundle()
        out = translation_action([[1.0, 0.0], [0.0, 2.0]], cb, [[0.5, 0.0, 0.0]], everywhere(2))
        assert np.allclose(out, [[0.5, 1.0, 2.0]])

    def test_needs_linear_bundle(self):
        cb = line_bundle()
        cb.charts[0].push = np.array([0.1, 0.0])
        with pytest.raises(NotLinearized):
            translation_action([[0.1, 0.1]], cb, [[0.5, 0.0, 0.0]])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.lists(st.floats(-1, 1), min_size=4, max_size=4),
           st.floats(0, 1))
    def test_additive(self, v, w, x):
        cb = line_bundle(matrix={"kind": "rotation", "rate": 0.7})
        part = ChartedPartition.uniform(0.0, 1.0, 2)
        v, w = np.reshape(v, (2, 2)), np.reshape(w, (2, 2))
        z = np.array([[x, 0.3, -0.1]])
        twice = translation_action(v, cb, translation_action(w, cb, z, part), part)
        assert np.allclose(twice, translation_action(v + w, cb, z, part), atol=1e-12)


class TestGenericSections:
    def test_rotating_line_fibers(self):
        cb = line_bundle(0.0, TWO_PI, {"kind": "rotation", "rate": 0.5}, (TWO_PI,))
        part = ChartedPartition.uniform(0.0, TWO_PI, 4, 0.5, period=(TWO_PI,))
        fld = sample_generic_section(cb, 3, 20, part, 0.5, samples=16)
        x = np.linspace(0, TWO_PI, 200)[:, None]
        s = fld(x)
        d = np.stack([np.cos(0.5 * x[:, 0]), np.sin(0.5 * x[:, 0])], axis=1)
        assert np.min(np.abs(s[:, 0] * d[:, 1] - s[:, 1] * d[:, 0])) > 1e-6
        assert homogeneity_check(fld, cb, [1.0, 0.001])

    def test_zero_section_rejected(self):
        cb = point_bundle()
        fld = TranslationField(np.zeros((1, 1)), cb, everywhere())
        assert not section_is_generic(cb, fld)

    def test_exhausted(self):
        cb = point_bundle()
        with pytest.raises(ExhaustedTries):
            sample_generic_section(cb, 0, 3, everywhere(), base_section=ConstantSection([0.0]),
                                   margin_floor=10.0)

    def test_point_fibers_accept(self):
        cb = point_bundle()
        fld = sample_generic_section(cb, 1, 20, ChartedPartition.uniform(0.0, 1.0, 3), 1.0)
        assert fld.tries >= 1 and section_is_generic(cb, fld)

    def test_cone_valued_section_fails(self):
        # translating a line along itself never leaves it
        cb = line_bundle()
        along = FunctionSection(lambda x: np.hstack([0.3 + 0 * x, 0 * x]), 2)
        assert not homogeneity_check(along, cb, [1.0, 0.1, 0.01])

    def test_empty_t_list_warns(self):
        cb = point_bundle()
        with pytest.warns(UserWarning):
            assert homogeneity_check(ConstantSection([1.0]), cb, [])


class TestOpenness:
    def test_near_tangent(self):
        cb = point_bundle()
        sec = FunctionSection(lambda x: np.tan(0.01) * (x - 0.5))
        assert openness_margin(sec, cb) == pytest.approx(0.01, rel=1e-6)

    def test_vertex_crossing_vertex(self):
        # two curves in R^3 that meet are never transverse
        cb = line_bundle()
        sec = FunctionSection(lambda x: np.hstack([0 * x, 2.0 * (x - 0.5)]), 2)
        assert openness_margin(sec, cb) == 0.0

    def test_line_fiber_slope(self):
        # the moved vertex stays off the vertex line; every meeting is at angle atan 2
        cb = line_bundle()
        sec = FunctionSection(lambda x: np.hstack([1.0 + 0 * x, 2.0 * (x - 0.5)]), 2)
        assert openness_margin(sec, cb) == pytest.approx(np.arctan(2.0), rel=1e-6)

    def test_small_perturbations_pass(self):
        cb = point_bundle(0.0, 1.0)
        sec = FunctionSection(lambda x: 0.5 * (x - 0.4))
        margin = openness_margin(sec, cb)
        rng = np.random.default_rng(4)
        xs = np.linspace(0, 1, 257)[:, None]
        for _ in range(20):
            a, f, ph = rng.standard_normal(3)
            raw = FunctionSection(lambda x, a=a, f=f, ph=ph: a * np.sin(3 * f * x + ph))
            size = c1_distance(raw, FunctionSection(lambda x: 0 * x), xs)
            pert = FunctionSection(lambda x, raw=raw, size=size, s=sec: s(x) + raw(x) * (margin / 4) / size)
            assert section_is_generic(cb, pert)


    def test_touching_zero_not_generic(self):
        # a double zero has no sign change; the sampled engine alone misses it
        cb = point_bundle()
        assert not section_is_generic(cb, FunctionSection(lambda x: (x - 0.37) ** 2))

    def test_adversarial_budget_and_failure(self):
        cb = point_bundle(0.0, 1.0)
        sec = FunctionSection(lambda x: 0.5 * (x - 0.4))
        margin = openness_margin(sec, cb)
        adv = adversarial_perturbation(sec, cb, 4 * margin)
        xs = np.linspace(0, 1, 257)[:, None]
        zero = FunctionSection(lambda x: 0 * x)
        assert c1_distance(adv, zero, xs) == pytest.approx(4 * margin, rel=1e-3)
        assert not section_is_generic(cb, SumSection(sec, adv))

    def test_adversarial_budget_too_small(self):
        cb = point_bundle(0.0, 1.0)
        sec = FunctionSection(lambda x: 0.5 * (x - 0.4))
        assert adversarial_perturbation(sec, cb, 1e-6) is None


class TestGlue:
    def test_endpoints_exact(self):
        s0 = ConstantSection([0.3])
        s1 = FunctionSection(lambda x: 0.3 + 0.001 * x)
        g = GluedSection(s0, s1, lambda x: np.clip(x[:, 0], 0, 1))
        assert np.array_equal(g([[-1.0], [0.0]]), s0([[-1.0], [0.0]]))
        assert np.array_equal(g([[1.0], [2.0]]), s1([[1.0], [2.0]]))

    def test_identical_sections(self):
        s0 = ConstantSection([0.3])
        g = glue_relative(s0, s0, lambda x: np.clip(x[:, 0], 0, 1), np.linspace(0, 1, 11)[:, None])
        assert g.distance == 0.0 and np.array_equal(g([[0.5]]), s0([[0.5]]))

    def test_too_large(self):
        s0 = ConstantSection([0.1])
        big = ConstantSection([5.0])
        with pytest.raises(PerturbationTooLarge):
            glue_relative(s0, big, lambda x: np.clip(x[:, 0], 0, 1), np.linspace(0, 1, 11)[:, None])


class TestReductions:
    AX = (np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))

    def test_vertical(self):
        u_h, u_v = reduce_field([0.0, 2.0], *self.AX)
        assert np.allclose(u_h, 0) and np.allclose(u_v, [0.0, 2.0])

    def test_horizontal(self):
        _, u_v = reduce_field([3.0, 0.0], *self.AX)
        assert np.allclose(u_v, 0)

    def test_orthogonal_split(self):
        u_h, u_v = reduce_field([1.0, 1.0], *self.AX)
        assert np.allclose(u_h, [1.0, 0.0]) and np.allclose(u_v, [0.0, 1.0])

    def test_oblique_split(self):
        u_h, u_v = reduce_field([1.0, 1.0], np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]) / np.sqrt(2))
        assert np.allclose(u_h, 0) and np.allclose(u_v, [1.0, 1.0])

    def test_ill_conditioned(self):
        with pytest.raises(SplitIllConditioned):
            reduce_field([1.0, 1.0], np.array([[1.0, 0.0]]), np.array([[1.0, 1e-12]]))

    def test_balanced_endpoints(self):
        u = np.array([1.0, 1.0])
        assert np.array_equal(balanced_reduce(u, 1.0, *self.AX), u)
        assert np.array_equal(balanced_reduce(u, 0.0, *self.AX), reduce_field(u, *self.AX)[1])
        assert np.allclose(balanced_reduce(u, 0.5, *self.AX), [0.5, 1.0])


@pytest.fixture(scope="module")
def torus_ts():
    return build_tube_system(get_scenario("torus_height"))


class TestVerifyGluing:
    def test_nested_tubes_pass(self, torus_ts):
        u = 0.1 * torus_ts.tube_radius * np.array([0.6, 0.8])
        certs = verify_gluing(u, torus_ts, "s1", 0.1 * torus_ts.tube_radius)
        assert all(c.passed for c in certs.values())

    def test_tangential_field_fails(self, torus_ts):
        u = np.array([0.05, 0.0])
        certs = verify_gluing(u, torus_ts, "s1", 0.04)
        assert not certs["parent"].passed and not certs["reduced"].passed


class TestPipeline:
    def test_sphere(self):
        res = synthesize_immediate_flow("sphere_height", rng_seed=2)
        assert res.certificate.passed
        assert res.to_json()["field"][0]["kind"] == "translation"

    def test_torus_one_seed(self):
        res = synthesize_immediate_flow("torus_height", rng_seed=13)
        cert = res.certificate
        assert cert.passed and cert.kappa_hat > 0
        assert all(r.min_angle >= 0.5 * cert.kappa_hat * r.t for r in cert.rows)
        kinds = {d["kind"] for d in res.to_json()["field"]}
        assert kinds == {"translation", "section", "balanced"}

    def test_stage_tag(self):
        with pytest.raises(StageError) as info:
            synthesize_immediate_flow("torus_height", max_tries=0)
        assert "step1" in str(info.value)


def sin2(s):
    return normal_section(s, lambda a: np.sin(2 * a))


class TestToy:
    def test_four_crossings(self):
        s = circle_stratum()
        flow, cert = tubular_section_flow(s, sin2(s), eps=0.1)
        assert cert.passed and cert.slope == pytest.approx(1.0, abs=0.05)
        assert all(r.witnesses == 4 for r in cert.rows)
        # crossing angle of r = 1 + t sin 2 theta with the circle
        for r in cert.rows:
            assert r.min_angle == pytest.approx(np.arctan(2 * r.t), rel=1e-3)

    def test_refined_grid_still_passes(self):
        s = circle_stratum()
        grid = 0.1 * 2.0 ** -np.arange(0, 8, 0.5)
        assert tubular_section_flow(s, sin2(s), eps=0.1, t_grid=grid)[1].passed

    def test_nowhere_zero(self):
        s = circle_stratum()
        _, cert = tubular_section_flow(s, normal_section(s, lambda a: 1.0 + 0 * a), eps=0.1,
                                       t_grid=default_t_grid(0.1, 4))
        assert cert.passed and all(r.witnesses == 0 for r in cert.rows)

    def test_zero_section(self):
        s = circle_stratum()
        with pytest.raises(NonTransverseZero):
            tubular_section_flow(s, normal_section(s, lambda a: 0 * a))

    def test_touching_zero(self):
        s = circle_stratum()
        with pytest.raises(NonTransverseZero):
            tubular_section_flow(s, normal_section(s, lambda a: np.sin(a) ** 2))

    def test_group_compatibility(self):
        s = circle_stratum()
        flow, _ = tubular_section_flow(s, sin2(s), eps=0.1, t_grid=[0.1])
        x = np.random.default_rng(0).uniform(-1.1, 1.1, (20, 2))
        assert flow.group_residual(x, 0.05, 0.05) <= 1e-6
