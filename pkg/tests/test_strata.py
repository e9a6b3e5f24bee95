import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from conftest import coordinate_planes_r3, linear
from strataflow.errors import (CocycleViolation, DimensionMismatch, InvalidScale, NotDisjoint,
                               NotTransverse, PointOffStratum, RankDeficient, StrataflowError)
from strataflow.serialize import bundle_from_json, bundle_to_json, set_from_json, set_to_json
from strataflow.strata import (Chart, ConeBundle, ConicSet, Implicit, Param, RadialCone, Stratum,
                               StratifiedSet, alexander_rescale, check_cocycle, empty_link, hausdorff,
                               join_links, linearize_germ, point_link, tangent_cone, tangent_space,
                               taylor_modulus, union_transverse)

E = np.eye(3)


def same_span(a, b):
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    pa, pb = a.T @ np.linalg.pinv(a.T), b.T @ np.linalg.pinv(b.T)
    return np.allclose(pa, pb, atol=1e-8)


def arc_bundle(push=None, matrix=None, charts=1):
    """Cone over two points in R^2, fibered over a base segment."""
    base = linear("b", [1.0], [0.0], [0.0], [1.0])
    cone = RadialCone(point_link([[1.0, 0.0], [0.0, 1.0]]))
    spec = matrix or {"kind": "identity"}
    if charts == 1:
        cs = [Chart([-1.0], [2.0], spec, push)]
    else:
        cs = [Chart([-1.0], [0.7], spec, push), Chart([0.3], [2.0], spec, push)]
    return ConeBundle(base, cone, cs)


class TestTangentSpace:
    def test_linear(self):
        s = linear("p", E[:2], [0.0, 0.0, 0.0])
        t = tangent_space(s, [1.0, 1.0, 0.0])
        assert t.shape == (2, 3) and np.allclose(t @ t.T, np.eye(2)) and same_span(t, E[:2])

    def test_implicit_circle(self):
        s = Stratum("c", 1, 2, Implicit.from_catalog("sphere", {"center": [0.0, 0.0], "radius": 1.0}, 1, 2))
        assert same_span(tangent_space(s, [1.0, 0.0]), [[0.0, 1.0]])

    def test_param_helix(self):
        s = Stratum("h", 1, 3, Param.from_catalog("helix", {}, 1, 3, [-5.0], [5.0]))
        t = tangent_space(s, [1.0, 0.0, 0.0])
        assert same_span(t, [[0.0, 1.0, 1.0]])
        assert np.allclose(np.linalg.norm(t, axis=1), 1.0)

    def test_off_stratum(self):
        s = Stratum("c", 1, 2, Implicit.from_catalog("sphere", {"center": [0.0, 0.0], "radius": 1.0}, 1, 2))
        with pytest.raises(PointOffStratum):
            tangent_space(s, [2.0, 0.0])

    def test_folded_param_not_immersed(self):
        # (a, b) -> (a + b, a + b, 0) has rank-one Jacobian everywhere
        fold = Param(lambda w: np.stack([w[:, 0] + w[:, 1]] * 2 + [0 * w[:, 0]], axis=1), 2, 3,
                     [-1.0, -1.0], [1.0, 1.0],
                     jac=lambda w: np.broadcast_to(np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]]),
                                                   (w.shape[0], 3, 2)))
        with pytest.raises(RankDeficient):
            tangent_space(Stratum("k", 2, 3, fold), [0.2, 0.2, 0.0])

    def test_declared_dim_mismatch(self):
        rep = linear("p", E[:2], [0.0, 0.0, 0.0]).rep
        with pytest.raises(DimensionMismatch):
            Stratum("p", 1, 3, rep)


class TestStratifiedSet:
    def test_frontier_needs_known_ids(self):
        with pytest.raises(StrataflowError):
            StratifiedSet(2, [linear("a", [1.0, 0.0], [0.0, 0.0])], [("a", "zz")])

    def test_frontier_dimension_order(self):
        a = linear("a", [1.0, 0.0], [0.0, 0.0])
        b = linear("b", np.zeros((0, 2)), [0.0, 0.0])
        with pytest.raises(StrataflowError):
            StratifiedSet(2, [a, b], [("a", "b")])

    def test_planes_closure(self, planes3):
        ok = planes3.check_closure()
        assert ok is True or ok[0]

    def test_round_trip(self, planes3):
        back = set_from_json(set_to_json(planes3))
        assert [s.id for s in back.strata] == [s.id for s in planes3.strata]
        assert set_to_json(back) == set_to_json(planes3)


class TestRadialCone:
    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 1.0))
    def test_scale_invariance(self, x, y, s):
        # keep s*p outside the vertex tolerance ball
        assume(np.hypot(x, y) > 1e-3)
        cone = RadialCone(point_link([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]))
        p = np.array([x, y]) * 0.9
        assert cone.contains(p) == cone.contains(s * p)

    def test_members(self):
        cone = RadialCone(point_link([[1.0, 0.0]]))
        assert cone.contains([0.5, 0.0]) and not cone.contains([0.5, 0.1])
        assert not cone.contains([3.0, 0.0]) and cone.contains([3.0, 0.0], completed=True)

    def test_empty_link_is_vertex(self):
        cone = RadialCone(empty_link(2))
        assert cone.contains([0.0, 0.0]) and not cone.contains([0.1, 0.0])
        assert len(cone.stratified().strata) == 1


def graph_cone():
    # image of the ray s e1 under z -> z + |z|^2 e2 is the parabola y = x^2
    return ConicSet(RadialCone(point_link([[1.0, 0.0]])), push=np.array([0.0, 1.0]))


class TestAlexander:
    def test_parabola(self):
        c = alexander_rescale(graph_cone(), 0.1)
        pts = c.sample(radial=256)
        assert np.allclose(pts[:, 1], 0.1 * pts[:, 0] ** 2)

    def test_unit_scale(self):
        c = graph_cone()
        assert np.allclose(alexander_rescale(c, 1.0).sample(), c.sample())

    def test_linear_fixed(self):
        c = ConicSet(RadialCone(point_link([[1.0, 0.0], [0.0, 1.0]])))
        assert hausdorff(alexander_rescale(c, 0.01).sample(), c.sample()) == 0.0

    @pytest.mark.parametrize("t", [0.0, -0.5, 1.5])
    def test_invalid_scale(self, t):
        with pytest.raises(InvalidScale):
            alexander_rescale(graph_cone(), t)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.01, 1.0), st.floats(0.01, 1.0))
    def test_semigroup(self, s, t):
        c = graph_cone()
        a = alexander_rescale(alexander_rescale(c, s), t).sample(radial=128)
        b = alexander_rescale(c, s * t).sample(radial=128)
        assert hausdorff(a, b) <= 1e-6

    def test_converges_to_tangent(self):
        c = graph_cone()
        tc = c.tangent().sample()
        d = [hausdorff(alexander_rescale(c, t).sample(), tc) for t in (1.0, 0.25, 2.0 ** -6)]
        assert d[0] > d[1] > d[2]

    def test_modulus_shrinks(self):
        c = graph_cone()
        w = [taylor_modulus(c, t) for t in (1.0, 0.1, 0.01)]
        assert w[0] > w[1] > w[2] and w[2] < 0.02


class TestConeBundles:
    def test_linear_bundle_is_own_tangent(self):
        cb = arc_bundle()
        tc = tangent_cone(cb)
        x = np.array([[0.5]])
        z = np.array([[0.3, 0.0]])
        assert np.allclose(tc.trivialize(0, x, z), cb.trivialize(0, x, z))

    def test_quadratic_push_drops(self):
        cb = arc_bundle(push=np.array([0.2, -0.1]))
        tc = tangent_cone(cb)
        assert tc.is_linear
        z = np.array([[0.3, 0.4]])
        assert np.allclose(tc.trivialize(0, [[0.5]], z), z)

    def test_constant_matrix_fiber(self):
        a = [[2.0, 1.0], [0.0, 1.0]]
        tc = tangent_cone(arc_bundle(matrix={"kind": "constant", "matrix": a}))
        z = np.array([[1.0, 0.0]])
        assert np.allclose(tc.trivialize(0, [[0.2]], z), [[2.0, 0.0]])

    def test_idempotent(self):
        tc = tangent_cone(arc_bundle(push=np.array([0.2, -0.1])))
        tc2 = tangent_cone(tc)
        z = np.random.default_rng(0).uniform(-1, 1, (5, 2))
        x = np.full((5, 1), 0.4)
        assert np.allclose(tc.trivialize(0, x, z), tc2.trivialize(0, x, z))

    def test_round_trip(self):
        cb = arc_bundle(push=np.array([0.2, -0.1]), charts=2)
        back = bundle_from_json(bundle_to_json(cb))
        z = np.array([[0.3, 0.1]])
        assert np.allclose(back.trivialize(1, [[0.5]], z), cb.trivialize(1, [[0.5]], z))


class TestCocycle:
    def test_single_chart(self):
        rep = check_cocycle(arc_bundle(), samples=8)
        assert rep.passed and rep.residual_cocycle == 0.0

    def test_two_consistent_charts(self):
        rep = check_cocycle(arc_bundle(push=np.array([0.1, 0.05]), charts=2), samples=32)
        assert rep.passed and rep.residual_cocycle < 1e-10 and rep.triples_checked > 0

    def test_corrupted_transition(self):
        cb = arc_bundle(charts=2)
        cb.transition_offsets[(0, 1)] = np.array([0.1, 0.0])
        rep = check_cocycle(cb, samples=32)
        assert not rep.passed and rep.residual_cocycle == pytest.approx(0.1, rel=1e-6)
        with pytest.raises(CocycleViolation):
            tangent_cone(cb)

    def test_zero_samples(self):
        with pytest.raises(StrataflowError):
            check_cocycle(arc_bundle(), samples=0)


class TestLinearize:
    def test_linear_identity(self):
        _, rec = linearize_germ(arc_bundle())
        assert rec.is_identity

    def test_perturbed_recovers_tangent(self):
        cb = arc_bundle(push=np.array([0.2, -0.1]))
        tc, rec = linearize_germ(cb)
        assert rec.deviations[-1] <= 1e-6
        assert all(a >= b for a, b in zip(rec.deviations, rec.deviations[1:]))
        assert tc.is_linear

    def test_rotating_fibers(self):
        base = linear("b", [1.0], [0.0], [0.0], [2 * np.pi])
        cone = RadialCone(point_link([[1.0, 0.0], [-1.0, 0.0]]))
        cb = ConeBundle(base, cone, [Chart([-1.0], [7.0], {"kind": "rotation", "rate": 1.0})])
        _, rec = linearize_germ(cb)
        assert rec.is_identity and set(rec.deviations) == {0.0}


class TestJoins:
    def test_antipodal_poles_cover_sphere(self):
        j = join_links(point_link([[0.0, 0.0, 1.0]]), point_link([[0.0, 0.0, -1.0]]), 2)
        pts = np.random.default_rng(1).standard_normal((200, 3))
        pts /= np.linalg.norm(pts, axis=1)[:, None]
        assert max(min(s.distance(p) for s in j.strata) for p in pts) <= 1e-6

    def test_two_quarter_arcs(self):
        j = join_links(point_link([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]), point_link([[0.0, 0.0, 1.0]]), 2)
        arcs = [s for s in j.strata if s.dim == 1]
        assert len(arcs) == 2
        for s in arcs:
            pts, _ = s.sample(50, 0)
            assert np.allclose(pts[:, 1], 0.0) and np.all(pts[:, 2] >= 0)
            assert np.allclose(np.linalg.norm(pts, axis=1), 1.0)
        assert j.check_unit()[0]

    def test_empty_side(self):
        b = point_link([[0.0, 1.0]])
        assert join_links(empty_link(2), b, 1) is b

    def test_disjointness(self):
        a = point_link([[1.0, 0.0]])
        with pytest.raises(NotDisjoint):
            join_links(a, point_link([[1.0, 0.0]]), 1)

    def test_symmetric(self):
        a = point_link([[1.0, 0.0, 0.0]])
        b = point_link([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        pa = np.vstack([s.sample(40, 0)[0] for s in join_links(a, b, 2).strata])
        pb = np.vstack([s.sample(40, 0)[0] for s in join_links(b, a, 2).strata])
        assert max(min(s.distance(p) for s in join_links(b, a, 2).strata) for p in pa) <= 1e-6
        assert max(min(s.distance(p) for s in join_links(a, b, 2).strata) for p in pb) <= 1e-6


class TestUnion:
    def test_axes(self):
        a = StratifiedSet(2, [linear("x", [1.0, 0.0], [0.0, 0.0])])
        b = StratifiedSet(2, [linear("y", [0.0, 1.0], [0.0, 0.0])])
        u = union_transverse(a, b)
        new = [s for s in u.strata if s.id.startswith("L:")]
        assert len(new) == 1 and new[0].dim == 0 and np.allclose(new[0].rep.offset, 0.0)
        link = u.structures[new[0].id].link
        assert len(link.strata) == 4 and all(s.dim == 0 for s in link.strata)

    def test_plane_and_axis(self):
        a = StratifiedSet(3, [linear("z0", E[:2], [0.0, 0.0, 0.0])])
        b = StratifiedSet(3, [linear("zax", E[2], [0.0, 0.0, 0.0])])
        u = union_transverse(a, b)
        (lid,) = [s.id for s in u.strata if s.id.startswith("L:")]
        dims = sorted(s.dim for s in u.structures[lid].link.strata)
        assert dims == [0, 0, 1]
        assert len(u.structures[lid].join.strata) == 0 or u.structures[lid].join.check_unit()[0]
        assert (lid, "A:z0") in u.frontier and (lid, "B:zax") in u.frontier

    def test_disjoint(self):
        a = StratifiedSet(2, [linear("x", [1.0, 0.0], [0.0, 0.0])])
        b = StratifiedSet(2, [linear("x1", [1.0, 0.0], [0.0, 1.0])])
        u = union_transverse(a, b)
        assert len(u.strata) == 2

    def test_not_transverse(self):
        a = StratifiedSet(2, [linear("x", [1.0, 0.0], [0.0, 0.0])])
        with pytest.raises(NotTransverse):
            union_transverse(a, a)
