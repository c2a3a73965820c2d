import math

import numpy as np
import pytest

from avsdf import body as B
from avsdf import oracle as O
from avsdf import volsdf as V
from avsdf.errors import ContractViolation
from avsdf.numerics import T, Tape, Tensor

from conftest import directional_gradcheck
from gradcases import small_model


@pytest.fixture(scope="module")
def posed():
    rng = np.random.default_rng(0)
    body = B.forward_kinematics(rng.uniform(-1, 1, 10), rng.uniform(-0.6, 0.6, (15, 3)))
    clouds = O.sample_surface(body, 200, rng)
    return body, clouds


@pytest.fixture(scope="module")
def model():
    m = V.VolumetricSDF(V.ModelSpec(rank=4, width=32), seed=1)
    rng = np.random.default_rng(2)
    for k, p in m.params.items():
        if k.startswith("nbw.A") or k.startswith("nbw.c"):
            p.data[...] = rng.normal(0, 0.05, p.shape).astype(np.float32)
    return m


def test_positional_encoding_values():
    g = V.positional_encode(np.zeros((1, 3))).data[0]
    np.testing.assert_array_equal(g, [0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1])
    g = V.positional_encode(np.array([[0.5, 0, 0]])).data[0]
    assert g[3] == pytest.approx(1.0) and g[0] == 0.5


def test_positional_encoding_gradient(rng):
    x = rng.uniform(-1, 1, (10, 3))
    w = rng.standard_normal((10, 15))
    assert directional_gradcheck(lambda a: T.sum(T.mul(V.positional_encode(a), Tensor(w))), [x], rng) <= 1e-3


def test_blend_coefficients_with_zero_maps():
    spec = V.ModelSpec(rank=3, width=8)
    p = V.init_params(spec, 0, np.float64)
    z = Tensor(np.random.default_rng(0).standard_normal((15, 128)))
    np.testing.assert_array_equal(V.blend_coefficients(z, p, spec, 2).data, 0)
    p["nbw.c2"].data[...] = 0.25
    np.testing.assert_array_equal(V.blend_coefficients(z, p, spec, 2).data, 0.25)
    p["nbw.A2"].data[...] = np.random.default_rng(1).standard_normal((15, 128, 3))
    np.testing.assert_array_equal(V.blend_coefficients(Tensor(np.zeros((15, 128))), p, spec, 2).data, 0.25)


def test_blend_gradient_is_column_sum_of_maps():
    spec = V.ModelSpec(rank=3, width=8)
    p = V.init_params(spec, 0, np.float64)
    A = np.random.default_rng(1).standard_normal((15, 128, 3))
    p["nbw.A0"].data[...] = A
    z = Tensor(np.random.default_rng(2).standard_normal((15, 128)), requires_grad=True)
    with Tape() as tape:
        s = T.sum(V.blend_coefficients(z, p, spec, 0))
    (g,) = tape.backward(s, [z])
    np.testing.assert_allclose(g, A.sum(axis=2))


def test_compose_weights_cases():
    spec = V.ModelSpec(rank=1, width=8)
    p = V.init_params(spec, 0, np.float64)
    W = p["dec.W1"].data
    np.testing.assert_array_equal(V.compose_weights(Tensor(np.zeros((15, 1))), p, spec, 1).data[4], W)
    p["nbw.S1"].data[...] = np.eye(8)[None, None]
    eff = V.compose_weights(Tensor(np.full((15, 1), 2.0)), p, spec, 1).data
    np.testing.assert_allclose(eff[0], W + 2 * np.eye(8))


def test_compose_weights_is_affine():
    spec = V.ModelSpec(rank=4, width=8)
    p = V.init_params(spec, 3, np.float64)
    rng = np.random.default_rng(0)
    v1, v2 = rng.standard_normal((15, 4)), rng.standard_normal((15, 4))
    lhs = V.compose_weights(Tensor(v1 + v2), p, spec, 3).data
    rhs = (V.compose_weights(Tensor(v1), p, spec, 3).data + V.compose_weights(Tensor(v2), p, spec, 3).data
           - p["dec.W3"].data)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_zero_decoder_outputs_last_bias(posed):
    body, clouds = posed
    m = V.VolumetricSDF(V.ModelSpec(rank=2, width=8), seed=0)
    for k, p in m.params.items():
        if k.startswith("dec.") or k.startswith("nbw."):
            p.data[...] = 0
    m.params["dec.b6"].data[...] = 0.37
    cond = m.prepare(body, clouds)
    out = m.decode_part(np.random.default_rng(0).standard_normal((5, 3)), cond, 4).data
    np.testing.assert_allclose(out, 0.37)


def test_decoder_depends_on_latent(model, posed):
    body, clouds = posed
    c1 = model.prepare(body, clouds)
    c2 = model.prepare(body, clouds + np.float32(0.05))
    x = np.random.default_rng(3).uniform(-0.1, 0.1, (20, 3))
    assert np.abs(model.decode_part(x, c1, 2).data - model.decode_part(x, c2, 2).data).max() > 0


def test_decoder_gradient_wrt_points(posed):
    body, clouds = posed
    m = small_model(5)
    cond = m.prepare(body, clouds)
    rng = np.random.default_rng(4)
    x = rng.uniform(-0.2, 0.2, (12, 3))
    assert directional_gradcheck(lambda a: T.sum(m.decode_part(a, cond, 6)), [x], rng) <= 1e-3


# --------------------------------------------------------------------------
# query dispatch


class ConstantParts(V.VolumetricSDF):
    """Each part decodes to a fixed value, to exercise the aggregation."""

    def __init__(self, values):
        super().__init__(V.ModelSpec(rank=0, width=8))
        self.values = values

    def prepare(self, body, clouds):
        return None

    def decode_part(self, xk, cond, k):
        n = xk.shape[0]
        return T.add(T.mul(T.sum(xk, axis=1), 0.0), float(self.values[k]))


def two_box_body():
    """Parts 2 and 7 share the unit box at the origin; the rest sit far away."""
    rot = np.broadcast_to(np.eye(3), (15, 3, 3)).copy()
    t = np.zeros((15, 3))
    for k in range(15):
        if k not in (2, 7):
            t[k] = (20.0 + 3 * k, 0, 0)
    lo = np.full((15, 3), -1.0)
    hi = np.full((15, 3), 1.0)
    return B.BodyState(Tensor(rot), Tensor(t), lo, hi)


def test_candidate_minimum_and_argmin():
    vals = np.ones(15)
    vals[2], vals[7] = 0.3, -0.1
    m = ConstantParts(vals)
    res = m.query(np.zeros((1, 3)), two_box_body(), None)
    assert float(res.distance.data[0]) == pytest.approx(-0.1)
    assert res.part[0] == 7 and res.branch[0] == V.BRANCH_IMPLICIT


def test_single_box_point_equals_its_decoder(model, posed):
    body, clouds = posed
    cond = model.prepare(body, clouds)
    x = O.sample_near_surface(body, 3000, np.random.default_rng(5), sigma=0.02)
    inside = B.inside_boxes(x, body)
    one = inside.sum(axis=0) == 1
    x1, k1 = x[one][:200], np.argmax(inside[:, one][:, :200], axis=0)
    res = model.query(x1, body, cond)
    pv = model.part_values(x1, k1, body, cond).data
    box = B.box_distances(x1, body).data.astype(np.float32)
    box[k1, np.arange(len(k1))] = np.inf
    # other parts contribute only their (positive) box distance
    np.testing.assert_array_equal(res.distance.data, np.minimum(pv, box.min(axis=0)))
    own = pv <= box.min(axis=0)
    assert np.all(res.part[own] == k1[own])


def test_query_modes_match_brute_force(model, posed):
    body, clouds = posed
    cond = model.prepare(body, clouds)
    x = np.concatenate([O.sample_near_surface(body, 400, np.random.default_rng(6)),
                        np.random.default_rng(7).uniform(-2, 2, (100, 3))]).astype(np.float32)
    n = len(x)
    decoded = np.stack([model.part_values(x, np.full(n, k), body, cond).data for k in range(15)])
    box = B.box_distances(x, body).data.astype(np.float32)
    inside = box <= 0
    any_in = inside.any(axis=0)
    hybrid = model.query(x, body, cond, "hybrid")
    full = model.query(x, body, cond, "full")
    imp = model.query(x, body, cond, "implicit-only")
    want_h = np.where(any_in, np.where(inside, decoded, box).min(axis=0), box.min(axis=0))
    want_f = np.where(any_in, decoded.min(axis=0), box.min(axis=0))
    np.testing.assert_allclose(hybrid.distance.data, want_h, rtol=0, atol=1e-6)
    np.testing.assert_allclose(full.distance.data, want_f, rtol=0, atol=1e-6)
    np.testing.assert_allclose(imp.distance.data, decoded.min(axis=0), rtol=0, atol=1e-6)
    np.testing.assert_array_equal(hybrid.branch, any_in.astype(np.uint8))
    assert np.all(imp.branch == V.BRANCH_IMPLICIT)


def test_far_point_uses_box_distance(model, posed):
    body, clouds = posed
    cond = model.prepare(body, clouds)
    res = model.query(np.array([[10.0, 0, 0]], np.float32), body, cond)
    assert res.branch[0] == V.BRANCH_ANALYTIC and res.part[0] == -1
    assert float(res.distance.data[0]) >= 9.0


def test_sixty_thousand_mixed_points(model, posed):
    body, clouds = posed
    cond = model.prepare(body, clouds)
    rng = np.random.default_rng(8)
    x = np.concatenate([rng.uniform(-2, 2, (30_000, 3)),
                        O.sample_near_surface(body, 30_000, rng)]).astype(np.float32)
    res = model.query(x, body, cond)
    assert np.all(np.isfinite(res.distance.data))
    assert len(res) == 60_000
    assert np.sum(res.branch == 0) + np.sum(res.branch == 1) == 60_000


def test_batched_query_equals_serial(model, posed):
    body, clouds = posed
    cond = model.prepare(body, clouds)
    x = O.sample_near_surface(body, 300, np.random.default_rng(9)).astype(np.float32)
    batch = model.query(x, body, cond).distance.data
    serial = np.concatenate([model.query(x[i:i + 1], body, cond).distance.data for i in range(len(x))])
    assert np.array_equal(batch, serial)


def test_zeroed_blend_matches_rank_zero_model(posed):
    body, clouds = posed
    m80 = V.VolumetricSDF(V.ModelSpec(rank=6, width=32), seed=4)
    base = {k: Tensor(v.data) for k, v in m80.params.items() if not k.startswith("nbw.")}
    m0 = V.VolumetricSDF(V.ModelSpec(rank=0, width=32), base)
    x = O.sample_near_surface(body, 2000, np.random.default_rng(10)).astype(np.float32)
    a = m80.query(x, body, m80.prepare(body, clouds)).distance.data
    b = m0.query(x, body, m0.prepare(body, clouds)).distance.data
    assert np.array_equal(a, b)


def test_implicit_sdf_rejects_points_outside_boxes(model, posed):
    body, clouds = posed
    cond = model.prepare(body, clouds)
    with pytest.raises(ContractViolation):
        model.implicit_sdf(np.array([[10.0, 0, 0]]), body, cond)


def test_unknown_mode_and_bad_points(model, posed):
    body, clouds = posed
    cond = model.prepare(body, clouds)
    with pytest.raises(ContractViolation):
        model.query(np.zeros((2, 3)), body, cond, "smooth")
    with pytest.raises(ContractViolation):
        model.query(np.zeros((2, 2)), body, cond)


def test_parameter_counts_closed_form():
    for rank, width in ((0, 64), (20, 64), (80, 64), (80, 32)):
        spec = V.ModelSpec(rank=rank, width=width)
        d = 15 + 128
        layers = [(d, width), (width, width), (width + d, width), (width, width), (width, width),
                  (width, width), (width, 1)]
        dec = sum(i * o + o for i, o in layers)
        bank = 15 * rank * sum(i * o for i, o in layers)
        coeff = 15 * 7 * (128 * rank + rank)
        assert spec.decoder_param_count() == dec
        assert spec.bank_param_count() == bank
        assert spec.coeff_param_count() == coeff
        shapes = V.VolumetricSDF.expected_shapes(spec)
        assert sum(math.prod(s) for s in shapes.values()) == spec.param_count()
    assert V.ModelSpec(rank=0).param_count() < V.ModelSpec(rank=80).param_count()


def test_float64_model_tracks_float32(model, posed):
    body, clouds = posed
    x = O.sample_near_surface(body, 500, np.random.default_rng(11)).astype(np.float32)
    a = model.query(x, body, model.prepare(body, clouds)).distance.data
    m64 = model.astype(np.float64)
    b = m64.query(x, body, m64.prepare(body, clouds)).distance.data
    np.testing.assert_allclose(a, b, atol=1e-4)
