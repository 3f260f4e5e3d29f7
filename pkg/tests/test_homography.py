import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inverseform.errors import ContractError, DimensionError, SingularityError
from inverseform.homography import (
    HomographyParams, Mode, TransformRanges, from_vector, identity, identity_vector, pixel_shift, rotation,
    sample_transform, stn_warp, to_vector, translation, vector_to_matrix_tensor,
)
from inverseform.numcore import Tensor, gradcheck, mul, tsum


def test_to_vector_examples():
    assert to_vector(identity(Mode.AFFINE6)).tolist() == [1, 0, 0, 0, 1, 0]
    assert to_vector(identity(Mode.HOMOGRAPHY8)).tolist() == [1, 0, 0, 0, 1, 0, 0, 0]
    assert to_vector(translation(0.1, 0.2)).tolist() == [1, 0, 0.1, 0, 1, 0.2]


def test_from_vector_identity_and_errors():
    assert np.array_equal(from_vector([1, 0, 0, 0, 1, 0]).matrix, np.eye(3))
    with pytest.raises(SingularityError):
        from_vector(np.zeros(6))
    with pytest.raises(ContractError):
        from_vector(np.ones(7))
    with pytest.raises(ContractError):
        from_vector(np.ones(6), Mode.HOMOGRAPHY8)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=8, max_size=8), st.booleans())
def test_vector_round_trip_is_bitwise(values, affine):
    v = np.array(values[:6] if affine else values)
    m = np.append(v, [0.0] * (9 - len(v)))
    m[8] = 1.0
    if abs(np.linalg.det(m.reshape(3, 3))) <= 1e-9:
        with pytest.raises(SingularityError):
            from_vector(v)
        return
    p = from_vector(v)
    assert p.mode is (Mode.AFFINE6 if affine else Mode.HOMOGRAPHY8)
    assert to_vector(p).tobytes() == v.tobytes()


def test_params_invariants():
    bad = np.eye(3)
    bad[2, 2] = 2.0
    with pytest.raises(ContractError):
        HomographyParams(bad, Mode.HOMOGRAPHY8)
    persp = np.eye(3)
    persp[2, 0] = 0.01
    with pytest.raises(ContractError):
        HomographyParams(persp, Mode.AFFINE6)
    HomographyParams(persp, Mode.HOMOGRAPHY8)


def test_params_bytes_are_nine_le_doubles():
    p = sample_transform(TransformRanges(), 3, Mode.HOMOGRAPHY8)
    buf = p.to_bytes()
    assert len(buf) == 72 and np.array_equal(np.frombuffer(buf, "<f8").reshape(3, 3), p.matrix)
    assert HomographyParams.from_bytes(buf, Mode.HOMOGRAPHY8) == p


def test_inverse_and_compose():
    p = sample_transform(TransformRanges(), 4)
    assert np.allclose(p.compose(p.inverse()).matrix, np.eye(3), atol=1e-14)


def test_ranges_validation():
    with pytest.raises(ContractError):
        TransformRanges(scale_range=(1.1, 1.2))
    with pytest.raises(ContractError):
        TransformRanges(max_rotation=-0.1)


def test_sample_zero_ranges_is_identity():
    for mode in Mode:
        assert np.array_equal(sample_transform(TransformRanges.zero(), 9, mode).matrix, np.eye(3))


def test_sample_rotation_only():
    ranges = TransformRanges(0.0, math.pi / 6, (1.0, 1.0), 0.0, 0.0)
    for seed in range(50):
        m = sample_transform(ranges, seed).matrix
        angle = math.atan2(m[1, 0], m[0, 0])
        assert abs(angle) <= math.pi / 6
        assert np.allclose(m, rotation(angle).matrix, atol=1e-15)
        assert abs(np.linalg.det(m) - 1) < 1e-12


def test_sample_is_deterministic_and_affine_has_no_perspective():
    for seed in range(20):
        a = sample_transform(TransformRanges(), seed)
        assert a.matrix.tobytes() == sample_transform(TransformRanges(), seed).matrix.tobytes()
        assert a.matrix[2, 0] == 0.0 and a.matrix[2, 1] == 0.0
        h = sample_transform(TransformRanges(), seed, Mode.HOMOGRAPHY8).matrix
        assert np.abs(h[2, :2]).max() <= 0.0011


def test_sampled_factors_stay_in_range():
    r = TransformRanges()
    for seed in range(200):
        m = sample_transform(r, seed).matrix
        assert np.abs(m[:2, 2]).max() <= 2 * r.max_translation       # normalized units span 2
        det = np.linalg.det(m)
        assert r.scale_range[0] ** 2 - 1e-12 <= det <= r.scale_range[1] ** 2 + 1e-12


# -- stn_warp -------------------------------------------------------------

def test_identity_warp_is_bitwise():
    x = np.random.default_rng(0).random((7, 5))
    assert stn_warp(x, identity()).data.tobytes() == x.tobytes()


def test_one_pixel_shift_right_on_4x4():
    x = np.arange(16.0).reshape(4, 4) + 1
    out = stn_warp(x, pixel_shift(1, 0, 4)).data
    want = np.zeros((4, 4))
    want[:, 1:] = x[:, :-1]
    assert np.array_equal(out, want)


def test_integer_shift_down_two():
    x = np.random.default_rng(1).random((6, 6))
    out = stn_warp(x, pixel_shift(0, 2, 6)).data
    assert np.array_equal(out[2:], x[:-2]) and not out[:2].any()


def test_half_pixel_shift_is_bilinear_average():
    x = np.random.default_rng(2).random((5, 5))
    out = stn_warp(x, pixel_shift(0.5, 0, 5)).data
    assert np.allclose(out[:, 1:], 0.5 * (x[:, :-1] + x[:, 1:]), atol=1e-15)
    assert np.allclose(out[:, 0], 0.5 * x[:, 0], atol=1e-15)


def test_warp_round_trip_on_interior():
    # bilinear sampling reproduces affine functions exactly, so a ramp image
    # isolates the geometry from interpolation error
    n = 32
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    x = 0.3 + 0.01 * xx + 0.02 * yy
    for seed in range(10):
        p = sample_transform(TransformRanges(0.03, 0.1, (0.95, 1.05), 0.03), seed)
        back = stn_warp(stn_warp(x, p), p.inverse()).data
        assert np.abs(back[6:-6, 6:-6] - x[6:-6, 6:-6]).max() < 1e-6


def test_batched_warp_matches_single():
    rng = np.random.default_rng(3)
    x = rng.random((3, 8, 8))
    ps = [sample_transform(TransformRanges(), s, Mode.HOMOGRAPHY8) for s in range(3)]
    out = stn_warp(x, ps).data
    for i in range(3):
        assert np.array_equal(out[i], stn_warp(x[i], ps[i]).data)


def test_warp_errors():
    with pytest.raises(SingularityError):
        stn_warp(np.ones((4, 4)), np.diag([1.0, 0.0, 1.0]))
    with pytest.raises(DimensionError):
        stn_warp(np.ones((2, 4, 4)), np.stack([np.eye(3)] * 3))
    with pytest.raises(ContractError):
        stn_warp(np.ones((1, 4)), np.eye(3))


def _smooth(n, seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:n, 0:n] / n
    return sum(rng.normal() * np.sin(rng.uniform(1, 4) * xx + rng.uniform(1, 4) * yy + rng.uniform(0, 6))
               for _ in range(4))


@pytest.mark.parametrize("mode", list(Mode))
def test_warp_gradients(mode):
    x = _smooth(9, 4)
    theta = sample_transform(TransformRanges(), 5, mode).matrix
    probe = np.random.default_rng(6).normal(size=(9, 9))
    errs = gradcheck(lambda img, th: tsum(mul(stn_warp(img, th), probe)), [x, theta], h=1e-7)
    assert max(errs) < 1e-4


def test_vector_to_matrix_tensor():
    v = Tensor(np.array([[1.0, 0.1, 0.2, 0.3, 1.1, 0.4]]), requires_grad=True)
    m = vector_to_matrix_tensor(v)
    assert np.array_equal(m.data[0], from_vector(v.data[0]).matrix)
    probe = np.random.default_rng(7).normal(size=(1, 3, 3))
    assert gradcheck(lambda t: tsum(mul(vector_to_matrix_tensor(t), probe)), [v.data])[0] < 1e-8
    assert np.array_equal(vector_to_matrix_tensor(identity_vector(Mode.HOMOGRAPHY8)[None]).data[0], np.eye(3))
