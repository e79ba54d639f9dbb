import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plslam.errors import DegenerateSegment
from plslam.features import (
    LineObservation, descriptor_from_hex, descriptor_to_hex, filter_line_matches, hamming, hamming_matrix,
    infinite_line_coeffs, line_coeffs_many, line_pair_consistent, match_descriptors,
)


def _desc(rng, n):
    return rng.integers(0, 256, size=(n, 32), dtype=np.uint8)


def _line(p, q, dp=10.0, dq=10.0):
    return LineObservation(p, q, dp, dq, np.zeros(32, dtype=np.uint8))


def test_hex_round_trip(rng):
    d = _desc(rng, 1)[0]
    np.testing.assert_array_equal(descriptor_from_hex(descriptor_to_hex(d)), d)
    with pytest.raises(ValueError):
        descriptor_from_hex("ab")


def test_hamming_matches_bit_count(rng):
    A, B = _desc(rng, 7), _desc(rng, 5)
    D = hamming_matrix(A, B)
    for i in range(7):
        for j in range(5):
            ref = int(np.unpackbits(A[i] ^ B[j]).sum())
            assert D[i, j] == ref == hamming(A[i], B[j])


def test_identical_singletons_match_at_zero(rng):
    d = _desc(rng, 1)
    assert [tuple(m) for m in match_descriptors(d, d.copy())] == [(0, 0, 0)]


def test_equidistant_neighbours_fail_ratio_test():
    a = np.zeros((1, 32), dtype=np.uint8)
    b = np.zeros((2, 32), dtype=np.uint8)
    b[0, 0] = 0b00001111
    b[1, 1] = 0b00001111
    assert match_descriptors(a, b) == []


def _brute_mutual(D, ratio):
    out = []
    for i in range(D.shape[0]):
        j = int(np.argmin(D[i]))
        if int(np.argmin(D[:, j])) != i:
            continue
        row = sorted(D[i])[1] if D.shape[1] > 1 else np.inf
        col = sorted(D[:, j])[1] if D.shape[0] > 1 else np.inf
        if D[i, j] * ratio < row and D[i, j] * ratio < col:
            out.append((i, j, int(D[i, j])))
    return out


@pytest.mark.parametrize("seed", range(5))
def test_matching_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    base = _desc(rng, 50)
    noisy = base.copy()
    flips = rng.random((50, 256)) < 0.05
    noisy = np.packbits(np.unpackbits(noisy, axis=1) ^ flips, axis=1)
    b = np.vstack([noisy[:30], _desc(rng, 20)])[rng.permutation(50)]
    D = hamming_matrix(base, b)
    assert [tuple(m) for m in match_descriptors(base, b, 2.0)] == _brute_mutual(D, 2.0)


def test_line_filter_keeps_identical_and_drops_perpendicular():
    a = _line((0, 0), (100, 0))
    b = _line((0, 0), (0, 100))
    assert line_pair_consistent(a, a, np.deg2rad(10), 0.25, 1.5)
    assert not line_pair_consistent(a, b, np.deg2rad(10), 0.25, 1.5)


def _predicate(a, b, angle_tol, length_tol, disp_tol):
    da, db = a.q - a.p, b.q - b.p
    ang = np.degrees(np.arccos(np.clip(abs(np.dot(da, db)) / np.linalg.norm(da) / np.linalg.norm(db), 0, 1)))
    r = np.linalg.norm(db) / np.linalg.norm(da)
    if np.dot(da, db) < 0:
        dp, dq = b.disp_q, b.disp_p
    else:
        dp, dq = b.disp_p, b.disp_q
    return (ang <= np.degrees(angle_tol) and 1 - length_tol <= r <= 1 / (1 - length_tol)
            and abs(a.disp_p - dp) <= disp_tol and abs(a.disp_q - dq) <= disp_tol)


def test_line_filter_equals_predicate(rng):
    A, B, matches = [], [], []
    from plslam.features import Match
    for k in range(300):
        p = rng.uniform(0, 600, 2)
        q = p + rng.uniform(20, 150) * np.array([np.cos(t := rng.uniform(0, np.pi)), np.sin(t)])
        A.append(_line(p, q, *rng.uniform(5, 30, 2)))
        ang = t + rng.normal(0, 0.2)
        L = np.linalg.norm(q - p) * rng.uniform(0.6, 1.5)
        p2 = p + rng.normal(0, 3, 2)
        q2 = p2 + L * np.array([np.cos(ang), np.sin(ang)])
        if rng.random() < 0.3:
            p2, q2 = q2, p2
        B.append(_line(p2, q2, A[-1].disp_p + rng.normal(0, 2), A[-1].disp_q + rng.normal(0, 2)))
        matches.append(Match(k, k, 0))
    tol = (np.deg2rad(10), 0.25, 1.5)
    kept = filter_line_matches(matches, A, B, *tol)
    expected = [m for m in matches if _predicate(A[m.index_a], B[m.index_b], *tol)]
    assert kept == expected
    assert 0 < len(kept) < len(matches)


def test_infinite_line_axes():
    l = infinite_line_coeffs((0, 0), (1, 0))
    np.testing.assert_allclose(np.abs(l), [0, 1, 0], atol=1e-15)
    l = infinite_line_coeffs((0, 0), (0, 1))
    np.testing.assert_allclose(np.abs(l), [1, 0, 0], atol=1e-15)
    with pytest.raises(DegenerateSegment):
        infinite_line_coeffs((1, 1), (1, 1))


@settings(max_examples=200, deadline=None)
@given(st.tuples(*[st.floats(-1000, 1000)] * 4))
def test_line_incidence(pts):
    p, q = np.array(pts[:2]), np.array(pts[2:])
    if np.linalg.norm(p - q) < 1e-3:
        return
    l = infinite_line_coeffs(p, q)
    scale = max(1.0, np.abs(pts).max())
    assert abs(l @ np.append(p, 1)) < 1e-9 * scale
    assert abs(l @ np.append(q, 1)) < 1e-9 * scale
    assert abs(np.hypot(l[0], l[1]) - 1) < 1e-12


def test_line_coeffs_many_matches_scalar(rng):
    p, q = rng.uniform(0, 500, (30, 2)), rng.uniform(0, 500, (30, 2))
    ref = np.array([infinite_line_coeffs(a, b) for a, b in zip(p, q)])
    np.testing.assert_allclose(line_coeffs_many(p, q), ref, atol=1e-12)
