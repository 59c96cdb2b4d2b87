import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from durmod.mask import (DEFAULT_SLOPE, build_mask, clamp_length, column_support, mask_image,
                         read_pgm, write_pgm)

from .oracles import literal_mask, mask_oracle, mask_violations

SLOPES = [1.0, 1.25, 2.0, 3.0]


def test_single_cell():
    for s in SLOPES:
        assert build_mask(1, 1, s).allowed.tolist() == [[True]]


def test_square_slope_one_is_the_diagonal():
    np.testing.assert_array_equal(build_mask(5, 5, 1.0).allowed, np.eye(5, dtype=bool))


def test_square_slope_two_matches_oracle():
    expected = np.array([[1, 1, 0, 0, 0],
                         [1, 1, 1, 1, 0],
                         [0, 1, 1, 1, 0],
                         [0, 1, 1, 1, 1],
                         [0, 0, 0, 1, 1]], dtype=bool)
    np.testing.assert_array_equal(mask_oracle(5, 5, 2.0), expected)
    np.testing.assert_array_equal(build_mask(5, 5, 2.0).allowed, expected)


@pytest.mark.parametrize("slope", SLOPES)
def test_matches_exact_oracle(slope):
    for T_s in range(1, 17):
        for T_t in range(1, 17):
            np.testing.assert_array_equal(build_mask(T_s, T_t, slope).allowed,
                                          mask_oracle(T_s, T_t, slope), err_msg=f"{T_s}x{T_t}")


@pytest.mark.parametrize("slope", SLOPES)
def test_contains_the_one_axis_tolerance_form(slope):
    # the target-axis-only tolerance is narrower and not transpose-symmetric; ours covers it
    for T_s in range(1, 41):
        for T_t in range(1, 41):
            lit = literal_mask(T_s, T_t, slope)
            assert not (lit & ~build_mask(T_s, T_t, slope).allowed).any(), (T_s, T_t)


def test_invariants_small_grid():
    for s_idx, s in enumerate(SLOPES):
        for T_s in range(1, 31):
            for T_t in range(1, 31):
                m = build_mask(T_s, T_t, s).allowed
                wider = build_mask(T_s, T_t, SLOPES[s_idx + 1]).allowed if s_idx + 1 < len(SLOPES) else None
                assert mask_violations(m, wider) == [], (T_s, T_t, s)
                np.testing.assert_array_equal(m.T, build_mask(T_t, T_s, s).allowed)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 150), st.integers(1, 150), st.floats(1.0, 4.0), st.floats(0.0, 2.0))
def test_invariants_random(T_s, T_t, s, extra):
    m = build_mask(T_s, T_t, s).allowed
    assert mask_violations(m, build_mask(T_s, T_t, s + extra).allowed) == []
    np.testing.assert_array_equal(m.T, build_mask(T_t, T_s, s).allowed)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 80), st.integers(2, 80), st.sampled_from(SLOPES[1:]), st.randoms(use_true_random=False))
def test_slope_bounded_staircase_stays_inside(T_s, T_t, s, rnd):
    """Walks whose prefix and suffix slopes stay in [r/s, r*s] never leave the mask."""
    A, B = T_s - 1, T_t - 1
    r = B / A

    def inside(i, j):
        return (j <= s * r * i + 1e-9 and j >= r / s * i - 1e-9
                and B - j <= s * r * (A - i) + 1e-9 and B - j >= r / s * (A - i) - 1e-9)

    cells = [(0, 0)]
    while cells[-1] != (A, B):
        i, j = cells[-1]
        options = [(i + di, j + dj) for di, dj in ((1, 1), (0, 1), (1, 0))
                   if i + di <= A and j + dj <= B and inside(i + di, j + dj)]
        assume(options)
        cells.append(rnd.choice(options))
    m = build_mask(T_s, T_t, s).allowed
    assert all(m[i, j] for i, j in cells)


def test_every_lattice_point_of_the_exact_parallelogram_is_allowed():
    for s in SLOPES[1:]:
        for T_s in range(2, 40):
            for T_t in range(2, 40):
                A, B = T_s - 1, T_t - 1
                i = np.arange(T_s)[:, None]
                j = np.arange(T_t)[None, :]
                # integer cross-multiplication of j/i in [B/(sA), sB/A] from both corners
                cone = ((A * j <= s * B * i) & (s * A * j >= B * i)
                        & (A * (B - j) <= s * B * (A - i)) & (s * A * (B - j) >= B * (A - i)))
                assert not (cone & ~build_mask(T_s, T_t, s).allowed).any()


def test_column_support():
    m = build_mask(40, 50, DEFAULT_SLOPE)
    assert column_support(m, 0) == (0, 0)
    assert column_support(m, 49) == (39, 39)
    oracle = mask_oracle(5, 5, 2.0)
    rows = np.nonzero(oracle[:, 2])[0]
    assert column_support(build_mask(5, 5, 2.0), 2) == (rows[0], rows[-1])
    np.testing.assert_array_equal(m.lo, [column_support(m, j)[0] for j in range(50)])
    with pytest.raises(IndexError):
        column_support(m, 50)
    with pytest.raises(IndexError):
        column_support(m, -1)


def test_errors():
    with pytest.raises(ValueError):
        build_mask(0, 5)
    with pytest.raises(ValueError):
        build_mask(5, 0)
    with pytest.raises(ValueError):
        build_mask(5, 5, 0.9)


def test_clamp_length():
    assert clamp_length(200, 100, 1.25) == 125
    assert clamp_length(10, 100, 1.25) == 80
    assert clamp_length(101, 100, 1.25) == 101
    assert clamp_length(0, 1, 1.0) == 1


def test_pgm_round_trip(tmp_path):
    m = build_mask(7, 9, 1.5)
    write_pgm(mask_image(m), tmp_path / "m.pgm")
    blob = (tmp_path / "m.pgm").read_bytes()
    assert blob.startswith(b"P5\n9 7\n255\n")
    img = read_pgm(tmp_path / "m.pgm")
    np.testing.assert_array_equal(img == 255, m.allowed)
    assert set(np.unique(img)) <= {0, 255}
