import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cueing.tokenizer import (
    DimensionError,
    coord_grid,
    downsample_gaze,
    fold,
    side,
    tokenize,
    unfold,
    untokenize,
)

token_counts = st.sampled_from([1, 4, 16, 64])


@st.composite
def images(draw):
    T = draw(token_counts)
    s = side(T)
    h = draw(st.integers(1, 4)) * s
    w = draw(st.integers(1, 4)) * s
    seed = draw(st.integers(0, 2**32 - 1))
    return T, np.random.default_rng(seed).uniform(size=(3, h, w))


def test_default_token_shape():
    t = tokenize(np.zeros((3, 720, 1280)), 256)
    assert t.shape == (256, 3, 45, 80)


def test_single_token_identity(rng):
    x = rng.uniform(size=(3, 6, 10))
    assert np.array_equal(tokenize(x, 1)[0], x)
    assert np.array_equal(untokenize(tokenize(x, 1)), x)


def test_corner_pixels(rng):
    x = rng.uniform(size=(3, 8, 12))
    t = tokenize(x, 16)
    assert t[0, :, 0, 0].tolist() == x[:, 0, 0].tolist()
    assert t[15, :, -1, -1].tolist() == x[:, -1, -1].tolist()


def test_token_contents_row_major(rng):
    x = rng.uniform(size=(3, 8, 12))
    t = tokenize(x, 16)
    for r in range(4):
        for c in range(4):
            assert np.array_equal(t[r * 4 + c], x[:, r * 2 : (r + 1) * 2, c * 3 : (c + 1) * 3])


@given(images())
def test_tokenize_round_trip_and_conservation(case):
    T, x = case
    t = tokenize(x, T)
    assert np.array_equal(untokenize(t), x)
    assert np.array_equal(np.sort(t.ravel()), np.sort(x.ravel()))


@given(images(), st.integers(0, 2**32 - 1))
def test_permutation_inverse(case, seed):
    T, x = case
    t = tokenize(x, T)
    perm = np.random.default_rng(seed).permutation(T)
    shuffled = t[perm]
    restored = np.empty_like(shuffled)
    restored[perm] = shuffled
    assert np.array_equal(untokenize(restored), x)


def test_batched_tokenize(rng):
    x = rng.uniform(size=(2, 3, 8, 8))
    t = tokenize(x, 4)
    assert t.shape == (2, 4, 3, 4, 4)
    assert np.array_equal(t[1], tokenize(x[1], 4))
    assert np.array_equal(untokenize(t), x)


def test_non_divisible():
    with pytest.raises(DimensionError, match="H=10.*W=12.*4"):
        tokenize(np.zeros((3, 10, 12)), 16)
    with pytest.raises(DimensionError):
        tokenize(np.zeros((3, 8, 8)), 8)


def test_unfold_fold(rng):
    t = rng.uniform(size=(2, 16, 3, 2, 2))
    stack = unfold(t)
    assert stack.shape == (32, 3, 2, 2)
    assert np.array_equal(stack[16 + 5], t[1, 5])
    assert np.array_equal(fold(stack, 16), t)
    single = rng.uniform(size=(4, 3, 2, 2))
    s1 = unfold(single)
    assert s1.shape == single.shape and np.array_equal(s1[2], single[2])
    assert np.array_equal(fold(list(s1)), single)


def test_fold_ragged():
    with pytest.raises(DimensionError):
        fold([np.zeros((3, 2, 2)), np.zeros((3, 2, 3))])
    with pytest.raises(DimensionError):
        fold(np.zeros((5, 3)), 4)


def test_coord_grid_three_by_three():
    g = coord_grid(3, 3, 9)
    assert tuple(g[:, 0, 0]) == (-1, -1)
    assert tuple(g[:, 0, 1]) == (0, -1)
    assert tuple(g[:, 1, 0]) == (-1, 0)


@pytest.mark.parametrize("s", [1, 2, 4, 16])
def test_coord_grid_axes(s):
    g = coord_grid(2 * s, 3 * s, s * s)
    xs = np.unique(g[0])
    ys = np.unique(g[1])
    assert len(xs) == len(ys) == s
    if s == 1:
        assert xs.tolist() == [0.0]
    else:
        assert xs[0] == -1 and xs[-1] == 1
        assert np.allclose(np.diff(xs), 2 / (s - 1))
        assert np.allclose(xs, -xs[::-1])
    # every pixel of a token carries the token's pair
    t = tokenize(np.concatenate([g, g[:1]]), s * s)
    assert all(np.ptp(t[i, c]) == 0 for i in range(s * s) for c in range(2))


def test_downsample_examples():
    assert np.allclose(downsample_gaze(np.full((8, 8), 0.4), 16), 0.4)
    g = np.zeros((4, 4))
    g[:, :1] = 1.0
    g[:, 2:3] = 1.0
    assert np.allclose(downsample_gaze(g, 4), 0.5)


@settings(max_examples=30)
@given(images())
def test_downsample_brute_force(case):
    T, x = case
    g = x[0]
    s = side(T)
    h, w = g.shape[0] // s, g.shape[1] // s
    got = downsample_gaze(g, T)
    for i in range(T):
        r, c = divmod(i, s)
        total = 0.0
        for y in range(r * h, (r + 1) * h):
            for xx in range(c * w, (c + 1) * w):
                total += g[y, xx]
        assert abs(got[i] - total / (h * w)) <= 1e-12
    assert abs(got.mean() - g.mean()) <= 1e-12
