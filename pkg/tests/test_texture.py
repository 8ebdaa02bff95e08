import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kidneyxfer import texture
from kidneyxfer.imaging import Image, integral

from oracles import haar_naive


@pytest.fixture(scope="module")
def bank():
    return texture.default_bank()


def test_bank_size_and_determinism(bank):
    assert 1800 <= len(bank) <= 2200
    assert texture.build_bank() == texture.build_bank()
    assert {f.family for f in bank.features} == set(texture.FAMILIES)


def test_rects_inside_patch_and_balanced(bank):
    for f in bank.features:
        assert len(f.rects) >= 2
        for r, wt in f.rects:
            assert r.fits(32, 32)
            assert wt in (1.0, -1.0, -2.0, -3.0)
        assert sum(wt * r.area for r, wt in f.rects) == 0


def test_constant_patches_give_zero(bank):
    for v in (0.0, 0.5, 0.73, 1.0):
        assert np.all(texture.extract(np.full((32, 32), v), bank) == 0)
    assert np.all(texture.extract_batch(np.full((3, 32, 32), 0.37), bank) == 0)


def test_step_image_h2_positive(bank):
    step = np.zeros((32, 32))
    step[:, :16] = 1.0
    vals = texture.extract(Image(step), bank)
    hits = 0
    for j, f in enumerate(bank.features):
        if f.family != "h2":
            continue
        left, right = f.rects[0][0], f.rects[1][0]
        if left.x < 16 and right.x + right.w > 16 and left.x + left.w == 16:
            # boundary exactly between the halves: left all ones, right all zeros
            assert vals[j] == pytest.approx(0.5)
            hits += 1
    assert hits > 0


def test_matches_naive_summation(bank):
    rng = np.random.default_rng(11)
    patches = rng.random((20, 32, 32))
    batch = texture.extract_batch(patches, bank)
    cols = rng.choice(len(bank), 150, replace=False)
    for i, p in enumerate(patches):
        single = texture.extract(p, bank)
        assert np.allclose(single, batch[i], atol=1e-9, rtol=0)
        for j in cols:
            assert abs(single[j] - haar_naive(p, bank.features[j])) <= 1e-9


def test_integral_path_equals_matrix_path(bank):
    p = np.random.default_rng(2).random((32, 32))
    ii = integral(p - p[0, 0])
    assert np.allclose(texture.extract_integral(ii, bank), texture.extract(p, bank), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.5, 0.5), st.integers(0, 2**31))
def test_offset_invariance(offset, seed):
    bank = texture.default_bank()
    p = np.random.default_rng(seed).random((32, 32)) * 0.4 + 0.5
    assert np.allclose(texture.extract(p, bank), texture.extract(p + offset, bank), atol=1e-12)


def test_size_mismatch(bank):
    with pytest.raises(ValueError):
        texture.extract(np.zeros((16, 16)), bank)
    with pytest.raises(ValueError):
        texture.extract_integral(integral(np.zeros((8, 8))), bank)
    with pytest.raises(ValueError):
        texture.extract_batch(np.zeros((2, 32, 31)), bank)
