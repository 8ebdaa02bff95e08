import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kidneyxfer import convnet
from kidneyxfer.filters import (
    FrangiConfig,
    PhaseCongruencyConfig,
    compare_responses,
    dft2,
    frangi,
    gaussian_hessian,
    gaussian_smooth,
    hessian_eigenvalues,
    idft2,
    pearson,
    phase_congruency,
    write_correlations,
    write_panel,
)
from oracles import fd_hessian

PC0 = PhaseCongruencyConfig(noise_threshold=0.0)


def ridge(bright=True, size=64, row=32, width=3):
    img = np.zeros((size, size))
    img[row - width // 2 : row + width // 2 + 1] = 1.0
    return img if bright else 1.0 - img


def test_hessian_constant_is_zero():
    for m in gaussian_hessian(np.full((40, 40), 0.7), 2.0):
        assert np.abs(m).max() <= 1e-10


def test_hessian_of_quadratic():
    sigma = 2.0
    x = np.arange(64, dtype=np.float64)
    img = np.tile(x**2, (64, 1))
    lxx, lxy, lyy = gaussian_hessian(img, sigma)
    inner = (slice(10, -10), slice(10, -10))
    assert np.allclose(lxx[inner], 2 * sigma**2, atol=1e-8)
    assert np.abs(lxy[inner]).max() < 1e-8
    assert np.abs(lyy[inner]).max() < 1e-8


def test_hessian_matches_finite_differences():
    sigma = 3.0
    rng = np.random.default_rng(0)
    img = rng.random((64, 64))
    lxx, lxy, lyy = (m / sigma**2 for m in gaussian_hessian(img, sigma))
    fxx, fxy, fyy = fd_hessian(gaussian_smooth(img, sigma))
    m = 14  # stay clear of the reflected border
    inner = (slice(m - 2, 2 - m), slice(m - 2, 2 - m))  # fd maps start 2 px in
    full = (slice(m, -m), slice(m, -m))
    for ours, fd in ((lxx, fxx), (lxy, fxy), (lyy, fyy)):
        assert np.abs(ours[full] - fd[inner]).max() < 1e-3


def test_hessian_rejects_bad_sigma():
    with pytest.raises(ValueError):
        gaussian_hessian(np.zeros((10, 10)), 0.0)
    with pytest.raises(ValueError):
        gaussian_hessian(np.zeros((10, 10)), 6.0)


@settings(max_examples=50)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_eigenvalues_ordered_and_correct(a, b, c):
    l1, l2 = hessian_eigenvalues(np.array(a), np.array(b), np.array(c))
    assert abs(l1) <= abs(l2)
    ref = np.linalg.eigvalsh(np.array([[a, b], [b, c]]))
    assert sorted([float(l1), float(l2)]) == pytest.approx(sorted(ref), abs=1e-9)


def test_frangi_constant_is_zero():
    assert np.all(frangi(np.full((32, 32), 0.4)) == 0.0)


def test_frangi_bright_ridge():
    out = frangi(ridge())
    assert out.min() >= 0 and out.max() <= 1
    center = out[32, 10:-10].mean()
    background = out[np.r_[5:20, 45:60], 10:-10].mean()
    assert center > 5 * background


def test_frangi_dark_ridge_suppressed():
    bright = frangi(ridge())[32, 10:-10].mean()
    dark = frangi(ridge(bright=False))[32, 10:-10]
    assert np.all(dark == 0.0)
    assert bright > 0.1
    # the opposite polarity setting picks it up again
    assert frangi(ridge(bright=False), FrangiConfig(bright=False))[32, 10:-10].mean() == pytest.approx(bright)


def test_frangi_translation_equivariant():
    rng = np.random.default_rng(4)
    img = np.zeros((80, 80))
    img[20:50, 20:50] = gaussian_smooth(rng.random((30, 30)), 1.0)
    shifted = np.roll(img, (5, 5), axis=(0, 1))
    a, b = frangi(img), frangi(shifted)
    assert np.abs(np.roll(a, (5, 5), axis=(0, 1))[15:-15, 15:-15] - b[15:-15, 15:-15]).max() <= 1e-6


def test_frangi_config_validation():
    with pytest.raises(ValueError):
        FrangiConfig(scales=(1.0, -1.0))
    with pytest.raises(ValueError):
        FrangiConfig(beta=0)
    with pytest.raises(ValueError):
        FrangiConfig(c=0.0)


def test_pc_constant_is_near_zero():
    out = phase_congruency(np.full((32, 32), 0.3), PhaseCongruencyConfig())
    assert out.max() <= 1e-4


def test_pc_contrast_and_offset_invariance():
    rng = np.random.default_rng(1)
    img = gaussian_smooth(rng.random((48, 48)), 1.5)
    ref = phase_congruency(img, PC0)
    for alpha in (0.5, 2.0):
        assert np.abs(phase_congruency(alpha * img, PC0) - ref).max() <= 1e-6
    assert np.abs(phase_congruency(img + 0.3, PC0) - ref).max() <= 1e-6


def test_pc_step_edge_localized():
    img = np.zeros((48, 48))
    img[:, 24:] = 1.0
    out = phase_congruency(img, PC0)
    assert out.min() >= 0 and out.max() <= 1
    cols = out[8:-8, 8:-8].argmax(axis=1) + 8
    # the step sits between columns 23 and 24
    assert np.all(np.abs(cols - 23.5) <= 1)


def test_pc_validation():
    with pytest.raises(ValueError):
        phase_congruency(np.zeros((6, 20)))
    with pytest.raises(ValueError):
        PhaseCongruencyConfig(scales=1)
    with pytest.raises(ValueError):
        PhaseCongruencyConfig(epsilon=0)
    with pytest.raises(ValueError):
        PhaseCongruencyConfig(noise_threshold=-1.0)


def test_dft_roundtrip_and_parseval():
    rng = np.random.default_rng(2)
    for shape in ((16, 16), (15, 22), (7, 3)):
        x = rng.random(shape)
        spec = dft2(x)
        assert np.abs(idft2(spec) - x).max() <= 1e-9
        assert abs(np.sum(np.abs(x) ** 2) - np.sum(np.abs(spec) ** 2) / x.size) <= 1e-9


def test_dft_delta_and_sinusoid():
    d = np.zeros((8, 8))
    d[0, 0] = 1.0
    assert np.allclose(np.abs(dft2(d)), 1.0, atol=1e-12)
    n = np.arange(16)
    s = np.tile(np.cos(2 * np.pi * 3 * n / 16), (16, 1))
    mag = np.abs(dft2(s))
    peaks = {tuple(p) for p in np.argwhere(mag > 1e-9)}
    assert peaks == {(0, 3), (0, 13)}
    assert mag[0, 3] == pytest.approx(16 * 16 / 2)


def test_pearson():
    a = np.random.default_rng(0).random(50)
    assert pearson(a, a) == pytest.approx(1.0)
    assert pearson(a, -a) == pytest.approx(-1.0)
    assert pearson(np.ones(50), a) is None


def test_compare_responses_and_outputs(tmp_path):
    net = convnet.init_convnet(0, 2)
    patch = np.random.default_rng(3).random((32, 32))
    for layer in (0, 1):
        comp = compare_responses(net, patch, layer)
        filters = net.convs[layer].weights.shape[0]
        assert len(comp.maps) == filters + 2
        assert all(m.shape == (32, 32) for m in comp.maps.values())
        assert all(0 <= m.min() and m.max() <= 1 for m in comp.maps.values())
        assert len(comp.correlations) == (filters + 2) * (filters + 1) // 2
        paths = write_panel(str(tmp_path / f"l{layer}"), comp)
        assert len(paths) == filters + 2
    comp.maps["flat"] = np.zeros((32, 32))
    comp.correlations.append(("flat", "frangi", None))
    assert comp.correlation("frangi", "flat") is None
    with pytest.raises(KeyError):
        comp.correlation("nope", "frangi")
    out = tmp_path / "c.csv"
    write_correlations(str(out), comp)
    lines = out.read_text().splitlines()
    assert lines[0] == "name_a,name_b,pearson"
    assert lines[-1] == "flat,frangi,"
    assert "nan" not in out.read_text().lower()
