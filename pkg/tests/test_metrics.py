import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advrestore.data import apply_blur, gaussian_kernel, generate_synthetic_scene
from advrestore.metrics import (
    CSV_HEADER,
    LUMA_WEIGHTS,
    PSNR_CAP,
    dft2_direct,
    evaluate_batch,
    grid_peak_score,
    high_frequency_mask,
    luminance,
    psnr,
    spectral_artifact_scores,
    ssim,
)


# --- oracles ---------------------------------------------------------------------------

def ssim_oracle(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Direct double loop over every valid window position."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    per_channel = []
    for ca, cb in zip(a, b):
        h, w = ca.shape
        vals = []
        for i in range(h - size + 1):
            for j in range(w - size + 1):
                pa, pb = ca[i:i + size, j:j + size], cb[i:i + size, j:j + size]
                ma, mb = (g * pa).sum(), (g * pb).sum()
                va = (g * (pa - ma) ** 2).sum()
                vb = (g * (pb - mb) ** 2).sum()
                cov = (g * (pa - ma) * (pb - mb)).sum()
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


def checkerboard(h, w, amp):
    i, j = np.mgrid[0:h, 0:w]
    return amp * (-1.0) ** (i + j)


# --- PSNR --------------------------------------------------------------------------------

def test_psnr_identical_is_capped(rng):
    a = rng.random((3, 8, 8))
    assert psnr(a, a) == PSNR_CAP == 100.0


@pytest.mark.parametrize("a, b, expected", [
    (np.zeros((3, 4, 4)), np.ones((3, 4, 4)), 0.0),
    (np.full((3, 4, 4), 0.5), np.full((3, 4, 4), 0.6), 20.0),
    (np.zeros((1, 2, 2)), np.array([[[0.1, 0.1], [0.1, 0.1]]]), 20.0),
])
def test_psnr_examples(a, b, expected):
    assert psnr(a, b) == pytest.approx(expected, abs=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), s1=st.floats(0.01, 0.2), s2=st.floats(0.01, 0.2))
def test_psnr_decreasing_in_mse(seed, s1, s2):
    r = np.random.default_rng(seed)
    a = r.random((3, 8, 8))
    d = r.standard_normal((3, 8, 8))
    p1, p2 = psnr(a + s1 * d, a), psnr(a + s2 * d, a)
    if s1 < s2:
        assert p1 > p2
    elif s1 > s2:
        assert p1 < p2


def test_psnr_permutation_invariant(rng):
    a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    perm = rng.permutation(a.size)
    pa, pb = a.ravel()[perm].reshape(a.shape), b.ravel()[perm].reshape(b.shape)
    assert psnr(pa, pb) == pytest.approx(psnr(a, b), rel=1e-12)


def test_psnr_nonnegative_in_unit_range(rng):
    for _ in range(20):
        a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
        assert psnr(a, b) >= 0.0


# --- SSIM --------------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_direct_oracle(seed):
    r = np.random.default_rng(seed)
    a = r.random((3, 32, 32))
    b = np.clip(a + 0.2 * r.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)


def test_ssim_self_is_one(rng):
    a = rng.random((3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetric_and_bounded(rng):
    for _ in range(10):
        a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
        assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_luminance_shift_follows_oracle(rng):
    a = 0.2 + 0.5 * rng.random((3, 16, 16))
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 0.8)
    shifted = ssim(a + 0.15, b + 0.15)
    assert shifted == pytest.approx(ssim_oracle(a + 0.15, b + 0.15), abs=1e-6)
    # only the stabilizing constants react to the shift
    assert abs(shifted - ssim(a, b)) < 0.05


def test_ssim_grayscale_plane(rng):
    a, b = rng.random((12, 12)), rng.random((12, 12))
    assert ssim(a, b) == pytest.approx(ssim_oracle(a[None], b[None]), abs=1e-6)


def test_ssim_small_image_rejected():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


# --- spectral scores ---------------------------------------------------------------------

@pytest.mark.parametrize("n", [8, 15, 32])
def test_fft_matches_direct_sum(n, rng):
    plane = rng.random((n, n + 3))
    np.testing.assert_allclose(np.fft.fft2(plane), dft2_direct(plane), atol=1e-9)


def test_luminance_weights():
    assert LUMA_WEIGHTS.sum() == pytest.approx(1.0)
    img = np.stack([np.full((2, 2), v) for v in (1.0, 0.0, 0.0)])
    np.testing.assert_allclose(luminance(img), 0.299)


def test_high_frequency_mask_excludes_low_band():
    m = high_frequency_mask(8, 8)
    assert not m[0, 0] and not m[2, 2] and m[4, 0] and m[0, 3]


def test_identity_scores():
    x = generate_synthetic_scene(2)
    hf, grid, color = spectral_artifact_scores(x, x)
    assert (hf, grid, color) == (1.0, 0.0, 0.0)


@pytest.mark.parametrize("size", [16, 32])
def test_checkerboard_drives_grid_peak(size):
    ref = apply_blur(generate_synthetic_scene(4, size, size), gaussian_kernel(7, 1.5))
    pattern = checkerboard(size, size, 0.1)
    restored = ref + pattern[None]
    score = grid_peak_score(restored, ref)

    # oracle: direct DFT of the analytic pattern plus the reference
    def peak(img):
        mag = np.abs(dft2_direct(luminance(img))) / size ** 2
        return max(mag[size // 2, :].max(), mag[:, size // 2].max()), mag

    p_out, mag = peak(restored)
    p_ref, _ = peak(ref)
    assert score == pytest.approx(p_out - p_ref, abs=1e-12)
    assert score > 0
    assert np.unravel_index(np.argmax(mag[1:, 1:]), mag[1:, 1:].shape) == (size // 2 - 1, size // 2 - 1)
    # the analytic pattern alone puts exactly 0.1 in the (N/2, N/2) bin
    pat_mag = np.abs(dft2_direct(pattern)) / size ** 2
    assert pat_mag[size // 2, size // 2] == pytest.approx(0.1, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_blurred_restoration_loses_high_frequencies(seed):
    x = generate_synthetic_scene(seed)
    hf, _, _ = spectral_artifact_scores(apply_blur(x, gaussian_kernel(7, 1.2)), x)
    assert hf < 1.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), dy=st.integers(-15, 15), dx=st.integers(-15, 15))
def test_scores_are_shift_consistent(seed, dy, dx):
    r = np.random.default_rng(seed)
    ref = r.random((3, 16, 16))
    out = np.clip(ref + 0.1 * r.standard_normal(ref.shape), 0, 1)
    roll = lambda a: np.roll(a, (dy, dx), axis=(1, 2))  # noqa: E731
    base = spectral_artifact_scores(out, ref)
    moved = spectral_artifact_scores(roll(out), roll(ref))
    assert moved[0] == pytest.approx(base[0], abs=1e-9)
    assert moved[1] == pytest.approx(base[1], abs=1e-9)
    assert moved[2] == pytest.approx(base[2], abs=1e-9)


def test_color_mixing_detects_decorrelation(rng):
    base = rng.random((16, 16))
    ref = np.stack([base, base * 0.9, base * 0.8])
    gray = np.stack([base, base, base])
    mixed = np.stack([base, rng.random((16, 16)), rng.random((16, 16))])
    assert spectral_artifact_scores(gray, ref)[2] == pytest.approx(0.0, abs=1e-12)
    assert spectral_artifact_scores(mixed, ref)[2] > 0.3


def test_scores_finite_on_flat_images():
    flat = np.full((3, 16, 16), 0.5)
    scores = spectral_artifact_scores(flat, flat)
    assert all(math.isfinite(s) for s in scores)


# --- reports -----------------------------------------------------------------------------

def test_report_csv(tmp_path, rng):
    ref = rng.random((4, 3, 16, 16))
    out = np.clip(ref + 0.05 * rng.standard_normal(ref.shape), 0, 1)
    rep = evaluate_batch(out, ref, ids=["a", "b", "c", "d"], config={"cell": "x"})
    assert rep.config == {"cell": "x"}
    path = rep.to_csv(tmp_path / "m.csv")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(CSV_HEADER)
    assert [r[0] for r in rows[1:]] == ["a", "b", "c", "d", "mean", "std"]
    assert float(rows[5][1]) == pytest.approx(rep.mean("psnr"), abs=1e-6)
    agg = rep.aggregates()
    assert set(agg) == set(CSV_HEADER[1:])
    assert all(math.isfinite(v["mean"]) and math.isfinite(v["std"]) for v in agg.values())
