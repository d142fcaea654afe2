import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advrestore.data import (
    BlurKernel,
    ImagePair,
    apply_blur,
    box_kernel,
    delta_kernel,
    gaussian_kernel,
    generate_synthetic_scene,
    load_pair_dir,
    load_png,
    make_dataset,
    motion_kernel,
    pair_seed,
    sample_kernel,
    save_png,
    write_dataset,
)
from advrestore.metrics import high_frequency_energy, high_frequency_fraction

KERNELS = {
    "gaussian": gaussian_kernel(7, 1.3),
    "box3": box_kernel(3),
    "box5": box_kernel(5),
    "motion": motion_kernel(7, 5.0, 0.7),
}


def histogram_occupancy(img, bins=20):
    """Fraction of equal-width bins of [0, 1] that contain at least one pixel."""
    counts, _ = np.histogram(img, bins=bins, range=(0.0, 1.0))
    return float((counts > 0).mean())


# --- scenes --------------------------------------------------------------------------

def test_scene_is_deterministic():
    np.testing.assert_array_equal(generate_synthetic_scene(11), generate_synthetic_scene(11))
    assert not np.array_equal(generate_synthetic_scene(11), generate_synthetic_scene(12))


@pytest.mark.parametrize("shape", [(16, 16), (32, 48), (64, 64)])
def test_scene_shape_and_range(shape):
    img = generate_synthetic_scene(3, *shape)
    assert img.shape == (3,) + shape
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_scene_rejects_tiny_canvas():
    with pytest.raises(ValueError):
        generate_synthetic_scene(0, 8, 32)


def test_scene_statistics_over_100_seeds():
    occ = [histogram_occupancy(generate_synthetic_scene(s)) for s in range(100)]
    hf = [high_frequency_fraction(generate_synthetic_scene(s)) for s in range(100)]
    assert min(occ) >= 0.5
    assert min(hf) >= 0.01


# --- kernels and blur ------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(KERNELS))
def test_kernel_normalized(name):
    w = KERNELS[name].weights
    assert (w >= 0).all()
    assert w.sum() == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("make", [lambda: box_kernel(4), lambda: gaussian_kernel(6, 1.0),
                                  lambda: BlurKernel("disk", 3)])
def test_invalid_kernels_rejected(make):
    with pytest.raises(ValueError):
        make()


def test_descriptor_round_trip():
    k = KERNELS["motion"]
    again = BlurKernel.from_descriptor(json.loads(json.dumps(k.descriptor())))
    np.testing.assert_array_equal(again.weights, k.weights)


def test_delta_kernel_is_identity(rng):
    x = rng.random((3, 20, 24))
    np.testing.assert_array_equal(apply_blur(x, delta_kernel()), x)


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_constant_image_unchanged(name):
    x = np.full((3, 16, 16), 0.37)
    np.testing.assert_allclose(apply_blur(x, KERNELS[name]), x, atol=1e-12)


def test_box_on_impulse_gives_plateau():
    x = np.zeros((1, 9, 9))
    x[0, 4, 4] = 1.0
    y = apply_blur(x, box_kernel(3))
    expected = np.zeros((9, 9))
    expected[3:6, 3:6] = 1.0 / 9.0
    np.testing.assert_allclose(y[0], expected, atol=1e-15)


def test_motion_kernel_follows_angle():
    # horizontal streak: all weight on the centre row
    w = motion_kernel(7, 5.0, 0.0).weights
    assert w[3].sum() == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-2, 2), b=st.floats(-2, 2), seed=st.integers(0, 2**16),
       name=st.sampled_from(sorted(KERNELS)))
def test_blur_is_linear(a, b, seed, name):
    r = np.random.default_rng(seed)
    x1, x2 = r.random((3, 16, 16)), r.random((3, 16, 16))
    k = KERNELS[name]
    lhs = apply_blur(a * x1 + b * x2, k)
    rhs = a * apply_blur(x1, k) + b * apply_blur(x2, k)
    np.testing.assert_allclose(lhs, rhs, atol=1e-7)


@pytest.mark.parametrize("name", ["gaussian", "box3", "box5"])
@pytest.mark.parametrize("seed", range(5))
def test_blur_is_low_pass(name, seed):
    x = generate_synthetic_scene(seed)
    assert high_frequency_energy(apply_blur(x, KERNELS[name])) < high_frequency_energy(x)


def test_blur_output_in_range(rng):
    x = rng.random((3, 16, 16))
    for k in KERNELS.values():
        y = apply_blur(x, k)
        assert y.min() >= -1e-12 and y.max() <= 1 + 1e-12


# --- datasets --------------------------------------------------------------------------

@pytest.mark.parametrize("family", ["gaussian", "box", "linear_motion", "mixed"])
def test_pairs_are_recomputable(family):
    for p in make_dataset(6, 16, 16, family, seed=4):
        np.testing.assert_allclose(p.recompute(), p.y_clean, atol=1e-12)


def test_dataset_is_deterministic():
    a, b = make_dataset(5, seed=9), make_dataset(5, seed=9)
    for p, q in zip(a, b):
        assert p.id == q.id and p.blur_descriptor == q.blur_descriptor
        np.testing.assert_array_equal(p.x, q.x)
        np.testing.assert_array_equal(p.y_clean, q.y_clean)


def test_splits_are_disjoint():
    train = make_dataset(50, 16, 16, seed=0, split="train")
    test = make_dataset(50, 16, 16, seed=0, split="test")
    assert not {p.id for p in train} & {p.id for p in test}
    assert not {p.seed for p in train} & {p.seed for p in test}
    assert pair_seed(0, "train", 3) != pair_seed(0, "val", 3)


def test_unknown_split_or_family():
    with pytest.raises(ValueError):
        make_dataset(1, split="holdout")
    with pytest.raises(ValueError):
        sample_kernel(np.random.default_rng(0), "defocus")


def test_mismatched_pair_rejected():
    with pytest.raises(ValueError):
        ImagePair("p", np.zeros((3, 4, 4)), np.zeros((3, 4, 5)), {})


def test_generation_budget():
    t0 = time.perf_counter()
    pairs = make_dataset(200, 32, 32, "gaussian", seed=0)
    assert time.perf_counter() - t0 < 5.0
    assert len(pairs) == 200


# --- PNG I/O ---------------------------------------------------------------------------

def test_png_round_trip_within_half_step(tmp_path, rng):
    x = rng.random((3, 17, 23))
    back = load_png(save_png(x, tmp_path / "img.png"))
    assert back.shape == x.shape
    assert np.abs(back - x).max() <= 1 / 510 + 1e-12


def test_png_is_lossless_for_8bit_values(tmp_path, rng):
    x = rng.integers(0, 256, (3, 8, 8)) / 255.0
    np.testing.assert_array_equal(load_png(save_png(x, tmp_path / "q.png")), x)


def test_png_errors_name_the_path(tmp_path):
    missing = tmp_path / "nope.png"
    with pytest.raises(OSError, match="nope.png"):
        load_png(missing)


def test_write_and_load_dataset(tmp_path):
    pairs = make_dataset(4, 16, 16, seed=1, split="val")
    manifest = write_dataset(pairs, tmp_path, "val")
    entries = json.loads(manifest.read_text())["pairs"]
    assert [e["id"] for e in entries] == [p.id for p in pairs]
    assert entries[0]["kernel"] == pairs[0].blur_descriptor
    loaded = load_pair_dir(tmp_path / "val")
    assert [p.id for p in loaded] == [p.id for p in pairs]
    for p, q in zip(pairs, loaded):
        assert np.abs(p.x - q.x).max() <= 1 / 510 + 1e-12
        assert np.abs(p.y_clean - q.y_clean).max() <= 1 / 510 + 1e-12


def test_load_pair_dir_reports_missing_parts(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_pair_dir(tmp_path)
    save_png(np.zeros((3, 4, 4)), tmp_path / "sharp" / "a.png")
    (tmp_path / "blur").mkdir()
    with pytest.raises(FileNotFoundError, match="a.png"):
        load_pair_dir(tmp_path)
