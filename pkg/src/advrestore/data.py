"""Synthetic deblurring data: procedural sharp scenes, blur operator, PNG I/O."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
KERNEL_KINDS = ("gaussian", "box", "linear_motion")


# --- blur kernels ----------------------------------------------------------------

@dataclass
class BlurKernel:
    kind: str
    size: int
    sigma: float = 0.0
    angle: float = 0.0
    length: float = 0.0
    weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.size}")
        if self.weights is None:
            self.weights = _kernel_weights(self)
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.size, self.size):
            raise ValueError(f"kernel weights shape {w.shape} does not match size {self.size}")
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("kernel weights must be non-negative and sum to 1")
        self.weights = w

    def descriptor(self) -> dict:
        return {"kind": self.kind, "size": self.size, "sigma": self.sigma,
                "angle": self.angle, "length": self.length}

    @classmethod
    def from_descriptor(cls, d: dict) -> "BlurKernel":
        return cls(**d)


def gaussian_kernel(size: int, sigma: float) -> BlurKernel:
    return BlurKernel("gaussian", size, sigma=sigma)


def box_kernel(size: int) -> BlurKernel:
    return BlurKernel("box", size)


def motion_kernel(size: int, length: float, angle: float) -> BlurKernel:
    return BlurKernel("linear_motion", size, length=length, angle=angle)


def delta_kernel() -> BlurKernel:
    """Identity blur: a 1 x 1 box."""
    return BlurKernel("box", 1)


def _kernel_weights(k: BlurKernel) -> np.ndarray:
    r = k.size // 2
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    if k.kind == "gaussian":
        if k.sigma <= 0:
            raise ValueError("gaussian kernel needs sigma > 0")
        w = np.exp(-(xx ** 2 + yy ** 2) / (2 * k.sigma ** 2))
    elif k.kind == "box":
        w = np.ones((k.size, k.size))
    else:
        # rasterize a centred line segment with bilinear splatting
        w = np.zeros((k.size, k.size))
        length = max(k.length, 1.0)
        n = max(int(math.ceil(length * 4)), 2)
        ts = np.linspace(-length / 2, length / 2, n)
        cx, cy = np.cos(k.angle) * ts + r, np.sin(k.angle) * ts + r
        for px, py in zip(cx, cy):
            x0, y0 = int(math.floor(px)), int(math.floor(py))
            fx, fy = px - x0, py - y0
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    yi, xi = y0 + dy, x0 + dx
                    if 0 <= yi < k.size and 0 <= xi < k.size:
                        w[yi, xi] += wy * wx
    return w / w.sum()


def apply_blur(x: np.ndarray, kernel: BlurKernel) -> np.ndarray:
    """Channelwise 2-D convolution of a C x H x W image with reflect padding.

    Linear in ``x``; no clipping is applied.
    """
    w = kernel.weights
    if w.shape[0] % 2 == 0:
        raise ValueError("even-size kernels are not supported")
    x = np.asarray(x, dtype=np.float64)
    r = w.shape[0] // 2
    if r == 0:
        return x * w[0, 0]
    c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (r, r), (r, r)), mode="reflect")
    out = np.zeros_like(x)
    k = w[::-1, ::-1]  # convolution, not correlation
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            if k[i, j] != 0:
                out += k[i, j] * xp[:, i:i + h, j:j + wd]
    return out


# --- synthetic scenes -------------------------------------------------------------

def generate_synthetic_scene(seed: int, H: int = 32, W: int = 32) -> np.ndarray:
    """Deterministic 3 x H x W scene of rectangles, disks, gratings and edges in [0, 1]."""
    if H < 16 or W < 16:
        raise ValueError("scene size must be at least 16 x 16")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.empty((3, H, W))

    # background: linear color ramp between two random colors
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx / W + np.sin(theta) * yy / H)
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    img[:] = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    def paint(mask, color):
        img[:, mask] = color[:, None]

    # half-plane edge with random orientation
    phi = rng.uniform(0, 2 * np.pi)
    off = rng.uniform(0.3, 0.7)
    edge = np.cos(phi) * (xx / W - off) + np.sin(phi) * (yy / H - off) > 0
    img[:, edge] = 0.5 * img[:, edge] + 0.5 * rng.uniform(0, 1, 3)[:, None]

    # one guaranteed dark and one guaranteed bright primitive keep the range wide
    shapes = ["rect", "disk"] * 2 + list(rng.choice(["rect", "disk", "grating"], size=rng.integers(2, 5)))
    for idx, kind in enumerate(shapes):
        if idx == 0:
            color = rng.uniform(0.0, 0.12, 3)
        elif idx == 1:
            color = rng.uniform(0.88, 1.0, 3)
        else:
            color = rng.uniform(0, 1, 3)
        if kind == "rect":
            h0, w0 = rng.integers(3, H // 2 + 1), rng.integers(3, W // 2 + 1)
            t0, l0 = rng.integers(0, H - h0 + 1), rng.integers(0, W - w0 + 1)
            mask = (yy >= t0) & (yy < t0 + h0) & (xx >= l0) & (xx < l0 + w0)
            paint(mask, color)
        elif kind == "disk":
            rad = rng.uniform(2, min(H, W) / 4)
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            paint((yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2, color)
        else:
            freq = rng.uniform(0.2, 0.45)  # cycles / pixel, mostly above half-Nyquist
            ang = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy) + phase)
            h0, w0 = rng.integers(H // 4, H // 2 + 1), rng.integers(W // 4, W // 2 + 1)
            t0, l0 = rng.integers(0, H - h0 + 1), rng.integers(0, W - w0 + 1)
            mask = (yy >= t0) & (yy < t0 + h0) & (xx >= l0) & (xx < l0 + w0)
            img[:, mask] = (wave[mask][None] * color[:, None] + (1 - wave[mask][None]) * (1 - color[:, None]))
    return np.clip(img, 0.0, 1.0)


# --- datasets ----------------------------------------------------------------------

@dataclass
class ImagePair:
    id: str
    x: np.ndarray
    y_clean: np.ndarray
    blur_descriptor: dict
    seed: int = -1

    def __post_init__(self):
        if self.x.shape != self.y_clean.shape:
            raise ValueError(f"pair {self.id}: shapes differ {self.x.shape} vs {self.y_clean.shape}")

    def recompute(self) -> np.ndarray:
        return apply_blur(self.x, BlurKernel.from_descriptor(self.blur_descriptor))


def sample_kernel(rng: np.random.Generator, family: str) -> BlurKernel:
    if family == "gaussian":
        return gaussian_kernel(7, sigma=float(rng.uniform(1.0, 1.6)))
    if family == "box":
        return box_kernel(int(rng.choice([3, 5])))
    if family == "linear_motion":
        return motion_kernel(7, length=float(rng.uniform(3.0, 6.0)), angle=float(rng.uniform(0, np.pi)))
    if family == "mixed":
        return sample_kernel(rng, str(rng.choice(KERNEL_KINDS)))
    raise ValueError(f"unknown kernel family {family!r}")


def pair_seed(seed: int, split: str, index: int) -> int:
    """Scene seed for one pair; split codes keep train/val/test streams disjoint."""
    ss = np.random.SeedSequence([seed, SPLIT_CODES[split], index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_dataset(n_pairs: int, H: int = 32, W: int = 32, kernel_family: str = "gaussian",
                 seed: int = 0, split: str = "train") -> List[ImagePair]:
    if split not in SPLIT_CODES:
        raise ValueError(f"unknown split {split!r}")
    pairs = []
    for i in range(n_pairs):
        s = pair_seed(seed, split, i)
        rng = np.random.default_rng([s, 1])
        x = generate_synthetic_scene(s, H, W)
        k = sample_kernel(rng, kernel_family)
        # convex combination; clip only removes rounding excursions of a few ulp
        y = np.clip(apply_blur(x, k), 0.0, 1.0)
        pairs.append(ImagePair(f"{split}-{i:05d}", x, y, k.descriptor(), seed=s))
    return pairs


def stack_pairs(pairs: Sequence[ImagePair], dtype=np.float64):
    """Return (y_clean, x) batches as N x 3 x H x W arrays."""
    y = np.stack([p.y_clean for p in pairs]).astype(dtype)
    x = np.stack([p.x for p in pairs]).astype(dtype)
    return y, x


# --- image files -------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image: np.ndarray, path) -> Path:
    """Write a C x H x W (or H x W) float image in [0, 1] as an 8-bit PNG."""
    path = Path(path)
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        if arr.shape[2] == 1:
            arr = arr[..., 0]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(arr)).save(path, format="PNG")
    except OSError as e:
        raise OSError(f"cannot write PNG {path}: {e}") from e
    return path


def load_png(path) -> np.ndarray:
    """Read an 8-bit PNG into a 3 x H x W float64 array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise OSError(f"cannot read PNG {path}: {e}") from e
    return arr.transpose(2, 0, 1)


def write_dataset(pairs: Sequence[ImagePair], root, split: str) -> Path:
    """Save pairs as root/split/{sharp,blur}/<id>.png plus a manifest."""
    root = Path(root)
    entries = []
    for p in pairs:
        sharp = save_png(p.x, root / split / "sharp" / f"{p.id}.png")
        blur = save_png(p.y_clean, root / split / "blur" / f"{p.id}.png")
        entries.append({"id": p.id, "seed": p.seed, "kernel": p.blur_descriptor,
                        "sharp": str(sharp.relative_to(root)), "blur": str(blur.relative_to(root))})
    manifest = root / f"{split}_manifest.json"
    manifest.write_text(json.dumps({"split": split, "pairs": entries}, indent=1, sort_keys=True))
    return manifest


def load_pair_dir(directory) -> List[ImagePair]:
    """Load every sharp/blur PNG pair under ``directory`` (matched by filename)."""
    d = Path(directory)
    sharp_dir, blur_dir = d / "sharp", d / "blur"
    if not sharp_dir.is_dir() or not blur_dir.is_dir():
        raise FileNotFoundError(f"{d} must contain 'sharp' and 'blur' subdirectories")
    pairs = []
    for sp in sorted(sharp_dir.glob("*.png")):
        bp = blur_dir / sp.name
        if not bp.exists():
            raise FileNotFoundError(f"missing blurred counterpart {bp}")
        pairs.append(ImagePair(sp.stem, load_png(sp), load_png(bp), {"kind": "unknown"}))
    return pairs
