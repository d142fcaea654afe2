"""UNet-style encoder-decoder restoration model over the block variants."""
from __future__ import annotations

import contextlib
import dataclasses
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from ..engine import Tensor, parameters_checksum
from ..engine import functional as F
from ..engine.functional import ShapeError
from .blocks import BLOCK_KINDS, block_param_spec, restoration_block


def _as_tuple(v, n):
    if isinstance(v, int):
        return (v,) * n
    return tuple(int(x) for x in v)


@dataclass(frozen=True)
class ArchVariant:
    """Architecture descriptor.

    ``enc_blocks``/``dec_blocks`` hold one count per resolution level above the
    bottleneck (``levels - 1`` entries); ``middle_blocks`` run at the lowest
    resolution. ``attention_heads`` is per level and only used by restormer;
    by default it doubles per level, starting from 1.
    """

    kind: str = "nafnet"
    width: int = 8
    levels: int = 3
    enc_blocks: Tuple[int, ...] = 1
    middle_blocks: int = 1
    dec_blocks: Tuple[int, ...] = 1
    attention_heads: Optional[Tuple[int, ...]] = None
    ca_reduction: int = 2
    expansion: int = 2

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown variant kind {self.kind!r}; expected one of {BLOCK_KINDS}")
        if self.width < 2 or self.width % 2:
            raise ValueError(f"width must be even, got {self.width}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        object.__setattr__(self, "enc_blocks", _as_tuple(self.enc_blocks, self.levels - 1))
        object.__setattr__(self, "dec_blocks", _as_tuple(self.dec_blocks, self.levels - 1))
        heads = self.attention_heads
        if heads is None:
            heads = tuple(2 ** lv for lv in range(self.levels))
        object.__setattr__(self, "attention_heads", _as_tuple(heads, self.levels))
        if len(self.enc_blocks) != self.levels - 1 or len(self.dec_blocks) != self.levels - 1:
            raise ValueError("enc_blocks/dec_blocks need levels - 1 entries")
        if len(self.attention_heads) != self.levels:
            raise ValueError("attention_heads needs one entry per level")
        if min(self.enc_blocks + self.dec_blocks + (self.middle_blocks,)) < 1:
            raise ValueError("block counts must be >= 1")

    def level_width(self, level: int) -> int:
        return self.width * 2 ** level

    @property
    def multiple(self) -> int:
        """Input H and W must be divisible by this."""
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchVariant":
        return cls(**d)

    def param_spec(self) -> Dict[str, tuple]:
        """Ordered ``name -> (shape, init)`` for the whole model."""
        spec: Dict[str, tuple] = {}

        def add_blocks(prefix, level, count):
            w = self.level_width(level)
            for b in range(count):
                bspec = block_param_spec(self.kind, w, heads=self.attention_heads[level],
                                         ca_reduction=self.ca_reduction, expansion=self.expansion)
                for name, entry in bspec.items():
                    spec[f"{prefix}.{b}.{name}"] = entry

        spec["head.w"] = ((self.width, 3, 3, 3), "conv")
        spec["head.b"] = ((self.width,), "zeros")
        for lvl in range(self.levels - 1):
            w = self.level_width(lvl)
            add_blocks(f"enc{lvl}", lvl, self.enc_blocks[lvl])
            spec[f"down{lvl}.w"] = ((2 * w, 4 * w, 1, 1), "conv")
        add_blocks("middle", self.levels - 1, self.middle_blocks)
        for lvl in reversed(range(self.levels - 1)):
            w = self.level_width(lvl)
            spec[f"up{lvl}.w"] = ((4 * w, 2 * w, 1, 1), "conv")
            add_blocks(f"dec{lvl}", lvl, self.dec_blocks[lvl])
        spec["tail.w"] = ((3, self.width, 3, 3), "conv")
        spec["tail.b"] = ((3,), "zeros")
        return spec

    def parameter_count(self) -> int:
        return int(sum(np.prod(shape) for shape, _ in self.param_spec().values()))


@dataclass
class Model:
    variant: ArchVariant
    params: Dict[str, Tensor] = field(default_factory=dict)

    def __call__(self, y: Tensor) -> Tensor:
        return model_forward(self, y)

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def checksum(self) -> str:
        return parameters_checksum(self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state dict keys differ from model parameters: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {k}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def copy(self) -> "Model":
        return Model(self.variant, {k: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                                    for k, t in self.params.items()})

    def astype(self, dtype) -> "Model":
        return Model(self.variant, {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                                    for k, t in self.params.items()})

    @contextlib.contextmanager
    def frozen(self) -> Iterator["Model"]:
        """Stop tracking parameter gradients, e.g. while attacking the input."""
        prev = {k: t.requires_grad for k, t in self.params.items()}
        for t in self.params.values():
            t.requires_grad = False
        try:
            yield self
        finally:
            for k, t in self.params.items():
                t.requires_grad = prev[k]


def build_model(variant: ArchVariant, seed: int = 0, dtype=np.float64) -> Model:
    """Deterministic initialization: fan-in uniform convs, zero biases, unit scales."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, init) in variant.param_spec().items():
        if init == "conv":
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return Model(variant, params)


def _blocks(model: Model, x: Tensor, prefix: str, level: int, count: int) -> Tensor:
    v = model.variant
    for b in range(count):
        head = f"{prefix}.{b}."
        p = {k[len(head):]: t for k, t in model.params.items() if k.startswith(head)}
        x = restoration_block(v.kind, x, p, heads=v.attention_heads[level])
    return x


def model_forward(model: Model, y) -> Tensor:
    """Restored estimate y + f(y) for an N x 3 x H x W observation."""
    if not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=model.dtype))
    v = model.variant
    if y.ndim != 4 or y.shape[1] != 3:
        raise ShapeError(f"model expects N x 3 x H x W input, got {y.shape}")
    h, w = y.shape[2:]
    m = v.multiple
    if h % m or w % m:
        ph, pw = (-h) % m, (-w) % m
        raise ShapeError(f"H, W must be divisible by {m} for {v.levels} levels; "
                         f"pad bottom/right by ({ph}, {pw}) to {h + ph}x{w + pw}")
    p = model.params
    x = F.conv2d(y, p["head.w"], p["head.b"], padding=1)
    skips = []
    for lvl in range(v.levels - 1):
        x = _blocks(model, x, f"enc{lvl}", lvl, v.enc_blocks[lvl])
        skips.append(x)
        x = F.conv2d(F.pixel_shuffle(x, 2, "down"), p[f"down{lvl}.w"])
    x = _blocks(model, x, "middle", v.levels - 1, v.middle_blocks)
    for lvl in reversed(range(v.levels - 1)):
        x = F.pixel_shuffle(F.conv2d(x, p[f"up{lvl}.w"]), 2, "up")
        x = x + skips[lvl]
        x = _blocks(model, x, f"dec{lvl}", lvl, v.dec_blocks[lvl])
    return y + F.conv2d(x, p["tail.w"], p["tail.b"], padding=1)
