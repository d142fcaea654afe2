"""Repeating blocks of the five architecture variants.

Each block is a pure function of its input and a mapping of named parameter
tensors; ``block_param_spec`` describes the parameters a block needs.
"""
from __future__ import annotations

from typing import Mapping

from ..engine import Tensor
from ..engine import functional as F
from ..engine.functional import ShapeError

BLOCK_KINDS = ("restormer", "baseline", "nafnet", "intermediate", "intermediate_relu")

# (shape, init) with init in {"conv", "zeros", "ones"}
ParamSpec = dict


def _conv(o, i, k=1):
    return {"w": ((o, i, k, k), "conv"), "b": ((o,), "zeros")}


def _norm(c):
    return {"g": ((c,), "ones"), "b": ((c,), "zeros")}


def _flatten(groups: dict) -> ParamSpec:
    spec = {}
    for prefix, entries in groups.items():
        if isinstance(entries, tuple):
            spec[prefix] = entries
            continue
        for name, entry in entries.items():
            spec[f"{prefix}.{name}"] = entry
    return spec


def block_param_spec(kind: str, width: int, heads: int = 1,
                     ca_reduction: int = 2, expansion: int = 2) -> ParamSpec:
    """Ordered ``name -> (shape, init)`` for one block of ``kind`` at ``width`` channels."""
    c = width
    if kind == "restormer":
        hid = c * expansion
        return _flatten({
            "norm1": _norm(c),
            "attn.qkv": _conv(3 * c, c),
            "attn.dw": _conv(3 * c, 1, 3),
            "attn.temperature": ((heads,), "ones"),
            "attn.proj": _conv(c, c),
            "beta": ((c,), "ones"),
            "norm2": _norm(c),
            "ffn.in": _conv(2 * hid, c),
            "ffn.dw": _conv(2 * hid, 1, 3),
            "ffn.out": _conv(c, hid),
            "gamma": ((c,), "ones"),
        })
    if kind not in BLOCK_KINDS:
        raise ValueError(f"unknown block kind {kind!r}")
    gated = kind == "nafnet"
    d = c if gated else 2 * c  # channels after the spatial mixing stage
    groups = {
        "norm1": _norm(c),
        "conv1": _conv(2 * c, c),
        "conv2": _conv(2 * c, 1, 3),
    }
    if kind == "baseline":
        if d % ca_reduction:
            raise ShapeError(f"channel-attention reduction {ca_reduction} does not divide {d}")
        groups["ca.fc1"] = _conv(d // ca_reduction, d)
        groups["ca.fc2"] = _conv(d, d // ca_reduction)
    else:
        groups["sca"] = _conv(d, d)
    groups.update({
        "conv3": _conv(c, d),
        "beta": ((c,), "ones"),
        "norm2": _norm(c),
        "conv4": _conv(2 * c, c),
        "conv5": _conv(c, c if gated else 2 * c),
        "gamma": ((c,), "ones"),
    })
    return _flatten(groups)


def block_parameter_count(kind: str, width: int, **kwargs) -> int:
    total = 0
    for shape, _ in block_param_spec(kind, width, **kwargs).values():
        n = 1
        for s in shape:
            n *= s
        total += n
    return total


def _sub(p: Mapping[str, Tensor], prefix: str) -> dict:
    k = len(prefix) + 1
    return {name[k:]: t for name, t in p.items() if name.startswith(prefix + ".")}


def _pw(x, p, name):
    return F.conv2d(x, p[name + ".w"], p[name + ".b"])


def _dw(x, p, name):
    return F.conv2d(x, p[name + ".w"], p[name + ".b"], padding=1, groups=x.shape[1])


def _scale(x: Tensor, s: Tensor) -> Tensor:
    return x * F.reshape(s, (1, -1, 1, 1))


def channel_attention(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Squeeze-excitation gate: x * sigmoid(fc2(relu(fc1(GAP(x)))))."""
    c = x.shape[1]
    r = p["fc1.w"].shape[0]
    if r == 0 or c % r or p["fc1.w"].shape[1] != c:
        raise ShapeError(f"channel attention bottleneck {p['fc1.w'].shape[:2]} does not match C={c}")
    s = F.global_avg_pool(x)
    s = F.relu(_pw(s, p, "fc1"))
    s = F.sigmoid(_pw(s, p, "fc2"))
    return x * s


def simplified_channel_attention(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Linear per-channel gate x * (W GAP(x) + b); no activation."""
    return x * F.conv2d(F.global_avg_pool(x), p["w"], p["b"])


def mdta(x: Tensor, p: Mapping[str, Tensor], heads: int, return_attention: bool = False):
    """Multi-head transposed attention over the channel dimension.

    The attention matrix per head is (C/heads) x (C/heads), so cost grows
    linearly with the number of pixels.
    """
    n, c, h, w = x.shape
    if c % heads:
        raise ShapeError(f"channels C={c} not divisible by heads={heads}")
    ch = c // heads
    qkv = _dw(_pw(x, p, "qkv"), p, "dw")
    q, k, v = (F.reshape(t, (n, heads, ch, h * w)) for t in F.chunk(qkv, 3, axis=1))
    q = F.l2_normalize(q, axis=-1)
    k = F.l2_normalize(k, axis=-1)
    attn = F.matmul(q, F.transpose(k, (0, 1, 3, 2)))
    attn = attn * F.reshape(p["temperature"], (1, heads, 1, 1))
    attn = F.softmax(attn, axis=-1)
    out = F.reshape(F.matmul(attn, v), (n, c, h, w))
    out = _pw(out, p, "proj")
    if return_attention:
        return out, attn
    return out


def gdfn(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Gated depthwise feed-forward: out(GELU(path1) * path2)."""
    hdn = _dw(_pw(x, p, "in"), p, "dw")
    path1, path2 = F.chunk(hdn, 2, axis=1)
    return _pw(F.gelu(path1) * path2, p, "out")


def restoration_block(kind: str, x: Tensor, p: Mapping[str, Tensor], heads: int = 1) -> Tensor:
    """One repeating block; output has the shape of ``x``."""
    c = x.shape[1]
    if p["norm1.g"].shape != (c,):
        raise ShapeError(f"block width {p['norm1.g'].shape[0]} does not match input channels {c}")
    if kind == "restormer":
        x = x + _scale(mdta(F.layer_norm_channels(x, p["norm1.g"], p["norm1.b"]),
                            _sub(p, "attn"), heads), p["beta"])
        return x + _scale(gdfn(F.layer_norm_channels(x, p["norm2.g"], p["norm2.b"]),
                               _sub(p, "ffn")), p["gamma"])

    act = "relu" if kind == "intermediate_relu" else "gelu"
    t = F.layer_norm_channels(x, p["norm1.g"], p["norm1.b"])
    t = _dw(_pw(t, p, "conv1"), p, "conv2")
    if kind == "nafnet":
        t = F.simple_gate(t)
    else:
        t = F.activation(act, t)
    if kind == "baseline":
        t = channel_attention(t, _sub(p, "ca"))
    else:
        t = simplified_channel_attention(t, _sub(p, "sca"))
    x = x + _scale(_pw(t, p, "conv3"), p["beta"])

    t = _pw(F.layer_norm_channels(x, p["norm2.g"], p["norm2.b"]), p, "conv4")
    t = F.simple_gate(t) if kind == "nafnet" else F.activation(act, t)
    return x + _scale(_pw(t, p, "conv5"), p["gamma"])
