"""Naive numpy executor for ArchGraph.

Weights are drawn from ``numpy.random.default_rng(seed)`` (PCG64), uniform in
[-0.1, 0.1], in node order and, within a node, in module construction order.
BatchNorm starts as identity (scale 1, shift 0, mean 0, var 1, eps 1e-3).
Tensors are float32 arrays of shape (C, H, W); there is no batch axis.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .archgraph import (
    C2PSA,
    SPPF,
    ArchGraph,
    C3k2,
    Concat,
    ConvBlock,
    Detect,
    GraphError,
    NodeId,
    ShapeMismatch,
    TensorShape,
    Upsample,
    propagate_shapes,
    validate,
)

DTYPE = np.float32
INIT_RANGE = 0.1
BN_EPS = 1e-3
BOX_CHANNELS = 4


class NumericalError(RuntimeError):
    def __init__(self, node_id: NodeId, message: str):
        super().__init__(f"{node_id}: {message}")
        self.node_id = node_id


# ---------------------------------------------------------------------------
# kernels


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, groups: int = 1) -> np.ndarray:
    """Same-padded 2-D convolution. ``w`` is (out, in/groups, k, k)."""
    c, h, wd = x.shape
    o, cg, k, _ = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    if groups == 1:
        out = np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))
    else:
        win = win.reshape(groups, cg, ho, wo, k, k)
        out = np.einsum("goikl,gihwkl->gohw", w.reshape(groups, o // groups, cg, k, k), win)
        out = out.reshape(o, ho, wo)
    return np.ascontiguousarray(out, dtype=DTYPE)


def maxpool2d(x: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    return sliding_window_view(xp, (k, k), axis=(1, 2)).max(axis=(3, 4))


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# modules


class Module:
    def named_tensors(self, prefix=""):
        """Yield (name, array, learnable) for every tensor in construction order."""
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_tensors(f"{prefix}{name}.")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_tensors(f"{prefix}{name}.{i}.")


class Conv(Module):
    def __init__(self, rng, c1, c2, k=1, s=1, g=1, act=True, bn=True, bias=False):
        self.s, self.g, self.act, self.bn = s, g, act, bn
        self.weight = rng.uniform(-INIT_RANGE, INIT_RANGE, (c2, c1 // g, k, k)).astype(DTYPE)
        self.bias = rng.uniform(-INIT_RANGE, INIT_RANGE, c2).astype(DTYPE) if bias else None
        if bn:
            self.bn_weight = np.ones(c2, DTYPE)
            self.bn_bias = np.zeros(c2, DTYPE)
            self.running_mean = np.zeros(c2, DTYPE)
            self.running_var = np.ones(c2, DTYPE)

    def named_tensors(self, prefix=""):
        yield prefix + "weight", self.weight, True
        if self.bias is not None:
            yield prefix + "bias", self.bias, True
        if self.bn:
            yield prefix + "bn.weight", self.bn_weight, True
            yield prefix + "bn.bias", self.bn_bias, True
            yield prefix + "bn.running_mean", self.running_mean, False
            yield prefix + "bn.running_var", self.running_var, False

    def __call__(self, x):
        y = conv2d(x, self.weight, self.s, self.g)
        if self.bias is not None:
            y = y + self.bias[:, None, None]
        if self.bn:
            inv = self.bn_weight / np.sqrt(self.running_var + BN_EPS)
            y = (y - self.running_mean[:, None, None]) * inv[:, None, None] + self.bn_bias[:, None, None]
        return silu(y) if self.act else y


class Bottleneck(Module):
    def __init__(self, rng, c1, c2, shortcut=True, e=0.5):
        c_ = int(c2 * e)
        self.cv1 = Conv(rng, c1, c_, 3)
        self.cv2 = Conv(rng, c_, c2, 3)
        self.add = shortcut and c1 == c2

    def __call__(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class C3k(Module):
    def __init__(self, rng, c1, c2, n=2, e=0.5):
        c_ = int(c2 * e)
        self.cv1 = Conv(rng, c1, c_)
        self.cv2 = Conv(rng, c1, c_)
        self.cv3 = Conv(rng, 2 * c_, c2)
        self.m = [Bottleneck(rng, c_, c_, True, e=1.0) for _ in range(n)]

    def __call__(self, x):
        y = self.cv1(x)
        for m in self.m:
            y = m(y)
        return self.cv3(np.concatenate([y, self.cv2(x)]))


class C3k2Block(Module):
    def __init__(self, rng, c1, kind: C3k2):
        self.c = int(kind.out_channels * kind.expansion)
        self.cv1 = Conv(rng, c1, 2 * self.c)
        self.cv2 = Conv(rng, (2 + kind.repeats) * self.c, kind.out_channels)
        self.m = [
            C3k(rng, self.c, self.c) if kind.use_c3k else Bottleneck(rng, self.c, self.c)
            for _ in range(kind.repeats)
        ]

    def __call__(self, x):
        y = list(np.split(self.cv1(x), 2))
        for m in self.m:
            y.append(m(y[-1]))
        return self.cv2(np.concatenate(y))


class SPPFBlock(Module):
    def __init__(self, rng, c1, kind: SPPF):
        c_ = c1 // 2
        self.k = kind.pool_kernel
        self.cv1 = Conv(rng, c1, c_)
        self.cv2 = Conv(rng, 4 * c_, kind.out_channels)

    def __call__(self, x):
        y = [self.cv1(x)]
        for _ in range(3):
            y.append(maxpool2d(y[-1], self.k))
        return self.cv2(np.concatenate(y))


class Attention(Module):
    def __init__(self, rng, dim, heads=1, attn_ratio=0.5):
        self.heads = heads
        self.head_dim = dim // heads
        self.key_dim = int(self.head_dim * attn_ratio)
        self.scale = self.key_dim**-0.5
        self.qkv = Conv(rng, dim, dim + 2 * self.key_dim * heads, act=False)
        self.proj = Conv(rng, dim, dim, act=False)
        self.pe = Conv(rng, dim, dim, 3, g=dim, act=False)

    def __call__(self, x):
        c, h, w = x.shape
        n = h * w
        qkv = self.qkv(x).reshape(self.heads, 2 * self.key_dim + self.head_dim, n)
        q, k, v = np.split(qkv, [self.key_dim, 2 * self.key_dim], axis=1)
        attn = softmax(np.matmul(q.transpose(0, 2, 1), k) * self.scale)
        y = np.matmul(v, attn.transpose(0, 2, 1)).reshape(c, h, w)
        y = y + self.pe(np.ascontiguousarray(v.reshape(c, h, w)))
        return self.proj(y.astype(DTYPE))


class PSABlock(Module):
    def __init__(self, rng, c, heads):
        self.attn = Attention(rng, c, heads)
        self.ffn = [Conv(rng, c, 2 * c), Conv(rng, 2 * c, c, act=False)]

    def __call__(self, x):
        x = x + self.attn(x)
        return x + self.ffn[1](self.ffn[0](x))


class C2PSABlock(Module):
    def __init__(self, rng, c1, kind: C2PSA):
        self.c = int(c1 * 0.5)
        self.cv1 = Conv(rng, c1, 2 * self.c)
        self.cv2 = Conv(rng, 2 * self.c, c1)
        self.m = [PSABlock(rng, self.c, kind.num_heads) for _ in range(kind.repeats)]

    def __call__(self, x):
        a, b = np.split(self.cv1(x), 2)
        for m in self.m:
            b = m(b)
        return self.cv2(np.concatenate([a, b]))


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class DetectBlock(Module):
    def __init__(self, rng, channels: list[int], kind: Detect):
        nc = kind.num_classes
        c2 = max(16, channels[0] // 4, 64)
        c3 = max(channels[0], min(nc, 100))
        self.box = []
        self.cls = []
        for x in channels:
            self.box.append(
                Sequential(Conv(rng, x, c2, 3), Conv(rng, c2, c2, 3), Conv(rng, c2, BOX_CHANNELS, bn=False, act=False, bias=True))
            )
            self.cls.append(
                Sequential(
                    Conv(rng, x, x, 3, g=x),
                    Conv(rng, x, c3),
                    Conv(rng, c3, c3, 3, g=c3),
                    Conv(rng, c3, c3),
                    Conv(rng, c3, nc, bn=False, act=False, bias=True),
                )
            )

    def __call__(self, feats):
        return [np.concatenate([b(f), c(f)]) for b, c, f in zip(self.box, self.cls, feats)]


class Identity(Module):
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, x):
        return self.fn(x)


def _upsample(scale):
    return lambda x: x.repeat(scale, axis=1).repeat(scale, axis=2)


def build_module(kind, in_channels: list[int], rng) -> Module:
    if isinstance(kind, ConvBlock):
        return Conv(rng, in_channels[0], kind.out_channels, kind.kernel, kind.stride)
    if isinstance(kind, C3k2):
        return C3k2Block(rng, in_channels[0], kind)
    if isinstance(kind, SPPF):
        return SPPFBlock(rng, in_channels[0], kind)
    if isinstance(kind, C2PSA):
        return C2PSABlock(rng, in_channels[0], kind)
    if isinstance(kind, Upsample):
        return Identity(_upsample(kind.scale))
    if isinstance(kind, Concat):
        return Identity(np.concatenate)
    if isinstance(kind, Detect):
        return DetectBlock(rng, in_channels, kind)
    raise TypeError(f"cannot execute {kind!r}")


# ---------------------------------------------------------------------------
# weights


@dataclass
class WeightStore:
    seed: int
    modules: dict[NodeId, Module] = field(default_factory=dict)

    @property
    def tensors(self) -> dict[NodeId, list[tuple[str, np.ndarray]]]:
        return {i: [(n, a) for n, a, _ in m.named_tensors()] for i, m in self.modules.items()}

    def count(self, learnable: bool = True) -> int:
        return sum(a.size for m in self.modules.values() for _, a, l in m.named_tensors() if l == learnable)

    @property
    def learnable_count(self) -> int:
        return self.count(True)

    @property
    def buffer_count(self) -> int:
        return self.count(False)

    def equals(self, other: "WeightStore") -> bool:
        a, b = self.tensors, other.tensors
        if a.keys() != b.keys():
            return False
        for i in a:
            if len(a[i]) != len(b[i]):
                return False
            for (n1, x), (n2, y) in zip(a[i], b[i]):
                if n1 != n2 or x.shape != y.shape or not np.array_equal(x, y):
                    return False
        return True


def _channels_in(g: ArchGraph, input_channels: int) -> dict[NodeId, list[int]]:
    """Input widths per node, derived without spatial information."""
    out: dict[NodeId, int] = {}
    ins: dict[NodeId, list[int]] = {}
    for n in g.nodes:
        cs = [out[i] for i in n.inputs] if n.inputs else [input_channels]
        ins[n.id] = cs
        k = n.kind
        if isinstance(k, Concat):
            out[n.id] = sum(cs)
        elif isinstance(k, Upsample):
            out[n.id] = cs[0]
        elif not isinstance(k, Detect):
            out[n.id] = k.out_channels
    return ins


def instantiate(g: ArchGraph, seed: int = 0) -> WeightStore:
    rep = validate(g)
    if not rep.valid:
        raise GraphError(f"cannot instantiate an invalid graph:\n{rep}")
    return _instantiate(g, seed)


def _instantiate(g: ArchGraph, seed: int) -> WeightStore:
    rng = np.random.default_rng(seed)
    chans = _channels_in(g, g.input_channels)
    store = WeightStore(seed)
    for n in g.nodes:
        store.modules[n.id] = build_module(n.kind, chans[n.id], rng)
    return store


# ---------------------------------------------------------------------------
# execution


def _level(input_h: int, out_h: int) -> str:
    return f"P{(input_h // out_h).bit_length() - 1}"


def run_graph(g: ArchGraph, w: WeightStore, x: np.ndarray, record: bool = False):
    """Execute every node; returns (head outputs, per-node outputs if ``record``)."""
    acts: dict[NodeId, np.ndarray] = {}
    trace: dict[NodeId, tuple[int, ...]] = {}
    heads = None
    for n in g.nodes:
        m = w.modules[n.id]
        if isinstance(n.kind, Detect):
            heads = m([acts[i] for i in n.inputs])
            for h, i in zip(heads, n.inputs):
                if not np.all(np.isfinite(h)):
                    raise NumericalError(n.id, f"non-finite output for head on {i}")
            continue
        if isinstance(n.kind, Concat):
            parts = [acts[i] for i in n.inputs]
            if len({p.shape[1:] for p in parts}) != 1:
                raise ShapeMismatch(n.id, "Concat inputs differ spatially " + str([p.shape for p in parts]))
            y = m(parts)
        else:
            y = m(acts[n.inputs[0]] if n.inputs else x)
        y = np.asarray(y, dtype=DTYPE)
        if not np.all(np.isfinite(y)):
            raise NumericalError(n.id, "non-finite activation")
        acts[n.id] = y
        if record:
            trace[n.id] = y.shape
    out = {_level(x.shape[1], h.shape[1]): h for h in heads}
    return out, trace


def forward(g: ArchGraph, w: WeightStore, x: np.ndarray) -> dict[str, np.ndarray]:
    """Raw head maps keyed by pyramid level ("P3", "P4", "P5")."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) input, got {x.shape}")
    if x.shape[1] % 32 or x.shape[2] % 32:
        raise ValueError(f"input {x.shape[1]}x{x.shape[2]} is not divisible by 32")
    return run_graph(g, w, x)[0]


def checksum(outputs: dict[str, np.ndarray]) -> str:
    """SHA-256 over the little-endian float32 bytes of each head, in level order."""
    h = hashlib.sha256()
    for level in sorted(outputs):
        h.update(level.encode())
        h.update(np.ascontiguousarray(outputs[level], dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def random_input(height: int, width: int | None = None, seed: int = 0) -> np.ndarray:
    width = height if width is None else width
    return np.random.default_rng(seed + 1_000_003).uniform(0.0, 1.0, (3, height, width)).astype(DTYPE)


@dataclass
class ShapeCheck:
    passed: bool
    node_id: NodeId | None = None
    expected: TensorShape | None = None
    actual: tuple | None = None
    message: str = ""

    def __str__(self) -> str:
        if self.passed:
            return "pass"
        return f"fail at {self.node_id}: {self.message}"


def check_against_shapes(g: ArchGraph, w: WeightStore | None, x: np.ndarray) -> ShapeCheck:
    """Run ``g`` and compare every intermediate shape with static propagation."""
    x = np.asarray(x, dtype=DTYPE)
    inp = TensorShape(*x.shape)
    try:
        expected = propagate_shapes(g, inp)
    except ShapeMismatch as e:
        return ShapeCheck(False, e.node_id, message=f"static propagation failed: {e}")
    except GraphError as e:
        return ShapeCheck(False, None, message=str(e))
    if w is None:
        w = _instantiate(g, 0)
    try:
        _, trace = run_graph(g, w, x, record=True)
    except (ShapeMismatch, NumericalError) as e:
        return ShapeCheck(False, e.node_id, message=str(e))
    except ValueError as e:
        return ShapeCheck(False, None, message=str(e))
    for n in g.nodes:
        if n.id not in expected:
            continue
        want = expected[n.id]
        got = trace.get(n.id)
        if got != (want.channels, want.height, want.width):
            return ShapeCheck(False, n.id, want, got, f"expected {want}, executed {got}")
    return ShapeCheck(True)
