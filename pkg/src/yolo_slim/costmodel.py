"""Static parameter / FLOP / size accounting for ArchGraph.

Counting convention:

* a multiply-accumulate is 2 FLOPs;
* BatchNorm is 2 ops per output element (scale, shift), SiLU 1, a conv bias 1;
* max-pool is 1 op per window element per output element;
* attention: 2*d per element of each matmul output (d = reduction length),
  plus 1 op per score for scaling and 3 per score for softmax;
* residual adds are 1 op per element; concat, split and upsample are free.

Parameters are the learnable scalars only: conv weights, conv biases and
BatchNorm scale/shift. BatchNorm running mean/var are reported separately as
``buffers``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .archgraph import (
    SCHEMA_VERSION,
    C2PSA,
    SPPF,
    ArchGraph,
    C3k2,
    Concat,
    ConvBlock,
    Detect,
    NodeId,
    TensorShape,
    Upsample,
    propagate_shapes,
    validate,
    GraphError,
)

DEFAULT_BYTES_PER_PARAM = 4
BOX_CHANNELS = 4


class IncomparableReports(ValueError):
    pass


@dataclass
class Cost:
    params: int = 0
    flops: int = 0
    buffers: int = 0

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(self.params + other.params, self.flops + other.flops, self.buffers + other.buffers)


ZERO = Cost()


def conv_cost(in_ch, out_ch, kernel, out_h, out_w, groups=1, bn=True, act=True, bias=False) -> Cost:
    weights = kernel * kernel * (in_ch // groups) * out_ch
    elems = out_ch * out_h * out_w
    params = weights + (out_ch if bias else 0) + (2 * out_ch if bn else 0)
    flops = 2 * weights * out_h * out_w
    flops += elems * ((2 if bn else 0) + (1 if act else 0) + (1 if bias else 0))
    return Cost(params, flops, 2 * out_ch if bn else 0)


def cost_conv(in_ch, out_ch, kernel, stride, out_h, out_w) -> dict:
    """Conv2d (no bias) + BatchNorm + SiLU. Stride only matters through out_h/out_w."""
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    c = conv_cost(in_ch, out_ch, kernel, out_h, out_w)
    return {"params": c.params, "flops": c.flops}


def _bottleneck(c1, c2, h, w, shortcut, e=0.5) -> Cost:
    c_ = int(c2 * e)
    c = conv_cost(c1, c_, 3, h, w) + conv_cost(c_, c2, 3, h, w)
    if shortcut and c1 == c2:
        c += Cost(flops=c2 * h * w)
    return c


def _c3k(c1, c2, n, h, w) -> Cost:
    c_ = int(c2 * 0.5)
    c = conv_cost(c1, c_, 1, h, w) + conv_cost(c1, c_, 1, h, w) + conv_cost(2 * c_, c2, 1, h, w)
    for _ in range(n):
        c += _bottleneck(c_, c_, h, w, True, e=1.0)
    return c


def c3k2_cost(k: C3k2, c1: int, h: int, w: int) -> Cost:
    hidden = int(k.out_channels * k.expansion)
    c = conv_cost(c1, 2 * hidden, 1, h, w)
    c += conv_cost((2 + k.repeats) * hidden, k.out_channels, 1, h, w)
    for _ in range(k.repeats):
        c += _c3k(hidden, hidden, 2, h, w) if k.use_c3k else _bottleneck(hidden, hidden, h, w, True)
    return c


def sppf_cost(k: SPPF, c1: int, h: int, w: int) -> Cost:
    c_ = c1 // 2
    c = conv_cost(c1, c_, 1, h, w) + conv_cost(4 * c_, k.out_channels, 1, h, w)
    return c + Cost(flops=3 * c_ * h * w * k.pool_kernel**2)


def attention_cost(dim: int, heads: int, h: int, w: int, attn_ratio=0.5) -> Cost:
    n = h * w
    head_dim = dim // heads
    key_dim = int(head_dim * attn_ratio)
    qkv_ch = dim + 2 * key_dim * heads
    c = conv_cost(dim, qkv_ch, 1, h, w, act=False)
    c += conv_cost(dim, dim, 3, h, w, groups=dim, act=False)  # positional encoding
    c += conv_cost(dim, dim, 1, h, w, act=False)  # projection
    scores = heads * n * n
    c += Cost(flops=2 * key_dim * scores + scores + 3 * scores)  # q^T k, scale, softmax
    c += Cost(flops=2 * n * heads * head_dim * n)  # v @ attn^T
    c += Cost(flops=dim * n)  # + pe
    return c


def c2psa_cost(k: C2PSA, c1: int, h: int, w: int) -> Cost:
    hidden = int(c1 * 0.5)
    c = conv_cost(c1, 2 * hidden, 1, h, w) + conv_cost(2 * hidden, c1, 1, h, w)
    for _ in range(k.repeats):
        c += attention_cost(hidden, k.num_heads, h, w)
        c += conv_cost(hidden, 2 * hidden, 1, h, w) + conv_cost(2 * hidden, hidden, 1, h, w, act=False)
        c += Cost(flops=2 * hidden * h * w)  # two residual adds
    return c


def detect_widths(num_classes: int, first_in: int) -> tuple[int, int]:
    """Hidden widths of the box and class towers, fixed by the first head's input."""
    box = max(16, first_in // 4, 64)
    cls = max(first_in, min(num_classes, 100))
    return box, cls


def detect_cost(k: Detect, ins: list[TensorShape]) -> Cost:
    box, cls = detect_widths(k.num_classes, ins[0].channels)
    c = ZERO
    for s in ins:
        x, h, w = s.channels, s.height, s.width
        c += conv_cost(x, box, 3, h, w) + conv_cost(box, box, 3, h, w)
        c += conv_cost(box, BOX_CHANNELS, 1, h, w, bn=False, act=False, bias=True)
        c += conv_cost(x, x, 3, h, w, groups=x) + conv_cost(x, cls, 1, h, w)
        c += conv_cost(cls, cls, 3, h, w, groups=cls) + conv_cost(cls, cls, 1, h, w)
        c += conv_cost(cls, k.num_classes, 1, h, w, bn=False, act=False, bias=True)
    return c


def node_cost(kind, ins: list[TensorShape], out: TensorShape | None) -> Cost:
    if isinstance(kind, Detect):
        return detect_cost(kind, ins)
    if isinstance(kind, (Upsample, Concat)):
        return ZERO
    x = ins[0]
    if isinstance(kind, ConvBlock):
        return conv_cost(x.channels, kind.out_channels, kind.kernel, out.height, out.width)
    if isinstance(kind, C3k2):
        return c3k2_cost(kind, x.channels, x.height, x.width)
    if isinstance(kind, SPPF):
        return sppf_cost(kind, x.channels, x.height, x.width)
    if isinstance(kind, C2PSA):
        return c2psa_cost(kind, x.channels, x.height, x.width)
    raise TypeError(f"no cost rule for {kind!r}")


@dataclass
class CostReport:
    per_node: dict[NodeId, dict]
    total_params: int
    total_flops: int
    model_size_bytes: int
    input: TensorShape
    bytes_per_param: int = DEFAULT_BYTES_PER_PARAM
    buffers: int = 0
    overhead_bytes: int = 0
    variant: str = "full"

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    @property
    def size_mb(self) -> float:
        return self.model_size_bytes / 1e6

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "variant": self.variant,
            "input": [self.input.channels, self.input.height, self.input.width],
            "bytes_per_param": self.bytes_per_param,
            "overhead_bytes": self.overhead_bytes,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "gflops": round(self.gflops, 4),
            "model_size_bytes": self.model_size_bytes,
            "bn_buffers": self.buffers,
            "per_node": {str(k): v for k, v in self.per_node.items()},
        }

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def cost_graph(
    g: ArchGraph,
    input: TensorShape = TensorShape(3, 640, 640),
    bytes_per_param: int = DEFAULT_BYTES_PER_PARAM,
    overhead_bytes: int = 0,
) -> CostReport:
    rep = validate(g, input)
    if not rep.valid:
        raise GraphError(f"cannot cost an invalid graph:\n{rep}")
    shapes = propagate_shapes(g, input)
    per_node = {}
    total = ZERO
    for n in g.nodes:
        ins = [shapes[i] for i in n.inputs] if n.inputs else [input]
        c = node_cost(n.kind, ins, shapes.get(n.id))
        per_node[n.id] = {"params": c.params, "flops": c.flops}
        total += c
    return CostReport(
        per_node=per_node,
        total_params=total.params,
        total_flops=total.flops,
        model_size_bytes=total.params * bytes_per_param + overhead_bytes,
        input=input,
        bytes_per_param=bytes_per_param,
        buffers=total.buffers,
        overhead_bytes=overhead_bytes,
        variant=g.variant,
    )


@dataclass
class CostDelta:
    baseline: CostReport
    variant: CostReport
    params_ratio: float = field(init=False)
    flops_ratio: float = field(init=False)
    size_ratio: float = field(init=False)

    def __post_init__(self):
        self.params_ratio = self.variant.total_params / self.baseline.total_params
        self.flops_ratio = self.variant.total_flops / self.baseline.total_flops
        self.size_ratio = self.variant.model_size_bytes / self.baseline.model_size_bytes

    @property
    def strict_reduction(self) -> bool:
        return self.params_ratio < 1 and self.flops_ratio < 1 and self.size_ratio < 1

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline.variant,
            "variant": self.variant.variant,
            "params_ratio": self.params_ratio,
            "flops_ratio": self.flops_ratio,
            "size_ratio": self.size_ratio,
            "strict_reduction": self.strict_reduction,
        }


def compare(baseline: CostReport, variant: CostReport) -> CostDelta:
    if baseline.input != variant.input:
        raise IncomparableReports(f"resolution differs: {baseline.input} vs {variant.input}")
    if baseline.bytes_per_param != variant.bytes_per_param:
        raise IncomparableReports("bytes_per_param differs")
    return CostDelta(baseline, variant)


def format_table(baseline: CostReport, reports: list[CostReport]) -> str:
    header = f"{'variant':<8} {'params':>10} {'GFLOPs':>8} {'MB':>7} {'params%':>8} {'flops%':>8} {'size%':>7}"
    lines = [header, "-" * len(header)]
    for r in reports:
        d = compare(baseline, r)
        lines.append(
            f"{r.variant:<8} {r.total_params:>10,} {r.gflops:>8.3f} {r.size_mb:>7.3f} "
            f"{d.params_ratio:>8.3f} {d.flops_ratio:>8.3f} {d.size_ratio:>7.3f}"
        )
    return "\n".join(lines)
