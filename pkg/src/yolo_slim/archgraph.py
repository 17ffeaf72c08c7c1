"""Typed computation-graph IR for the YOLOv11 detection family.

Blocks are numbered b0, b1, ... in topological order; the detection head is a
separate node with id ``"detect"`` so that pruning passes can renumber the
b-blocks without touching it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Union

NodeId = Union[int, str]
DETECT = "detect"

VARIANTS = ("full", "small", "medium", "large", "sm", "ml", "sl")

SCHEMA_VERSION = 1


class GraphError(Exception):
    pass


class ShapeMismatch(GraphError):
    def __init__(self, node_id: NodeId, message: str):
        super().__init__(f"b{node_id}: {message}" if isinstance(node_id, int) else f"{node_id}: {message}")
        self.node_id = node_id


class IndivisibleInput(GraphError):
    pass


# ---------------------------------------------------------------------------
# block kinds


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    repair: bool = False


@dataclass(frozen=True)
class C3k2:
    out_channels: int
    repeats: int = 1
    use_c3k: bool = False
    expansion: float = 0.5


@dataclass(frozen=True)
class SPPF:
    out_channels: int
    pool_kernel: int = 5


@dataclass(frozen=True)
class C2PSA:
    out_channels: int
    repeats: int = 1
    num_heads: int = 1


@dataclass(frozen=True)
class Upsample:
    scale: int = 2


@dataclass(frozen=True)
class Concat:
    pass


@dataclass(frozen=True)
class Detect:
    num_classes: int


BlockKind = Union[ConvBlock, C3k2, SPPF, C2PSA, Upsample, Concat, Detect]

KIND_NAMES = {
    ConvBlock: "Conv",
    C3k2: "C3k2",
    SPPF: "SPPF",
    C2PSA: "C2PSA",
    Upsample: "Upsample",
    Concat: "Concat",
    Detect: "Detect",
}
_KIND_BY_NAME = {v: k for k, v in KIND_NAMES.items()}


def kind_name(kind: BlockKind) -> str:
    return KIND_NAMES[type(kind)]


@dataclass(frozen=True)
class Node:
    id: NodeId
    kind: BlockKind
    inputs: tuple[NodeId, ...] = ()

    @property
    def label(self) -> str:
        return f"b{self.id}" if isinstance(self.id, int) else str(self.id)


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int

    def __str__(self) -> str:
        return f"{self.channels}x{self.height}x{self.width}"


@dataclass(frozen=True)
class ArchGraph:
    nodes: tuple[Node, ...]
    variant: str = "full"
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: NodeId) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def ids(self) -> list[NodeId]:
        return [n.id for n in self.nodes]

    @property
    def detect(self) -> Node:
        found = [n for n in self.nodes if isinstance(n.kind, Detect)]
        if len(found) != 1:
            raise GraphError(f"expected exactly one Detect node, found {len(found)}")
        return found[0]

    @property
    def head_ids(self) -> tuple[NodeId, ...]:
        return self.detect.inputs

    @property
    def num_classes(self) -> int:
        return self.detect.kind.num_classes

    def consumers(self) -> dict[NodeId, list[NodeId]]:
        out: dict[NodeId, list[NodeId]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                out.setdefault(i, []).append(n.id)
        return out

    def with_variant(self, variant: str) -> "ArchGraph":
        return replace(self, variant=variant)


# ---------------------------------------------------------------------------
# builder


def make_divisible(x: float, divisor: int = 8) -> int:
    return int(math.ceil(x / divisor) * divisor)


# (inputs relative to own index or absolute, kind name, repeats, args)
# Channels and repeats are at the unit (l/x) scale and get multiplied down.
_YOLO11_LAYOUT = [
    ((-1,), "Conv", 1, (64, 3, 2)),  # 0 P1/2
    ((-1,), "Conv", 1, (128, 3, 2)),  # 1 P2/4
    ((-1,), "C3k2", 2, (256, False, 0.25)),
    ((-1,), "Conv", 1, (256, 3, 2)),  # 3 P3/8
    ((-1,), "C3k2", 2, (512, False, 0.25)),
    ((-1,), "Conv", 1, (512, 3, 2)),  # 5 P4/16
    ((-1,), "C3k2", 2, (512, True, 0.5)),
    ((-1,), "Conv", 1, (1024, 3, 2)),  # 7 P5/32
    ((-1,), "C3k2", 2, (1024, True, 0.5)),
    ((-1,), "SPPF", 1, (1024, 5)),
    ((-1,), "C2PSA", 2, (1024,)),  # 10
    ((-1,), "Upsample", 1, (2,)),
    ((-1, 6), "Concat", 1, ()),
    ((-1,), "C3k2", 2, (512, False, 0.5)),  # 13
    ((-1,), "Upsample", 1, (2,)),
    ((-1, 4), "Concat", 1, ()),
    ((-1,), "C3k2", 2, (256, False, 0.5)),  # 16 P3 head
    ((-1,), "Conv", 1, (256, 3, 2)),
    ((-1, 13), "Concat", 1, ()),
    ((-1,), "C3k2", 2, (512, False, 0.5)),  # 19 P4 head
    ((-1,), "Conv", 1, (512, 3, 2)),
    ((-1, 10), "Concat", 1, ()),
    ((-1,), "C3k2", 2, (1024, True, 0.5)),  # 22 P5 head
]

HEAD_IDS = (16, 19, 22)

NANO = dict(width=0.25, depth=0.5, max_channels=1024)


def build_yolov11(
    num_classes: int = 80,
    width: float = 0.25,
    depth: float = 0.5,
    max_channels: int = 1024,
    c2psa_heads: int = 1,
) -> ArchGraph:
    """Build the unpruned YOLOv11 graph at the given width/depth multipliers."""
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")

    def ch(c):
        return make_divisible(min(c, max_channels) * width, 8)

    def reps(n):
        return max(round(n * depth), 1) if n > 1 else n

    nodes = []
    for i, (srcs, name, n, args) in enumerate(_YOLO11_LAYOUT):
        inputs = tuple(i + s if s < 0 else s for s in srcs)
        if i == 0:
            inputs = ()
        if name == "Conv":
            kind = ConvBlock(ch(args[0]), args[1], args[2])
        elif name == "C3k2":
            kind = C3k2(ch(args[0]), reps(n), args[1], args[2])
        elif name == "SPPF":
            kind = SPPF(ch(args[0]), args[1])
        elif name == "C2PSA":
            kind = C2PSA(ch(args[0]), reps(n), c2psa_heads)
        elif name == "Upsample":
            kind = Upsample(args[0])
        else:
            kind = Concat()
        nodes.append(Node(i, kind, inputs))
    nodes.append(Node(DETECT, Detect(num_classes), HEAD_IDS))
    return ArchGraph(tuple(nodes), "full", 3)


def build_yolov11n(num_classes: int = 80) -> ArchGraph:
    return build_yolov11(num_classes, **NANO)


# ---------------------------------------------------------------------------
# shapes


def _out_shape(node: Node, ins: list[TensorShape]) -> TensorShape:
    k = node.kind
    if isinstance(k, Concat):
        if len({(s.height, s.width) for s in ins}) != 1:
            dims = ", ".join(f"{s.height}x{s.width}" for s in ins)
            raise ShapeMismatch(node.id, f"Concat inputs differ spatially ({dims})")
        return TensorShape(sum(s.channels for s in ins), ins[0].height, ins[0].width)
    (x,) = ins
    if isinstance(k, ConvBlock):
        if x.height % k.stride or x.width % k.stride:
            raise ShapeMismatch(node.id, f"stride {k.stride} does not divide {x.height}x{x.width}")
        return TensorShape(k.out_channels, x.height // k.stride, x.width // k.stride)
    if isinstance(k, Upsample):
        return TensorShape(x.channels, x.height * k.scale, x.width * k.scale)
    if isinstance(k, C2PSA) and x.channels != k.out_channels:
        raise ShapeMismatch(node.id, f"C2PSA needs in == out channels, got {x.channels} -> {k.out_channels}")
    return TensorShape(k.out_channels, x.height, x.width)


def propagate_shapes(g: ArchGraph, input: TensorShape) -> dict[NodeId, TensorShape]:
    """Map every block id to its output shape. The Detect node is not included."""
    if input.height % 32 or input.width % 32 or input.height < 32 or input.width < 32:
        raise IndivisibleInput(f"input {input.height}x{input.width} is not divisible by 32")
    shapes: dict[NodeId, TensorShape] = {}
    for n in g.nodes:
        if isinstance(n.kind, Detect):
            continue
        if not n.inputs:
            ins = [input]
        else:
            missing = [i for i in n.inputs if i not in shapes]
            if missing:
                raise GraphError(f"{n.label}: inputs {missing} not available")
            ins = [shapes[i] for i in n.inputs]
        shapes[n.id] = _out_shape(n, ins)
    return shapes


def head_shapes(g: ArchGraph, input: TensorShape) -> list[TensorShape]:
    shapes = propagate_shapes(g, input)
    return [shapes[i] for i in g.head_ids]


def head_strides(g: ArchGraph, input: TensorShape = TensorShape(3, 640, 640)) -> list[int]:
    return [input.height // s.height for s in head_shapes(g, input)]


# ---------------------------------------------------------------------------
# validation


@dataclass
class Violation:
    node_id: NodeId | None
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        where = "graph" if self.node_id is None else (f"b{self.node_id}" if isinstance(self.node_id, int) else str(self.node_id))
        return f"{where}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)
    shapes: dict[NodeId, TensorShape] = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return not self.violations

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}

    def __str__(self) -> str:
        if self.valid:
            return "valid"
        return "\n".join(str(v) for v in self.violations)


PROBE = TensorShape(3, 640, 640)


def validate(g: ArchGraph, probe: TensorShape = PROBE) -> ValidationReport:
    rep = ValidationReport()
    bad = rep.violations.append

    seen: set[NodeId] = set()
    for pos, n in enumerate(g.nodes):
        if n.id in seen:
            bad(Violation(n.id, "duplicate id"))
        for i in n.inputs:
            if i not in seen:
                if i in {m.id for m in g.nodes[pos:]}:
                    bad(Violation(n.id, "forward reference", f"input {i}"))
                else:
                    bad(Violation(n.id, "missing input", f"input {i}"))
        seen.add(n.id)

        k = n.kind
        if isinstance(k, Concat):
            if len(n.inputs) < 2:
                bad(Violation(n.id, "arity", "Concat needs >= 2 inputs"))
        elif isinstance(k, Detect):
            if not 1 <= len(n.inputs) <= 3:
                bad(Violation(n.id, "arity", "Detect needs 1-3 inputs"))
        elif pos == 0:
            if n.inputs:
                bad(Violation(n.id, "arity", "source block takes no inputs"))
        elif len(n.inputs) != 1:
            bad(Violation(n.id, "arity", f"expected 1 input, got {len(n.inputs)}"))
        if isinstance(k, ConvBlock) and k.stride not in (1, 2):
            bad(Violation(n.id, "bad parameter", f"stride {k.stride}"))
        if isinstance(k, Upsample) and k.scale != 2:
            bad(Violation(n.id, "bad parameter", f"upsample scale {k.scale}"))

    if g.nodes and g.nodes[0].inputs:
        bad(Violation(g.nodes[0].id, "source", "first node must be the graph source"))
    sources = [n.id for n in g.nodes if not n.inputs and not isinstance(n.kind, Detect)]
    if len(sources) > 1:
        bad(Violation(sources[1], "extra source", f"sources {sources}"))

    detects = [n for n in g.nodes if isinstance(n.kind, Detect)]
    if len(detects) != 1:
        bad(Violation(None, "detect count", f"found {len(detects)}"))
    if rep.violations:
        return rep

    # reachability: forward from the source, backward from Detect
    consumers = g.consumers()
    fwd = set()
    stack = [g.nodes[0].id]
    while stack:
        i = stack.pop()
        if i in fwd:
            continue
        fwd.add(i)
        stack.extend(consumers.get(i, []))
    back = set()
    by_id = {n.id: n for n in g.nodes}
    stack = [detects[0].id]
    while stack:
        i = stack.pop()
        if i in back:
            continue
        back.add(i)
        stack.extend(by_id[i].inputs)
    for n in g.nodes:
        if n.id not in fwd:
            bad(Violation(n.id, "unreachable block"))
        elif n.id not in back:
            bad(Violation(n.id, "dead block", "no path to Detect"))

    try:
        rep.shapes = propagate_shapes(g, probe)
    except ShapeMismatch as e:
        bad(Violation(e.node_id, "shape mismatch", str(e)))
        return rep
    except GraphError as e:
        bad(Violation(None, "shape propagation", str(e)))
        return rep

    hs = [rep.shapes[i] for i in detects[0].inputs]
    strides = [probe.height // s.height for s in hs]
    if strides != sorted(set(strides)):
        bad(Violation(DETECT, "head order", f"strides {strides} not strictly increasing"))
    for i, s in rep.shapes.items():
        if min(s.channels, s.height, s.width) < 1:
            bad(Violation(i, "empty shape", str(s)))
    return rep


# ---------------------------------------------------------------------------
# export


def kind_params(kind: BlockKind) -> dict:
    return asdict(kind)


def to_dict(g: ArchGraph, shapes: dict[NodeId, TensorShape] | None = None) -> dict:
    nodes = []
    for n in g.nodes:
        d = {"id": n.id, "kind": kind_name(n.kind), "params": kind_params(n.kind), "inputs": list(n.inputs)}
        if isinstance(n.kind, ConvBlock) and n.kind.repair:
            d["repair"] = True
        if shapes is not None and n.id in shapes:
            s = shapes[n.id]
            d["shape"] = [s.channels, s.height, s.width]
        nodes.append(d)
    return {
        "schema_version": SCHEMA_VERSION,
        "variant": g.variant,
        "input_channels": g.input_channels,
        "nodes": nodes,
    }


def to_json(g: ArchGraph, shapes=None, indent: int | None = 2) -> str:
    return json.dumps(to_dict(g, shapes), indent=indent)


def from_dict(d: dict) -> ArchGraph:
    nodes = []
    for nd in d["nodes"]:
        cls = _KIND_BY_NAME[nd["kind"]]
        kind = cls(**nd.get("params", {}))
        nodes.append(Node(nd["id"], kind, tuple(nd["inputs"])))
    return ArchGraph(tuple(nodes), d.get("variant", "full"), d.get("input_channels", 3))


def from_json(text: str) -> ArchGraph:
    return from_dict(json.loads(text))


def _dot_label(n: Node, shape: TensorShape | None) -> str:
    k = n.kind
    name = kind_name(k)
    if isinstance(k, ConvBlock):
        name += f" k{k.kernel} s{k.stride}"
        if k.repair:
            name += " (repair)"
    elif isinstance(k, Detect):
        name += f" nc={k.num_classes}"
    lines = [f"{n.label}: {name}"]
    if shape is not None:
        lines.append(str(shape))
    return "\\n".join(lines)


def to_dot(g: ArchGraph, input: TensorShape | None = PROBE) -> str:
    shapes = propagate_shapes(g, input) if input is not None else {}
    out = [f'digraph "{g.variant}" {{', "  rankdir=TB;", "  node [shape=box, fontname=monospace];"]
    for n in g.nodes:
        attrs = f'label="{_dot_label(n, shapes.get(n.id))}"'
        if isinstance(n.kind, ConvBlock) and n.kind.repair:
            attrs += ", style=dashed"
        out.append(f'  "{n.label}" [{attrs}];')
    for n in g.nodes:
        for i in n.inputs:
            src = f"b{i}" if isinstance(i, int) else str(i)
            out.append(f'  "{src}" -> "{n.label}";')
    out.append("}")
    return "\n".join(out) + "\n"


def iter_paths(g: ArchGraph, target: NodeId) -> Iterable[list[NodeId]]:
    """All source-to-target paths (fine for graphs of a few dozen nodes)."""
    by_id = {n.id: n for n in g.nodes}

    def walk(i):
        n = by_id[i]
        if not n.inputs:
            yield [i]
            return
        for j in n.inputs:
            for p in walk(j):
                yield p + [i]

    yield from walk(target)
