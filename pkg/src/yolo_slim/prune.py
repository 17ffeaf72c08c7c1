"""Size-targeted pruning passes over the reference YOLOv11 graph.

Each variant keeps a subset of the three detection scales (P3/P4/P5) and
drops the neck blocks that only feed the removed heads. Passes are pure:
the input graph is never modified.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

from .archgraph import (
    DETECT,
    SCHEMA_VERSION,
    ArchGraph,
    Concat,
    ConvBlock,
    GraphError,
    Node,
    NodeId,
    ShapeMismatch,
    TensorShape,
    build_yolov11,
    propagate_shapes,
    validate,
    PROBE,
)

HEAD_LEVEL = {16: "P3", 19: "P4", 22: "P5"}
BACKBONE = frozenset(range(11))


class PruneError(GraphError):
    pass


class InvalidBase(PruneError):
    pass


class Unrepairable(PruneError):
    pass


@dataclass(frozen=True)
class Rule:
    removed: frozenset[int]
    rewires: tuple[tuple[int, int, int], ...]  # (consumer, old input, new input)
    kept_heads: frozenset[str]
    repair: bool = False


RULES: dict[str, Rule] = {
    "full": Rule(frozenset(), (), frozenset({"P3", "P4", "P5"})),
    "small": Rule(frozenset(range(17, 23)), (), frozenset({"P3"})),
    # old b17 loses its b16 input; b4 carries the same 80x80 scale
    "medium": Rule(frozenset({14, 15, 16, 20, 21, 22}), ((17, 16, 4),), frozenset({"P4"})),
    "large": Rule(frozenset(range(11, 19)), ((20, 19, 6),), frozenset({"P5"})),
    "sm": Rule(frozenset({20, 21, 22}), (), frozenset({"P3", "P4"})),
    "ml": Rule(frozenset({14, 15, 16}), ((17, 16, 4),), frozenset({"P4", "P5"})),
    "sl": Rule(frozenset({17, 18, 19}), ((20, 19, 16),), frozenset({"P3", "P5"}), repair=True),
}


@dataclass
class PruneSpec:
    variant: str
    removed_ids: set[int] = field(default_factory=set)
    rewires: list[tuple[int, int, int]] = field(default_factory=list)
    kept_heads: set[str] = field(default_factory=set)
    repairs: list[dict] = field(default_factory=list)
    renumber: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "variant": self.variant,
            "removed_ids": sorted(self.removed_ids),
            "rewires": [
                {"consumer": c, "old_input": o, "new_input": n} for c, o, n in self.rewires
            ],
            "kept_heads": sorted(self.kept_heads),
            "repairs": self.repairs,
            "renumber": {str(k): v for k, v in sorted(self.renumber.items())},
        }

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


# ---------------------------------------------------------------------------
# primitives


def remove_nodes(g: ArchGraph, removed: set[int], rewires=()) -> tuple[ArchGraph, set[int]]:
    """Drop ``removed``, apply rewires, then cascade.

    A consumer left with a dangling input is removed too, except Detect,
    which just loses that head. Afterwards anything with no path to Detect is
    dropped. Returns the new graph and the full set of removed ids.
    """
    rewire = {(c, o): n for c, o, n in rewires}
    gone = set(removed)
    nodes: list[Node] = []
    for n in g.nodes:
        if n.id in gone:
            continue
        inputs = tuple(rewire.get((n.id, i), i) for i in n.inputs)
        if n.id == DETECT:
            inputs = tuple(i for i in inputs if i not in gone)
        elif any(i in gone for i in inputs):
            gone.add(n.id)
            continue
        nodes.append(replace(n, inputs=inputs))

    # dead-code elimination, backwards from Detect
    live: set[NodeId] = set()
    by_id = {n.id: n for n in nodes}
    stack = [n.id for n in nodes if n.id == DETECT]
    while stack:
        i = stack.pop()
        if i not in live:
            live.add(i)
            stack.extend(by_id[i].inputs)
    dead = {n.id for n in nodes if n.id not in live}
    gone |= dead
    return replace(g, nodes=tuple(n for n in nodes if n.id in live)), gone


def apply_renumber(g: ArchGraph, mapping: dict[int, int]) -> ArchGraph:
    def m(i):
        return mapping.get(i, i) if isinstance(i, int) else i

    return replace(g, nodes=tuple(Node(m(n.id), n.kind, tuple(m(i) for i in n.inputs)) for n in g.nodes))


def renumber(g: ArchGraph) -> tuple[ArchGraph, dict[int, int]]:
    """Make block ids contiguous from 0, following node order."""
    ints = [n.id for n in g.nodes if isinstance(n.id, int)]
    mapping = {old: new for new, old in enumerate(ints)}
    return apply_renumber(g, mapping), mapping


def invert(mapping: dict[int, int]) -> dict[int, int]:
    return {v: k for k, v in mapping.items()}


def _concat_mismatch(g: ArchGraph, probe: TensorShape) -> ShapeMismatch | None:
    try:
        propagate_shapes(g, probe)
    except ShapeMismatch as e:
        return e
    return None


def bridge_count(src: TensorShape, target: TensorShape) -> int:
    """Number of stride-2 halvings taking ``src`` down to ``target``'s spatial size."""
    rh, rw = src.height / target.height, src.width / target.width
    if rh != rw or rh < 1 or not rh.is_integer() or not math.log2(rh).is_integer():
        raise Unrepairable(
            f"{src.height}x{src.width} vs {target.height}x{target.width} is not a power-of-two ratio"
        )
    return int(math.log2(rh))


def repair_shapes(g: ArchGraph, probe: TensorShape = PROBE) -> tuple[ArchGraph, list[dict]]:
    """Bridge spatial gaps at Concat nodes with channel-preserving stride-2 convs.

    The convs go on the branch with the larger feature map, directly after its
    producer. Node ids are made contiguous again afterwards. Returns the
    repaired graph and a log of insertions (ids refer to the returned graph).
    """
    log = []
    while True:
        err = _concat_mismatch(g, probe)
        if err is None:
            return g, log
        node = g.node(err.node_id)
        if not isinstance(node.kind, Concat):
            raise Unrepairable(f"mismatch at non-Concat node {err}")
        shapes = propagate_shapes(_truncate(g, node.id), probe)
        ins = [shapes[i] for i in node.inputs]
        smallest = min(ins, key=lambda s: s.height * s.width)
        new_nodes = list(g.nodes)
        next_id = max(n.id for n in g.nodes if isinstance(n.id, int)) + 1
        inserted = []
        rewired = list(node.inputs)
        for slot, (src, s) in enumerate(zip(node.inputs, ins)):
            n_bridges = bridge_count(s, smallest)
            prev = src
            pos = [n.id for n in new_nodes].index(src) + 1
            for _ in range(n_bridges):
                new_nodes.insert(pos, Node(next_id, ConvBlock(s.channels, 3, 2, repair=True), (prev,)))
                inserted.append((next_id, prev))
                prev = next_id
                next_id += 1
                pos += 1
            rewired[slot] = prev
        idx = [n.id for n in new_nodes].index(node.id)
        new_nodes[idx] = replace(node, inputs=tuple(rewired))
        g, mapping = renumber(replace(g, nodes=tuple(new_nodes)))
        for nid, src in inserted:
            log.append({"inserted": mapping[nid], "after": mapping.get(src, src), "concat": mapping[node.id]})


def _truncate(g: ArchGraph, upto: NodeId) -> ArchGraph:
    ids = g.ids()
    return replace(g, nodes=g.nodes[: ids.index(upto)])


# ---------------------------------------------------------------------------
# driver


def _check_base(g: ArchGraph) -> None:
    """Accept any scale of the unpruned topology (kinds and wiring), not only nano."""
    ref = build_yolov11(1)
    try:
        g.detect
    except GraphError as e:
        raise InvalidBase(str(e)) from e
    if g.variant != "full" or len(g.nodes) != len(ref.nodes):
        raise InvalidBase(f"expected the unpruned 24-node graph, got {len(g.nodes)} nodes ({g.variant})")
    for a, b in zip(g.nodes, ref.nodes):
        if a.id != b.id or a.inputs != b.inputs or type(a.kind) is not type(b.kind):
            raise InvalidBase(f"node {a.label} differs from the reference topology")


def plan(g: ArchGraph, variant: str, repair: bool = True) -> tuple[ArchGraph, PruneSpec]:
    if variant not in RULES:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(RULES)}")
    _check_base(g)
    rule = RULES[variant]
    spec = PruneSpec(variant, kept_heads=set(rule.kept_heads), rewires=list(rule.rewires))
    if variant == "full":
        spec.renumber = {i: i for i in g.ids() if isinstance(i, int)}
        return g, spec

    out, gone = remove_nodes(g, set(rule.removed), rule.rewires)
    assert not gone & BACKBONE, "backbone must survive every variant"
    spec.removed_ids = {i for i in gone if isinstance(i, int)}
    out, mapping = renumber(out)
    spec.renumber = mapping
    if rule.repair and repair:
        out, spec.repairs = repair_shapes(out)
    return out.with_variant(variant), spec


def prune(g: ArchGraph, variant: str, repair: bool = True) -> ArchGraph:
    """Return the ``variant`` graph derived from the unpruned reference ``g``."""
    return plan(g, variant, repair)[0]


def prune_small(g):
    return prune(g, "small")


def prune_medium(g):
    return prune(g, "medium")


def prune_large(g):
    return prune(g, "large")


def prune_sm(g):
    return prune(g, "sm")


def prune_ml(g):
    return prune(g, "ml")


def prune_sl(g):
    return prune(g, "sl")


def kept_levels(g: ArchGraph, probe: TensorShape = PROBE) -> list[str]:
    shapes = propagate_shapes(g, probe)
    return [f"P{int(math.log2(probe.height // shapes[i].height))}" for i in g.head_ids]


def all_variants(num_classes: int = 80) -> dict[str, ArchGraph]:
    base = build_yolov11(num_classes)
    return {v: prune(base, v) for v in RULES}


def check(g: ArchGraph) -> None:
    rep = validate(g)
    if not rep.valid:
        raise PruneError(f"{g.variant} graph is invalid:\n{rep}")
