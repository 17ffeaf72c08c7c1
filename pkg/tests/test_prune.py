import json
from dataclasses import replace

import pytest

from yolo_slim.archgraph import (
    ArchGraph,
    Concat,
    Detect,
    ConvBlock,
    Node,
    ShapeMismatch,
    TensorShape,
    build_yolov11,
    build_yolov11n,
    propagate_shapes,
    to_dict,
    validate,
)
from yolo_slim.costmodel import cost_graph
from yolo_slim.prune import (
    RULES,
    InvalidBase,
    Unrepairable,
    apply_renumber,
    bridge_count,
    invert,
    kept_levels,
    plan,
    prune,
    prune_large,
    prune_medium,
    prune_ml,
    prune_sl,
    prune_sm,
    prune_small,
    remove_nodes,
    renumber,
    repair_shapes,
)

HEAD_STRIDES = {
    "full": [8, 16, 32],
    "small": [8],
    "medium": [16],
    "large": [32],
    "sm": [8, 16],
    "ml": [16, 32],
    "sl": [8, 32],
}
NODE_COUNTS = {"full": 24, "small": 18, "medium": 18, "large": 15, "sm": 21, "ml": 21, "sl": 22}


def test_full_is_identity(base):
    assert prune(base, "full") is base


@pytest.mark.parametrize("variant", list(RULES))
def test_node_counts(variants, variant):
    assert len(variants[variant]) == NODE_COUNTS[variant]


@pytest.mark.parametrize("variant", list(RULES))
def test_validity_closure(variants, variant):
    rep = validate(variants[variant])
    assert rep.valid, str(rep)
    assert variants[variant].variant == variant


@pytest.mark.parametrize("variant", list(RULES))
def test_head_strides(variants, variant):
    g = variants[variant]
    s = propagate_shapes(g, TensorShape(3, 640, 640))
    assert [640 // s[i].height for i in g.head_ids] == HEAD_STRIDES[variant]
    assert set(kept_levels(g)) == set(RULES[variant].kept_heads)


@pytest.mark.parametrize("variant", list(RULES))
def test_backbone_preserved(base, variants, variant):
    g = variants[variant]
    assert g.nodes[:11] == base.nodes[:11]


@pytest.mark.parametrize("variant", [v for v in RULES if v != "full"])
def test_strict_reduction(base, variants, variant):
    a, b = cost_graph(base), cost_graph(variants[variant])
    assert len(variants[variant]) < len(base)
    assert b.total_params < a.total_params
    assert b.total_flops < a.total_flops


def test_small_layout(variants):
    g = variants["small"]
    assert g.ids()[:-1] == list(range(17))
    assert g.head_ids == (16,)


def test_medium_renames_17_to_19(base):
    g, spec = plan(base, "medium")
    assert {k: spec.renumber[k] for k in (17, 18, 19)} == {17: 14, 18: 15, 19: 16}
    assert g.head_ids == (16,)
    # old b17 now reads the 80x80 backbone feature b4
    assert g.node(14).inputs == (4,)
    assert g.node(15).inputs == (14, 13)


def test_large_layout(base):
    g, spec = plan(base, "large")
    assert {k: spec.renumber[k] for k in (20, 21, 22)} == {20: 11, 21: 12, 22: 13}
    assert spec.removed_ids == set(range(11, 20))
    assert g.node(11).inputs == (6,)
    assert g.node(12).inputs == (11, 10)
    assert g.head_ids == (13,)


def test_sm_keeps_b0_to_b19(base, variants):
    assert variants["sm"].nodes[:20] == base.nodes[:20]
    assert variants["sm"].head_ids == (16, 19)


def test_ml_layout(base):
    g, spec = plan(base, "ml")
    assert [spec.renumber[k] for k in range(17, 23)] == list(range(14, 20))
    assert g.node(14).inputs == (4,)
    # b14 Conv now takes 128 channels instead of 64
    s = propagate_shapes(g, TensorShape(3, 640, 640))
    assert s[4].channels == 128 and s[14] == TensorShape(64, 40, 40)
    assert g.head_ids == (16, 19)


def test_sl_before_repair_mismatches_at_old_b21(base):
    g, spec = plan(base, "sl", repair=False)
    concat = spec.renumber[21]
    assert concat == 18 and isinstance(g.node(concat).kind, Concat)
    with pytest.raises(ShapeMismatch) as e:
        propagate_shapes(g, TensorShape(3, 640, 640))
    assert e.value.node_id == concat
    assert "40x40, 20x20" in str(e.value)
    rep = validate(g)
    assert [(v.node_id, v.rule) for v in rep.violations] == [(concat, "shape mismatch")]


def test_sl_repair_inserts_one_conv(base):
    g, spec = plan(base, "sl")
    assert spec.repairs == [{"inserted": 18, "after": 17, "concat": 19}]
    bridge = g.node(18).kind
    assert bridge == ConvBlock(128, 3, 2, repair=True)
    s = propagate_shapes(g, TensorShape(3, 640, 640))
    assert s[17].height == 40 and s[18].height == 20
    assert [s[i].height for i in g.node(19).inputs] == [20, 20]
    assert to_dict(g)["nodes"][18]["repair"] is True


def test_repair_noop_on_valid(base):
    g, log = repair_shapes(base)
    assert g == base and log == []


def test_repair_two_levels():
    # Concat of a 1/2-scale and a 1/8-scale branch needs two bridging convs
    nodes = (
        Node(0, ConvBlock(8, 3, 1), ()),
        Node(1, ConvBlock(8, 3, 2), (0,)),
        Node(2, ConvBlock(8, 3, 2), (1,)),
        Node(3, ConvBlock(16, 3, 2), (2,)),
        Node(4, Concat(), (1, 3)),
        Node("detect", Detect(1), (4,)),
    )
    probe = TensorShape(3, 64, 64)
    fixed, log = repair_shapes(ArchGraph(nodes), probe)
    assert [e["inserted"] for e in log] == [2, 3]
    assert validate(fixed, probe).valid
    s = propagate_shapes(fixed, probe)
    assert s[fixed.node(6).inputs[0]].height == s[fixed.node(6).inputs[1]].height == 8


def test_unrepairable_ratio():
    with pytest.raises(Unrepairable):
        bridge_count(TensorShape(8, 80, 80), TensorShape(8, 30, 30))
    with pytest.raises(Unrepairable):
        bridge_count(TensorShape(8, 80, 40), TensorShape(8, 20, 20))
    assert bridge_count(TensorShape(8, 80, 80), TensorShape(8, 20, 20)) == 2
    assert bridge_count(TensorShape(8, 20, 20), TensorShape(8, 20, 20)) == 0


def test_renumber_round_trip(base):
    removed, _ = remove_nodes(base, {14, 15, 16}, ((17, 16, 4),))
    renumbered, mapping = renumber(removed)
    assert renumbered.ids()[:-1] == list(range(len(renumbered) - 1))
    assert apply_renumber(renumbered, invert(mapping)) == removed


def test_renumber_identity_on_contiguous(base):
    g, mapping = renumber(base)
    assert g == base
    assert all(k == v for k, v in mapping.items())


def test_renumber_order_preserving(base):
    removed, _ = remove_nodes(base, {20, 21, 22, 14})
    _, mapping = renumber(removed)
    olds = sorted(mapping)
    assert [mapping[o] for o in olds] == list(range(len(olds)))


def test_cascade_removes_dangling_consumers(base):
    g, gone = remove_nodes(base, {17})
    # b18 (Concat) and b19 lose their producer; b20 loses b19
    assert {17, 18, 19, 20, 21, 22} <= gone
    assert g.head_ids == (16,)


def test_passes_are_pure(base):
    before = build_yolov11n(80)
    for v in RULES:
        prune(base, v)
    assert base == before


def test_invalid_base(variants):
    with pytest.raises(InvalidBase):
        prune(variants["small"], "medium")
    other = replace(variants["full"], nodes=variants["full"].nodes[:-1] + (replace(variants["full"].nodes[-1], inputs=(16,)),))
    with pytest.raises(InvalidBase):
        prune(other, "small")


def test_other_scale_prunes():
    g = prune(build_yolov11(3, width=0.5, depth=0.5), "ml")
    assert validate(g).valid


def test_unknown_variant(base):
    with pytest.raises(ValueError):
        prune(base, "tiny")


def test_named_passes(base, variants):
    for fn, v in [(prune_small, "small"), (prune_medium, "medium"), (prune_large, "large"),
                  (prune_sm, "sm"), (prune_ml, "ml"), (prune_sl, "sl")]:
        assert fn(base) == variants[v]


def test_prune_spec_json(base):
    _, spec = plan(base, "sl")
    d = json.loads(spec.to_json())
    assert d["removed_ids"] == [17, 18, 19]
    assert d["rewires"] == [{"consumer": 20, "old_input": 19, "new_input": 16}]
    assert d["kept_heads"] == ["P3", "P5"]
    assert d["repairs"][0]["inserted"] == 18
