from dataclasses import replace

import pytest

from yolo_slim.archgraph import (
    DETECT,
    C2PSA,
    SPPF,
    ArchGraph,
    C3k2,
    Concat,
    ConvBlock,
    Detect,
    IndivisibleInput,
    Node,
    ShapeMismatch,
    TensorShape,
    Upsample,
    build_yolov11,
    build_yolov11n,
    from_json,
    iter_paths,
    propagate_shapes,
    to_dot,
    to_json,
    validate,
)

BACKBONE_KINDS = [ConvBlock, ConvBlock, C3k2, ConvBlock, C3k2, ConvBlock, C3k2, ConvBlock, C3k2, SPPF, C2PSA]
NECK_KINDS = [Upsample, Concat, C3k2, Upsample, Concat, C3k2, ConvBlock, Concat, C3k2, ConvBlock, Concat, C3k2]


def _swap(g, node_id, **changes):
    return replace(g, nodes=tuple(replace(n, **changes) if n.id == node_id else n for n in g.nodes))


def test_topology(base):
    assert len(base) == 24
    kinds = [type(n.kind) for n in base.nodes]
    assert kinds[:11] == BACKBONE_KINDS
    assert kinds[11:23] == NECK_KINDS
    assert kinds[23] is Detect
    assert base.head_ids == (16, 19, 22)
    concat_inputs = {n.id: n.inputs for n in base.nodes if isinstance(n.kind, Concat)}
    assert concat_inputs == {12: (11, 6), 15: (14, 4), 18: (17, 13), 21: (20, 10)}


def test_nano_channel_plan(base):
    outs = [n.kind.out_channels for n in base.nodes[:11]]
    assert outs == [16, 32, 64, 64, 128, 128, 128, 256, 256, 256, 256]
    neck = {i: base.node(i).kind.out_channels for i in (13, 16, 17, 19, 20, 22)}
    assert neck == {13: 128, 16: 64, 17: 64, 19: 128, 20: 128, 22: 256}
    assert all(n.kind.repeats == 1 for n in base.nodes if isinstance(n.kind, (C3k2, C2PSA)))
    assert [n.id for n in base.nodes if isinstance(n.kind, C3k2) and n.kind.use_c3k] == [6, 8, 22]


def test_num_classes_only_changes_detect():
    a, b = build_yolov11n(80), build_yolov11n(1)
    assert [n for n in a.nodes[:-1]] == [n for n in b.nodes[:-1]]
    assert a.detect.inputs == b.detect.inputs
    assert (a.num_classes, b.num_classes) == (80, 1)


def test_builder_idempotent():
    assert build_yolov11n(80) == build_yolov11n(80)


def test_other_scales_build_and_validate():
    g = build_yolov11(80, width=0.5, depth=0.5)
    assert g.node(0).kind.out_channels == 32
    assert validate(g).valid


def test_rejects_zero_classes():
    with pytest.raises(ValueError):
        build_yolov11n(0)


def test_shapes_640(base):
    s = propagate_shapes(base, TensorShape(3, 640, 640))
    assert s[16] == TensorShape(64, 80, 80)
    assert s[19] == TensorShape(128, 40, 40)
    assert s[22] == TensorShape(256, 20, 20)
    # pyramid levels P1..P5 at 320, 160, 80, 40, 20
    assert [s[i].height for i in (0, 1, 3, 5, 7)] == [320, 160, 80, 40, 20]


def test_shapes_64(base):
    s = propagate_shapes(base, TensorShape(3, 64, 64))
    assert [(s[i].height, s[i].width) for i in base.head_ids] == [(8, 8), (4, 4), (2, 2)]


def test_shapes_deterministic(base):
    x = TensorShape(3, 320, 256)
    assert propagate_shapes(base, x) == propagate_shapes(build_yolov11n(80), x)


def test_indivisible_input(base):
    with pytest.raises(IndivisibleInput):
        propagate_shapes(base, TensorShape(3, 650, 640))


def test_concat_mismatch_carries_node(base):
    bad = _swap(base, 15, inputs=(14, 6))  # 80x80 with 40x40
    with pytest.raises(ShapeMismatch) as e:
        propagate_shapes(bad, TensorShape(3, 640, 640))
    assert e.value.node_id == 15


def test_reference_valid(base):
    rep = validate(base)
    assert rep.valid, str(rep)


def test_forward_reference(base):
    rep = validate(_swap(base, 5, inputs=(9,)))
    assert "forward reference" in rep.rules()
    assert any(v.node_id == 5 for v in rep.violations)


def test_dead_block(base):
    # b15 concatenates b4 with itself, orphaning b14
    rep = validate(_swap(base, 15, inputs=(4, 4)))
    assert [(v.node_id, v.rule) for v in rep.violations] == [(14, "dead block")]


def test_arity_and_detect_count(base):
    rep = validate(_swap(base, 12, inputs=(11,)))
    assert "arity" in rep.rules()
    two = replace(base, nodes=base.nodes + (Node("detect2", Detect(1), (16,)),))
    assert "detect count" in validate(two).rules()


def test_head_order_violation(base):
    rep = validate(_swap(base, DETECT, inputs=(22, 16)))
    assert "head order" in rep.rules()


def test_shape_violation_reported_as_data(base):
    rep = validate(_swap(base, 15, inputs=(14, 6)))
    assert not rep.valid
    assert [(v.node_id, v.rule) for v in rep.violations] == [(15, "shape mismatch")]


def test_stride_algebra(base):
    """Every path from b0 to a head has the same net downsampling."""
    inp = TensorShape(3, 640, 640)
    shapes = propagate_shapes(base, inp)
    for head in base.head_ids:
        exponents = set()
        for path in iter_paths(base, head):
            k = 0
            for i in path:
                kind = base.node(i).kind
                if isinstance(kind, ConvBlock) and kind.stride == 2:
                    k += 1
                elif isinstance(kind, Upsample):
                    k -= 1
            exponents.add(k)
        assert len(exponents) == 1
        assert shapes[head].height == 640 // 2 ** exponents.pop()


@pytest.mark.parametrize("res", [32, 64, 96, 320, 640, 1280])
def test_all_shapes_positive(base, res):
    for s in propagate_shapes(base, TensorShape(3, res, res)).values():
        assert min(s.channels, s.height, s.width) >= 1


def test_json_round_trip(variants):
    for g in variants.values():
        assert from_json(to_json(g)) == g


def test_dot_export(base):
    dot = to_dot(base)
    assert dot.count("[label=") == 24
    assert '"b16" -> "detect"' in dot
    assert "64x80x80" in dot


def test_graph_is_immutable(base):
    with pytest.raises(AttributeError):
        base.variant = "x"
    assert isinstance(base.nodes, tuple)
    assert isinstance(base, ArchGraph)
