"""Depth network geometry, split equivalence, and branch plumbing."""
import numpy as np
import pytest

from splitnav import depthnet as D
from splitnav import tensor as T
from splitnav.depthnet import (
    BASELINE_HEAD_SET, BASELINE_KD_SET, BASELINE_TAIL_SET,
    BOTTLENECK_HEAD_SET, BOTTLENECK_KD_SET, BOTTLENECK_TAIL_SET,
    PRED_INDEX, StudentSpec, TeacherDepthNet, build_branches, build_student,
    desk_geometry, paper_geometry,
)
from splitnav.errors import ConfigurationError
from splitnav.quantize import QuantizedTensor
from splitnav.rng import substream

SEED = 20240811


def tiny_geometry():
    # smallest shape that survives the two downsampling blocks
    return desk_geometry()


@pytest.fixture(scope="module")
def teacher():
    return TeacherDepthNet(desk_geometry(), rng=substream(SEED, "init", 0))


@pytest.fixture(scope="module")
def rgb_batch():
    rng = substream(SEED, "data", 0)
    return rng.random((2, 3, 36, 64), dtype=np.float32)


# ---------------------------------------------------------------------------
# geometry


def test_paper_geometry_shapes():
    g = paper_geometry()
    assert g.input_shape == (3, 144, 256)
    assert g.block_hw(1) == (72, 128)
    assert g.trunk_hw() == (18, 32)
    assert g.block_hw(10) == (18, 32)


def test_paper_baseline_payload_is_18432_bytes():
    g = paper_geometry()
    spec = StudentSpec("baseline", 32)
    c, h, w = g.split_shape(spec)
    assert (c, h, w) == (32, 18, 32)
    assert c * h * w == 18432


def test_desk_geometry_shapes():
    g = desk_geometry()
    assert g.input_shape == (3, 36, 64)
    assert g.block_hw(1) == (18, 32)
    assert g.trunk_hw() == (9, 16)


def test_prediction_restores_input_resolution(teacher, rgb_batch):
    with T.no_grad():
        depth = teacher.forward(T.Tensor(rgb_batch)).data
    assert depth.shape == (2, 36, 64)
    assert depth.min() >= 0.0 and depth.max() <= 1.0


def test_teacher_block_channels(teacher, rgb_batch):
    collect = {}
    with T.no_grad():
        teacher.forward(T.Tensor(rgb_batch[:1]), collect=collect)
    assert collect[1].data.shape == (1, 32, 18, 32)
    assert collect[2].data.shape == (1, 128, 9, 16)
    for i in range(3, 11):
        assert collect[i].data.shape == (1, 64, 9, 16)
    assert collect[PRED_INDEX].data.shape == (1, 36, 64)


def test_bottleneck_payload_table():
    # payload = channels * code height * code width at the encoder output
    for geometry, variant, channels, expected in [
        (paper_geometry(), "v1", 12, 12 * 4 * 9),
        (paper_geometry(), "v2", 48, 48 * 8 * 14),
        (desk_geometry(), "v1", 12, 12 * 2 * 3),
        (desk_geometry(), "v2", 48, 48 * 4 * 7),
    ]:
        spec = StudentSpec("bottleneck", channels, variant=variant)
        c, h, w = geometry.split_shape(spec)
        assert c * h * w == expected


def test_trainable_sets():
    assert BASELINE_HEAD_SET == (2, 3)
    assert BASELINE_TAIL_SET == (1, 4, 5, 6, 7, 8, 9, 10, 11)
    assert BASELINE_KD_SET == tuple(range(3, 12))
    assert BOTTLENECK_HEAD_SET == (1, 2, 3, 4, 5)
    assert BOTTLENECK_TAIL_SET == (6, 7, 8, 9, 10, 11)
    assert BOTTLENECK_KD_SET == tuple(range(5, 12))


def test_norm_groups_divides():
    for c in (1, 2, 4, 7, 12, 24, 32, 48, 64, 128):
        g = D.norm_groups(c)
        assert c % g == 0 and g <= 8


def test_bad_student_spec():
    with pytest.raises(ConfigurationError):
        StudentSpec("baseline", 0)
    with pytest.raises(ConfigurationError):
        StudentSpec("bottleneck", 12, variant="v3")
    with pytest.raises(ConfigurationError):
        StudentSpec("resnet", 12)


# ---------------------------------------------------------------------------
# students


@pytest.mark.parametrize("spec", [
    StudentSpec("baseline", 8),
    StudentSpec("bottleneck", 12, variant="v1"),
    StudentSpec("bottleneck", 24, variant="v2"),
])
def test_split_equals_monolithic(teacher, rgb_batch, spec):
    student = build_student(teacher, spec, rng=substream(SEED, "init", 1))
    for i in range(rgb_batch.shape[0]):
        x = rgb_batch[i]
        with T.no_grad():
            qt = student.head_forward(x)
            assert isinstance(qt, QuantizedTensor)
            assert qt.nbytes == student.payload_bytes
            split_depth = student.tail_forward(qt).data
            mono_depth = student.forward_quantized(T.Tensor(x[None])).data[0]
        assert split_depth.shape == (36, 64)
        np.testing.assert_array_equal(split_depth, mono_depth)


def test_baseline_head_tail_partition(teacher):
    student = build_student(teacher, StudentSpec("baseline", 8),
                            rng=substream(SEED, "init", 2))
    head = student.stage_parameters("head")
    tail = student.stage_parameters("tail")
    everything = dict(student.named_parameters())
    assert set(head) | set(tail) == set(everything)
    assert not set(head) & set(tail)
    for name, p in head.items():
        assert p is everything[name]


def test_bottleneck_head_tail_partition(teacher):
    student = build_student(teacher, StudentSpec("bottleneck", 12, variant="v1"),
                            rng=substream(SEED, "init", 3))
    head = student.stage_parameters("head")
    tail = student.stage_parameters("tail")
    everything = dict(student.named_parameters())
    assert set(head) | set(tail) == set(everything)
    assert not set(head) & set(tail)
    # encoder and decoder both belong to the distillation head stage
    assert any(name.startswith("enc.") for name in head)
    assert any(name.startswith("dec.") for name in head)


def test_baseline_inherits_teacher_weights(teacher):
    student = build_student(teacher, StudentSpec("baseline", 8),
                            rng=substream(SEED, "init", 4))
    teacher_params = dict(teacher.named_parameters())
    student_params = dict(student.named_parameters())
    # untouched trunk blocks start as exact teacher copies, not references
    w_t = teacher_params["block01.conv.weight"]
    w_s = student_params["block01.conv.weight"]
    assert w_s is not w_t
    np.testing.assert_array_equal(w_s.data, w_t.data)
    assert student_params["block02.conv.weight"].data.shape[0] == 8


def test_students_output_range(teacher, rgb_batch):
    for spec in (StudentSpec("baseline", 8), StudentSpec("bottleneck", 12, variant="v1")):
        student = build_student(teacher, spec, rng=substream(SEED, "init", 5))
        with T.no_grad():
            depth = student.forward(T.Tensor(rgb_batch)).data
        assert depth.shape == (2, 36, 64)
        assert depth.min() >= 0.0 and depth.max() <= 1.0


def test_kd_block_outputs_match_teacher_indices(teacher, rgb_batch):
    student = build_student(teacher, StudentSpec("bottleneck", 12, variant="v1"),
                            rng=substream(SEED, "init", 6))
    collect_t: dict = {}
    with T.no_grad():
        teacher.forward(T.Tensor(rgb_batch[:1]), collect=collect_t)
        outs = student.block_outputs(T.Tensor(rgb_batch[:1]))
    assert set(outs) == set(student.kd_set)
    for i in student.kd_set:
        assert outs[i].data.shape == collect_t[i].data.shape


# ---------------------------------------------------------------------------
# branches


def test_build_branches_orders_by_payload(teacher):
    rng = substream(SEED, "init", 7)
    specs = [StudentSpec("baseline", 32), StudentSpec("bottleneck", 12, variant="v1")]
    students = [build_student(teacher, s, rng=rng) for s in specs]
    branches = build_branches(teacher, students)
    payloads = [b.payload_bytes for b in branches]
    assert payloads == sorted(payloads)
    assert [b.branch_id for b in branches] == list(range(len(branches)))
    assert branches[-1].name == "teacher"
    assert branches[-1].payload_bytes == 3 * 36 * 64
    assert branches[0].name == "bottleneck-v1-12"
    assert branches[0].payload_bytes == 12 * 2 * 3


def test_branch_infer_depth_matches_split(teacher, rgb_batch):
    rng = substream(SEED, "init", 8)
    student = build_student(teacher, StudentSpec("baseline", 8), rng=rng)
    branches = build_branches(teacher, [student])
    x = rgb_batch[0]
    got = branches[0].infer_depth(x)
    with T.no_grad():
        want = student.tail_forward(student.head_forward(x)).data
    np.testing.assert_array_equal(got, want)


def test_teacher_branch_runs_on_quantized_rgb(teacher, rgb_batch):
    branches = build_branches(teacher, [])
    assert len(branches) == 1
    depth = branches[0].infer_depth(rgb_batch[0])
    assert depth.shape == (36, 64)
    assert 0.0 <= depth.min() and depth.max() <= 1.0


def test_duplicate_payloads_rejected(teacher):
    rng = substream(SEED, "init", 9)
    a = build_student(teacher, StudentSpec("baseline", 8), rng=rng)
    b = build_student(teacher, StudentSpec("baseline", 8), rng=rng)
    with pytest.raises(ConfigurationError):
        build_branches(teacher, [a, b])
