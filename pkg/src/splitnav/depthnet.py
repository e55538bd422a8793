"""Monocular depth networks with movable split points.

The teacher is ten feature blocks (conv + group norm + SELU) followed by a
prediction block (three convs with nearest-neighbour upsampling, one group
norm, two SELUs, and a sigmoid) that maps RGB [3,H,W] to depth [H,W] in
[0, 1].  The trunk downsamples twice so the tensor leaving block 2 is the
natural wire payload for baseline students; the prediction block upsamples
back to the input resolution.

Students share the teacher topology.  A baseline student narrows block 2 to
``c`` channels and transmits block 2's output.  A bottleneck student
replaces blocks 1-5 with an encoder (transmitted) and a decoder that
reconstructs block 5's output shape.  Two trainable parameter sets drive
distillation: head-stage blocks (retrained against the teacher) and
tail-stage blocks (copied from the teacher, fine-tuned later); together
they cover every parameter exactly once.

Quantization sits at the physical split: ``head_forward`` emits a uint8
tensor, ``tail_forward`` consumes one, and ``forward_quantized`` runs the
identical arithmetic in one process.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .nn import Conv2d, GroupNorm
from .quantize import QuantizedTensor, dequantize, quantize
from .tensor import Tensor

BASELINE_CHANNELS = (2, 4, 8, 16, 32)
BOTTLENECK_CHANNELS = (12, 24, 48)
TEACHER_CHANNELS = (32, 128, 64, 64, 64, 64, 64, 64, 64, 64)
PRED_CHANNELS = (32, 16)
N_FEATURE_BLOCKS = 10
PRED_INDEX = 11  # KD index of the prediction-block output

# trainable-set indices: head stage (retrained), tail stage (copied, later
# fine-tuned), and the blocks whose outputs anchor the head-stage loss
BASELINE_HEAD_SET = (2, 3)
BASELINE_TAIL_SET = (1, 4, 5, 6, 7, 8, 9, 10, 11)
BASELINE_KD_SET = (3, 4, 5, 6, 7, 8, 9, 10, 11)
BOTTLENECK_HEAD_SET = (1, 2, 3, 4, 5)
BOTTLENECK_TAIL_SET = (6, 7, 8, 9, 10, 11)
BOTTLENECK_KD_SET = (5, 6, 7, 8, 9, 10, 11)
BASELINE_SPLIT_AFTER = 2   # physical split: transmit block 2's output
BOTTLENECK_DECODER_TARGET = 5  # decoder reconstructs block 5's output


def norm_groups(channels: int) -> int:
    """Largest divisor of ``channels`` that is at most 8."""
    for g in range(min(8, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    kernel: int
    stride: int
    padding: int


@dataclass(frozen=True)
class DepthNetGeometry:
    """Input resolution plus per-block conv shapes for one deployment."""
    input_shape: tuple[int, int, int]
    blocks: tuple[BlockSpec, ...]
    pred_upsample: tuple[int, int]  # nearest-neighbour factors in the prediction block
    bottleneck_hw: dict[str, tuple[int, int]]  # spatial targets per variant

    def __post_init__(self):
        if len(self.blocks) != N_FEATURE_BLOCKS:
            raise ConfigurationError(f"expected {N_FEATURE_BLOCKS} feature blocks")
        if self.blocks[1].channels != 128 or self.blocks[0].channels != 32:
            raise ConfigurationError("teacher trunk must be 32 then 128 channels")
        if any(b.channels != 64 for b in self.blocks[2:]):
            raise ConfigurationError("teacher blocks 3-10 must have 64 channels")
        h, w = self.trunk_hw()
        f1, f2 = self.pred_upsample
        if (h * f1 * f2, w * f1 * f2) != self.input_shape[1:]:
            raise ConfigurationError(
                f"prediction upsample {self.pred_upsample} does not recover "
                f"{self.input_shape[1:]} from trunk {h}x{w}")

    def block_hw(self, index: int) -> tuple[int, int]:
        """Spatial size of block ``index``'s output (1-based)."""
        h, w = self.input_shape[1:]
        for spec in self.blocks[:index]:
            h = _conv_size(h, spec, "height")
            w = _conv_size(w, spec, "width")
        return h, w

    def trunk_hw(self) -> tuple[int, int]:
        return self.block_hw(N_FEATURE_BLOCKS)

    def split_shape(self, spec: "StudentSpec") -> tuple[int, int, int]:
        """Shape of the tensor a student transmits at its physical split."""
        if spec.kind == "baseline":
            return (spec.channels,) + self.block_hw(BASELINE_SPLIT_AFTER)
        return (spec.channels,) + spec.resolve_hw(self)


def _conv_size(n: int, spec: BlockSpec, what: str) -> int:
    span = n + 2 * spec.padding - spec.kernel
    if span < 0 or span % spec.stride != 0:
        raise ConfigurationError(f"block geometry invalid on {what}: {n} with {spec}")
    return span // spec.stride + 1


def _trunk_blocks(k2: int, s2: int, p2: int) -> tuple[BlockSpec, ...]:
    return (BlockSpec(32, 4, 2, 1), BlockSpec(128, k2, s2, p2),
            *(BlockSpec(64, 3, 1, 1) for _ in range(8)))


def paper_geometry() -> DepthNetGeometry:
    """Full-resolution deployment: 144x256 input, 18x32 trunk."""
    return DepthNetGeometry((3, 144, 256), _trunk_blocks(4, 4, 0), (2, 4),
                            {"v1": (4, 9), "v2": (8, 14)})


def desk_geometry() -> DepthNetGeometry:
    """Reduced deployment for fast end-to-end runs: 36x64 input, 9x16 trunk."""
    return DepthNetGeometry((3, 36, 64), _trunk_blocks(4, 2, 1), (2, 2),
                            {"v1": (2, 3), "v2": (4, 7)})


GEOMETRIES = {"paper": paper_geometry, "desk": desk_geometry}


@dataclass(frozen=True)
class StudentSpec:
    kind: str                 # "baseline" or "bottleneck"
    channels: int
    variant: str | None = None            # bottleneck: "v1" or "v2"
    spatial: tuple[int, int] | None = None  # bottleneck: explicit override

    def __post_init__(self):
        if self.kind == "baseline":
            if self.channels not in BASELINE_CHANNELS:
                raise ConfigurationError(
                    f"baseline channels must be one of {BASELINE_CHANNELS}")
        elif self.kind == "bottleneck":
            if self.channels not in BOTTLENECK_CHANNELS:
                raise ConfigurationError(
                    f"bottleneck channels must be one of {BOTTLENECK_CHANNELS}")
            if self.spatial is None and self.variant not in ("v1", "v2"):
                raise ConfigurationError("bottleneck needs variant v1/v2 or explicit spatial")
        else:
            raise ConfigurationError(f"unknown student kind {self.kind!r}")

    def resolve_hw(self, geometry: DepthNetGeometry) -> tuple[int, int]:
        if self.spatial is not None:
            return self.spatial
        return geometry.bottleneck_hw[self.variant]

    @property
    def name(self) -> str:
        if self.kind == "baseline":
            return f"baseline-{self.channels}"
        return f"bottleneck-{self.variant or 'x'}-{self.channels}"


# ---------------------------------------------------------------------------
# building blocks


class FeatureBlock:
    def __init__(self, in_channels: int, spec: BlockSpec, rng: np.random.Generator):
        self.conv = Conv2d(in_channels, spec.channels, spec.kernel,
                           spec.stride, spec.padding, rng=rng)
        self.gn = GroupNorm(spec.channels, norm_groups(spec.channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.selu(self.gn(self.conv(x)))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.conv.named_parameters(prefix + "conv.")
        yield from self.gn.named_parameters(prefix + "gn.")


class PredictionBlock:
    """Three convs with two upsampling stages; sigmoid keeps depth in (0,1)."""

    def __init__(self, geometry: DepthNetGeometry, rng: np.random.Generator):
        th, tw = geometry.trunk_hw()
        f1, f2 = geometry.pred_upsample
        self.mid_hw = (th * f1, tw * f1)
        self.out_hw = geometry.input_shape[1:]
        c1, c2 = PRED_CHANNELS
        self.conv1 = Conv2d(64, c1, 3, 1, 1, rng=rng)
        self.gn1 = GroupNorm(c1, norm_groups(c1))
        self.conv2 = Conv2d(c1, c2, 3, 1, 1, rng=rng)
        self.conv3 = Conv2d(c2, 1, 3, 1, 1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.upsample_nearest(x, *self.mid_hw)
        h = T.selu(self.gn1(self.conv1(h)))
        h = T.upsample_nearest(h, *self.out_hw)
        h = T.selu(self.conv2(h))
        return T.sigmoid(self.conv3(h))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.conv1.named_parameters(prefix + "conv1.")
        yield from self.gn1.named_parameters(prefix + "gn1.")
        yield from self.conv2.named_parameters(prefix + "conv2.")
        yield from self.conv3.named_parameters(prefix + "conv3.")


def _pred_depth(pred: PredictionBlock, h: Tensor) -> Tensor:
    out = pred(h)  # [...,1,H,W]
    if out.ndim == 3:
        sl = (0,)
    else:
        sl = (slice(None), 0)
    data = out.data[sl]
    result = Tensor(data)
    if out.requires_grad and T._grad_enabled:
        result.requires_grad = True
        result._parents = (out,)

        def backward(g):
            full = np.expand_dims(g, axis=0 if out.ndim == 3 else 1)
            T._accumulate(out, full)
        result._backward = backward
    return result


# ---------------------------------------------------------------------------
# teacher


class TeacherDepthNet:
    def __init__(self, geometry: DepthNetGeometry, rng: np.random.Generator):
        self.geometry = geometry
        in_c = geometry.input_shape[0]
        self.blocks: list[FeatureBlock] = []
        prev = in_c
        for spec in geometry.blocks:
            self.blocks.append(FeatureBlock(prev, spec, rng))
            prev = spec.channels
        self.pred = PredictionBlock(geometry, rng)

    def forward(self, x, collect: dict[int, Tensor] | None = None) -> Tensor:
        h = T.as_tensor(x)
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            if collect is not None:
                collect[i] = h
        depth = _pred_depth(self.pred, h)
        if collect is not None:
            collect[PRED_INDEX] = depth
        return depth

    __call__ = forward

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, block in enumerate(self.blocks, start=1):
            yield from block.named_parameters(f"{prefix}block{i:02d}.")
        yield from self.pred.named_parameters(prefix + "pred.")


# ---------------------------------------------------------------------------
# students


def _copy_params(dst, src) -> None:
    dst_params = dict(dst.named_parameters())
    src_params = dict(src.named_parameters())
    assert dst_params.keys() == src_params.keys()
    for name, p in dst_params.items():
        if p.data.shape != src_params[name].data.shape:
            raise ConfigurationError(f"cannot copy {name}: shape mismatch")
        p.data = src_params[name].data.copy()


class BaselineStudent:
    """Teacher topology with block 2 narrowed to ``channels``; splits after block 2."""

    def __init__(self, teacher: TeacherDepthNet, spec: StudentSpec, rng: np.random.Generator):
        if spec.kind != "baseline":
            raise ConfigurationError("BaselineStudent needs a baseline spec")
        geometry = teacher.geometry
        self.geometry = geometry
        self.spec = spec
        self.blocks = []
        prev = geometry.input_shape[0]
        for i, bspec in enumerate(geometry.blocks, start=1):
            if i == 2:
                bspec = BlockSpec(spec.channels, bspec.kernel, bspec.stride, bspec.padding)
            self.blocks.append(FeatureBlock(prev, bspec, rng))
            prev = bspec.channels
        self.pred = PredictionBlock(geometry, rng)
        # blocks outside the head set start as exact teacher copies
        for i in (1, 4, 5, 6, 7, 8, 9, 10):
            _copy_params(self.blocks[i - 1], teacher.blocks[i - 1])
        _copy_params(self.pred, teacher.pred)
        self.split_shape = geometry.split_shape(spec)
        self.head_set = BASELINE_HEAD_SET
        self.tail_set = BASELINE_TAIL_SET
        self.kd_set = BASELINE_KD_SET

    @property
    def payload_bytes(self) -> int:
        return int(np.prod(self.split_shape))

    def forward(self, x, collect: dict[int, Tensor] | None = None) -> Tensor:
        h = T.as_tensor(x)
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            if collect is not None:
                collect[i] = h
        depth = _pred_depth(self.pred, h)
        if collect is not None:
            collect[PRED_INDEX] = depth
        return depth

    __call__ = forward

    def head_forward(self, x) -> QuantizedTensor:
        h = T.as_tensor(x)
        for block in self.blocks[:BASELINE_SPLIT_AFTER]:
            h = block(h)
        return quantize(h.data)

    def tail_forward(self, qt: QuantizedTensor) -> Tensor:
        h = Tensor(dequantize(qt))
        for block in self.blocks[BASELINE_SPLIT_AFTER:]:
            h = block(h)
        return _pred_depth(self.pred, h)

    def forward_quantized(self, x) -> Tensor:
        h = T.as_tensor(x)
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            if i == BASELINE_SPLIT_AFTER:
                h = Tensor(dequantize(quantize(h.data)))
        return _pred_depth(self.pred, h)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, block in enumerate(self.blocks, start=1):
            yield from block.named_parameters(f"{prefix}block{i:02d}.")
        yield from self.pred.named_parameters(prefix + "pred.")

    def stage_parameters(self, stage: str) -> dict[str, Tensor]:
        """Parameters trained in the given distillation stage (head/tail)."""
        indices = self.head_set if stage == "head" else self.tail_set
        out: dict[str, Tensor] = {}
        for i in indices:
            if i == PRED_INDEX:
                out.update(dict(self.pred.named_parameters("pred.")))
            else:
                out.update(dict(self.blocks[i - 1].named_parameters(f"block{i:02d}.")))
        return out

    def block_outputs(self, x) -> dict[int, Tensor]:
        collect: dict[int, Tensor] = {}
        self.forward(x, collect)
        return collect


class BottleneckEncoder:
    """Two stride-2 convs then adaptive average pooling to the wire shape."""

    def __init__(self, in_channels: int, channels: int, target_hw: tuple[int, int],
                 geometry: DepthNetGeometry, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, 64, 4, 2, 1, rng=rng)
        self.gn1 = GroupNorm(64, norm_groups(64))
        self.conv2 = Conv2d(64, channels, 4, 2, 1, rng=rng)
        self.gn2 = GroupNorm(channels, norm_groups(channels))
        h, w = geometry.input_shape[1:]
        eh, ew = (h + 2 - 4) // 2 + 1, (w + 2 - 4) // 2 + 1
        eh, ew = (eh + 2 - 4) // 2 + 1, (ew + 2 - 4) // 2 + 1
        if target_hw[0] > eh or target_hw[1] > ew:
            raise ConfigurationError(
                f"bottleneck target {target_hw} unreachable from encoder output {(eh, ew)}")
        self.target_hw = target_hw

    def __call__(self, x: Tensor) -> Tensor:
        h = T.selu(self.gn1(self.conv1(x)))
        h = T.selu(self.gn2(self.conv2(h)))
        return T.adaptive_avg_pool2d(h, *self.target_hw)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.conv1.named_parameters(prefix + "conv1.")
        yield from self.gn1.named_parameters(prefix + "gn1.")
        yield from self.conv2.named_parameters(prefix + "conv2.")
        yield from self.gn2.named_parameters(prefix + "gn2.")


class BottleneckDecoder:
    """Mirrors the encoder: upsample + conv twice, out at block 5's shape."""

    def __init__(self, channels: int, target_hw: tuple[int, int], rng: np.random.Generator):
        self.mid_hw = (max(1, target_hw[0] // 2), max(1, target_hw[1] // 2))
        self.target_hw = target_hw
        self.conv1 = Conv2d(channels, 64, 3, 1, 1, rng=rng)
        self.gn1 = GroupNorm(64, norm_groups(64))
        self.conv2 = Conv2d(64, 64, 3, 1, 1, rng=rng)
        self.gn2 = GroupNorm(64, norm_groups(64))

    def __call__(self, x: Tensor) -> Tensor:
        h = T.upsample_nearest(x, *self.mid_hw)
        h = T.selu(self.gn1(self.conv1(h)))
        h = T.upsample_nearest(h, *self.target_hw)
        return T.selu(self.gn2(self.conv2(h)))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.conv1.named_parameters(prefix + "conv1.")
        yield from self.gn1.named_parameters(prefix + "gn1.")
        yield from self.conv2.named_parameters(prefix + "conv2.")
        yield from self.gn2.named_parameters(prefix + "gn2.")


class BottleneckStudent:
    """Encoder/decoder replace blocks 1-5; splits after the encoder."""

    def __init__(self, teacher: TeacherDepthNet, spec: StudentSpec, rng: np.random.Generator):
        if spec.kind != "bottleneck":
            raise ConfigurationError("BottleneckStudent needs a bottleneck spec")
        geometry = teacher.geometry
        self.geometry = geometry
        self.spec = spec
        target_hw = spec.resolve_hw(geometry)
        b5_hw = geometry.block_hw(BOTTLENECK_DECODER_TARGET)
        self.encoder = BottleneckEncoder(geometry.input_shape[0], spec.channels,
                                         target_hw, geometry, rng)
        self.decoder = BottleneckDecoder(spec.channels, b5_hw, rng)
        self.blocks = []
        for i in range(BOTTLENECK_DECODER_TARGET + 1, N_FEATURE_BLOCKS + 1):
            block = FeatureBlock(64, geometry.blocks[i - 1], rng)
            _copy_params(block, teacher.blocks[i - 1])
            self.blocks.append(block)
        self.pred = PredictionBlock(geometry, rng)
        _copy_params(self.pred, teacher.pred)
        self.split_shape = geometry.split_shape(spec)
        self.head_set = BOTTLENECK_HEAD_SET
        self.tail_set = BOTTLENECK_TAIL_SET
        self.kd_set = BOTTLENECK_KD_SET

    @property
    def payload_bytes(self) -> int:
        return int(np.prod(self.split_shape))

    def _tail_from_code(self, code: Tensor, collect: dict[int, Tensor] | None) -> Tensor:
        h = self.decoder(code)
        if collect is not None:
            collect[BOTTLENECK_DECODER_TARGET] = h
        for i, block in enumerate(self.blocks, start=BOTTLENECK_DECODER_TARGET + 1):
            h = block(h)
            if collect is not None:
                collect[i] = h
        depth = _pred_depth(self.pred, h)
        if collect is not None:
            collect[PRED_INDEX] = depth
        return depth

    def forward(self, x, collect: dict[int, Tensor] | None = None) -> Tensor:
        return self._tail_from_code(self.encoder(T.as_tensor(x)), collect)

    __call__ = forward

    def head_forward(self, x) -> QuantizedTensor:
        return quantize(self.encoder(T.as_tensor(x)).data)

    def tail_forward(self, qt: QuantizedTensor) -> Tensor:
        return self._tail_from_code(Tensor(dequantize(qt)), None)

    def forward_quantized(self, x) -> Tensor:
        code = self.encoder(T.as_tensor(x))
        code = Tensor(dequantize(quantize(code.data)))
        return self._tail_from_code(code, None)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.encoder.named_parameters(prefix + "enc.")
        yield from self.decoder.named_parameters(prefix + "dec.")
        for i, block in enumerate(self.blocks, start=BOTTLENECK_DECODER_TARGET + 1):
            yield from block.named_parameters(f"{prefix}block{i:02d}.")
        yield from self.pred.named_parameters(prefix + "pred.")

    def stage_parameters(self, stage: str) -> dict[str, Tensor]:
        if stage == "head":
            out = dict(self.encoder.named_parameters("enc."))
            out.update(dict(self.decoder.named_parameters("dec.")))
            return out
        out = {}
        for i, block in enumerate(self.blocks, start=BOTTLENECK_DECODER_TARGET + 1):
            out.update(dict(block.named_parameters(f"block{i:02d}.")))
        out.update(dict(self.pred.named_parameters("pred.")))
        return out

    def block_outputs(self, x) -> dict[int, Tensor]:
        collect: dict[int, Tensor] = {}
        self.forward(x, collect)
        return collect


def build_student(teacher: TeacherDepthNet, spec: StudentSpec,
                  rng: np.random.Generator):
    if spec.kind == "baseline":
        return BaselineStudent(teacher, spec, rng)
    return BottleneckStudent(teacher, spec, rng)


# ---------------------------------------------------------------------------
# branches


class TeacherOffload:
    """Full offload: the head transmits the quantized RGB image itself."""

    def __init__(self, teacher: TeacherDepthNet):
        self.teacher = teacher
        self.geometry = teacher.geometry
        self.split_shape = teacher.geometry.input_shape

    @property
    def payload_bytes(self) -> int:
        return int(np.prod(self.split_shape))

    def head_forward(self, x) -> QuantizedTensor:
        return quantize(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32))

    def tail_forward(self, qt: QuantizedTensor) -> Tensor:
        return self.teacher.forward(Tensor(dequantize(qt)))

    def forward_quantized(self, x) -> Tensor:
        return self.tail_forward(self.head_forward(x))

    def forward(self, x) -> Tensor:
        return self.teacher.forward(x)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.teacher.named_parameters(prefix)


@dataclass
class Branch:
    """One selectable compression level of the split network."""
    branch_id: int
    name: str
    model: object  # BaselineStudent | BottleneckStudent | TeacherOffload

    @property
    def payload_bytes(self) -> int:
        return self.model.payload_bytes

    @property
    def split_shape(self) -> tuple[int, int, int]:
        return self.model.split_shape

    @property
    def trainable(self) -> bool:
        return not isinstance(self.model, TeacherOffload)

    def infer_depth(self, x) -> np.ndarray:
        """Quantized end-to-end inference, no autodiff graph."""
        with T.no_grad():
            return self.model.forward_quantized(x).data


def build_branches(teacher: TeacherDepthNet, students: list) -> list[Branch]:
    """Assemble the branch menu: students by ascending payload, teacher last.

    Branch ids are assigned 0..n-1 over the sorted students and n for the
    teacher offload, so a larger id always means a heavier transmission.
    """
    order = sorted(range(len(students)), key=lambda i: students[i].payload_bytes)
    branches = [Branch(rank, students[i].spec.name, students[i])
                for rank, i in enumerate(order)]
    payloads = [b.payload_bytes for b in branches]
    if len(set(payloads)) != len(payloads):
        raise ConfigurationError(f"duplicate branch payload sizes: {payloads}")
    offload = TeacherOffload(teacher)
    if payloads and offload.payload_bytes <= payloads[-1]:
        raise ConfigurationError("teacher offload payload must exceed every student's")
    branches.append(Branch(len(branches), "teacher", offload))
    return branches
