"""Multi-task U-Net: encoder/decoder with skip connections, a one-channel
segmentation head and a bottleneck classification branch.

The model is a plain container of named parameter tensors plus batchnorm
running statistics; the forward pass rebuilds the differentiation graph
on every call.  Models serialize to a small binary format (magic "FBMT").
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor


class OrganClass(enum.IntEnum):
    """The three organ classes the classifier distinguishes."""

    BRAIN = 0
    ABDOMEN = 1
    FEMUR = 2


ORGAN_NAMES = {OrganClass.BRAIN: "brain", OrganClass.ABDOMEN: "abdomen",
               OrganClass.FEMUR: "femur"}
ORGAN_BY_NAME = {v: k for k, v in ORGAN_NAMES.items()}


@dataclass(frozen=True)
class UNetConfig:
    """Architecture hyperparameters.

    ``depth`` is the number of downsampling steps; channel count at level k
    is ``base_channels * 2**k``.  ``input_size`` is the square image side.
    """

    depth: int = 3
    base_channels: int = 8
    input_size: int = 64
    num_classes: int = 3

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.num_classes != 3:
            raise ValueError(f"num_classes must be 3, got {self.num_classes}")
        if self.input_size < 2 or self.input_size % (1 << self.depth) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^depth={1 << self.depth}")


@dataclass
class MultiTaskOutput:
    """Both network heads for one batch."""

    seg_logits: Tensor   # [N, 1, H, W]
    class_logits: Tensor  # [N, num_classes]


class ModelFormatError(ValueError):
    """Base class for model-file problems."""


class ModelMagicError(ModelFormatError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class ModelTruncatedError(ModelFormatError):
    pass


_MAGIC = b"FBMT"
_VERSION = 1


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _ConvBlock:
    """3x3 conv -> batchnorm -> ReLU."""

    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator):
        self.name = name
        self.weight = Tensor(_he_uniform(rng, (cout, cin, 3, 3), cin * 9), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.gamma = Tensor(np.ones(cout), requires_grad=True)
        self.beta = Tensor(np.zeros(cout), requires_grad=True)
        self.bn = BatchNormState(cout)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias, padding=1, stride=1)
        return T.relu(T.batchnorm2d(y, self.gamma, self.beta, self.bn, mode))

    def params(self):
        n = self.name
        return [(n + ".weight", self.weight), (n + ".bias", self.bias),
                (n + ".gamma", self.gamma), (n + ".beta", self.beta)]


class UNetModel:
    """Configurable-depth U-Net with a bottleneck classification branch.

    Parameter declaration order is fixed and shared by initialization,
    serialization and the optimizer: encoder levels (shallow to deep),
    bottleneck, decoder levels (deep to shallow, up-projection first),
    segmentation head, classifier FC.
    """

    def __init__(self, config: UNetConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        ch = [config.base_channels * (1 << k) for k in range(config.depth + 1)]

        self.enc: list[tuple[_ConvBlock, _ConvBlock]] = []
        cin = 1
        for k in range(config.depth):
            b1 = _ConvBlock(f"enc{k}.block1", cin, ch[k], rng)
            b2 = _ConvBlock(f"enc{k}.block2", ch[k], ch[k], rng)
            self.enc.append((b1, b2))
            cin = ch[k]

        self.bottleneck = (
            _ConvBlock("bottleneck.block1", ch[config.depth - 1], ch[config.depth], rng),
            _ConvBlock("bottleneck.block2", ch[config.depth], ch[config.depth], rng),
        )

        # decoder level k: upsample + 3x3 conv halving channels, concat the
        # encoder skip, then two conv blocks
        self.dec: list[tuple[Tensor, Tensor, _ConvBlock, _ConvBlock]] = []
        for k in reversed(range(config.depth)):
            up_w = Tensor(_he_uniform(rng, (ch[k], ch[k + 1], 3, 3), ch[k + 1] * 9),
                          requires_grad=True)
            up_b = Tensor(np.zeros(ch[k]), requires_grad=True)
            b1 = _ConvBlock(f"dec{k}.block1", 2 * ch[k], ch[k], rng)
            b2 = _ConvBlock(f"dec{k}.block2", ch[k], ch[k], rng)
            self.dec.append((up_w, up_b, b1, b2))

        self.seg_w = Tensor(_he_uniform(rng, (1, ch[0], 1, 1), ch[0]), requires_grad=True)
        self.seg_b = Tensor(np.zeros(1), requires_grad=True)

        bottleneck_side = config.input_size >> config.depth
        feat = ch[config.depth] * bottleneck_side * bottleneck_side
        self.fc_w = Tensor(_he_uniform(rng, (feat, config.num_classes), feat),
                           requires_grad=True)
        self.fc_b = Tensor(np.zeros(config.num_classes), requires_grad=True)

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for b1, b2 in self.enc:
            out += b1.params() + b2.params()
        out += self.bottleneck[0].params() + self.bottleneck[1].params()
        for k, (up_w, up_b, b1, b2) in enumerate(self.dec):
            lvl = self.config.depth - 1 - k
            out += [(f"dec{lvl}.up.weight", up_w), (f"dec{lvl}.up.bias", up_b)]
            out += b1.params() + b2.params()
        out += [("seg_head.weight", self.seg_w), ("seg_head.bias", self.seg_b),
                ("classifier.weight", self.fc_w), ("classifier.bias", self.fc_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def bn_states(self) -> list[BatchNormState]:
        out = []
        for b1, b2 in self.enc:
            out += [b1.bn, b2.bn]
        out += [self.bottleneck[0].bn, self.bottleneck[1].bn]
        for _, _, b1, b2 in self.dec:
            out += [b1.bn, b2.bn]
        return out

    def decoder_parameters(self) -> list[Tensor]:
        """Decoder plus segmentation head: untouched when lambda = 1."""
        out = []
        for up_w, up_b, b1, b2 in self.dec:
            out += [up_w, up_b] + [t for _, t in b1.params() + b2.params()]
        return out + [self.seg_w, self.seg_b]

    def classifier_parameters(self) -> list[Tensor]:
        """Classification head: untouched when lambda = 0."""
        return [self.fc_w, self.fc_b]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward --------------------------------------------------------------

    def forward(self, images: Tensor, mode: str = "train") -> MultiTaskOutput:
        cfg = self.config
        if images.data.ndim != 4 or images.shape[1] != 1:
            raise T.ShapeError(f"expected images of shape [N,1,H,W], got {images.shape}")
        if images.shape[2] != cfg.input_size or images.shape[3] != cfg.input_size:
            raise T.ShapeError(
                f"expected {cfg.input_size}x{cfg.input_size} images, "
                f"got {images.shape[2]}x{images.shape[3]}")

        skips = []
        x = images
        for b1, b2 in self.enc:
            x = b2(b1(x, mode), mode)
            skips.append(x)
            x = T.maxpool2x2(x)

        x = self.bottleneck[1](self.bottleneck[0](x, mode), mode)
        bottleneck = x

        for (up_w, up_b, b1, b2), skip in zip(self.dec, reversed(skips)):
            x = T.conv2d(T.upsample2x_nearest(x), up_w, up_b, padding=1, stride=1)
            x = T.concat_channels([x, skip])
            x = b2(b1(x, mode), mode)

        seg_logits = T.conv2d(x, self.seg_w, self.seg_b, padding=0, stride=1)
        class_logits = T.matmul(T.flatten(bottleneck), self.fc_w) + self.fc_b
        return MultiTaskOutput(seg_logits=seg_logits, class_logits=class_logits)


def build_unet(config: UNetConfig, rng_seed: int) -> UNetModel:
    """Build a model with He-uniform weights drawn deterministically from the seed."""
    return UNetModel(config, np.random.default_rng(rng_seed))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _tensor_bytes(arr: np.ndarray) -> bytes:
    parts = [struct.pack("<I", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def save_model(model: UNetModel, path: str) -> None:
    """Write the model to ``path`` atomically (temp file + rename)."""
    cfg = model.config
    params = model.named_parameters()
    blob = [
        _MAGIC,
        struct.pack("<B", _VERSION),
        struct.pack("<5I", cfg.depth, cfg.base_channels, cfg.input_size,
                    cfg.num_classes, len(params)),
    ]
    for _, t in params:
        blob.append(_tensor_bytes(t.data))
    for st in model.bn_states():
        blob.append(_tensor_bytes(st.running_mean))
        blob.append(_tensor_bytes(st.running_var))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(blob))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, expected_total: int | None = None):
        self.data = data
        self.pos = 0
        self.expected_total = expected_total

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            expect = self.expected_total if self.expected_total is not None else self.pos + n
            raise ModelTruncatedError(
                f"model file truncated: have {len(self.data)} bytes, "
                f"expected {expect}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def read_array(self, shape: tuple[int, ...]) -> np.ndarray:
        rank = struct.unpack("<I", self.take(4))[0]
        if rank != len(shape):
            raise ModelFormatError(f"tensor rank {rank} does not match expected {shape}")
        extents = struct.unpack(f"<{rank}I", self.take(4 * rank))
        if tuple(extents) != tuple(shape):
            raise ModelFormatError(f"tensor shape {extents} does not match expected {shape}")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape)
        return arr.copy()


def _expected_file_size(model: UNetModel) -> int:
    size = 4 + 1 + 20
    arrays = [t.data for _, t in model.named_parameters()]
    for st in model.bn_states():
        arrays += [st.running_mean, st.running_var]
    for a in arrays:
        size += 4 + 4 * a.ndim + 8 * a.size
    return size


def load_model(path: str) -> UNetModel:
    """Load a model saved by :func:`save_model`; round-trip is bit-exact."""
    with open(path, "rb") as fh:
        raw = fh.read()
    rd = _Reader(raw)
    if rd.take(4) != _MAGIC:
        raise ModelMagicError(f"bad magic in {path}: not a model file")
    version = struct.unpack("<B", rd.take(1))[0]
    if version != _VERSION:
        raise ModelVersionError(f"unsupported model version {version}, expected {_VERSION}")
    depth, base, size, ncls, nparams = struct.unpack("<5I", rd.take(20))
    config = UNetConfig(depth=depth, base_channels=base, input_size=size, num_classes=ncls)
    model = build_unet(config, rng_seed=0)
    params = model.named_parameters()
    if nparams != len(params):
        raise ModelFormatError(
            f"parameter tensor count {nparams} does not match architecture "
            f"({len(params)} expected)")
    rd.expected_total = _expected_file_size(model)
    for _, t in params:
        t.data = rd.read_array(t.shape)
    for st in model.bn_states():
        st.running_mean = rd.read_array(st.running_mean.shape)
        st.running_var = rd.read_array(st.running_var.shape)
    return model
