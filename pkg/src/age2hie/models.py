"""Residual 3D convolutional networks with swappable regression/classifier heads.

Models are built from a ModelConfig plus a seeded Generator; every random
draw happens in declaration order, so one (config, seed) pair always yields
bit-identical parameters.  Parameters and batch-norm running buffers are
exposed as ordered (name, value) lists for the optimizer and the checkpoint
writer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from age2hie.ops import batchnorm3d, conv3d, global_avgpool, linear, maxpool3d, relu
from age2hie.tensor import ShapeError, Tensor

# variant -> (block kind, blocks per stage)
BLOCK_PLANS = {
    "resnet18": ("basic", (2, 2, 2, 2)),
    "resnet34": ("basic", (3, 4, 6, 3)),
    "resnet50": ("bottleneck", (3, 4, 6, 3)),
}

BOTTLENECK_EXPANSION = 4

# Volumes with any extent below this keep the stem pool disabled so small
# inputs are not collapsed before the residual stages.
STEM_POOL_MIN_EXTENT = 32


@dataclass
class ModelConfig:
    variant: str = "resnet18"
    in_channels: int = 2
    out_dim: int = 1
    width: int = 64

    def validate(self) -> None:
        if self.variant not in BLOCK_PLANS:
            raise ValueError(
                f"unknown variant {self.variant!r}; choose from {sorted(BLOCK_PLANS)}"
            )
        for field in ("in_channels", "out_dim", "width"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive, got {getattr(self, field)}")


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    scale = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * scale).astype(dtype)


def head_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ConvLayer:
    """Bias-free cubic 3D convolution."""

    def __init__(self, rng, cin: int, cout: int, kernel: int, stride: int,
                 padding: int, dtype):
        fan_in = cin * kernel ** 3
        self.weight = Tensor(he_normal(rng, (cout, cin, kernel, kernel, kernel),
                                       fan_in, dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, stride=self.stride, padding=self.padding)

    def params(self):
        return [("weight", self.weight)]


class BatchNormLayer:
    """Per-channel batch norm with persistent running buffers."""

    def __init__(self, channels: int, dtype, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm3d(x, self.gamma, self.beta, self.running_mean,
                           self.running_var, training,
                           momentum=self.momentum, eps=self.eps)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class LinearLayer:
    """Fully connected head; weight and bias drawn uniform +-1/sqrt(fan_in)."""

    def __init__(self, rng, in_features: int, out_features: int, dtype):
        self.weight = Tensor(head_uniform(rng, (out_features, in_features),
                                          in_features, dtype), requires_grad=True)
        self.bias = Tensor(head_uniform(rng, (out_features,), in_features, dtype),
                           requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class BasicBlock:
    """Two 3x3x3 convolutions with an identity or projected shortcut."""

    def __init__(self, rng, cin: int, cout: int, stride: int, dtype):
        self.conv1 = ConvLayer(rng, cin, cout, 3, stride, 1, dtype)
        self.bn1 = BatchNormLayer(cout, dtype)
        self.conv2 = ConvLayer(rng, cout, cout, 3, 1, 1, dtype)
        self.bn2 = BatchNormLayer(cout, dtype)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = (ConvLayer(rng, cin, cout, 1, stride, 0, dtype),
                             BatchNormLayer(cout, dtype))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        if self.shortcut is not None:
            sc_conv, sc_bn = self.shortcut
            x = sc_bn(sc_conv(x), training)
        return relu(h + x)

    def sublayers(self):
        pairs = [("conv1", self.conv1), ("bn1", self.bn1),
                 ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.shortcut is not None:
            pairs += [("shortcut.conv", self.shortcut[0]),
                      ("shortcut.bn", self.shortcut[1])]
        return pairs


class BottleneckBlock:
    """1x1 reduce, 3x3 spatial (carries the stride), 1x1 expand by 4."""

    def __init__(self, rng, cin: int, mid: int, stride: int, dtype):
        cout = mid * BOTTLENECK_EXPANSION
        self.conv1 = ConvLayer(rng, cin, mid, 1, 1, 0, dtype)
        self.bn1 = BatchNormLayer(mid, dtype)
        self.conv2 = ConvLayer(rng, mid, mid, 3, stride, 1, dtype)
        self.bn2 = BatchNormLayer(mid, dtype)
        self.conv3 = ConvLayer(rng, mid, cout, 1, 1, 0, dtype)
        self.bn3 = BatchNormLayer(cout, dtype)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = (ConvLayer(rng, cin, cout, 1, stride, 0, dtype),
                             BatchNormLayer(cout, dtype))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = relu(self.bn1(self.conv1(x), training))
        h = relu(self.bn2(self.conv2(h), training))
        h = self.bn3(self.conv3(h), training)
        if self.shortcut is not None:
            sc_conv, sc_bn = self.shortcut
            x = sc_bn(sc_conv(x), training)
        return relu(h + x)

    def sublayers(self):
        pairs = [("conv1", self.conv1), ("bn1", self.bn1),
                 ("conv2", self.conv2), ("bn2", self.bn2),
                 ("conv3", self.conv3), ("bn3", self.bn3)]
        if self.shortcut is not None:
            pairs += [("shortcut.conv", self.shortcut[0]),
                      ("shortcut.bn", self.shortcut[1])]
        return pairs


class Model:
    """Stem + four residual stages + global average pool + linear head."""

    def __init__(self, config: ModelConfig, stem_conv, stem_bn, stages, head, dtype):
        self.config = config
        self.stem_conv = stem_conv
        self.stem_bn = stem_bn
        self.stages = stages
        self.head = head
        self.dtype = dtype

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 5:
            raise ShapeError(f"model input must be (N, C, D, H, W), got {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"model expects {self.config.in_channels} channels, got {x.shape[1]}"
            )
        use_stem_pool = min(x.shape[2:]) >= STEM_POOL_MIN_EXTENT
        h = relu(self.stem_bn(self.stem_conv(x), training))
        if use_stem_pool:
            h = maxpool3d(h, kernel=3, stride=2, padding=1)
        for blocks in self.stages:
            for block in blocks:
                h = block(h, training)
        return self.head(global_avgpool(h))

    def features(self, x: Tensor, training: bool = False) -> Tensor:
        """Pooled feature vector (N, F) just before the head."""
        use_stem_pool = min(x.shape[2:]) >= STEM_POOL_MIN_EXTENT
        h = relu(self.stem_bn(self.stem_conv(x), training))
        if use_stem_pool:
            h = maxpool3d(h, kernel=3, stride=2, padding=1)
        for blocks in self.stages:
            for block in blocks:
                h = block(h, training)
        return global_avgpool(h)

    @property
    def feature_width(self) -> int:
        return self.head.weight.shape[1]

    def _layer_walk(self):
        yield "stem.conv", self.stem_conv
        yield "stem.bn", self.stem_bn
        for i, blocks in enumerate(self.stages, start=1):
            for j, block in enumerate(blocks):
                for sub, layer in block.sublayers():
                    yield f"layer{i}.{j}.{sub}", layer
        yield "head", self.head

    def named_params(self):
        out = []
        for prefix, layer in self._layer_walk():
            for name, t in layer.params():
                out.append((f"{prefix}.{name}", t))
        return out

    def named_buffers(self):
        out = []
        for prefix, layer in self._layer_walk():
            if hasattr(layer, "buffers"):
                for name, b in layer.buffers():
                    out.append((f"{prefix}.{name}", b))
        return out


def build_model(config: ModelConfig, seed, dtype=np.float32) -> Model:
    """Construct and initialize a model; `seed` is an int or a Generator."""
    config.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    kind, plan = BLOCK_PLANS[config.variant]
    w = config.width

    stem_conv = ConvLayer(rng, config.in_channels, w, 7, 2, 3, dtype)
    stem_bn = BatchNormLayer(w, dtype)

    stages = []
    cin = w
    for i, nblocks in enumerate(plan):
        stage_width = w * (2 ** i)
        blocks = []
        for j in range(nblocks):
            stride = 2 if (i > 0 and j == 0) else 1
            if kind == "basic":
                block = BasicBlock(rng, cin, stage_width, stride, dtype)
                cin = stage_width
            else:
                block = BottleneckBlock(rng, cin, stage_width, stride, dtype)
                cin = stage_width * BOTTLENECK_EXPANSION
            blocks.append(block)
        stages.append(blocks)

    head = LinearLayer(rng, cin, config.out_dim, dtype)
    return Model(config, stem_conv, stem_bn, stages, head, dtype)


def replace_head(model: Model, out_dim: int, rng: np.random.Generator) -> None:
    """Swap in a freshly initialized head with `out_dim` outputs."""
    model.head = LinearLayer(rng, model.feature_width, out_dim, model.dtype)
    model.config.out_dim = out_dim


def set_trainable(model: Model, mode: str) -> None:
    """'all' trains every parameter; 'head_only' freezes everything else."""
    if mode not in ("all", "head_only"):
        raise ValueError(f"unknown trainable mode {mode!r}")
    head_params = {id(t) for _, t in model.head.params()}
    for _, t in model.named_params():
        t.requires_grad = mode == "all" or id(t) in head_params


def trainable_params(model: Model):
    return [(name, t) for name, t in model.named_params() if t.requires_grad]


def param_checksum(model: Model, include_head: bool = True) -> str:
    """SHA-256 over parameter bytes in declaration order.

    Batch-norm running buffers are deliberately excluded: they keep updating
    while the parameters are frozen, and the freeze contract covers only
    trainable parameters.
    """
    digest = hashlib.sha256()
    for name, t in model.named_params():
        if not include_head and name.startswith("head."):
            continue
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(t.data).tobytes())
    return digest.hexdigest()
