"""Multi-branch RepVGG blocks and their single-conv inference form."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError
from .layers import BatchNorm, Conv2d, Layer, ReLU, batchnorm_forward, conv2d_backward, conv2d_forward


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if np.any(np.asarray(self.var) < 0):
            raise InvalidArgumentError("batch-norm variance must be non-negative")

    @classmethod
    def identity(cls, channels: int, eps: float = 0.0, dtype=np.float64) -> "BNParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype), np.zeros(channels, dtype), np.ones(channels, dtype), eps)

    def fold(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel ``(scale, shift)`` such that ``bn(z) = scale * z + shift``."""
        std = np.sqrt(self.var + self.eps)
        scale = self.gamma / std
        return scale, self.beta - self.mean * scale


@dataclass
class RepVggBlockParams:
    """Training-form block: 3x3 conv + BN, 1x1 conv + BN, optional identity BN."""

    w3: np.ndarray  # (C_out, C_in, 3, 3)
    bn3: BNParams
    w1: np.ndarray  # (C_out, C_in, 1, 1)
    bn1: BNParams
    bn_id: BNParams | None = None
    stride: int = 1

    def __post_init__(self):
        c_out, c_in = self.w3.shape[:2]
        if self.w3.shape[2:] != (3, 3) or self.w1.shape != (c_out, c_in, 1, 1):
            raise InvalidArgumentError(f"inconsistent kernels {self.w3.shape} / {self.w1.shape}")
        for bn in (self.bn3, self.bn1):
            if len(bn.gamma) != c_out:
                raise InvalidArgumentError("batch-norm width does not match output channels")
        if self.bn_id is not None:
            if c_in != c_out or self.stride != 1:
                raise InvalidArgumentError("identity branch needs c_in == c_out and stride 1")
            if len(self.bn_id.gamma) != c_out:
                raise InvalidArgumentError("identity batch-norm width does not match channels")


@dataclass
class FusedBlockParams:
    kernel: np.ndarray  # (C_out, C_in, 3, 3)
    bias: np.ndarray  # (C_out,)
    stride: int = 1


def repvgg_block_forward(x: np.ndarray, p: RepVggBlockParams) -> np.ndarray:
    """Inference-mode multi-branch forward: ``relu(bn(conv3x3) + bn(conv1x1) + bn(x))``."""
    if x.ndim != 4 or x.shape[1] != p.w3.shape[1]:
        raise InvalidArgumentError(f"input {x.shape} does not match kernel {p.w3.shape}")
    def bn(z, b):
        return batchnorm_forward(z, b.gamma, b.beta, b.mean, b.var, b.eps)

    out = bn(conv2d_forward(x, p.w3, None, p.stride, 1)[0], p.bn3)
    out = out + bn(conv2d_forward(x, p.w1, None, p.stride, 0)[0], p.bn1)
    if p.bn_id is not None:
        out = out + bn(x, p.bn_id)
    return np.maximum(out, 0)


def fuse_block(p: RepVggBlockParams) -> FusedBlockParams:
    """Fold every branch's batch-norm into its conv and sum the branches into
    one 3x3 kernel and bias."""
    c_out, c_in = p.w3.shape[:2]
    s3, b3 = p.bn3.fold()
    s1, b1 = p.bn1.fold()
    kernel = p.w3 * s3[:, None, None, None]
    kernel = kernel.copy()
    kernel[:, :, 1:2, 1:2] += p.w1 * s1[:, None, None, None]
    bias = b3 + b1
    if p.bn_id is not None:
        si, bi = p.bn_id.fold()
        idx = np.arange(c_out)
        kernel[idx, idx, 1, 1] += si
        bias = bias + bi
    return FusedBlockParams(kernel, bias, p.stride)


def fused_block_forward(x: np.ndarray, f: FusedBlockParams) -> np.ndarray:
    return np.maximum(conv2d_forward(x, f.kernel, f.bias, f.stride, 1)[0], 0)


class RepVGGBlock(Layer):
    kind = "repvgg"

    def __init__(self, c_in, c_out, stride=1, rng=None, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.conv3 = self.add("conv3", Conv2d(c_in, c_out, 3, stride, 1, rng=rng, dtype=dtype))
        self.bn3 = self.add("bn3", BatchNorm(c_out, dtype=dtype))
        self.conv1 = self.add("conv1", Conv2d(c_in, c_out, 1, stride, 0, rng=rng, dtype=dtype))
        self.bn1 = self.add("bn1", BatchNorm(c_out, dtype=dtype))
        self.bn_id = self.add("bn_id", BatchNorm(c_out, dtype=dtype)) if (c_in == c_out and stride == 1) else None
        self.relu = self.add("relu", ReLU())

    def forward(self, x, train=False):
        out = self.bn3.forward(self.conv3.forward(x, train), train)
        out = out + self.bn1.forward(self.conv1.forward(x, train), train)
        if self.bn_id is not None:
            out = out + self.bn_id.forward(x, train)
        return self.relu.forward(out, train)

    def backward(self, dout):
        d = self.relu.backward(dout)
        dx = self.conv3.backward(self.bn3.backward(d))
        dx = dx + self.conv1.backward(self.bn1.backward(d))
        if self.bn_id is not None:
            dx = dx + self.bn_id.backward(d)
        return dx

    def block_params(self) -> RepVggBlockParams:
        def bn(layer):
            return BNParams(
                layer.params["gamma"], layer.params["beta"],
                layer.buffers["running_mean"], layer.buffers["running_var"], layer.eps,
            )

        return RepVggBlockParams(
            self.conv3.params["weight"], bn(self.bn3), self.conv1.params["weight"], bn(self.bn1),
            bn(self.bn_id) if self.bn_id is not None else None, self.stride,
        )


class FusedBlock(Layer):
    """Inference-only 3x3 conv + bias + ReLU."""

    kind = "fused"

    def __init__(self, fused: FusedBlockParams):
        super().__init__()
        self.stride = fused.stride
        self.params["kernel"] = np.ascontiguousarray(fused.kernel)
        self.params["bias"] = np.ascontiguousarray(fused.bias)
        self.zero_grad()

    def forward(self, x, train=False):
        out, self._cache = conv2d_forward(x, self.params["kernel"], self.params["bias"], self.stride, 1)
        self.mask = out > 0
        return np.where(self.mask, out, 0).astype(out.dtype, copy=False)

    def backward(self, dout):
        dx, dw, db = conv2d_backward(np.where(self.mask, dout, 0).astype(dout.dtype, copy=False), self._cache)
        self.grads["kernel"] += dw
        self.grads["bias"] += db
        return dx
