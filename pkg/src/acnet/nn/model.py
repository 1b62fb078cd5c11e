"""Two-branch localization / quantification network.

Task 1 (location) reads a RepVGG trunk over the grayscale spectrogram stack.
Task 2 (SPL) reads the trunk features concatenated with a shallow 1-D conv
branch over the decimated raw waveforms, which keeps the absolute level that
the normalized spectrograms discard.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import InvalidArgumentError
from .layers import Conv1d, Dense, GlobalAvgPool, Layer, ReLU, Sequential
from .repvgg import BNParams, FusedBlock, FusedBlockParams, RepVGGBlock, RepVggBlockParams, fuse_block


@dataclass
class ModelConfig:
    stage_layers: tuple[int, ...] = (1, 2, 2, 2, 1)
    stage_widths: tuple[int, ...] = (8, 8, 16, 32, 64)
    in_mics: int = 56
    in_h: int = 64
    in_w: int = 64
    raw_decimation: int = 8
    branch_channels: tuple[int, int, int] = (16, 32, 32)
    branch_kernel: int = 7
    branch_stride: int = 4
    branch_hidden: tuple[int, int, int] = (32, 32, 32)
    position_scale: float = 1.5
    # source levels span roughly 68-94 dB; centering them near zero keeps the
    # SPL residual on the same scale as the position residual
    spl_scale: float = 10.0
    spl_offset: float = 80.0
    center_input: bool = True

    def __post_init__(self):
        self.stage_layers = tuple(int(v) for v in self.stage_layers)
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        self.branch_channels = tuple(int(v) for v in self.branch_channels)
        self.branch_hidden = tuple(int(v) for v in self.branch_hidden)
        if len(self.stage_layers) != 5 or len(self.stage_widths) != 5:
            raise InvalidArgumentError("the trunk has exactly 5 stages")
        if min(self.stage_layers) < 1 or min(self.stage_widths) < 1:
            raise InvalidArgumentError("stage layer counts and widths must be positive")
        if len(self.branch_channels) != 3 or len(self.branch_hidden) != 3:
            raise InvalidArgumentError("the 1-D branch has 3 conv layers and 3 hidden dense layers")

    @classmethod
    def repvgg_b0(cls, in_h: int = 128, in_w: int = 128) -> "ModelConfig":
        """Full-size trunk: layers [1, 4, 6, 16, 1] with RepVGG-B0 widths."""
        return cls((1, 4, 6, 16, 1), (64, 64, 128, 256, 1280), in_h=in_h, in_w=in_w)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


class AcousticNet(Layer):
    """Outputs are normalized: ``(x / position_scale, y / position_scale,
    (spl - spl_offset) / spl_scale)``; :meth:`predict` converts back to meters
    and dB."""

    kind = "model"

    def __init__(self, cfg: ModelConfig = None, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.fused = False
        rng = np.random.default_rng(seed)
        blocks = []
        c_in = cfg.in_mics
        for n_layers, width in zip(cfg.stage_layers, cfg.stage_widths):
            for i in range(n_layers):
                blocks.append(RepVGGBlock(c_in, width, 2 if i == 0 else 1, rng=rng, dtype=dtype))
                c_in = width
        self.trunk = self.add("trunk", Sequential(blocks))
        self.pool = self.add("pool", GlobalAvgPool())
        self.loc_head = self.add("loc_head", Dense(c_in, 2, rng=rng, dtype=dtype))

        k, s = cfg.branch_kernel, cfg.branch_stride
        c1, c2, c3 = cfg.branch_channels
        h1, h2, h3 = cfg.branch_hidden
        self.branch = self.add("branch", Sequential([
            Conv1d(cfg.in_mics, c1, k, s, rng=rng, dtype=dtype), ReLU(),
            Conv1d(c1, c2, k, s, rng=rng, dtype=dtype), ReLU(),
            Conv1d(c2, c3, k, s, rng=rng, dtype=dtype), ReLU(),
            GlobalAvgPool(),
            Dense(c3, h1, rng=rng, dtype=dtype), ReLU(),
            Dense(h1, h2, rng=rng, dtype=dtype), ReLU(),
            Dense(h2, h3, rng=rng, dtype=dtype), ReLU(),
        ]))
        self.spl_head = self.add("spl_head", Dense(c_in + h3, 1, rng=rng, dtype=dtype))
        self.n_features = c_in

    def _check(self, stacks, raws):
        cfg = self.cfg
        if stacks.ndim != 4 or stacks.shape[1:] != (cfg.in_mics, cfg.in_h, cfg.in_w):
            raise InvalidArgumentError(
                f"stack batch must be (N, {cfg.in_mics}, {cfg.in_h}, {cfg.in_w}), got {stacks.shape}"
            )
        if raws.ndim != 3 or raws.shape[0] != stacks.shape[0] or raws.shape[1] != cfg.in_mics:
            raise InvalidArgumentError(f"raw batch must be (N, {cfg.in_mics}, T), got {raws.shape}")

    def forward(self, stacks, raws, train=False):
        """``stacks``: ``(N, mics, H, W)``; ``raws``: ``(N, mics, T)``.  Returns ``(N, 3)``."""
        stacks = np.asarray(stacks, dtype=self.dtype)
        raws = np.asarray(raws, dtype=self.dtype)
        self._check(stacks, raws)
        if self.cfg.center_input:
            # the joint min-max scaling leaves a per-sample offset that carries no
            # location information; removing it keeps batch and running BN
            # statistics close
            stacks = stacks - stacks.mean(axis=(1, 2, 3), keepdims=True)
        feat = self.pool.forward(self.trunk.forward(stacks, train), train)
        loc = self.loc_head.forward(feat, train)
        amp = self.branch.forward(raws, train)
        spl = self.spl_head.forward(np.concatenate([feat, amp], axis=1), train)
        return np.concatenate([loc, spl], axis=1)

    def backward(self, dout):
        """Backpropagates ``dL/doutput`` and returns gradients w.r.t. both inputs."""
        dout = np.asarray(dout, dtype=self.dtype)
        dcat = self.spl_head.backward(dout[:, 2:3])
        dfeat = self.loc_head.backward(dout[:, 0:2]) + dcat[:, : self.n_features]
        draw = self.branch.backward(dcat[:, self.n_features :])
        dstack = self.trunk.backward(self.pool.backward(dfeat))
        if self.cfg.center_input:
            dstack = dstack - dstack.mean(axis=(1, 2, 3), keepdims=True)
        return dstack, draw

    def astype(self, dtype) -> "AcousticNet":
        super().astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def _affine(self):
        cfg = self.cfg
        return np.array([cfg.position_scale, cfg.position_scale, cfg.spl_scale]), np.array([0.0, 0.0, cfg.spl_offset])

    def denormalize(self, out: np.ndarray) -> np.ndarray:
        scale, offset = self._affine()
        return np.asarray(out, dtype=np.float64) * scale + offset

    def normalize_targets(self, targets: np.ndarray) -> np.ndarray:
        scale, offset = self._affine()
        return ((np.asarray(targets, dtype=np.float64) - offset) / scale).astype(self.dtype)

    def predict(self, stacks, raws) -> np.ndarray:
        """Inference in physical units: rows of ``(x [m], y [m], SPL [dB])``."""
        return self.denormalize(self.forward(stacks, raws, train=False))

    def fuse(self) -> "AcousticNet":
        """Copy with every trunk block folded into a single 3x3 conv.

        Folding runs in float64 and is cast back to the model dtype once.
        """
        net = fused_skeleton(self.cfg, self.dtype)
        for (_, dst), (_, src) in zip(net.trunk.children, self.trunk.children):
            if isinstance(src, FusedBlock):
                kernel, bias = src.params["kernel"], src.params["bias"]
            else:
                f = fuse_block(_as_float64(src.block_params()))
                kernel, bias = f.kernel, f.bias
            dst.params["kernel"][...] = kernel
            dst.params["bias"][...] = bias
        for name in ("loc_head", "branch", "spl_head"):
            getattr(net, name).load_state_dict(getattr(self, name).state_dict())
        return net


def _as_float64(p: RepVggBlockParams) -> RepVggBlockParams:
    def bn(b):
        if b is None:
            return None
        return BNParams(*(np.asarray(a, np.float64) for a in (b.gamma, b.beta, b.mean, b.var)), b.eps)

    return RepVggBlockParams(
        p.w3.astype(np.float64), bn(p.bn3), p.w1.astype(np.float64), bn(p.bn1), bn(p.bn_id), p.stride
    )


def fused_skeleton(cfg: ModelConfig, dtype=np.float32) -> AcousticNet:
    """Fused-form network with placeholder weights, for loading checkpoints."""
    net = AcousticNet(cfg, seed=0, dtype=dtype)
    blocks = []
    for _, b in net.trunk.children:
        w = b.conv3.params["weight"]
        blocks.append(FusedBlock(FusedBlockParams(np.zeros_like(w), np.zeros(w.shape[0], dtype=w.dtype), b.stride)))
    net.trunk.children = [(str(i), blk) for i, blk in enumerate(blocks)]
    net.fused = True
    return net
