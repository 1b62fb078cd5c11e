"""Numpy layers with explicit backward passes.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
Arrays follow the batch-first layout: ``(N, C, H, W)`` for images and
``(N, C, L)`` for sequences.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgumentError


# -- functional kernels ------------------------------------------------------


def _out_len(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, pad: int = 0):
    """Cross-correlation with zero padding.  Returns ``(out, cache)``."""
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidArgumentError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    if c != c2:
        raise InvalidArgumentError(f"input has {c} channels, kernel expects {c2}")
    pad_h = pad if kh > 1 else 0
    ho, wo = _out_len(h, kh, stride, pad_h), _out_len(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise InvalidArgumentError(f"input {h}x{wd} too small for kernel {kh}x{kw}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad, pad))) if (pad or pad_h) else x
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    out = (w.reshape(f, -1) @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.reshape(1, f, 1, 1)
    return np.ascontiguousarray(out), (x.shape, xp.shape, w, cols, stride, pad_h, pad, b is not None)


def conv2d_backward(dout: np.ndarray, cache):
    """Returns ``(dx, dw, db)``; ``db`` is ``None`` for bias-free convs."""
    x_shape, xp_shape, w, cols, stride, pad_h, pad, has_bias = cache
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    _, _, ho, wo = dout.shape
    d2 = dout.transpose(1, 0, 2, 3).reshape(f, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1) if has_bias else None
    dcols = (w.reshape(f, -1).T @ d2).reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
    dx = dxp[:, :, pad_h : pad_h + h, pad : pad + wd]
    return dx, dw, db


def conv1d_forward(x, w, b, stride=1, pad=0):
    """1-D conv as a height-1 2-D conv: ``x`` is ``(N, C, L)``, ``w`` is ``(F, C, k)``."""
    if x.ndim != 3 or w.ndim != 3:
        raise InvalidArgumentError(f"conv1d expects 3-D input and kernel, got {x.shape}, {w.shape}")
    out, cache = conv2d_forward(x[:, :, None, :], w[:, :, None, :], b, stride, pad)
    return out[:, :, 0, :], cache


def conv1d_backward(dout, cache):
    dx, dw, db = conv2d_backward(dout[:, :, None, :], cache)
    return dx[:, :, 0, :], dw[:, :, 0, :], db


def batchnorm_forward(x, gamma, beta, mean, var, eps=1e-5):
    """Inference-mode batch-norm with fixed statistics, channel axis 1."""
    shape = (1, -1) + (1,) * (x.ndim - 2)
    scale = gamma / np.sqrt(var + eps)
    return (x - mean.reshape(shape)) * scale.reshape(shape) + beta.reshape(shape)


# -- layers ------------------------------------------------------------------


class Layer:
    """Container protocol: ``params``/``grads``/``buffers`` dicts plus named
    children, addressed with dotted names."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: list[tuple[str, Layer]] = []

    def add(self, name: str, layer: "Layer") -> "Layer":
        self.children.append((name, layer))
        return layer

    def named_layers(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, child in self.children:
            yield from child.named_layers(f"{prefix}{name}.")

    def named_params(self, prefix: str = ""):
        for layer_name, layer in self.named_layers(prefix):
            base = f"{layer_name}." if layer_name else ""
            for k, v in layer.params.items():
                yield base + k, v

    def named_grads(self, prefix: str = ""):
        for layer_name, layer in self.named_layers(prefix):
            base = f"{layer_name}." if layer_name else ""
            for k in layer.params:
                yield base + k, layer.grads[k]

    def named_buffers(self, prefix: str = ""):
        for layer_name, layer in self.named_layers(prefix):
            base = f"{layer_name}." if layer_name else ""
            for k, v in layer.buffers.items():
                yield base + k, v

    def param_kinds(self) -> dict[str, str]:
        out = {}
        for layer_name, layer in self.named_layers():
            base = f"{layer_name}." if layer_name else ""
            for k in layer.params:
                out[base + k] = layer.kind
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = dict(self.named_params())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = self.state_dict()
        missing = set(mine) - set(state)
        extra = set(state) - set(mine)
        if missing or extra:
            raise InvalidArgumentError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in mine.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise InvalidArgumentError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def zero_grad(self) -> None:
        for _, layer in self.named_layers():
            for k, v in layer.params.items():
                layer.grads[k] = np.zeros_like(v)

    def astype(self, dtype) -> "Layer":
        for _, layer in self.named_layers():
            for d in (layer.params, layer.buffers):
                for k in d:
                    d[k] = d[k].astype(dtype)
            layer.grads = {k: np.zeros_like(v) for k, v in layer.params.items()}
        return self


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, c_in, c_out, k, stride=1, pad=None, bias=False, rng=None, dtype=np.float32):
        super().__init__()
        if stride not in (1, 2):
            raise InvalidArgumentError(f"stride must be 1 or 2, got {stride}")
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        if self.pad not in (0, k // 2):
            raise InvalidArgumentError(f"pad must be 0 or {k // 2}")
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = he_normal(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
        if bias:
            self.params["bias"] = np.zeros(c_out, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=False):
        out, self._cache = conv2d_forward(x, self.params["weight"], self.params.get("bias"), self.stride, self.pad)
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._cache)
        self.grads["weight"] += dw
        if db is not None:
            self.grads["bias"] += db
        return dx


class Conv1d(Layer):
    kind = "conv1d"

    def __init__(self, c_in, c_out, k, stride=1, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        self.stride = stride
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = he_normal(rng, (c_out, c_in, k), c_in * k, dtype)
        if bias:
            self.params["bias"] = np.zeros(c_out, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=False):
        out, self._cache = conv1d_forward(x, self.params["weight"], self.params.get("bias"), self.stride, 0)
        return out

    def backward(self, dout):
        dx, dw, db = conv1d_backward(dout, self._cache)
        self.grads["weight"] += dw
        if db is not None:
            self.grads["bias"] += db
        return dx


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["weight"] = he_normal(rng, (n_in, n_out), n_in, dtype)
        self.params["bias"] = np.zeros(n_out, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.params["weight"].shape[0]:
            raise InvalidArgumentError(f"dense expects (N, {self.params['weight'].shape[0]}), got {x.shape}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dout):
        self.grads["weight"] += self._x.T @ dout
        self.grads["bias"] += dout.sum(axis=0)
        return dout @ self.params["weight"].T


class BatchNorm(Layer):
    """Per-channel normalization over every axis except 1.

    Training mode normalizes with batch statistics (biased variance) and
    updates the running estimates as ``running = m * running + (1 - m) * batch``
    with ``m = momentum`` (unbiased variance in the running estimate).
    """

    kind = "batchnorm"

    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float32):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.zero_grad()

    def _bshape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, train=False):
        shape = self._bshape(x)
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not train:
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            xhat = (x - self.buffers["running_mean"].reshape(shape)) * inv_std.reshape(shape)
            self._cache = ("eval", xhat, inv_std)
            return xhat * gamma.reshape(shape) + beta.reshape(shape)
        axes = (0,) + tuple(range(2, x.ndim))
        m = x.size // x.shape[1]
        mu = x.mean(axis=axes)
        xc = x - mu.reshape(shape)
        var = (xc * xc).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv_std.reshape(shape)
        mom = self.momentum
        unbiased = var * (m / max(m - 1, 1))
        self.buffers["running_mean"] = (mom * self.buffers["running_mean"] + (1 - mom) * mu).astype(x.dtype)
        self.buffers["running_var"] = (mom * self.buffers["running_var"] + (1 - mom) * unbiased).astype(x.dtype)
        self._cache = ("train", xhat, inv_std, axes, m)
        return xhat * gamma.reshape(shape) + beta.reshape(shape)

    def backward(self, dout):
        shape = self._bshape(dout)
        gamma = self.params["gamma"]
        axes = (0,) + tuple(range(2, dout.ndim))
        if self._cache[0] == "eval":
            _, xhat, inv_std = self._cache
            self.grads["gamma"] += (dout * xhat).sum(axis=axes)
            self.grads["beta"] += dout.sum(axis=axes)
            return dout * (gamma * inv_std).reshape(shape)
        _, xhat, inv_std, axes, m = self._cache
        self.grads["gamma"] += (dout * xhat).sum(axis=axes)
        self.grads["beta"] += dout.sum(axis=axes)
        dxhat = dout * gamma.reshape(shape)
        s1 = dxhat.sum(axis=axes).reshape(shape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(shape)
        return (inv_std.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout):
        return np.where(self.mask, dout, 0).astype(dout.dtype, copy=False)


class GlobalAvgPool(Layer):
    """Mean over every axis after the channel axis: ``(N, C, ...) -> (N, C)``."""

    kind = "pool"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=-1)

    def backward(self, dout):
        n_spatial = int(np.prod(self._shape[2:]))
        return np.broadcast_to((dout / n_spatial).reshape(dout.shape + (1,) * (len(self._shape) - 2)), self._shape).copy()


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers=()):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add(str(i), layer)

    def forward(self, x, train=False):
        for _, layer in self.children:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for _, layer in reversed(self.children):
            dout = layer.backward(dout)
        return dout
