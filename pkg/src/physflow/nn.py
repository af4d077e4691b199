"""Small neural building blocks on top of the gradient tape.

Modules hold their parameters in a flat name -> Tensor dict so the trainer
can read, update, and checkpoint them by dotted path without reflection.
"""

from __future__ import annotations

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor


class Module:
    """Base class: named parameter registry with dotted-path flattening."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def _register(self, name: str, values: np.ndarray) -> None:
        self._params[name] = dm.parameter(values)

    def _adopt(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def p(self, name: str) -> Tensor:
        return self._params[name]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, child in self._children.items():
            out.update(child.named_parameters(prefix=f"{prefix}{name}."))
        return out

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def set_parameters(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        """Rebind parameters from arrays keyed by dotted path."""
        own = self.named_parameters()
        if strict:
            missing = set(own) ^ set(arrays)
            if missing:
                raise KeyError(f"parameter name mismatch: {sorted(missing)}")
        for path, arr in arrays.items():
            node = self
            *parents, leaf = path.split(".")
            for part in parents:
                node = node._children[part]
            if node._params[leaf].shape != arr.shape:
                raise ValueError(f"shape mismatch for {path}: "
                                 f"{node._params[leaf].shape} vs {arr.shape}")
            node._params[leaf] = dm.parameter(arr)

    @property
    def n_parameters(self) -> int:
        return int(np.sum([v.data.size for v in self.named_parameters().values()]))


def glorot(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        w = np.zeros((d_in, d_out)) if zero_init else glorot(rng, (d_in, d_out))
        self._register("w", w)
        self.has_bias = bias
        if bias:
            self._register("b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        y = dm.matmul(x, self.p("w"))
        if self.has_bias:
            y = dm.add(y, self.p("b"))
        return y


class MLP(Module):
    """Linear stack with GELU between layers."""

    def __init__(self, dims: list[int], rng: np.random.Generator,
                 final_zero: bool = False):
        super().__init__()
        self.layers = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            layer = Linear(dims[i], dims[i + 1], rng, zero_init=final_zero and last)
            self._adopt(f"layer{i}", layer)
            self.layers.append(layer)

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = dm.gelu(x)
        return x


class Conv1d(Module):
    """Same-padded conv over [B, C, T]; odd kernel."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        if zero_init:
            w = np.zeros((c_out, c_in, kernel))
        else:
            limit = np.sqrt(6.0 / (c_in * kernel + c_out * kernel))
            w = rng.uniform(-limit, limit, size=(c_out, c_in, kernel))
        self._register("w", w)
        self.has_bias = bias
        if bias:
            self._register("b", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return dm.conv1d(x, self.p("w"), self.p("b") if self.has_bias else None)


class Film(Module):
    """Feature-wise affine modulation of [B, T, C] from a [B, d] context.

    Zero-initialized so modulation starts as identity.
    """

    def __init__(self, d_ctx: int, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self._adopt("proj", Linear(d_ctx, 2 * channels, rng, zero_init=True))

    def __call__(self, x: Tensor, ctx: Tensor) -> Tensor:
        mod = self._children["proj"](ctx)                      # [B, 2C]
        scale = dm.reshape(dm.slice_axis(mod, 1, 0, self.channels),
                           (mod.shape[0], 1, self.channels))
        shift = dm.reshape(dm.slice_axis(mod, 1, self.channels, 2 * self.channels),
                           (mod.shape[0], 1, self.channels))
        return dm.add(dm.mul(x, dm.add(scale, dm.constant(1.0))), shift)


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the max shift is detached (gradient-exact)."""
    m = dm.constant(z.data.max(axis=axis, keepdims=True))
    e = dm.exp(dm.sub(z, m))
    return dm.div(e, dm.sum(e, axis=axis, keepdims=True))


def sinusoidal_embedding(t: float, dim: int) -> np.ndarray:
    """Sin/cos positional features of a scalar flow time in [0, 1]."""
    half = dim // 2
    freqs = np.geomspace(1.0, 1000.0, half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])
