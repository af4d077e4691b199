"""Spectral convolution layers and the four-level hierarchical operator bank.

Each level is an independent stack of spectral layers restricted to its own
frequency band, with a pointwise physical-space bypass. Level outputs are
blended by condition-adaptive simplex weights into the integrated prediction
``u_fno``, the physics-corrected estimate of the input trajectory.

Bands over the retained-mode budget M = floor(T/2)+1:

    level 1 (conservation, depth 4):  [0, M/4)       low frequencies
    level 2 (dynamics,     depth 3):  [M/8, M/2)     mid band
    level 3 (boundary,     depth 2):  [M/4, M)       high band
    level 4 (empirical,    depth 2):  [0, M)         full spectrum
"""

from __future__ import annotations

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .nn import Linear, MLP, Module, softmax

LEVEL_DEPTHS = {1: 4, 2: 3, 3: 2, 4: 2}
DEFAULT_WIDTH = 32


def band_bounds(level: int, n_modes: int) -> tuple[int, int]:
    """Absolute [lo, hi) retained-mode range for a hierarchy level."""
    if level == 1:
        return 0, n_modes // 4
    if level == 2:
        return n_modes // 8, n_modes // 2
    if level == 3:
        return n_modes // 4, n_modes
    if level == 4:
        return 0, n_modes
    raise ValueError(f"invalid hierarchy level {level}; expected 1..4")


class SpectralConvLayer(Module):
    """y = irfft(R * band(rfft(u))) + u W, complex weights stored as re/im planes."""

    def __init__(self, c_in: int, c_out: int, mode_lo: int, mode_hi: int,
                 rng: np.random.Generator):
        super().__init__()
        if mode_lo < 0 or mode_hi < mode_lo:
            raise ValueError(f"bad mode band [{mode_lo}, {mode_hi})")
        self.c_in = c_in
        self.c_out = c_out
        self.mode_lo = mode_lo
        self.mode_hi = mode_hi
        n_modes = mode_hi - mode_lo
        scale = 1.0 / (c_in * c_out)
        self._register("r_re", rng.uniform(-scale, scale, size=(n_modes, c_in, c_out)))
        self._register("r_im", rng.uniform(-scale, scale, size=(n_modes, c_in, c_out)))
        self._register("w", rng.uniform(-scale, scale, size=(c_in, c_out)))

    def __call__(self, u: Tensor) -> Tensor:
        if u.ndim != 3 or u.shape[2] != self.c_in:
            raise dm.ShapeError("spectral_conv", u.shape, (None, None, self.c_in))
        b, t, _ = u.shape
        half = t // 2 + 1
        if self.mode_hi > half:
            raise ValueError(
                f"retained modes [{self.mode_lo}, {self.mode_hi}) exceed spectrum "
                f"length {half} for input length {t}")
        bypass = dm.matmul(u, self.p("w"))
        if self.mode_hi == self.mode_lo:
            return bypass
        z = dm.rfft(u, axis=1)
        zb = dm.slice_axis(z, 1, self.mode_lo, self.mode_hi)
        mixed = dm.mode_matmul(zb, dm.to_complex(self.p("r_re"), self.p("r_im")))
        parts = []
        if self.mode_lo > 0:
            parts.append(dm.constant(np.zeros((b, self.mode_lo, self.c_out), dtype=np.complex128)))
        parts.append(mixed)
        if half - self.mode_hi > 0:
            parts.append(dm.constant(np.zeros((b, half - self.mode_hi, self.c_out),
                                              dtype=np.complex128)))
        spectrum = dm.concat(parts, axis=1) if len(parts) > 1 else mixed
        return dm.add(dm.irfft(spectrum, n=t, axis=1), bypass)


def spectral_conv(u: Tensor, layer: SpectralConvLayer) -> Tensor:
    """Apply one spectral convolution layer to a [B, T, C_in] signal."""
    return layer(u)


class HierarchicalOperator(Module):
    """One level of the bank: lift -> conditioned spectral stack -> project."""

    def __init__(self, d_state: int, series_len: int, level: int, d_cond: int,
                 rng: np.random.Generator, width: int = DEFAULT_WIDTH):
        super().__init__()
        half = series_len // 2 + 1
        lo, hi = band_bounds(level, half)
        self.level = level
        self.lift = self._adopt("lift", Linear(d_state, width, rng))
        self.cond_proj = self._adopt("cond_proj", Linear(d_cond, 2 * width, rng, zero_init=True))
        self.width = width
        self.layers = []
        for i in range(LEVEL_DEPTHS[level]):
            layer = SpectralConvLayer(width, width, lo, hi, rng)
            self._adopt(f"spectral{i}", layer)
            self.layers.append(layer)
        self.proj = self._adopt("proj", Linear(width, d_state, rng))

    def __call__(self, u: Tensor, h_c: Tensor) -> Tensor:
        h = self.lift(u)
        mod = self.cond_proj(h_c)
        scale = dm.reshape(dm.slice_axis(mod, 1, 0, self.width),
                           (mod.shape[0], 1, self.width))
        shift = dm.reshape(dm.slice_axis(mod, 1, self.width, 2 * self.width),
                           (mod.shape[0], 1, self.width))
        h = dm.add(dm.mul(h, dm.add(scale, dm.constant(1.0))), shift)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = dm.gelu(h)
        return self.proj(h)


class OperatorBank(Module):
    """Four hierarchical operators plus the condition-adaptive weight head.

    The weight head is a 2-layer perceptron on the condition embedding with a
    zero-initialized output layer, so weights start uniform on the simplex.
    """

    def __init__(self, d_state: int, series_len: int, d_cond: int,
                 rng: np.random.Generator, width: int = DEFAULT_WIDTH):
        super().__init__()
        self.d_state = d_state
        self.series_len = series_len
        self.operators = []
        for level in (1, 2, 3, 4):
            op = HierarchicalOperator(d_state, series_len, level, d_cond, rng, width)
            self._adopt(f"op{level}", op)
            self.operators.append(op)
        self.weight_head = self._adopt("weight_head", MLP([d_cond, 32, 4], rng,
                                                          final_zero=True))

    def level(self, level: int) -> HierarchicalOperator:
        if level not in (1, 2, 3, 4):
            raise ValueError(f"invalid hierarchy level {level}; expected 1..4")
        return self.operators[level - 1]

    def mixture_weights(self, h_c: Tensor) -> Tensor:
        return softmax(self.weight_head(h_c), axis=-1)

    def forward_levels(self, u: Tensor, h_c: Tensor) -> list[Tensor]:
        if u.ndim != 3 or u.shape[1] < 8:
            raise dm.ShapeError("operator_forward", u.shape, ("B", ">=8", self.d_state))
        return [op(u, h_c) for op in self.operators]

    def integrate(self, u: Tensor, h_c: Tensor,
                  level_outputs: list[Tensor] | None = None) -> Tensor:
        outs = level_outputs if level_outputs is not None else self.forward_levels(u, h_c)
        w = self.mixture_weights(h_c)
        b = w.shape[0]
        total = None
        for i, out in enumerate(outs):
            wi = dm.reshape(dm.slice_axis(w, 1, i, i + 1), (b, 1, 1))
            term = dm.mul(out, wi)
            total = term if total is None else dm.add(total, term)
        return total


def operator_forward(bank: OperatorBank, level: int, u: Tensor, h_c: Tensor) -> Tensor:
    """Run one hierarchy level on a [B, T, D] trajectory."""
    if u.ndim != 3 or u.shape[1] < 8:
        raise dm.ShapeError("operator_forward", u.shape, ("B", ">=8", bank.d_state))
    return bank.level(level)(u, h_c)


def integrate_bank(bank: OperatorBank, u: Tensor, h_c: Tensor) -> Tensor:
    """Condition-weighted convex combination of the four level outputs."""
    return bank.integrate(u, h_c)
