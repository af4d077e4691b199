"""Condition encoding, the velocity-field network, probability paths, and the
flow-matching loss.

The probability path is the linear interpolation between a standard-normal
draw at flow time 0 and a data trajectory at flow time 1, with target vector
field ``u_t = x1 - x0`` (no added path noise).
"""

from __future__ import annotations

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .nn import Conv1d, Film, Linear, MLP, Module, sinusoidal_embedding

COND_DIM = 64
TIME_DIM = 64


class ConditionEncoder(Module):
    """Perceptron mapping a raw condition vector to a d_h = 64 embedding."""

    def __init__(self, d_condition: int, rng: np.random.Generator,
                 d_hidden: int = COND_DIM):
        super().__init__()
        self.d_condition = d_condition
        self.d_hidden = d_hidden
        self._adopt("mlp", MLP([d_condition, d_hidden, d_hidden], rng))

    def __call__(self, c: Tensor) -> Tensor:
        if c.ndim == 1:
            c = dm.reshape(c, (1, c.shape[0]))
        if c.shape[-1] != self.d_condition:
            raise dm.ShapeError("encode_condition", c.shape, (None, self.d_condition))
        return self._children["mlp"](c)


def encode_condition(encoder: ConditionEncoder, c) -> Tensor:
    """Encode raw conditions [B, d_c] (finiteness enforced by the tensor ctor)."""
    return encoder(c if isinstance(c, Tensor) else dm.constant(np.asarray(c, dtype=float)))


class VelocityField(Module):
    """1-D encoder-decoder convolutional field with skip connections.

    Three resolution levels (T, T/2, T/4), base width 32, kernel 5. The flow
    time enters through a sinusoidal embedding and, together with the
    condition embedding, modulates every level feature-wise. The output
    projection starts at zero so the initial field is identically zero.
    Input length must be divisible by 4.
    """

    KERNEL = 5

    def __init__(self, d_state: int, d_cond: int, rng: np.random.Generator,
                 width: int = 32):
        super().__init__()
        self.d_state = d_state
        w1, w2 = width, 2 * width
        ctx = d_cond + TIME_DIM
        self.time_mlp = self._adopt("time_mlp", MLP([TIME_DIM, TIME_DIM, TIME_DIM], rng))
        k = self.KERNEL
        self.enc0a = self._adopt("enc0a", Conv1d(d_state, w1, k, rng))
        self.film0a = self._adopt("film0a", Film(ctx, w1, rng))
        self.enc0b = self._adopt("enc0b", Conv1d(w1, w1, k, rng))
        self.film0b = self._adopt("film0b", Film(ctx, w1, rng))
        self.enc1 = self._adopt("enc1", Conv1d(w1, w2, k, rng))
        self.film1 = self._adopt("film1", Film(ctx, w2, rng))
        self.mid = self._adopt("mid", Conv1d(w2, w2, k, rng))
        self.film_mid = self._adopt("film_mid", Film(ctx, w2, rng))
        self.dec1 = self._adopt("dec1", Conv1d(w2 + w2, w2, k, rng))
        self.film_dec1 = self._adopt("film_dec1", Film(ctx, w2, rng))
        self.dec0 = self._adopt("dec0", Conv1d(w2 + w1, w1, k, rng))
        self.film_dec0 = self._adopt("film_dec0", Film(ctx, w1, rng))
        self.head = self._adopt("head", Conv1d(w1, d_state, k, rng, zero_init=True))

    def _ctx(self, t: float, h_c: Tensor) -> Tensor:
        emb = sinusoidal_embedding(float(t), TIME_DIM)
        te = self.time_mlp(dm.constant(emb[None, :]))
        b = h_c.shape[0]
        te_b = dm.mul(te, dm.constant(np.ones((b, 1))))
        return dm.concat([h_c, te_b], axis=1)

    def __call__(self, x: Tensor, t: float, h_c: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.d_state:
            raise dm.ShapeError("velocity_field", x.shape, (None, None, self.d_state))
        if x.shape[1] % 4 != 0:
            raise ValueError(f"velocity field needs length divisible by 4, got {x.shape[1]}")
        ctx = self._ctx(t, h_c)

        def film(layer_name: str, h: Tensor) -> Tensor:
            return self._children[layer_name](dm.swapaxes(h, 1, 2), ctx)

        h = dm.swapaxes(x, 1, 2)                                   # [B, D, T]
        h = dm.gelu(dm.swapaxes(film("film0a", self.enc0a(h)), 1, 2))
        s0 = dm.gelu(dm.swapaxes(film("film0b", self.enc0b(h)), 1, 2))
        h = dm.slice_axis(s0, 2, 0, s0.shape[2], 2)                # stride-2 downsample
        s1 = dm.gelu(dm.swapaxes(film("film1", self.enc1(h)), 1, 2))
        h = dm.slice_axis(s1, 2, 0, s1.shape[2], 2)
        h = dm.gelu(dm.swapaxes(film("film_mid", self.mid(h)), 1, 2))
        h = dm.repeat_interleave(h, 2, axis=2)
        h = dm.concat([h, s1], axis=1)
        h = dm.gelu(dm.swapaxes(film("film_dec1", self.dec1(h)), 1, 2))
        h = dm.repeat_interleave(h, 2, axis=2)
        h = dm.concat([h, s0], axis=1)
        h = dm.gelu(dm.swapaxes(film("film_dec0", self.dec0(h)), 1, 2))
        return dm.swapaxes(self.head(h), 1, 2)                     # [B, T, D]


def sample_path(x1: np.ndarray, t: float, rng: np.random.Generator):
    """Draw (x_t, u_t, x0) on the linear path: x_t = (1-t) x0 + t x1, u_t = x1 - x0."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time t={t} outside [0, 1]")
    x1 = np.asarray(x1, dtype=float)
    x0 = rng.standard_normal(x1.shape)
    x_t = (1.0 - t) * x0 + t * x1
    return x_t, x1 - x0, x0


def path_point(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """Deterministic point on the linear path for a known endpoint pair."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time t={t} outside [0, 1]")
    return (1.0 - t) * x0 + t * x1


def cfm_loss(v_pred: Tensor, u_t) -> Tensor:
    """Mean squared error between predicted and target vector fields."""
    target = u_t if isinstance(u_t, Tensor) else dm.constant(u_t)
    if v_pred.shape != target.shape:
        raise dm.ShapeError("cfm_loss", v_pred.shape, target.shape)
    diff = dm.sub(v_pred, target)
    return dm.mean(dm.mul(diff, diff))
