"""Joint generative model: condition encoder + operator bank + velocity field.

Owns the per-channel normalization statistics (features and conditions are
standardized with training-set statistics) and exposes inference-time field
closures for the ODE sampler, with optional operator guidance.
"""

from __future__ import annotations

import numpy as np

from . import diffmath as dm
from .cfm import COND_DIM, ConditionEncoder, VelocityField
from .diffmath import Tensor
from .fno import OperatorBank
from .guidance import GuidanceConfig, guidance_term, guided_velocity


class GenerativeModel:
    def __init__(self, d_state: int, series_len: int, d_condition: int,
                 init_seed: int = 0, width: int = 32, unet_width: int = 32):
        self.d_state = d_state
        self.series_len = series_len
        self.d_condition = d_condition
        self.init_seed = init_seed
        self.width = width
        self.unet_width = unet_width
        ss = np.random.SeedSequence([init_seed, 0x10D31])
        enc_rng, bank_rng, vel_rng = (np.random.default_rng(s) for s in ss.spawn(3))
        self.encoder = ConditionEncoder(d_condition, enc_rng)
        self.bank = OperatorBank(d_state, series_len, COND_DIM, bank_rng, width)
        self.velocity = VelocityField(d_state, COND_DIM, vel_rng, unet_width)
        self.x_mean = np.zeros(d_state)
        self.x_std = np.ones(d_state)
        self.c_mean = np.zeros(d_condition)
        self.c_std = np.ones(d_condition)

    # -- normalization ------------------------------------------------------

    def fit_normalization(self, trajectories: np.ndarray, conditions: np.ndarray) -> None:
        flat = trajectories.reshape(-1, self.d_state)
        self.x_mean = flat.mean(axis=0)
        self.x_std = np.maximum(flat.std(axis=0), 1e-8)
        self.c_mean = conditions.mean(axis=0)
        self.c_std = np.maximum(conditions.std(axis=0), 1e-8)

    def normalize_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_std

    def denormalize_x(self, x: np.ndarray) -> np.ndarray:
        return x * self.x_std + self.x_mean

    def normalize_c(self, c: np.ndarray) -> np.ndarray:
        return (c - self.c_mean) / self.c_std

    # -- forward pieces (tape-aware) ----------------------------------------

    def encode(self, c_raw: np.ndarray) -> Tensor:
        c = np.atleast_2d(np.asarray(c_raw, dtype=float))
        return self.encoder(dm.constant(self.normalize_c(c)))

    def velocity_at(self, x_norm, t: float, h_c: Tensor) -> Tensor:
        x = x_norm if isinstance(x_norm, Tensor) else dm.constant(x_norm)
        return self.velocity(x, t, h_c)

    def bank_levels(self, x_norm, h_c: Tensor) -> list[Tensor]:
        x = x_norm if isinstance(x_norm, Tensor) else dm.constant(x_norm)
        return self.bank.forward_levels(x, h_c)

    def bank_integrated(self, x_norm, h_c: Tensor,
                        level_outputs: list[Tensor] | None = None) -> Tensor:
        x = x_norm if isinstance(x_norm, Tensor) else dm.constant(x_norm)
        return self.bank.integrate(x, h_c, level_outputs)

    # -- parameters ----------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.encoder.named_parameters("encoder."))
        out.update(self.bank.named_parameters("bank."))
        out.update(self.velocity.named_parameters("velocity."))
        return out

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def set_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        groups = {"encoder": {}, "bank": {}, "velocity": {}}
        for path, arr in arrays.items():
            head, rest = path.split(".", 1)
            groups[head][rest] = arr
        self.encoder.set_parameters(groups["encoder"])
        self.bank.set_parameters(groups["bank"])
        self.velocity.set_parameters(groups["velocity"])

    # -- inference ------------------------------------------------------------

    def predict_physical(self, x_phys: np.ndarray, c_raw: np.ndarray) -> np.ndarray:
        """Integrated-bank prediction in physical units (frozen, no tape)."""
        x = np.asarray(x_phys, dtype=float)
        single = x.ndim == 2
        if single:
            x = x[None]
        h_c = self.encode(np.atleast_2d(c_raw))
        out = self.bank_integrated(self.normalize_x(x), h_c).data
        out = self.denormalize_x(out)
        return out[0] if single else out

    def flow_field(self, c_raw: np.ndarray, gcfg: GuidanceConfig | None = None):
        """Velocity closure f(x_norm, t) for the sampler, batch conditions fixed.

        With a guidance config, the field is the guided velocity
        v_cfm - 2 alpha(t) (x - u_bank(x)) evaluated in normalized space.
        """
        c = np.atleast_2d(np.asarray(c_raw, dtype=float))
        h_c = self.encode(c)

        def field(x_norm: np.ndarray, t: float) -> np.ndarray:
            v = self.velocity_at(x_norm, t, h_c).data
            if gcfg is None or not gcfg.enabled or gcfg.alpha_max == 0.0:
                return v
            x_bank = self.bank_integrated(x_norm, h_c).data
            g = guidance_term(x_norm, x_bank, t, gcfg)
            return guided_velocity(v, g)

        return field

    def meta(self) -> dict:
        return {
            "d_state": self.d_state,
            "series_len": self.series_len,
            "d_condition": self.d_condition,
            "init_seed": self.init_seed,
            "width": self.width,
            "unet_width": self.unet_width,
            "x_mean": [float(v) for v in self.x_mean],
            "x_std": [float(v) for v in self.x_std],
            "c_mean": [float(v) for v in self.c_mean],
            "c_std": [float(v) for v in self.c_std],
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "GenerativeModel":
        model = cls(meta["d_state"], meta["series_len"], meta["d_condition"],
                    meta["init_seed"], meta["width"], meta["unet_width"])
        model.x_mean = np.asarray(meta["x_mean"], dtype=float)
        model.x_std = np.asarray(meta["x_std"], dtype=float)
        model.c_mean = np.asarray(meta["c_mean"], dtype=float)
        model.c_std = np.asarray(meta["c_std"], dtype=float)
        return model
