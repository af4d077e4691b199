"""Hierarchical constraint schedules, domain constraint packs, and loss assembly.

Level semantics (weights of the total violation score are fixed):

    1 conservation   phi1(t) = 1 + beta1 t^2          weight 0.4
    2 dynamics       phi2(t) = exp(-kappa2 (t-.5)^2)  weight 0.3
    3 boundary       phi3(t) = 1 - exp(-kappa3 t)     weight 0.2
    4 empirical      phi4(t) = t                      weight 0.1

Each pack provides, per level, (a) an analytic violation score and (b) a
shape-[T, D] regression target: the constraint-consistent reconstruction of
the input trajectory. On clean data every target coincides with the
trajectory itself, so the integrated operator bank learns a projection onto
the physics manifold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import ShapeError, Tensor

PHI_WEIGHTS = (0.4, 0.3, 0.2, 0.1)
_EPS = 1e-12


@dataclass
class ConstraintSchedule:
    lambda_base: tuple = (1.0, 0.5, 0.5, 0.1)
    beta1: float = 1.0
    kappa2: float = 10.0
    kappa3: float = 5.0
    beta_consist: float = 0.5
    flat: bool = False        # ablation: phi_i(t) == 1 for all levels

    def __post_init__(self):
        vals = (*self.lambda_base, self.beta1, self.kappa2, self.kappa3,
                self.beta_consist)
        if any(v < 0 for v in vals):
            raise ValueError("schedule parameters must be non-negative")


def schedule_phi(level: int, t: float, sched: ConstraintSchedule) -> float:
    """Time-dependent modulation phi_level(t) on the flow time in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time t={t} outside [0, 1]")
    if level not in (1, 2, 3, 4):
        raise ValueError(f"invalid hierarchy level {level}; expected 1..4")
    if sched.flat:
        return 1.0
    if level == 1:
        return 1.0 + sched.beta1 * t * t
    if level == 2:
        return float(np.exp(-sched.kappa2 * (t - 0.5) ** 2))
    if level == 3:
        return float(1.0 - np.exp(-sched.kappa3 * t))
    return float(t)


@dataclass
class ViolationReport:
    """Per-level violation scores and their fixed-weight total."""

    phi: tuple
    phi_total: float = field(init=False)

    def __post_init__(self):
        if len(self.phi) != 4 or any(p < 0 for p in self.phi):
            raise ValueError("expected four non-negative per-level scores")
        self.phi_total = float(sum(w * p for w, p in zip(PHI_WEIGHTS, self.phi)))


def _mse(pred: Tensor, target: np.ndarray) -> Tensor:
    tgt = dm.constant(target)
    if pred.shape != tgt.shape:
        raise ShapeError("level_loss", pred.shape, tgt.shape)
    diff = dm.sub(pred, tgt)
    return dm.mean(dm.mul(diff, diff))


def level_loss(level: int, x: np.ndarray, c: np.ndarray, bank_output: Tensor,
               pack) -> Tensor:
    """MSE between the analytic level target and the level operator output."""
    target = pack.level_target(level, x, c)
    return _mse(bank_output, target)


def consistency_loss(bank_prediction, lookahead_state):
    """MSE tying the integrated bank output to the next flow state."""
    if isinstance(bank_prediction, Tensor) or isinstance(lookahead_state, Tensor):
        p = bank_prediction if isinstance(bank_prediction, Tensor) \
            else dm.constant(bank_prediction)
        q = lookahead_state if isinstance(lookahead_state, Tensor) \
            else dm.constant(lookahead_state)
        if p.shape != q.shape:
            raise ShapeError("consistency_loss", p.shape, q.shape)
        diff = dm.sub(p, q)
        return dm.mean(dm.mul(diff, diff))
    p = np.asarray(bank_prediction, dtype=float)
    q = np.asarray(lookahead_state, dtype=float)
    if p.shape != q.shape:
        raise ShapeError("consistency_loss", p.shape, q.shape)
    return float(np.mean((p - q) ** 2))


def total_loss(l_cfm, l_levels, l_guidance, l_consist, t: float,
               sched: ConstraintSchedule):
    """L_cfm + sum_i lambda_i^base phi_i(t) L_i + L_guidance + beta L_consist.

    Accepts floats or tape tensors; scheduling coefficients are plain scalars.
    """
    if len(l_levels) != 4:
        raise ValueError("expected four level losses")
    comps = [l_cfm, *l_levels, l_guidance, l_consist]
    for comp in comps:
        val = comp.item() if isinstance(comp, Tensor) else float(comp)
        if val < 0 or not np.isfinite(val):
            raise ValueError(f"loss components must be finite and >= 0, got {val}")
    total = l_cfm
    for i, li in enumerate(l_levels):
        coeff = sched.lambda_base[i] * schedule_phi(i + 1, t, sched)
        if isinstance(li, Tensor):
            total = dm.add(total if isinstance(total, Tensor) else dm.constant(total),
                           dm.mul(li, dm.constant(coeff)))
        else:
            total = total + coeff * li
    for term, coeff in ((l_guidance, 1.0), (l_consist, sched.beta_consist)):
        if isinstance(term, Tensor):
            total = dm.add(total if isinstance(total, Tensor) else dm.constant(total),
                           dm.mul(term, dm.constant(coeff)))
        else:
            total = total + coeff * term
    return total


# ---------------------------------------------------------------------------
# damped harmonic oscillator
# ---------------------------------------------------------------------------

def oscillator_closed_form(gamma: float, x0: float, v0: float, m: float, k: float,
                           times: np.ndarray) -> np.ndarray:
    """Exact underdamped solution; returns [T, 2] (position, velocity)."""
    beta = gamma / (2.0 * m)
    w2 = k / m - beta * beta
    if w2 <= 0:
        raise ValueError(f"overdamped parameters: gamma={gamma}, m={m}, k={k}")
    wd = np.sqrt(w2)
    env = np.exp(-beta * times)
    c, s = np.cos(wd * times), np.sin(wd * times)
    b_coef = (v0 + beta * x0) / wd
    x = env * (x0 * c + b_coef * s)
    v = env * (v0 * c - ((k / m) * x0 + beta * v0) / wd * s)
    return np.stack([x, v], axis=-1)


def oscillator_propagator(gamma: float, m: float, k: float, dt: float) -> np.ndarray:
    """Exact one-step transition matrix of the damped oscillator state (x, v)."""
    beta = gamma / (2.0 * m)
    w2 = k / m - beta * beta
    if w2 <= 0:
        raise ValueError(f"overdamped parameters: gamma={gamma}, m={m}, k={k}")
    wd = np.sqrt(w2)
    e = np.exp(-beta * dt)
    c, s = np.cos(wd * dt), np.sin(wd * dt)
    return np.array([
        [e * (c + beta * s / wd), e * s / wd],
        [-e * (k / m) * s / wd, e * (c - beta * s / wd)],
    ])


@dataclass
class OscillatorPack:
    """Constraint pack for the damped harmonic oscillator, channels (x, v).

    The conserved level-1 quantity is the damping-adjusted invariant
    Q(t) = exp(gamma t / m) * (m v^2 + gamma x v + k x^2) / 2, which reduces
    to the mechanical energy when gamma = 0 and is exactly constant along
    true trajectories for any admissible gamma.
    """

    m: float = 1.0
    k: float = 1.0
    dt: float = 0.1
    x_bound: float = 2.25     # 1.5 x the largest training amplitude by default
    v_bound: float = 2.25

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != 2:
            raise ShapeError("oscillator_constraints", x.shape, ("T", 2))
        return x

    def times(self, n: int) -> np.ndarray:
        return np.arange(n) * self.dt

    def energy(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        return 0.5 * (self.m * x[:, 1] ** 2 + self.k * x[:, 0] ** 2)

    def invariant(self, x: np.ndarray, gamma: float) -> np.ndarray:
        x = self._check(x)
        t = self.times(len(x))
        quad = 0.5 * (self.m * x[:, 1] ** 2 + gamma * x[:, 0] * x[:, 1]
                      + self.k * x[:, 0] ** 2)
        return np.exp(gamma * t / self.m) * quad

    def eom_residual(self, x: np.ndarray, gamma: float) -> np.ndarray:
        """a + (k/m) x + (gamma/m) v with 2nd-order differences for a."""
        x = self._check(x)
        n = len(x)
        if n < 4:
            raise ValueError("equation-of-motion residual needs at least 4 steps")
        pos, vel = x[:, 0], x[:, 1]
        dt2 = self.dt * self.dt
        acc = np.empty(n)
        acc[1:-1] = (pos[2:] - 2.0 * pos[1:-1] + pos[:-2]) / dt2
        acc[0] = (2.0 * pos[0] - 5.0 * pos[1] + 4.0 * pos[2] - pos[3]) / dt2
        acc[-1] = (2.0 * pos[-1] - 5.0 * pos[-2] + 4.0 * pos[-3] - pos[-4]) / dt2
        return acc + (self.k / self.m) * pos + (gamma / self.m) * vel

    def envelope_deviation(self, x: np.ndarray, gamma: float) -> np.ndarray:
        """E(t) minus the exponential decay envelope anchored at the invariant."""
        x = self._check(x)
        t = self.times(len(x))
        e0 = self.invariant(x, gamma)[0]
        return self.energy(x) - e0 * np.exp(-gamma * t / self.m)

    def level_signal(self, level: int, x: np.ndarray, c: np.ndarray) -> np.ndarray:
        gamma = float(np.asarray(c).ravel()[0])
        if level == 1:
            return self.energy(x)
        if level == 2:
            return self.eom_residual(x, gamma)
        if level == 3:
            return np.maximum(0.0, np.abs(self._check(x)[:, 0]) - self.x_bound)
        if level == 4:
            return self.envelope_deviation(x, gamma)
        raise ValueError(f"invalid hierarchy level {level}; expected 1..4")

    def level_target(self, level: int, x: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Constraint-consistent [T, 2] reconstruction for the level operator."""
        x = self._check(x)
        gamma = float(np.asarray(c).ravel()[0])
        if level == 1:
            q = self.invariant(x, gamma)
            scale = np.sqrt(q[0] / np.maximum(q, _EPS))
            return x * scale[:, None]
        if level == 2:
            fwd = x @ oscillator_propagator(gamma, self.m, self.k, self.dt).T
            bwd = x @ oscillator_propagator(gamma, self.m, self.k, -self.dt).T
            out = np.empty_like(x)
            out[1:-1] = 0.5 * (fwd[:-2] + bwd[2:])
            out[0] = bwd[1]
            out[-1] = fwd[-2]
            return out
        if level == 3:
            out = x.copy()
            out[:, 0] = np.clip(out[:, 0], -self.x_bound, self.x_bound)
            out[:, 1] = np.clip(out[:, 1], -self.v_bound, self.v_bound)
            return out
        if level == 4:
            t = self.times(len(x))
            e0 = self.invariant(x, gamma)[0]
            env = e0 * np.exp(-gamma * t / self.m)
            e = self.energy(x)
            scale = np.sqrt(np.maximum(env, 0.0) / np.maximum(e, _EPS))
            return x * scale[:, None]
        raise ValueError(f"invalid hierarchy level {level}; expected 1..4")

    def level_targets_batch(self, level: int, x: np.ndarray,
                            c: np.ndarray) -> np.ndarray:
        """Vectorized level_target over a [B, T, 2] stack with [B, >=1] conditions."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[2] != 2:
            raise ShapeError("oscillator_constraints", x.shape, ("B", "T", 2))
        gamma = np.asarray(c, dtype=float).reshape(len(x), -1)[:, 0]
        t = self.times(x.shape[1])[None, :]
        pos, vel = x[:, :, 0], x[:, :, 1]
        if level == 1:
            quad = 0.5 * (self.m * vel ** 2 + gamma[:, None] * pos * vel
                          + self.k * pos ** 2)
            q = np.exp(gamma[:, None] * t / self.m) * quad
            scale = np.sqrt(q[:, :1] / np.maximum(q, _EPS))
            return x * scale[:, :, None]
        if level == 2:
            beta = gamma / (2.0 * self.m)
            wd = np.sqrt(self.k / self.m - beta * beta)
            out = np.empty_like(x)
            halves = []
            for sign in (1.0, -1.0):
                dt = sign * self.dt
                e = np.exp(-beta * dt)
                cs, sn = np.cos(wd * dt), np.sin(wd * dt)
                prop = np.empty((len(x), 2, 2))
                prop[:, 0, 0] = e * (cs + beta * sn / wd)
                prop[:, 0, 1] = e * sn / wd
                prop[:, 1, 0] = -e * (self.k / self.m) * sn / wd
                prop[:, 1, 1] = e * (cs - beta * sn / wd)
                halves.append(np.einsum("bij,btj->bti", prop, x))
            fwd, bwd = halves
            out[:, 1:-1] = 0.5 * (fwd[:, :-2] + bwd[:, 2:])
            out[:, 0] = bwd[:, 1]
            out[:, -1] = fwd[:, -2]
            return out
        if level == 3:
            out = x.copy()
            out[:, :, 0] = np.clip(out[:, :, 0], -self.x_bound, self.x_bound)
            out[:, :, 1] = np.clip(out[:, :, 1], -self.v_bound, self.v_bound)
            return out
        if level == 4:
            quad = 0.5 * (self.m * vel ** 2 + gamma[:, None] * pos * vel
                          + self.k * pos ** 2)
            q0 = (np.exp(gamma * 0.0) * quad[:, 0])[:, None]
            env = q0 * np.exp(-gamma[:, None] * t / self.m)
            energy = 0.5 * (self.m * vel ** 2 + self.k * pos ** 2)
            scale = np.sqrt(np.maximum(env, 0.0) / np.maximum(energy, _EPS))
            return x * scale[:, :, None]
        raise ValueError(f"invalid hierarchy level {level}; expected 1..4")

    def violations(self, x: np.ndarray, c: np.ndarray) -> ViolationReport:
        x = self._check(x)
        gamma = float(np.asarray(c).ravel()[0])
        q = self.invariant(x, gamma)
        q0 = max(abs(q[0]), _EPS)
        phi1 = float(np.mean(np.abs(q - q[0])) / q0)
        phi2 = float(np.mean(np.abs(self.eom_residual(x, gamma))))
        phi3 = float(np.mean(np.maximum(0.0, np.abs(x[:, 0]) - self.x_bound)))
        phi4 = float(abs(np.mean(self.envelope_deviation(x, gamma))) / q0)
        return ViolationReport(phi=(phi1, phi2, phi3, phi4))

    def analytic_trajectory(self, c: np.ndarray, n_steps: int) -> np.ndarray:
        gamma, x0, v0 = (float(v) for v in np.asarray(c).ravel()[:3])
        return oscillator_closed_form(gamma, x0, v0, self.m, self.k,
                                      self.times(n_steps))


def oscillator_constraints(x: np.ndarray, c: np.ndarray,
                           pack: OscillatorPack | None = None):
    """Per-level signals and the violation report for an (x, v) trajectory."""
    pack = pack or OscillatorPack()
    signals = {lvl: pack.level_signal(lvl, x, c) for lvl in (1, 2, 3, 4)}
    return signals, pack.violations(x, c)


# ---------------------------------------------------------------------------
# battery degradation surrogate
# ---------------------------------------------------------------------------

@dataclass
class BatteryPack:
    """Constraint pack for the battery surrogate, channels (T_K, C, SOH, cycle).

    Normalized coordinates for the level-1 ellipse: T_norm = (T_K - t_ref)/t_sigma,
    C_norm = C / c_nominal. The Arrhenius term uses Kelvin directly. The level-4
    square-root law applies to the degradation rate in excess of the Arrhenius
    component.
    """

    e_activation: float = 11600.0      # J/mol
    r_gas: float = 8.314               # J/(mol K)
    t_min_k: float = 263.15            # -10 C
    t_max_k: float = 333.15            # 60 C
    t_ref_k: float = 288.15            # 15 C
    t_sigma: float = 25.0
    c_nominal: float = 1.0
    alpha_sqrt: float = 5e-5
    dn: float = 1.0                    # cycle step

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != 4:
            raise ShapeError("battery_constraints", x.shape, ("T", 4))
        if np.any(x[:, 0] <= 0):
            raise ValueError("battery temperatures must be positive Kelvin")
        return x

    def _norm(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t_norm = (x[:, 0] - self.t_ref_k) / self.t_sigma
        c_norm = x[:, 1] / self.c_nominal
        return t_norm, c_norm

    def arrhenius_rate(self, t_kelvin: np.ndarray, a_prefactor: float) -> np.ndarray:
        return a_prefactor * np.exp(-self.e_activation / (self.r_gas * t_kelvin))

    def _capacity_rate(self, x: np.ndarray) -> np.ndarray:
        cap = x[:, 1]
        n = len(cap)
        if n < 4:
            raise ValueError("capacity rate needs at least 4 cycles")
        out = np.empty(n)
        out[1:-1] = (cap[2:] - cap[:-2]) / (2.0 * self.dn)
        out[0] = (-3.0 * cap[0] + 4.0 * cap[1] - cap[2]) / (2.0 * self.dn)
        out[-1] = (3.0 * cap[-1] - 4.0 * cap[-2] + cap[-3]) / (2.0 * self.dn)
        return out

    def violations(self, x: np.ndarray, c: np.ndarray) -> ViolationReport:
        x = self._check(x)
        a_prefactor = float(np.asarray(c).ravel()[1])
        t_norm, c_norm = self._norm(x)
        e0 = 0.5 * t_norm[0] ** 2 + c_norm[0] ** 2
        phi1 = float(np.mean(np.abs(0.5 * t_norm ** 2 + c_norm ** 2 - e0)))
        rate = self._capacity_rate(x)
        arr = self.arrhenius_rate(x[:, 0], a_prefactor)
        phi2 = float(np.mean(np.abs(rate + arr)))
        soh = x[:, 2]
        temp_slack = (np.maximum(0.0, x[:, 0] - self.t_max_k)
                      + np.maximum(0.0, self.t_min_k - x[:, 0])) / self.t_sigma
        phi3 = float(np.mean(np.maximum(0.0, -soh) + np.maximum(0.0, soh - 1.0)
                             + temp_slack))
        cycles = x[:, 3]
        excess = -rate - arr
        phi4 = float(np.mean(np.abs(excess - self.alpha_sqrt
                                    * np.sqrt(np.maximum(cycles, 0.0)))))
        return ViolationReport(phi=(phi1, phi2, phi3, phi4))

    def level_target(self, level: int, x: np.ndarray, c: np.ndarray) -> np.ndarray:
        x = self._check(x)
        a_prefactor = float(np.asarray(c).ravel()[1])
        out = x.copy()
        if level == 1:
            t_norm, c_norm = self._norm(x)
            e0 = 0.5 * t_norm[0] ** 2 + c_norm[0] ** 2
            cur = np.maximum(0.5 * t_norm ** 2 + c_norm ** 2, _EPS)
            scale = np.sqrt(e0 / cur)
            out[:, 0] = self.t_ref_k + self.t_sigma * (scale * t_norm)
            out[:, 1] = self.c_nominal * (scale * c_norm)
            return out
        if level == 2:
            arr = self.arrhenius_rate(x[:, 0], a_prefactor)
            cap = x[:, 1]
            rebuilt = np.empty_like(cap)
            rebuilt[1:-1] = 0.5 * ((cap[:-2] - arr[:-2] * self.dn)
                                   + (cap[2:] + arr[2:] * self.dn))
            rebuilt[0] = cap[1] + arr[1] * self.dn
            rebuilt[-1] = cap[-2] - arr[-2] * self.dn
            out[:, 1] = rebuilt
            return out
        if level == 3:
            out[:, 2] = np.clip(x[:, 2], 0.0, 1.0)
            out[:, 0] = np.clip(x[:, 0], self.t_min_k, self.t_max_k)
            return out
        if level == 4:
            arr = self.arrhenius_rate(x[:, 0], a_prefactor)
            cycles = np.maximum(x[:, 3], 0.0)
            total_rate = arr + self.alpha_sqrt * np.sqrt(cycles)
            rebuilt = x[0, 1] - np.concatenate(
                [[0.0], np.cumsum(0.5 * (total_rate[1:] + total_rate[:-1]) * self.dn)])
            out[:, 1] = rebuilt
            return out
        raise ValueError(f"invalid hierarchy level {level}; expected 1..4")

    def level_signal(self, level: int, x: np.ndarray, c: np.ndarray) -> np.ndarray:
        x = self._check(x)
        a_prefactor = float(np.asarray(c).ravel()[1])
        t_norm, c_norm = self._norm(x)
        if level == 1:
            e0 = 0.5 * t_norm[0] ** 2 + c_norm[0] ** 2
            return np.abs(0.5 * t_norm ** 2 + c_norm ** 2 - e0)
        if level == 2:
            return self._capacity_rate(x) + self.arrhenius_rate(x[:, 0], a_prefactor)
        if level == 3:
            soh = x[:, 2]
            return (np.maximum(0.0, -soh) + np.maximum(0.0, soh - 1.0)
                    + (np.maximum(0.0, x[:, 0] - self.t_max_k)
                       + np.maximum(0.0, self.t_min_k - x[:, 0])) / self.t_sigma)
        if level == 4:
            rate = self._capacity_rate(x)
            arr = self.arrhenius_rate(x[:, 0], a_prefactor)
            return (-rate - arr) - self.alpha_sqrt * np.sqrt(np.maximum(x[:, 3], 0.0))
        raise ValueError(f"invalid hierarchy level {level}; expected 1..4")


def battery_constraints(x: np.ndarray, c: np.ndarray,
                        pack: BatteryPack | None = None) -> ViolationReport:
    """Violation report for a (T_K, capacity, SOH, cycle) trajectory."""
    pack = pack or BatteryPack()
    return pack.violations(x, c)


def level_targets_batch(pack, level: int, x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Batch of level targets; uses the pack's vectorized path when it has one."""
    if hasattr(pack, "level_targets_batch"):
        return pack.level_targets_batch(level, x, c)
    return np.stack([pack.level_target(level, x[i], c[i]) for i in range(len(x))])
