"""Synthetic trajectory generation, deterministic splits, and disk persistence.

Two domains:

* damped harmonic oscillator, channels (position, velocity), conditions
  (gamma, x0, v0), generated from the exact closed form;
* battery degradation surrogate, channels (T_K, capacity, SOH, cycle),
  conditions (T_ambient_K, A). Capacity decays by the Arrhenius law plus a
  small square-root-of-cycle term, and cell temperature rides the level-1
  ellipse 0.5 T_norm^2 + C_norm^2 = E0, so generated data satisfies the whole
  constraint pack by construction.

On-disk format: `<stem>.manifest.txt` (key = value lines: spec fields, seed,
columns, per-column mean/std) plus `<stem>.data.tsv` (one row per time step,
trajectories delimited by the leading index column). All numbers are written
with full round-trip precision.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .constraints import BatteryPack, OscillatorPack, oscillator_closed_form

FORMAT_VERSION = 1


class DataFormatError(ValueError):
    """Malformed dataset file."""


@dataclass
class OscillatorSpec:
    n_trajectories: int = 2000
    steps: int = 100
    dt: float = 0.1
    m: float = 1.0
    k: float = 1.0
    gamma_range: tuple = (0.0, 0.5)
    amplitude_range: tuple = (0.5, 1.5)
    seed: int = 0

    def __post_init__(self):
        g_lo, g_hi = self.gamma_range
        if g_lo < 0 or g_hi >= 2.0 * np.sqrt(self.m * self.k):
            raise ValueError(f"gamma range {self.gamma_range} leaves the underdamped regime")
        if self.steps < 8 or self.n_trajectories < 0:
            raise ValueError("need steps >= 8 and a non-negative trajectory count")


@dataclass
class BatterySpec:
    n_cells: int = 200
    cycles: int = 128
    temp_range_c: tuple = (15.0, 40.0)
    a_range: tuple = (0.10, 0.25)
    alpha_sqrt: float = 5e-5
    c_nominal: float = 1.0
    substeps: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.cycles < 8 or self.n_cells < 0 or self.substeps < 1:
            raise ValueError("need cycles >= 8, non-negative cell count, substeps >= 1")


@dataclass
class Dataset:
    kind: str
    trajectories: np.ndarray          # [n, T, D]
    conditions: np.ndarray            # [n, d_c]
    channel_names: tuple
    condition_names: tuple
    spec: dict = field(default_factory=dict)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.trajectories)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.kind, self.trajectories[idx], self.conditions[idx],
                       self.channel_names, self.condition_names, dict(self.spec),
                       self.seed)


def gen_oscillator(spec: OscillatorSpec) -> Dataset:
    """Exact damped-oscillator trajectories; pure function of (spec, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x05C1]))
    n = spec.n_trajectories
    gammas = rng.uniform(*spec.gamma_range, size=n)
    amps = rng.uniform(*spec.amplitude_range, size=n)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
    w0 = np.sqrt(spec.k / spec.m)
    x0 = amps * np.cos(phases)
    v0 = -amps * w0 * np.sin(phases)
    times = np.arange(spec.steps) * spec.dt
    trajs = np.empty((n, spec.steps, 2))
    for i in range(n):
        trajs[i] = oscillator_closed_form(gammas[i], x0[i], v0[i], spec.m, spec.k, times)
    conds = np.stack([gammas, x0, v0], axis=-1) if n else np.zeros((0, 3))
    return Dataset("oscillator", trajs, conds, ("position", "velocity"),
                   ("gamma", "x0", "v0"), asdict(spec), spec.seed)


def _battery_cell(t_ambient_k: float, a_prefactor: float, spec: BatterySpec,
                  pack: BatteryPack) -> np.ndarray:
    """Integrate one cell; temperature follows the conservation ellipse."""
    t0_norm = (t_ambient_k - pack.t_ref_k) / pack.t_sigma
    e0 = 0.5 * t0_norm ** 2 + 1.0          # fresh cell: C_norm = 1
    cap = spec.c_nominal

    def temp_of(cap_val: float) -> float:
        c_norm = cap_val / pack.c_nominal
        t_norm_sq = max(2.0 * (e0 - c_norm * c_norm), 0.0)
        return pack.t_ref_k + pack.t_sigma * np.sqrt(t_norm_sq)

    def rate(cap_val: float, n_cycle: float) -> float:
        arr = a_prefactor * np.exp(-pack.e_activation / (pack.r_gas * temp_of(cap_val)))
        return -(arr + spec.alpha_sqrt * np.sqrt(max(n_cycle, 0.0)))

    rows = np.empty((spec.cycles, 4))
    h = 1.0 / spec.substeps
    for i in range(spec.cycles):
        rows[i] = (temp_of(cap), cap, min(max(cap / spec.c_nominal, 0.0), 1.0), float(i))
        if cap <= 0:
            raise ValueError(
                f"battery spec drives capacity to {cap:.4f} <= 0 by cycle {i}; "
                "reduce the prefactor range or the horizon")
        if i == spec.cycles - 1:
            break
        nc = float(i)
        for _ in range(spec.substeps):
            k1 = rate(cap, nc)
            k2 = rate(cap + 0.5 * h * k1, nc + 0.5 * h)
            k3 = rate(cap + 0.5 * h * k2, nc + 0.5 * h)
            k4 = rate(cap + h * k3, nc + h)
            cap = cap + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            nc += h
    if rows[-1, 1] <= 0:
        raise ValueError("battery spec drives capacity below zero within the horizon")
    return rows


def gen_battery(spec: BatterySpec) -> Dataset:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xBA77]))
    pack = BatteryPack(alpha_sqrt=spec.alpha_sqrt, c_nominal=spec.c_nominal)
    n = spec.n_cells
    temps = rng.uniform(*spec.temp_range_c, size=n) + 273.15
    prefs = rng.uniform(*spec.a_range, size=n)
    trajs = np.empty((n, spec.cycles, 4))
    for i in range(n):
        trajs[i] = _battery_cell(temps[i], prefs[i], spec, pack)
    conds = np.stack([temps, prefs], axis=-1) if n else np.zeros((0, 2))
    return Dataset("battery", trajs, conds, ("temp_k", "capacity", "soh", "cycle"),
                   ("t_ambient_k", "a_prefactor"), asdict(spec), spec.seed)


def make_pack(ds: Dataset):
    """Constraint pack matching a dataset; oscillator bounds derive from the data."""
    if ds.kind == "oscillator":
        spec = ds.spec
        if len(ds):
            amp = np.sqrt(ds.conditions[:, 1] ** 2
                          + ds.conditions[:, 2] ** 2 * spec["m"] / spec["k"])
            x_bound = 1.5 * float(amp.max())
            v_bound = x_bound * np.sqrt(spec["k"] / spec["m"])
        else:
            x_bound = v_bound = 1.5 * spec["amplitude_range"][1]
        return OscillatorPack(m=spec["m"], k=spec["k"], dt=spec["dt"],
                              x_bound=x_bound, v_bound=v_bound)
    if ds.kind == "battery":
        return BatteryPack(alpha_sqrt=ds.spec["alpha_sqrt"],
                           c_nominal=ds.spec["c_nominal"])
    raise ValueError(f"unknown dataset kind {ds.kind!r}")


def split(ds: Dataset, mode: str = "random", seed: int = 0, train_frac: float = 0.8,
          train_max: float = 0.3, test_min: float = 0.4):
    """Deterministic (train, test) partition.

    `random`: shuffled `train_frac` split. `extrapolation`: rows with leading
    condition <= train_max train, >= test_min test; the gap band (if any) is
    held out of both sides so the test range is strictly out-of-training.
    """
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    if mode == "random":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B17]))
        order = rng.permutation(len(ds))
        n_train = int(len(ds) * train_frac)
        return ds.subset(np.sort(order[:n_train])), ds.subset(np.sort(order[n_train:]))
    if mode == "extrapolation":
        key = ds.conditions[:, 0]
        train_idx = np.flatnonzero(key <= train_max)
        test_idx = np.flatnonzero(key >= test_min)
        if len(test_idx) == 0:
            raise ValueError(f"no trajectories with leading condition >= {test_min}")
        if len(train_idx) == 0:
            raise ValueError(f"no trajectories with leading condition <= {train_max}")
        return ds.subset(train_idx), ds.subset(test_idx)
    raise ValueError(f"unknown split mode {mode!r}")


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def save(ds: Dataset, stem: str) -> tuple[str, str]:
    """Write `<stem>.manifest.txt` and `<stem>.data.tsv`; returns both paths."""
    os.makedirs(os.path.dirname(stem) or ".", exist_ok=True)
    columns = ["traj", "step", *ds.condition_names, *ds.channel_names]
    man_path, data_path = stem + ".manifest.txt", stem + ".data.tsv"
    n, t = len(ds), (ds.trajectories.shape[1] if len(ds) else 0)
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"kind = {ds.kind}",
        f"seed = {ds.seed}",
        f"n_trajectories = {n}",
        f"n_steps = {t}",
        f"columns = {','.join(columns)}",
        f"condition_names = {','.join(ds.condition_names)}",
        f"channel_names = {','.join(ds.channel_names)}",
    ]
    for key, val in sorted(ds.spec.items()):
        if isinstance(val, (tuple, list)):
            val = ",".join(_fmt(v) for v in val)
        lines.append(f"spec.{key} = {val}")
    flat = ds.trajectories.reshape(-1, ds.trajectories.shape[-1]) if n else \
        np.zeros((0, len(ds.channel_names)))
    for j, name in enumerate(ds.channel_names):
        col = flat[:, j] if len(flat) else np.zeros(1)
        lines.append(f"stats.mean.{name} = {_fmt(col.mean())}")
        lines.append(f"stats.std.{name} = {_fmt(col.std())}")
    with open(man_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(data_path, "w") as fh:
        fh.write("\t".join(columns) + "\n")
        for i in range(n):
            cond = "\t".join(_fmt(v) for v in ds.conditions[i])
            for s in range(t):
                vals = "\t".join(_fmt(v) for v in ds.trajectories[i, s])
                fh.write(f"{i}\t{s}\t{cond}\t{vals}\n")
    return man_path, data_path


def _parse_manifest(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{ln}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            out[key] = val
    return out


_SPEC_TYPES = {
    "oscillator": OscillatorSpec,
    "battery": BatterySpec,
}


def load(stem: str) -> Dataset:
    man_path, data_path = stem + ".manifest.txt", stem + ".data.tsv"
    if not os.path.exists(man_path) or not os.path.exists(data_path):
        raise DataFormatError(f"dataset files missing at stem {stem!r}")
    man = _parse_manifest(man_path)
    try:
        kind = man["kind"]
        n = int(man["n_trajectories"])
        t = int(man["n_steps"])
        cond_names = tuple(v for v in man["condition_names"].split(",") if v)
        chan_names = tuple(v for v in man["channel_names"].split(",") if v)
    except KeyError as exc:
        raise DataFormatError(f"{man_path}: missing manifest key {exc}") from None
    if kind not in _SPEC_TYPES:
        raise DataFormatError(f"{man_path}: unknown dataset kind {kind!r}")
    spec_cls = _SPEC_TYPES[kind]
    spec = {}
    defaults = spec_cls()
    for fname, default in asdict(defaults).items():
        raw = man.get(f"spec.{fname}")
        if raw is None:
            spec[fname] = default
            continue
        if isinstance(default, (tuple, list)):
            spec[fname] = tuple(float(v) for v in raw.split(","))
        elif isinstance(default, int):
            spec[fname] = int(raw)
        else:
            spec[fname] = float(raw)
    n_cols = 2 + len(cond_names) + len(chan_names)
    trajs = np.zeros((n, t, len(chan_names)))
    conds = np.zeros((n, len(cond_names)))
    with open(data_path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if len(header) != n_cols:
            raise DataFormatError(f"{data_path}: row 0 has {len(header)} columns, "
                                  f"expected {n_cols}")
        for row_no, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != n_cols:
                raise DataFormatError(f"{data_path}: row {row_no} has {len(parts)} "
                                      f"columns, expected {n_cols}")
            try:
                i, s = int(parts[0]), int(parts[1])
                vals = [float(v) for v in parts[2:]]
            except ValueError:
                raise DataFormatError(f"{data_path}: row {row_no}: non-numeric value") \
                    from None
            if not 0 <= i < n or not 0 <= s < t:
                raise DataFormatError(f"{data_path}: row {row_no}: index out of range")
            conds[i] = vals[:len(cond_names)]
            trajs[i, s] = vals[len(cond_names):]
    return Dataset(kind, trajs, conds, chan_names, cond_names, spec,
                   int(man.get("seed", 0)))
