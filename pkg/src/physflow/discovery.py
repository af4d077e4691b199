"""Residual-driven constraint discovery.

Pipeline: compute model residuals -> flag features with statistically
significant (permutation-tested) association -> fit complexity-penalized
symbolic candidates over a typed basis (exhaustive subsets plus a genetic
refinement pass) -> validate on held-out data with dimensional bookkeeping ->
assign a hierarchy level by template matching.

The basis is a finite typed family: features, monomials up to total degree 3,
square roots, exponentials (of boundedly-scaled features), finite-difference
derivative features, and hinge terms for bound templates. Units are exponent
maps over base dimensions; fitted coefficients absorb residual units, so the
dimensional check is about structural consistency (every sum adds like
quantities, exponential arguments are dimensionless).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

# ---------------------------------------------------------------------------
# expressions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Diff:
    """Finite-difference time derivative of a named feature."""

    name: str


@dataclass(frozen=True)
class Add:
    terms: tuple


@dataclass(frozen=True)
class Mul:
    factors: tuple


@dataclass(frozen=True)
class Pow:
    base: object
    exponent: int


@dataclass(frozen=True)
class Sqrt:
    arg: object


@dataclass(frozen=True)
class Exp:
    arg: object


@dataclass(frozen=True)
class Hinge:
    """max(0, arg): one-sided bound template."""

    arg: object


def evaluate(expr, table: dict) -> np.ndarray:
    if isinstance(expr, Const):
        return np.asarray(expr.value, dtype=float)
    if isinstance(expr, Var):
        return table[expr.name]
    if isinstance(expr, Diff):
        return table[f"d({expr.name})/dt"]
    if isinstance(expr, Add):
        out = evaluate(expr.terms[0], table)
        for t in expr.terms[1:]:
            out = out + evaluate(t, table)
        return out
    if isinstance(expr, Mul):
        out = evaluate(expr.factors[0], table)
        for f in expr.factors[1:]:
            out = out * evaluate(f, table)
        return out
    if isinstance(expr, Pow):
        return evaluate(expr.base, table) ** expr.exponent
    if isinstance(expr, Sqrt):
        return np.sqrt(np.maximum(evaluate(expr.arg, table), 0.0))
    if isinstance(expr, Exp):
        return np.exp(np.clip(evaluate(expr.arg, table), -700.0, 700.0))
    if isinstance(expr, Hinge):
        return np.maximum(evaluate(expr.arg, table), 0.0)
    raise TypeError(f"unknown expression node {expr!r}")


def complexity(expr) -> int:
    if isinstance(expr, (Const, Var, Diff)):
        return 1
    if isinstance(expr, Add):
        return 1 + sum(complexity(t) for t in expr.terms)
    if isinstance(expr, Mul):
        return 1 + sum(complexity(f) for f in expr.factors)
    if isinstance(expr, Pow):
        return 1 + complexity(expr.base)
    return 1 + complexity(expr.arg)


def prefix(expr) -> str:
    """Canonical prefix form used for reporting and deterministic tie-breaks."""
    if isinstance(expr, Const):
        return f"{expr.value:.6g}"
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Diff):
        return f"d({expr.name})/dt"
    if isinstance(expr, Add):
        return "(+ " + " ".join(prefix(t) for t in expr.terms) + ")"
    if isinstance(expr, Mul):
        return "(* " + " ".join(prefix(f) for f in expr.factors) + ")"
    if isinstance(expr, Pow):
        return f"(^ {prefix(expr.base)} {expr.exponent})"
    if isinstance(expr, Sqrt):
        return f"(sqrt {prefix(expr.arg)})"
    if isinstance(expr, Exp):
        return f"(exp {prefix(expr.arg)})"
    if isinstance(expr, Hinge):
        return f"(max0 {prefix(expr.arg)})"
    raise TypeError(f"unknown expression node {expr!r}")


# ---------------------------------------------------------------------------
# units
# ---------------------------------------------------------------------------

DIMENSIONLESS: dict = {}


class UnitsUnknown(Exception):
    """A feature in the expression has no declared units."""


class UnitsError(ValueError):
    """Structurally inconsistent units (e.g. adding meters to seconds)."""


def _u_mul(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0.0) + v
        if abs(out[k]) < 1e-12:
            del out[k]
    return out


def _u_pow(a: dict, p: float) -> dict:
    return {k: v * p for k, v in a.items()}


def _u_eq(a: dict, b: dict) -> bool:
    keys = set(a) | set(b)
    return all(abs(a.get(k, 0.0) - b.get(k, 0.0)) < 1e-9 for k in keys)


def infer_units(expr, units: dict) -> dict:
    """Unit exponent map of an expression; raises on inconsistency/unknowns.

    Derivatives divide by time; Exp requires a dimensionless argument;
    numeric constants are dimensionless.
    """
    if isinstance(expr, Const):
        return DIMENSIONLESS
    if isinstance(expr, Var):
        if expr.name not in units or units[expr.name] is None:
            raise UnitsUnknown(expr.name)
        return dict(units[expr.name])
    if isinstance(expr, Diff):
        if expr.name not in units or units[expr.name] is None:
            raise UnitsUnknown(expr.name)
        return _u_mul(units[expr.name], {"s": -1.0})
    if isinstance(expr, Add):
        first = infer_units(expr.terms[0], units)
        for t in expr.terms[1:]:
            other = infer_units(t, units)
            if not _u_eq(first, other):
                raise UnitsError(
                    f"cannot add {prefix(expr.terms[0])} [{first}] to "
                    f"{prefix(t)} [{other}]")
        return first
    if isinstance(expr, Mul):
        out = DIMENSIONLESS
        for f in expr.factors:
            out = _u_mul(out, infer_units(f, units))
        return out
    if isinstance(expr, Pow):
        return _u_pow(infer_units(expr.base, units), expr.exponent)
    if isinstance(expr, Sqrt):
        return _u_pow(infer_units(expr.arg, units), 0.5)
    if isinstance(expr, Exp):
        arg = infer_units(expr.arg, units)
        if not _u_eq(arg, DIMENSIONLESS):
            raise UnitsError(f"exponential of a dimensioned quantity [{arg}]")
        return DIMENSIONLESS
    if isinstance(expr, Hinge):
        return infer_units(expr.arg, units)
    raise TypeError(f"unknown expression node {expr!r}")


# ---------------------------------------------------------------------------
# residual sets
# ---------------------------------------------------------------------------


@dataclass
class ResidualSet:
    """Row-wise feature table with a residual target and a fit/holdout split."""

    table: dict                   # feature name -> [N] values
    residual: np.ndarray          # [N]
    units: dict                   # feature name -> unit map | None
    fit_rows: np.ndarray          # index arrays, provably disjoint
    val_rows: np.ndarray
    target_units: dict | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.intersect1d(self.fit_rows, self.val_rows).size:
            raise ValueError("fit and holdout rows overlap")

    @property
    def feature_names(self) -> list:
        return sorted(self.table)

    def rows(self, idx: np.ndarray) -> dict:
        return {k: v[idx] for k, v in self.table.items()}


def build_residual_set(features: dict, residual: np.ndarray, units: dict | None = None,
                       group_ids: np.ndarray | None = None, seed: int = 0,
                       target_units: dict | None = None,
                       provenance: dict | None = None) -> ResidualSet:
    """Assemble a ResidualSet with a deterministic 50/50 group-level split."""
    residual = np.asarray(residual, dtype=float)
    n = len(residual)
    if group_ids is None:
        group_ids = np.arange(n)
    group_ids = np.asarray(group_ids)
    groups = np.unique(group_ids)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD15C]))
    order = rng.permutation(len(groups))
    fit_groups = set(groups[order[:len(groups) // 2]])
    fit_mask = np.array([g in fit_groups for g in group_ids])
    return ResidualSet(
        table={k: np.asarray(v, dtype=float) for k, v in features.items()},
        residual=residual,
        units=units or {},
        fit_rows=np.flatnonzero(fit_mask),
        val_rows=np.flatnonzero(~fit_mask),
        target_units=target_units,
        provenance=provenance or {},
    )


def compute_residuals(model, dataset, target_channel: int = 0,
                      seed: int = 0) -> ResidualSet:
    """Residuals of the integrated-bank reconstruction over a dataset.

    Rows are (trajectory, step) pairs; features are every state channel, every
    condition entry, and central-difference channel derivatives. The split is
    by trajectory, so no trajectory contributes to both sides.
    """
    x_true = dataset.trajectories
    if x_true.shape[2] != model.d_state:
        raise ValueError(f"model state dim {model.d_state} does not match "
                         f"dataset channels {x_true.shape[2]}")
    preds = model.predict_physical(x_true, dataset.conditions)
    r = x_true - preds
    n, t, d = x_true.shape
    dt = float(dataset.spec.get("dt", 1.0))
    table: dict = {}
    units: dict = {}
    unit_map = {"position": {"m": 1.0}, "velocity": {"m": 1.0, "s": -1.0},
                "gamma": {"s": -1.0}, "x0": {"m": 1.0}, "v0": {"m": 1.0, "s": -1.0},
                "temp_k": {"K": 1.0}, "capacity": {"Ah": 1.0},
                "soh": DIMENSIONLESS, "cycle": {"cyc": 1.0},
                "t_ambient_k": {"K": 1.0}, "a_prefactor": None}
    for j, name in enumerate(dataset.channel_names):
        col = x_true[:, :, j]
        table[name] = col.ravel()
        units[name] = unit_map.get(name)
        deriv = np.gradient(col, dt, axis=1)
        table[f"d({name})/dt"] = deriv.ravel()
        units[f"d({name})/dt"] = (_u_mul(unit_map[name], {"s": -1.0})
                                  if unit_map.get(name) is not None else None)
    for j, name in enumerate(dataset.condition_names):
        table[name] = np.repeat(dataset.conditions[:, j], t)
        units[name] = unit_map.get(name)
    group_ids = np.repeat(np.arange(n), t)
    target_name = dataset.channel_names[target_channel]
    return build_residual_set(
        table, r[:, :, target_channel].ravel(), units, group_ids, seed,
        target_units=unit_map.get(target_name),
        provenance={"kind": dataset.kind, "n_trajectories": n,
                    "target_channel": target_name})


# ---------------------------------------------------------------------------
# pattern extraction
# ---------------------------------------------------------------------------


def _abs_corr(f: np.ndarray, r: np.ndarray) -> float:
    sf, sr = f.std(), r.std()
    if sf <= 0 or sr <= 0:
        return 0.0
    return float(abs(np.mean((f - f.mean()) * (r - r.mean())) / (sf * sr)))


def _dependence(f: np.ndarray, r: np.ndarray) -> float:
    """Association robust to even symmetries: max correlation over f, f^2, |f|."""
    return max(_abs_corr(f, r), _abs_corr(f * f, r), _abs_corr(np.abs(f), r))


def extract_patterns(rs: ResidualSet, alpha_sig: float = 0.01,
                     n_permutations: int = 2000, seed: int = 0) -> list:
    """Features whose association with the residual passes a permutation test
    at level alpha_sig, Bonferroni-corrected across all feature variants.

    Each feature is tested through three variants (f, f^2, |f|) so purely even
    dependence is detectable. The permutation count is raised automatically
    when the requested one cannot reach the corrected threshold (the
    achievable p-value floor is 1/(B+1)).
    """
    rows = rs.fit_rows
    if len(rows) < 30:
        raise ValueError(f"need at least 30 fit samples, have {len(rows)}")
    r = rs.residual[rows]
    names = rs.feature_names
    n_tests = 3 * len(names)
    threshold = alpha_sig / max(n_tests, 1)
    needed = int(np.ceil(2.0 / threshold))
    n_perm = max(n_permutations, needed)

    def standardize(col: np.ndarray) -> np.ndarray:
        s = col.std()
        return (col - col.mean()) / s if s > 0 else np.zeros_like(col)

    variants, owners = [], []
    for name in names:
        f = rs.table[name][rows]
        for v in (f, f * f, np.abs(f)):
            variants.append(standardize(v))
            owners.append(name)
    fmat = np.column_stack(variants)                       # [n, 3m]
    r_std = standardize(r)
    n = len(r_std)
    obs = np.abs(fmat.T @ r_std) / n                       # [3m]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1A6]))
    exceed = np.zeros(len(variants))
    block = 512
    done = 0
    while done < n_perm:
        b = min(block, n_perm - done)
        rp = np.empty((n, b))
        for j in range(b):
            rp[:, j] = r_std[rng.permutation(n)]
        stats = np.abs(fmat.T @ rp) / n                    # [3m, b]
        exceed += (stats >= obs[:, None]).sum(axis=1)
        done += b
    p_vals = (1.0 + exceed) / (n_perm + 1.0)
    flagged = []
    for name in names:
        idx = [i for i, owner in enumerate(owners) if owner == name]
        if min(p_vals[i] for i in idx) <= threshold:
            flagged.append(name)
    return flagged


# ---------------------------------------------------------------------------
# candidate fitting
# ---------------------------------------------------------------------------


@dataclass
class CandidateLaw:
    terms: tuple                      # basis expressions
    coefficients: np.ndarray          # aligned with terms
    intercept: float
    complexity: int
    fit_r2: float
    penalized_score: float
    holdout_r2: float | None = None
    validated: bool | None = None
    units_status: str = "unchecked"   # consistent | inconsistent | indeterminate
    level: int | None = None

    @property
    def expression(self):
        parts = [Mul((Const(float(c)), t))
                 for c, t in zip(self.coefficients, self.terms)]
        if self.intercept != 0.0 or not parts:
            parts.append(Const(float(self.intercept)))
        return parts[0] if len(parts) == 1 else Add(tuple(parts))

    def predict(self, table: dict) -> np.ndarray:
        n = len(next(iter(table.values())))
        out = np.full(n, self.intercept)
        for c, t in zip(self.coefficients, self.terms):
            out = out + c * np.broadcast_to(evaluate(t, table), (n,))
        return out

    def describe(self) -> str:
        return prefix(self.expression)


def _term_to_var(name: str):
    if name.startswith("d(") and name.endswith(")/dt"):
        return Diff(name[2:-4])
    return Var(name)


def _basis_pool(rs: ResidualSet, flagged: Sequence[str]) -> list:
    """Typed basis over flagged features: monomials to degree 3, roots,
    exponentials of boundedly-scaled features, derivative references."""
    from itertools import combinations_with_replacement

    atoms = [_term_to_var(n) for n in flagged]
    pool = []
    for degree in (1, 2, 3):
        for combo in combinations_with_replacement(range(len(atoms)), degree):
            counts: dict = {}
            for i in combo:
                counts[i] = counts.get(i, 0) + 1
            factors = []
            for i, p in sorted(counts.items()):
                factors.append(atoms[i] if p == 1 else Pow(atoms[i], p))
            pool.append(factors[0] if len(factors) == 1 else Mul(tuple(factors)))
    for name, atom in zip(flagged, atoms):
        vals = rs.table[name]
        if np.all(vals >= 0.0):
            pool.append(Sqrt(atom))
        if np.max(np.abs(vals)) <= 20.0:
            pool.append(Exp(atom))
    seen, out = set(), []
    for term in pool:
        key = prefix(term)
        if key not in seen:
            seen.add(key)
            out.append(term)
    return out


def _fit_subset(terms: Sequence, table: dict, r: np.ndarray):
    cols = [np.broadcast_to(evaluate(t, table), r.shape) for t in terms]
    design = np.column_stack([*cols, np.ones_like(r)])
    coef, *_ = np.linalg.lstsq(design, r, rcond=None)
    mse = float(np.mean((design @ coef - r) ** 2))
    return coef[:-1], float(coef[-1]), mse


def _law_from(terms: tuple, table: dict, r: np.ndarray,
              lam: float, var_r: float) -> CandidateLaw:
    coefs, intercept, mse = _fit_subset(terms, table, r)
    law = CandidateLaw(terms=terms, coefficients=coefs, intercept=intercept,
                       complexity=0, fit_r2=0.0, penalized_score=0.0)
    comp = complexity(law.expression)
    fit_r2 = 1.0 - mse / var_r if var_r > 0 else 0.0
    return replace(law, complexity=comp, fit_r2=fit_r2,
                   penalized_score=mse + lam * comp)


def fit_candidates(rs: ResidualSet, flagged: Sequence[str],
                   lambda_complexity: float | None = None, max_terms: int = 4,
                   pool_cap: int = 16, gp_population: int = 200,
                   gp_generations: int = 50, tournament: int = 4,
                   mutation_rate: float = 0.1, seed: int = 0,
                   top_n: int = 10) -> list:
    """Ranked candidate laws: exhaustive subsets (size <= max_terms over the
    correlation-ranked pool) plus a genetic refinement pass, scored by
    MSE + lambda * complexity. Empty when nothing beats the constant model."""
    from itertools import combinations

    if not flagged:
        raise ValueError("flagged feature set is empty")
    rows = rs.fit_rows
    table = rs.rows(rows)
    r = rs.residual[rows]
    var_r = float(r.var())
    lam = lambda_complexity if lambda_complexity is not None else 1e-3 * var_r

    pool = _basis_pool(rs, flagged)
    pool.sort(key=lambda term: -_abs_corr(
        np.broadcast_to(evaluate(term, table), r.shape), r))
    pool = pool[:pool_cap]

    scored: dict = {}

    def consider(term_idx: tuple):
        key = tuple(sorted(term_idx))
        if key in scored or not key:
            return
        terms = tuple(pool[i] for i in key)
        scored[key] = _law_from(terms, table, r, lam, var_r)

    for size in range(1, min(max_terms, len(pool)) + 1):
        if size <= 2 or len(pool) <= 12:
            for combo in combinations(range(len(pool)), size):
                consider(combo)

    # genetic refinement over term subsets
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E7]))
    ranked = sorted(scored, key=lambda k: scored[k].penalized_score)
    population = list(ranked[:gp_population // 2])
    while len(population) < gp_population:
        size = int(rng.integers(1, max_terms + 1))
        population.append(tuple(sorted(rng.choice(len(pool), size=min(size, len(pool)),
                                                  replace=False).tolist())))
    for key in population:
        consider(key)
    for _ in range(gp_generations):
        def tourney():
            picks = rng.choice(len(population), size=min(tournament, len(population)),
                               replace=False)
            return min((population[i] for i in picks),
                       key=lambda k: scored[k].penalized_score)

        children = []
        for _ in range(len(population) // 2):
            a, b = tourney(), tourney()
            union = sorted(set(a) | set(b))
            if not union:
                continue
            size = int(rng.integers(1, min(max_terms, len(union)) + 1))
            child = list(rng.choice(union, size=size, replace=False))
            if rng.random() < mutation_rate:
                move = int(rng.integers(3))
                if move == 0 and len(child) < max_terms:
                    child.append(int(rng.integers(len(pool))))
                elif move == 1 and len(child) > 1:
                    child.pop(int(rng.integers(len(child))))
                else:
                    child[int(rng.integers(len(child)))] = int(rng.integers(len(pool)))
            child = tuple(sorted(set(child)))
            if child:
                consider(child)
                children.append(child)
        population = sorted(set(population) | set(children),
                            key=lambda k: scored[k].penalized_score)[:gp_population]

    const_score = var_r + lam * 1.0
    laws = [law for law in scored.values() if law.penalized_score < const_score]
    laws.sort(key=lambda l: (l.penalized_score, l.complexity, l.describe()))
    return laws[:top_n]


# ---------------------------------------------------------------------------
# validation and level assignment
# ---------------------------------------------------------------------------


def validate(law: CandidateLaw, rs: ResidualSet, r2_threshold: float = 0.9
             ) -> CandidateLaw:
    """Check units and holdout reproducibility; never refits coefficients."""
    try:
        term_units = [infer_units(t, rs.units) for t in law.terms]
        if rs.target_units is not None:
            # coefficients absorb the per-term unit mismatch; the structural
            # consistency of each term (checked above) is what can fail
            pass
        units_status = "consistent"
        units_ok = True
    except UnitsUnknown:
        units_status, units_ok = "indeterminate", False
    except UnitsError:
        units_status, units_ok = "inconsistent", False
    rows = rs.val_rows
    pred = law.predict(rs.rows(rows))
    r = rs.residual[rows]
    ss_tot = float(np.sum((r - r.mean()) ** 2))
    ss_res = float(np.sum((pred - r) ** 2))
    holdout_r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return replace(law, holdout_r2=holdout_r2, units_status=units_status,
                   validated=bool(units_ok and holdout_r2 >= r2_threshold))


def _is_square_term(expr) -> bool:
    if isinstance(expr, Pow):
        return expr.exponent % 2 == 0
    if isinstance(expr, Mul):
        non_const = [f for f in expr.factors if not isinstance(f, Const)]
        consts = [f.value for f in expr.factors if isinstance(f, Const)]
        if any(c < 0 for c in consts):
            return False
        if len(non_const) == 1:
            return _is_square_term(non_const[0])
        return (len(non_const) == 2
                and prefix(non_const[0]) == prefix(non_const[1]))
    return False


def _contains(expr, node_type) -> bool:
    if isinstance(expr, node_type):
        return True
    if isinstance(expr, Add):
        return any(_contains(t, node_type) for t in expr.terms)
    if isinstance(expr, Mul):
        return any(_contains(f, node_type) for f in expr.factors)
    if isinstance(expr, Pow):
        return _contains(expr.base, node_type)
    if isinstance(expr, (Sqrt, Exp, Hinge)):
        return _contains(expr.arg, node_type)
    return False


def assign_level(expr_or_law) -> int:
    """Template matching onto the constraint hierarchy.

    Sum of squared terms (conservation) -> 1; any derivative term
    (dynamics) -> 2; hinge/one-sided bound -> 3; everything else -> 4.
    """
    expr = expr_or_law.expression if isinstance(expr_or_law, CandidateLaw) \
        else expr_or_law
    terms = list(expr.terms) if isinstance(expr, Add) else [expr]
    substantive = [t for t in terms if not isinstance(t, Const)]
    if substantive and all(_is_square_term(t) for t in substantive):
        return 1
    if _contains(expr, Diff):
        return 2
    if _contains(expr, Hinge):
        return 3
    return 4


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------


def emit_laws(laws: Sequence[CandidateLaw], path: str,
              provenance: dict | None = None) -> None:
    """Write discovered laws as structured text for human review."""
    lines = ["[discovered-constraints]"]
    for key, val in sorted((provenance or {}).items()):
        lines.append(f"provenance.{key} = {val}")
    for i, law in enumerate(laws):
        lines.append(f"[law {i}]")
        lines.append(f"expression = {law.describe()}")
        lines.append("coefficients = "
                     + ",".join(repr(float(c)) for c in law.coefficients))
        lines.append(f"intercept = {law.intercept!r}")
        lines.append(f"complexity = {law.complexity}")
        lines.append(f"fit_r2 = {law.fit_r2!r}")
        lines.append(f"holdout_r2 = {law.holdout_r2!r}")
        lines.append(f"units = {law.units_status}")
        lines.append(f"validated = {law.validated}")
        lines.append(f"level = {assign_level(law) if law.validated else ''}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
