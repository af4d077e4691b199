"""Command-line pipeline: gen-data, train, sample, evaluate, verify-bounds,
discover. Every run is driven by a config file plus `section.key=value`
overrides, echoes its fully-resolved config, writes it next to the artifacts,
and is bit-for-bit reproducible from that file.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure,
4 verification failure (deviation bound violated).
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time

import numpy as np

from . import datasets as dsm
from .config import ConfigError, RunConfig, resolve_config, write_resolved
from .constraints import ConstraintSchedule, level_targets_batch
from .datasets import DataFormatError
from .discovery import (assign_level, compute_residuals, emit_laws, extract_patterns,
                        fit_candidates, validate)
from .guidance import GuidanceConfig
from .metrics import evaluate_model
from .model import GenerativeModel
from .sampler import IntegratorConfig, NumericError, generate, verify_bound
from .trainer import (CheckpointError, TrainConfig, load_checkpoint, save_checkpoint,
                      train)


class VerificationError(RuntimeError):
    """A certified bound was violated."""


def _dataset_spec(cfg: RunConfig):
    d = cfg.dataset
    if d.kind == "oscillator":
        return dsm.OscillatorSpec(
            n_trajectories=d.n_trajectories, steps=d.steps, dt=d.dt, m=d.m, k=d.k,
            gamma_range=d.gamma_range, amplitude_range=d.amplitude_range,
            seed=cfg.run.seed)
    if d.kind == "battery":
        return dsm.BatterySpec(
            n_cells=d.n_cells, cycles=d.cycles, temp_range_c=d.temp_range_c,
            a_range=d.a_range, alpha_sqrt=d.alpha_sqrt, c_nominal=d.c_nominal,
            substeps=d.substeps, seed=cfg.run.seed)
    raise ConfigError(f"dataset.kind: unknown kind {d.kind!r}")


def _generate_dataset(cfg: RunConfig) -> dsm.Dataset:
    spec = _dataset_spec(cfg)
    return dsm.gen_oscillator(spec) if cfg.dataset.kind == "oscillator" \
        else dsm.gen_battery(spec)


def _split(cfg: RunConfig, ds: dsm.Dataset):
    d = cfg.dataset
    return dsm.split(ds, mode=d.split, seed=cfg.run.seed, train_frac=d.train_frac,
                     train_max=d.train_max, test_min=d.test_min)


def _schedule(cfg: RunConfig) -> ConstraintSchedule:
    s = cfg.schedule
    return ConstraintSchedule(lambda_base=s.lambda_base, beta1=s.beta1,
                              kappa2=s.kappa2, kappa3=s.kappa3,
                              beta_consist=s.beta_consist, flat=s.flat)


def _guidance(cfg: RunConfig) -> GuidanceConfig:
    g = cfg.guidance
    return GuidanceConfig(alpha_max=g.alpha_max, sharpness=g.sharpness,
                          t_threshold=g.t_threshold, dt=g.dt, enabled=g.enabled)


def _train_cfg(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr,
                       beta1=t.beta1, beta2=t.beta2, eps=t.eps,
                       clip_norm=t.clip_norm, seed=cfg.run.seed)


def _integrator(cfg: RunConfig) -> IntegratorConfig:
    return IntegratorConfig(method=cfg.integrator.method,
                            steps=cfg.integrator.steps, seed=cfg.run.seed)


def _hash_files(*paths: str) -> str:
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def _echo_config(cfg: RunConfig) -> None:
    sys.stdout.write("# resolved configuration\n" + cfg.to_yaml())


def _finish(cfg: RunConfig) -> None:
    write_resolved(cfg, cfg.out_path("resolved_config.yaml"))
    _echo_config(cfg)


def _append_timing(cfg: RunConfig, command: str, seconds: float) -> None:
    path = cfg.out_path("timing.log")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "a") as fh:
        fh.write(f"{command}\t{seconds * 1e3:.3f}ms\n")


def _load_dataset(stem: str) -> dsm.Dataset:
    return dsm.load(stem)


def _require_checkpoint(path: str | None, command: str):
    if not path:
        raise DataFormatError(f"{command} requires --checkpoint (or --identity where "
                              "supported)")
    if not os.path.exists(path):
        raise DataFormatError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    ds = _generate_dataset(cfg)
    stem = cfg.out_path("dataset")
    man, data = dsm.save(ds, stem)
    print(f"wrote {man} and {data} ({len(ds)} trajectories)")
    _finish(cfg)
    _append_timing(cfg, "gen-data", time.perf_counter() - t0)
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    stem = args.data or cfg.out_path("dataset")
    ds = _load_dataset(stem)
    train_ds, _ = _split(cfg, ds)
    pack = dsm.make_pack(train_ds)
    model = GenerativeModel(
        d_state=train_ds.trajectories.shape[2], series_len=train_ds.trajectories.shape[1],
        d_condition=train_ds.conditions.shape[1], init_seed=cfg.run.seed,
        width=cfg.model.width, unet_width=cfg.model.unet_width)
    model.fit_normalization(train_ds.trajectories, train_ds.conditions)
    result = train(model, train_ds, pack, _schedule(cfg), _guidance(cfg),
                   _train_cfg(cfg), log=print)
    ckpt_path = cfg.out_path("checkpoint.bin")
    os.makedirs(os.path.dirname(ckpt_path) or ".", exist_ok=True)
    save_checkpoint(
        ckpt_path, model, result.opt_state,
        extra_meta={
            "dataset_hash": _hash_files(stem + ".manifest.txt", stem + ".data.tsv"),
            "dataset_stem": os.path.abspath(stem),
            "pack": {"x_bound": float(getattr(pack, "x_bound", 0.0) or 0.0),
                     "v_bound": float(getattr(pack, "v_bound", 0.0) or 0.0)},
            "config": cfg.to_dict(),
        },
        epoch=cfg.train.epochs)
    with open(cfg.out_path("trace.csv"), "w") as fh:
        fh.write("epoch,l_total,l_cfm,l1,l2,l3,l4,l_guidance,l_consist\n")
        for row in result.trace:
            vals = [row.epoch, row.l_total, row.l_cfm, *row.l_levels,
                    row.l_guidance, row.l_consist]
            fh.write(",".join(repr(v) for v in vals) + "\n")
    with open(cfg.out_path("timing.log"), "a") as fh:
        for row in result.trace:
            fh.write(f"train-epoch-{row.epoch}\t{row.wall_ms:.3f}ms\n")
    print(f"wrote {ckpt_path}")
    _finish(cfg)
    _append_timing(cfg, "train", time.perf_counter() - t0)
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    model, _, _ = _require_checkpoint(args.checkpoint, "sample")
    stem = args.data or cfg.out_path("dataset")
    ds = _load_dataset(stem)
    _, test_ds = _split(cfg, ds)
    n = min(args.count or cfg.metrics.n_eval, len(test_ds))
    conds = test_ds.conditions[:n]
    gcfg = _guidance(cfg)
    samples = generate(model, conds, _integrator(cfg),
                       gcfg if gcfg.enabled else None)
    out = dsm.Dataset(ds.kind, samples, conds, ds.channel_names,
                      ds.condition_names, dict(ds.spec), cfg.run.seed)
    man, data = dsm.save(out, cfg.out_path("samples"))
    print(f"wrote {man} and {data} ({n} samples)")
    _finish(cfg)
    _append_timing(cfg, "sample", time.perf_counter() - t0)
    return 0


def _references_for(samples_ds: dsm.Dataset, test_ds: dsm.Dataset, pack) -> np.ndarray:
    if samples_ds.kind == "oscillator":
        steps = samples_ds.trajectories.shape[1]
        return np.stack([pack.analytic_trajectory(c, steps)
                         for c in samples_ds.conditions])
    if len(samples_ds) > len(test_ds):
        raise DataFormatError("more samples than reference rows; regenerate samples")
    return test_ds.trajectories[:len(samples_ds)]


def cmd_evaluate(cfg: RunConfig, args) -> int:
    import dataclasses

    from .metrics import (EvalReport, energy_error, long_rmse, mmd,
                          regression_metrics, violation_rate)

    t0 = time.perf_counter()
    stem = args.data or cfg.out_path("dataset")
    ds = _load_dataset(stem)
    _, test_ds = _split(cfg, ds)
    pack = dsm.make_pack(ds)
    n_eval = min(cfg.metrics.n_eval, len(test_ds))

    if args.identity:
        sub = test_ds.subset(np.arange(n_eval))
        samples, conds, refs = sub.trajectories, sub.conditions, sub.trajectories
        report = _score_stack(sub.kind, samples, conds, refs, pack, cfg)
    elif args.samples:
        samples_ds = _load_dataset(args.samples)
        refs = _references_for(samples_ds, test_ds, pack)
        report = _score_stack(samples_ds.kind, samples_ds.trajectories,
                              samples_ds.conditions, refs, pack, cfg)
    else:
        model, _, _ = _require_checkpoint(args.checkpoint, "evaluate")
        gcfg = _guidance(cfg)
        report = evaluate_model(model, test_ds, pack, _integrator(cfg),
                                gcfg if gcfg.enabled else None,
                                threshold=cfg.metrics.violation_threshold,
                                horizon_frac=cfg.metrics.horizon_frac,
                                n_eval=n_eval, workers=cfg.run.workers)
    report_path = cfg.out_path("report.txt")
    os.makedirs(os.path.dirname(report_path) or ".", exist_ok=True)
    with open(report_path, "w") as fh:
        fh.write(report.to_text())
    with open(cfg.out_path("summary.csv"), "w") as fh:
        fh.write(report.summary_row())
    print(report.to_text())
    print(f"wrote {report_path}")
    _finish(cfg)
    _append_timing(cfg, "evaluate", time.perf_counter() - t0)
    return 0


def _score_stack(kind: str, samples, conds, refs, pack, cfg: RunConfig):
    """Score a fixed stack of trajectories (identity or pre-generated samples)."""
    from .metrics import (EvalReport, energy_error, long_rmse, mmd,
                          regression_metrics)
    from .metrics import _phase_or_max

    is_osc = kind == "oscillator"
    dt = pack.dt if hasattr(pack, "dt") else 1.0
    reports = [pack.violations(samples[i], conds[i]) for i in range(len(samples))]
    totals = np.array([r.phi_total for r in reports])
    phis = np.array([r.phi for r in reports])
    e_errs = np.array([
        energy_error(samples[i], pack, gamma=float(conds[i][0])) if is_osc
        else reports[i].phi[0]
        for i in range(len(samples))])
    p_errs = np.array([_phase_or_max(samples[i], refs[i], dt) if is_osc
                       else float("nan") for i in range(len(samples))])
    rmses = np.array([long_rmse(samples[i], refs[i], cfg.metrics.horizon_frac)
                      for i in range(len(samples))])
    same = all(np.array_equal(samples[i], refs[i]) for i in range(len(samples)))
    mmd_val = 0.0 if same else mmd(samples, refs)
    if same:
        rmse, mae, r2 = 0.0, 0.0, 1.0
    else:
        rmse, mae, r2 = regression_metrics(samples[:, 1:, :], refs[:, 1:, :])
    return EvalReport(
        energy_error=float(e_errs.mean()),
        phase_error=float(np.nanmean(p_errs)) if is_osc else float("nan"),
        long_rmse=float(np.median(rmses)),
        violation_rate=100.0 * float(np.mean(totals > cfg.metrics.violation_threshold)),
        violation_threshold=cfg.metrics.violation_threshold,
        phi_means=tuple(float(v) for v in phis.mean(axis=0)),
        mmd=float(mmd_val), r2=float(r2), rmse=float(rmse), mae=float(mae),
        n_samples=len(samples))


def cmd_verify_bounds(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    model, _, meta = _require_checkpoint(args.checkpoint, "verify-bounds")
    stem = args.data or cfg.out_path("dataset")
    ds = _load_dataset(stem)
    train_ds, test_ds = _split(cfg, ds)
    pack = dsm.make_pack(train_ds)
    gcfg = _guidance(cfg)
    int_cfg = _integrator(cfg)
    n_starts = args.starts
    sub = test_ds.subset(np.arange(min(n_starts, len(test_ds)))) if len(test_ds) \
        else test_ds
    conds = sub.conditions
    if len(conds) < n_starts:
        reps = int(np.ceil(n_starts / max(len(conds), 1)))
        conds = np.tile(conds, (reps, 1))[:n_starts]
    from . import diffmath as dm

    h_c_data = model.encode(conds).data
    weights = model.bank.mixture_weights(dm.constant(h_c_data)).data

    def _aligned(x):
        # probe stacks repeat the condition block, so cycling aligns exactly
        return np.arange(len(x)) % len(conds)

    def velocity_field(x, t):
        return model.velocity_at(x, t, dm.constant(h_c_data[_aligned(x)])).data

    def operator_model(x):
        return model.bank_integrated(x, dm.constant(h_c_data[_aligned(x)])).data

    def operator_oracle(x):
        sel = _aligned(x)
        out = np.zeros_like(x)
        phys = model.denormalize_x(x)
        for lvl in (1, 2, 3, 4):
            tgt = model.normalize_x(level_targets_batch(pack, lvl, phys, conds[sel]))
            out += weights[sel, lvl - 1][:, None, None] * tgt
        return out

    rng = np.random.default_rng(np.random.SeedSequence([cfg.run.seed, 0xB0DD]))
    x0 = rng.standard_normal((len(conds), model.series_len, model.d_state))
    # probe where sampling travels: path interpolants between noise and data
    data_norm = model.normalize_x(sub.trajectories)
    ts = np.linspace(0.0, 1.0, 5)
    probes = np.concatenate([
        (1.0 - t) * x0[:len(data_norm)] + t * data_norm for t in ts])
    cert = verify_bound(velocity_field, operator_model, operator_oracle, gcfg,
                        x0, x0.copy(), int_cfg, probes[:256])
    path = cfg.out_path("certificate.txt")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write("[deviation-bound-certificate]\n")
        fh.write(f"holds = {cert.holds}\n")
        fh.write(f"n_starts = {len(conds)}\n")
        fh.write(f"holds_per_start = {int(cert.holds_per_start.sum())}\n")
        fh.write(f"eps_fno = {cert.eps_fno!r}\n")
        fh.write(f"l_hat = {cert.l_hat!r}\n")
        fh.write(f"l_f_hat = {cert.l_f_hat!r}\n")
        fh.write(f"max_deviation = {float(cert.deviations.max())!r}\n")
        fh.write(f"final_bound = {float(cert.bounds[-1].max())!r}\n")
    print(f"bound holds: {cert.holds} "
          f"({int(cert.holds_per_start.sum())}/{len(conds)} starts); wrote {path}")
    _finish(cfg)
    _append_timing(cfg, "verify-bounds", time.perf_counter() - t0)
    if not cert.holds:
        raise VerificationError("deviation bound violated; see certificate")
    return 0


def cmd_discover(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    model, _, meta = _require_checkpoint(args.checkpoint, "discover")
    stem = args.data or cfg.out_path("dataset")
    ds = _load_dataset(stem)
    _, test_ds = _split(cfg, ds)
    d = cfg.discovery
    rs = compute_residuals(model, test_ds, target_channel=d.target_channel,
                           seed=cfg.run.seed)
    flagged = extract_patterns(rs, alpha_sig=d.alpha_sig, seed=cfg.run.seed)
    print(f"flagged features: {flagged or '(none)'}")
    laws = []
    if flagged:
        lam = None if d.lambda_complexity < 0 else d.lambda_complexity
        laws = fit_candidates(rs, flagged, lambda_complexity=lam,
                              max_terms=d.max_terms, gp_population=d.gp_population,
                              gp_generations=d.gp_generations,
                              tournament=d.tournament,
                              mutation_rate=d.mutation_rate, seed=cfg.run.seed)
        laws = [validate(law, rs) for law in laws]
    path = cfg.out_path("laws.txt")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    emit_laws(laws, path, provenance={
        "dataset_hash": _hash_files(stem + ".manifest.txt", stem + ".data.tsv"),
        "checkpoint": os.path.abspath(args.checkpoint),
    })
    for law in laws[:5]:
        lvl = assign_level(law) if law.validated else "-"
        print(f"law: {law.describe()}  holdout_r2={law.holdout_r2:.4f} "
              f"validated={law.validated} level={lvl}")
    print(f"wrote {path}")
    _finish(cfg)
    _append_timing(cfg, "discover", time.perf_counter() - t0)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="physflow",
        description="physics-constrained generative time-series pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config path")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="config override")

    common(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    p = sub.add_parser("train", help="train the joint model")
    common(p)
    p.add_argument("--data", default=None, help="dataset stem")
    p = sub.add_parser("sample", help="sample trajectories from a checkpoint")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--count", type=int, default=None)
    p = sub.add_parser("evaluate", help="score a model, samples, or the data itself")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--samples", default=None, help="pre-generated samples stem")
    p.add_argument("--identity", action="store_true",
                   help="score the dataset's own trajectories")
    p = sub.add_parser("verify-bounds", help="certify the deviation bound")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--starts", type=int, default=16)
    p = sub.add_parser("discover", help="mine residuals for constraint candidates")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "verify-bounds": cmd_verify_bounds,
    "discover": cmd_discover,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        cfg = resolve_config(args.config, args.overrides)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
