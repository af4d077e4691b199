"""Joint optimization of the operator bank and the velocity field, plus
checkpoint persistence.

Per minibatch, in order: bank forward on the data batch -> hierarchical level
losses -> draw one shared flow time t -> sample the probability path ->
velocity forward -> guidance correction (closed form, constant target) ->
total loss -> one shared Adam update over every parameter. All random streams
derive from (root seed, purpose, epoch, batch), so training is bit-for-bit
reproducible and resumable from any epoch boundary.
"""

from __future__ import annotations

import io
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import diffmath as dm
from .cfm import cfm_loss, path_point, sample_path
from .constraints import (ConstraintSchedule, consistency_loss, level_targets_batch,
                          total_loss)
from .datasets import Dataset
from .guidance import GuidanceConfig, guidance_loss, guidance_term
from .model import GenerativeModel
from .sampler import NumericError

CHECKPOINT_MAGIC = b"PHYSFLOW\x00CKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    """Unreadable, truncated, or version-mismatched checkpoint."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("rates and sizes must be positive")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_init(params: dict) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, cfg: TrainConfig):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if set(params) != set(grads):
        raise ValueError("parameter/gradient name sets differ")
    t = state["step"] + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_m, new_v, new_p = {}, {}, {}
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {k}: {g.shape} vs {p.shape}")
        m = b1 * state["m"][k] + (1.0 - b1) * g
        v = b2 * state["v"][k] + (1.0 - b2) * g * g
        new_m[k], new_v[k] = m, v
        new_p[k] = p - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return new_p, {"step": t, "m": new_m, "v": new_v}


def clip_gradients(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Global-norm clipping; never increases the norm."""
    total = float(np.sqrt(np.sum([float(np.sum(g * g)) for g in grads.values()])))
    if not np.isfinite(total):
        raise NumericError("non-finite gradient norm")
    if max_norm <= 0 or total <= max_norm:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class BatchRecord:
    epoch: int
    batch: int
    t: float
    l_total: float
    l_cfm: float
    l_levels: tuple
    l_guidance: float
    l_consist: float


@dataclass
class TraceRow:
    epoch: int
    l_total: float
    l_cfm: float
    l_levels: tuple
    l_guidance: float
    l_consist: float
    wall_ms: float


def _stream(seed: int, tag: str, *idx: int) -> np.random.Generator:
    tag_key = zlib.crc32(tag.encode())
    return np.random.default_rng(np.random.SeedSequence([seed, tag_key, *idx]))


@dataclass
class TrainResult:
    trace: list = field(default_factory=list)
    batches: list = field(default_factory=list)
    opt_state: dict | None = None


def train(model: GenerativeModel, train_ds: Dataset, pack,
          sched: ConstraintSchedule, gcfg: GuidanceConfig, cfg: TrainConfig,
          start_epoch: int = 0, opt_state: dict | None = None,
          log=None) -> TrainResult:
    """Run the joint objective for cfg.epochs; mutates model parameters."""
    x_all = train_ds.trajectories
    c_all = train_ds.conditions
    n = len(train_ds)
    if n == 0:
        raise ValueError("empty training dataset")
    bs = min(cfg.batch_size, n)
    params = model.parameter_arrays()
    state = opt_state if opt_state is not None else adam_init(params)
    need_bank_data = any(l > 0 for l in sched.lambda_base)
    need_bank_path = gcfg.enabled or sched.beta_consist > 0
    result = TrainResult()

    for epoch in range(start_epoch, cfg.epochs):
        t_start = time.perf_counter()
        order = _stream(cfg.seed, "shuffle", epoch).permutation(n)
        sums = np.zeros(8)
        n_batches = 0
        for bi, lo in enumerate(range(0, n, bs)):
            idx = order[lo:lo + bs]
            x_phys = x_all[idx]
            c_raw = c_all[idx]
            x1 = model.normalize_x(x_phys)
            t_flow = float(_stream(cfg.seed, "time", epoch, bi).uniform(0.0, 1.0))
            path_rng = _stream(cfg.seed, "path", epoch, bi)

            with dm.Tape() as tape:
                h_c = model.encode(c_raw)
                l_levels: list = [0.0, 0.0, 0.0, 0.0]
                if need_bank_data:
                    outs = model.bank_levels(x1, h_c)
                    for lvl in range(4):
                        if sched.lambda_base[lvl] == 0:
                            continue
                        tgt = model.normalize_x(
                            level_targets_batch(pack, lvl + 1, x_phys, c_raw))
                        diff = dm.sub(outs[lvl], dm.constant(tgt))
                        l_levels[lvl] = dm.mean(dm.mul(diff, diff))

                x_t, u_t, x0 = sample_path(x1, t_flow, path_rng)
                t_next = min(t_flow + gcfg.dt, 1.0)
                x_next = path_point(x0, x1, t_next)

                l_guid = 0.0
                l_cons = 0.0
                u_fno_t = None
                if need_bank_path:
                    u_fno_t = model.bank_integrated(x_t, h_c)
                    if gcfg.enabled:
                        l_guid = guidance_loss(u_fno_t, dm.constant(x_next))
                    if sched.beta_consist > 0:
                        l_cons = consistency_loss(u_fno_t, dm.constant(x_next))

                v = model.velocity_at(x_t, t_flow, h_c)
                if gcfg.enabled and gcfg.alpha_max > 0 and u_fno_t is not None:
                    g_term = guidance_term(x_t, u_fno_t.data, t_flow, gcfg)
                    v = dm.sub(v, dm.constant(g_term))
                l_cfm = cfm_loss(v, u_t)
                l_tot = total_loss(l_cfm, l_levels, l_guid, l_cons, t_flow, sched)

            l_tot_val = l_tot.item()
            if not np.isfinite(l_tot_val):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {bi}")
            named = model.named_parameters()
            grad_map = tape.backward(l_tot)
            grads = {k: grad_map.get(p, np.zeros_like(p.data))
                     for k, p in named.items()}
            grads, _ = clip_gradients(grads, cfg.clip_norm)
            params, state = adam_step(params, grads, state, cfg)
            model.set_parameters(params)

            comp = np.array([
                l_tot_val,
                l_cfm.item(),
                *[li.item() if isinstance(li, dm.Tensor) else float(li)
                  for li in l_levels],
                l_guid.item() if isinstance(l_guid, dm.Tensor) else float(l_guid),
                l_cons.item() if isinstance(l_cons, dm.Tensor) else float(l_cons),
            ])
            sums += comp
            n_batches += 1
            result.batches.append(BatchRecord(
                epoch, bi, t_flow, comp[0], comp[1], tuple(comp[2:6]),
                comp[6], comp[7]))
        mean = sums / max(n_batches, 1)
        row = TraceRow(epoch, mean[0], mean[1], tuple(mean[2:6]), mean[6], mean[7],
                       (time.perf_counter() - t_start) * 1e3)
        result.trace.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}  total {row.l_total:.5f}  cfm {row.l_cfm:.5f}  "
                f"levels {['%.4f' % v for v in row.l_levels]}  "
                f"guid {row.l_guidance:.5f}  consist {row.l_consist:.5f}")
    result.opt_state = state
    return result


# ---------------------------------------------------------------------------
# checkpoint container: versioned named float64 arrays + yaml metadata
# ---------------------------------------------------------------------------

def _pack_arrays(arrays: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(path: str, model: GenerativeModel, opt_state: dict | None = None,
                    extra_meta: dict | None = None, epoch: int = 0) -> None:
    meta = {
        "model": model.meta(),
        "epoch": int(epoch),
        "adam_step": int(opt_state["step"]) if opt_state else 0,
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = dict(model.parameter_arrays())
    if opt_state is not None:
        arrays.update({f"adam.m.{k}": v for k, v in opt_state["m"].items()})
        arrays.update({f"adam.v.{k}": v for k, v in opt_state["v"].items()})
    meta_bytes = yaml.safe_dump(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(_pack_arrays(arrays))


def load_checkpoint(path: str):
    """Returns (model, opt_state | None, meta); validates magic and version."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {exc}") from None
    view = memoryview(blob)
    off = len(CHECKPOINT_MAGIC)
    if bytes(view[:off]) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path!r} is not a physflow checkpoint")
    try:
        (version,) = struct.unpack_from("<I", view, off)
        off += 4
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
        (meta_len,) = struct.unpack_from("<Q", view, off)
        off += 8
        meta = yaml.safe_load(bytes(view[off:off + meta_len]).decode())
        if len(view) < off + meta_len:
            raise struct.error("truncated metadata")
        off += meta_len
        (n_arrays,) = struct.unpack_from("<I", view, off)
        off += 4
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off:off + name_len]).decode()
            off += name_len
            (ndim,) = struct.unpack_from("<B", view, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", view, off) if ndim else ()
            off += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            nbytes = count * 8
            if off + nbytes > len(view):
                raise struct.error("truncated array data")
            arrays[name] = np.frombuffer(view, dtype="<f8", count=count,
                                         offset=off).reshape(shape).copy()
            off += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint {path!r}: {exc}") \
            from None
    model = GenerativeModel.from_meta(meta["model"])
    model_params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    model.set_parameters(model_params)
    opt_state = None
    if any(k.startswith("adam.m.") for k in arrays):
        opt_state = {
            "step": int(meta.get("adam_step", 0)),
            "m": {k[len("adam.m."):]: v for k, v in arrays.items()
                  if k.startswith("adam.m.")},
            "v": {k[len("adam.v."):]: v for k, v in arrays.items()
                  if k.startswith("adam.v.")},
        }
    return model, opt_state, meta
