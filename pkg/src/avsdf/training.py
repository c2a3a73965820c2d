"""Fitting loop, loss, checkpoints and the ablation harness."""
from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import body as B
from . import oracle as O
from .errors import ArchitectureMismatch, ContractViolation, FormatError, TrainingDiverged
from .numerics import AdamState, T, Tape, Tensor, adam_step
from .volsdf import ModelSpec, VolumetricSDF

log = logging.getLogger(__name__)

CKPT_MAGIC = b"AVSC"
CKPT_VERSION = 1
JOINT_RANGE = 0.9
BODY_SOURCES = ("random", "pool", "fixed")


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    total_steps: int = 50_000
    seed: int = 0
    rank: int = 80
    width: int = 64
    use_gamma: bool = True
    padding: float = 0.125
    points_per_part: int = 1000
    sign_sharpness: float = 0.005
    body_source: str = "random"
    pool_size: int = 200
    eval_every: int = 0
    eval_bodies: int = 2
    log_every: int = 100

    def validate(self) -> "TrainConfig":
        if self.lr_end > self.lr_start:
            raise ContractViolation("lr_end must not exceed lr_start")
        for name in ("batch_size", "lr_start", "lr_end", "total_steps", "width",
                     "points_per_part", "sign_sharpness", "pool_size"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if self.rank < 0 or self.padding < 0:
            raise ContractViolation("rank and padding must be non-negative")
        if self.body_source not in BODY_SOURCES:
            raise ContractViolation(f"body_source must be one of {BODY_SOURCES}")
        return self

    def spec(self) -> ModelSpec:
        return ModelSpec(rank=self.rank, width=self.width, use_gamma=self.use_gamma)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# loss


def sdf_loss(pred: Tensor, gt: np.ndarray, tau: float = 0.005) -> Tensor:
    """Mean of (tanh(d~/tau) - sgn d)^2 + (|d~| - |d|)^2."""
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractViolation("predictions and ground truth are misaligned")
    if pred.size == 0:
        raise ContractViolation("loss over an empty batch")
    dt = pred.dtype
    sign = T.sub(T.tanh(T.mul(pred, 1.0 / tau)), Tensor(np.sign(gt).astype(dt)))
    mag = T.sub(T.abs(pred), Tensor(np.abs(gt).astype(dt)))
    return T.mean(T.add(T.square(sign), T.square(mag)))


def hard_sign_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """The literal sign + magnitude objective with sgn on both arguments (metric only)."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    return float(np.mean((np.sign(pred) - np.sign(gt)) ** 2 + (np.abs(pred) - np.abs(gt)) ** 2))


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Linear anneal; step 0 is exactly lr_start and the final step exactly lr_end."""
    if cfg.total_steps <= 1:
        return cfg.lr_start
    f = step / (cfg.total_steps - 1)
    if f >= 1.0:
        return cfg.lr_end
    return cfg.lr_start * (1.0 - f) + cfg.lr_end * f


# --------------------------------------------------------------------------
# bodies


def random_rotation_vector(rng) -> np.ndarray:
    """Axis-angle of a uniformly random rotation."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    s = np.linalg.norm(q[1:])
    if s == 0:
        return np.zeros(3)
    return q[1:] / s * 2.0 * math.atan2(s, q[0])


def random_params(rng):
    beta = np.clip(rng.standard_normal(B.N_BETA), -B.BETA_LIMIT, B.BETA_LIMIT)
    theta = rng.uniform(-JOINT_RANGE, JOINT_RANGE, (B.K, 3))
    theta[0] = random_rotation_vector(rng)
    return beta, theta


@dataclass
class BodySample:
    body: B.BodyState
    clouds: np.ndarray
    beta: np.ndarray = None
    theta: np.ndarray = None


def make_body(beta, theta, padding: float, n_points: int, cloud_seed) -> BodySample:
    body = B.forward_kinematics(beta, theta, padding=padding)
    clouds = O.sample_surface(body, n_points, np.random.default_rng(cloud_seed))
    return BodySample(body, clouds, np.asarray(beta), np.asarray(theta))


def body_pool(count: int, seed: int, padding: float = B.DEFAULT_PADDING,
              n_points: int = O.DEFAULT_CLOUD_SIZE) -> list:
    rng = np.random.default_rng([seed, 7])
    out = []
    for i in range(count):
        beta, theta = random_params(rng)
        out.append(make_body(beta, theta, padding, n_points, [seed, 8, i]))
    return out


def fixed_body(seed: int, padding: float = B.DEFAULT_PADDING, n_points: int = O.DEFAULT_CLOUD_SIZE) -> BodySample:
    return body_pool(1, seed, padding, n_points)[0]


class BodySource:
    """Draws training bodies; ``random`` draws fresh (beta, theta) each time."""

    def __init__(self, cfg: TrainConfig, bodies: list | None = None):
        self.cfg = cfg
        if bodies is not None:
            self.bodies = list(bodies)
        elif cfg.body_source == "pool":
            self.bodies = body_pool(cfg.pool_size, cfg.seed, cfg.padding, cfg.points_per_part)
        elif cfg.body_source == "fixed":
            self.bodies = [fixed_body(cfg.seed, cfg.padding, cfg.points_per_part)]
        else:
            self.bodies = None

    def draw(self, rng) -> BodySample:
        if self.bodies is None:
            beta, theta = random_params(rng)
            body = B.forward_kinematics(beta, theta, padding=self.cfg.padding)
            return BodySample(body, O.sample_surface(body, self.cfg.points_per_part, rng), beta, theta)
        return self.bodies[int(rng.integers(len(self.bodies)))]


# --------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    config: TrainConfig
    model: VolumetricSDF
    optimizer: AdamState
    rng: np.random.Generator
    step: int = 0
    history: list = field(default_factory=list)


def new_state(cfg: TrainConfig) -> TrainState:
    cfg.validate()
    model = VolumetricSDF(cfg.spec(), seed=cfg.seed)
    return TrainState(cfg, model, AdamState.for_params(model.params),
                      np.random.default_rng([cfg.seed, 3]))


def batch_loss(model: VolumetricSDF, items: list, cfg: TrainConfig, rng):
    """Loss over one batch of bodies; returns (loss tensor, preds, gts, points)."""
    preds, gts, pts_all = [], [], []
    for it in items:
        s = O.sample_training_points(it.body, rng)
        inside = B.inside_boxes(s.points, it.body).any(axis=0)
        pts = s.points[inside]
        cond = model.prepare(it.body, it.clouds)
        res = model.query(pts, it.body, cond, "hybrid")
        if np.any(res.branch != 1):
            raise ContractViolation("a supervision point landed on the analytic branch")
        preds.append(res.distance)
        gts.append(s.gt[inside])
        pts_all.append(pts)
    pred = T.concat(preds)
    gt = np.concatenate(gts)
    return sdf_loss(pred, gt, cfg.sign_sharpness), pred, gt, np.concatenate(pts_all)


def train_step(state: TrainState, source: BodySource) -> float:
    cfg, model = state.config, state.model
    items = [source.draw(state.rng) for _ in range(cfg.batch_size)]
    names = list(model.params)
    with Tape() as tape:
        loss, pred, gt, pts = batch_loss(model, items, cfg, state.rng)
    value = float(loss.data)
    if not math.isfinite(value):
        bad = int(np.argmax(~np.isfinite(pred.data))) if not np.all(np.isfinite(pred.data)) else 0
        raise TrainingDiverged(
            f"non-finite loss at step {state.step}", step=state.step,
            detail={"point": pts[bad].tolist(), "gt": float(gt[bad]), "pred": float(pred.data[bad])})
    grads = tape.backward(loss, [model.params[n] for n in names])
    for n, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {n} at step {state.step}",
                                   step=state.step, detail={"param": n})
    adam_step(model.params, dict(zip(names, grads)), state.optimizer, learning_rate(cfg, state.step))
    state.step += 1
    state.history.append(value)
    return value


def fit(cfg: TrainConfig | None = None, source: BodySource | None = None, state: TrainState | None = None,
        until: int | None = None, eval_source: list | None = None, callback=None) -> TrainState:
    """Train until ``until`` (default ``total_steps``), resuming ``state`` if given."""
    if state is None:
        state = new_state(cfg or TrainConfig())
    cfg = state.config
    source = source or BodySource(cfg)
    stop = cfg.total_steps if until is None else min(until, cfg.total_steps)
    t0 = time.perf_counter()
    while state.step < stop:
        value = train_step(state, source)
        if cfg.log_every and state.step % cfg.log_every == 0:
            log.info("step %d loss %.6f (%.1fs)", state.step, value, time.perf_counter() - t0)
        if cfg.eval_every and eval_source and state.step % cfg.eval_every == 0:
            rep = evaluate_model(state.model, eval_source[:cfg.eval_bodies], seed=cfg.seed)
            log.info("step %d eval %s", state.step, json.dumps(asdict(rep)))
        if callback is not None:
            callback(state)
    return state


def evaluate_model(model: VolumetricSDF, items: list, seed: int = 0, mode: str = "hybrid",
                   n_uniform: int = 30_000, n_surface: int = 30_000) -> O.EvalReport:
    reports = []
    for i, it in enumerate(items):
        cond = model.prepare(it.body, it.clouds)
        rng = np.random.default_rng([seed, 11, i])
        reports.append(O.evaluate(model.sdf_function(it.body, cond, mode), it.body, rng,
                                  n_uniform, n_surface))
    return O.mean_reports(reports)


def validation_loss(model: VolumetricSDF, items: list, cfg: TrainConfig, seed: int = 0) -> float:
    """Mean training loss over fixed held-out samples, without gradients."""
    rng = np.random.default_rng([seed, 13])
    vals = []
    with T.no_grad():
        for it in items:
            loss, *_ = batch_loss(model, [it], cfg, rng)
            vals.append(float(loss.data))
    return math.fsum(vals) / len(vals)


# --------------------------------------------------------------------------
# checkpoints


def _tensor_manifest(arrays: dict, offset: int):
    entries = []
    for name in sorted(arrays):
        a = arrays[name]
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += 4 * a.size
    return entries, offset


def save_checkpoint(path, state: TrainState, with_optimizer: bool = True) -> None:
    params = {k: v.data for k, v in state.model.params.items()}
    manifest, end = _tensor_manifest(params, 0)
    opt = None
    blobs = [params[e["name"]] for e in manifest]
    if with_optimizer:
        moments = {f"m/{k}": state.optimizer.m[k] for k in params}
        moments.update({f"v/{k}": state.optimizer.v[k] for k in params})
        opt_manifest, end = _tensor_manifest(moments, end)
        opt = {"t": state.optimizer.t, "tensors": opt_manifest}
        blobs += [moments[e["name"]] for e in opt_manifest]
    header = {
        "schema_version": CKPT_VERSION,
        "config": asdict(state.config),
        "tensors": manifest,
        "optimizer": opt,
        "rng": state.rng.bit_generator.state,
        "step": state.step,
        "history": state.history,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in blobs)
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes + payload)


def load_checkpoint(path, expect: TrainConfig | ModelSpec | None = None) -> TrainState:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if len(buf) < 12 + hlen:
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(buf[12:12 + hlen])
    except ValueError as exc:
        raise FormatError("corrupt checkpoint header") from exc
    cfg = TrainConfig.from_dict(header["config"])
    spec = cfg.spec()
    if expect is not None:
        want = expect.spec() if isinstance(expect, TrainConfig) else expect
        if want != spec:
            raise ArchitectureMismatch(f"checkpoint holds {spec}, expected {want}")
    payload = memoryview(buf)[12 + hlen:]

    def read(entries):
        out = {}
        for e in entries:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            lo, hi = e["offset"], e["offset"] + 4 * n
            if hi > len(payload):
                raise FormatError("truncated checkpoint payload")
            out[e["name"]] = np.frombuffer(payload[lo:hi], dtype="<f4").astype(np.float32).reshape(e["shape"])
        return out

    params = read(header["tensors"])
    ref = VolumetricSDF.expected_shapes(spec)
    if set(params) != set(ref) or any(tuple(params[k].shape) != ref[k] for k in ref):
        raise ArchitectureMismatch("checkpoint tensors do not match its declared architecture")
    model = VolumetricSDF(spec, {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()})
    opt = AdamState.for_params(model.params)
    if header["optimizer"] is not None:
        mom = read(header["optimizer"]["tensors"])
        opt.t = header["optimizer"]["t"]
        for k in params:
            opt.m[k] = mom[f"m/{k}"]
            opt.v[k] = mom[f"v/{k}"]
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = header["rng"]
    return TrainState(cfg, model, opt, rng, header["step"], list(header["history"]))


# --------------------------------------------------------------------------
# ablations

R_SWEEP = (0, 1, 5, 10, 20, 40, 80)
WIDTH_SWEEP = (32, 40, 50, 64)
PADDING_SWEEP = (0.05, 0.1, 0.125, 0.25, 0.5, 1.0)
POINTS_SWEEP = (250, 500, 1000, 2000)
_SWEEPS = {"rank": R_SWEEP, "width": WIDTH_SWEEP, "padding": PADDING_SWEEP, "points_per_part": POINTS_SWEEP}


def sweep_configs(kind: str, base: TrainConfig | None = None) -> list:
    """(config, is_default) rows for one ablation axis."""
    if kind not in _SWEEPS:
        raise ContractViolation(f"unknown sweep {kind!r}; choose from {sorted(_SWEEPS)}")
    base = base or TrainConfig()
    default = getattr(TrainConfig(), kind)
    return [(replace(base, **{kind: v}), v == default) for v in _SWEEPS[kind]]


def ablation_matrix(rows: list, train_source_fn=None, eval_items: list | None = None,
                    seed: int = 0) -> list:
    """Train every config and tabulate metrics plus closed-form parameter counts."""
    table = []
    for cfg, is_default in rows:
        source = train_source_fn(cfg) if train_source_fn else None
        state = fit(cfg, source)
        items = eval_items or body_pool(2, seed + 1000, cfg.padding, cfg.points_per_part)
        rep = evaluate_model(state.model, items, seed=seed)
        spec = cfg.spec()
        table.append({
            "rank": cfg.rank, "width": cfg.width, "padding": cfg.padding,
            "points_per_part": cfg.points_per_part, "default": bool(is_default),
            "iou_mean": rep.iou_mean, "iou_surf": rep.iou_surf, "iou_unif": rep.iou_unif,
            "mse_sdf": rep.mse_sdf, "mse_abs_sdf": rep.mse_abs_sdf, "query_time": rep.query_time,
            "param_count": spec.param_count(),
            "decoder_params": spec.decoder_param_count() + spec.bank_param_count() + spec.coeff_param_count(),
        })
    return table
