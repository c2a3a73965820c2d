"""Exact capsule-body ground truth, sampling protocols and evaluation metrics."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import body as B
from .errors import ContractViolation, RejectedInput
from .numerics import T, Tensor

NEAR_SIGMA = 0.1
N_UNIFORM_PER_PART = 256
N_SURFACE_PER_PART = 256
DEFAULT_CLOUD_SIZE = 1000
REPORT_SCHEMA_VERSION = 1

KIND_UNIFORM = 0
KIND_SURFACE = 1


# --------------------------------------------------------------------------
# capsule distance


def capsule_sdf(x: np.ndarray, a: np.ndarray, b: np.ndarray, r) -> np.ndarray:
    """Signed distance from points (..., 3) to capsules; a, b, r broadcast."""
    x = np.asarray(x, np.float64)
    pa = x - a
    ba = np.asarray(b, np.float64) - a
    bb = np.sum(ba * ba, axis=-1)
    safe = np.where(bb > 0, bb, 1.0)
    h = np.clip(np.sum(pa * ba, axis=-1) / safe, 0.0, 1.0)
    h = np.where(bb > 0, h, 0.0)
    return np.linalg.norm(pa - ba * h[..., None], axis=-1) - r


def part_sdf_matrix(x: np.ndarray, body: B.BodyState) -> np.ndarray:
    """(K, N) exact per-capsule signed distances for world points."""
    a, b, r = (t.data for t in B.world_capsules(body))
    return capsule_sdf(np.asarray(x, np.float64)[None], a[:, None], b[:, None], r[:, None])


def gt_sdf(x, body: B.BodyState) -> np.ndarray:
    """Exact SDF of the capsule union (negative inside)."""
    x = np.asarray(x, np.float64)
    if x.size == 0:
        return np.zeros(0)
    return part_sdf_matrix(x.reshape(-1, 3), body).min(axis=0).reshape(x.shape[:-1])


def capsule_sdf_tensor(x: Tensor, a: Tensor, b: Tensor, r: Tensor) -> Tensor:
    """Differentiable capsule distance for matched rows (M, 3)."""
    pa = T.sub(x, a)
    ba = T.sub(b, a)
    bb = T.sum(T.mul(ba, ba), axis=-1)
    degenerate = (bb.data == 0).astype(bb.dtype)
    h = T.div(T.sum(T.mul(pa, ba), axis=-1), T.add(bb, Tensor(degenerate)))
    h = T.mul(T.clip(h, 0.0, 1.0), Tensor(1.0 - degenerate))
    n = ba.shape[0]
    d = T.sub(pa, T.mul(ba, T.broadcast_to(T.reshape(h, (n, 1)), (n, 3))))
    return T.sub(T.norm(d, axis=-1), r)


# --------------------------------------------------------------------------
# surface sampling


@dataclass
class SurfaceSamples:
    """Capsule surface samples stored as ``(1 - t) a + t b + r u``.

    Keeping (t, u) instead of points lets the cloud follow shape changes.
    """

    t: np.ndarray  # (K, n)
    u: np.ndarray  # (K, n, 3) unit directions

    def points(self, cap_a, cap_b, radii) -> np.ndarray:
        a = np.asarray(cap_a, np.float64)[:, None]
        b = np.asarray(cap_b, np.float64)[:, None]
        r = np.asarray(radii, np.float64)[:, None, None]
        t = self.t[..., None]
        return (1 - t) * a + t * b + r * self.u


def _perp_basis(axis: np.ndarray):
    helper = np.array([1.0, 0, 0]) if abs(axis[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def _unit_sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_capsule(a, b, r, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Area-proportional samples on one capsule surface as (t, u)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    L = float(np.linalg.norm(b - a))
    side = 2 * math.pi * r * L
    caps = 4 * math.pi * r * r
    on_side = rng.random(n) < side / (side + caps)
    t = np.zeros(n)
    u = _unit_sphere(rng, n)
    if L > 0:
        axis = (b - a) / L
        along = u @ axis
        t = np.where(along > 0, 1.0, 0.0)
        m = int(on_side.sum())
        e1, e2 = _perp_basis(axis)
        phi = rng.uniform(0, 2 * math.pi, m)
        u[on_side] = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
        t[on_side] = rng.random(m)
    return t, u


def sample_surface(body: B.BodyState, n_per_part: int = DEFAULT_CLOUD_SIZE, rng=None,
                   return_params: bool = False):
    """Per-part canonical surface clouds (K, n, 3) as float32."""
    if n_per_part < 1:
        raise ContractViolation("n_per_part must be at least 1")
    rng = np.random.default_rng(0) if rng is None else rng
    a, b, r = body.cap_a.data, body.cap_b.data, body.radii.data
    ts, us = [], []
    for k in range(body.num_parts):
        t, u = sample_capsule(a[k], b[k], r[k], n_per_part, rng)
        ts.append(t)
        us.append(u)
    params = SurfaceSamples(np.stack(ts), np.stack(us))
    pts = params.points(a, b, r).astype(np.float32)
    return (pts, params) if return_params else pts


def to_world(body: B.BodyState, local: np.ndarray, parts: np.ndarray | None = None) -> np.ndarray:
    """Map canonical points to the world, either (K, n, 3) or rows with part ids."""
    R = body.rotations.data
    t = body.translations.data
    if parts is None:
        return np.einsum("knj,kij->kni", local, R) + t[:, None]
    return np.einsum("nj,nij->ni", local, R[parts]) + t[parts]


# --------------------------------------------------------------------------
# training samples


@dataclass
class TrainSamples:
    points: np.ndarray  # (M, 3) world, float32
    gt: np.ndarray  # (M,) float64
    kind: np.ndarray  # (M,) KIND_UNIFORM / KIND_SURFACE
    part: np.ndarray  # (M,) owning part hint

    def __len__(self):
        return len(self.gt)


def sample_training_points(body: B.BodyState, rng, n_uniform: int = N_UNIFORM_PER_PART,
                           n_surface: int = N_SURFACE_PER_PART, sigma: float = NEAR_SIGMA) -> TrainSamples:
    """Per part: uniform points in its padded box plus noisy surface points."""
    K = body.num_parts
    lo, hi = body.box_min, body.box_max
    uni = lo[:, None] + (hi - lo)[:, None] * rng.random((K, n_uniform, 3))
    surf = sample_surface(body, n_surface, rng).astype(np.float64)
    uni_w = to_world(body, uni)
    surf_w = to_world(body, surf) + sigma * rng.standard_normal((K, n_surface, 3))
    pts = np.concatenate([uni_w, surf_w], axis=1).reshape(-1, 3).astype(np.float32)
    kind = np.tile(np.r_[np.full(n_uniform, KIND_UNIFORM), np.full(n_surface, KIND_SURFACE)], K)
    part = np.repeat(np.arange(K), n_uniform + n_surface)
    return TrainSamples(pts, gt_sdf(pts, body), kind.astype(np.int8), part)


def sample_in_box_union(body: B.BodyState, n: int, rng) -> np.ndarray:
    """Uniform world samples over the union of padded boxes (rejection)."""
    vol = np.prod(body.box_max - body.box_min, axis=1)
    out = []
    have = 0
    while have < n:
        m = max(2 * (n - have), 64)
        k = rng.choice(body.num_parts, size=m, p=vol / vol.sum())
        local = body.box_min[k] + (body.box_max[k] - body.box_min[k]) * rng.random((m, 3))
        w = to_world(body, local, k)
        count = B.inside_boxes(w, body).sum(axis=0)
        keep = rng.random(m) * np.maximum(count, 1) < 1.0
        out.append(w[keep])
        have += int(keep.sum())
    return np.concatenate(out)[:n]


def sample_near_surface(body: B.BodyState, n: int, rng, sigma: float = NEAR_SIGMA) -> np.ndarray:
    """Area-proportional surface samples over the whole body plus Gaussian noise."""
    a, b, r = body.cap_a.data, body.cap_b.data, body.radii.data
    L = np.linalg.norm(b - a, axis=1)
    area = 2 * math.pi * r * L + 4 * math.pi * r * r
    counts = rng.multinomial(n, area / area.sum())
    pts = []
    for k in range(body.num_parts):
        if counts[k] == 0:
            continue
        t, u = sample_capsule(a[k], b[k], r[k], counts[k], rng)
        local = (1 - t)[:, None] * a[k] + t[:, None] * b[k] + r[k] * u
        pts.append(local @ body.rotations.data[k].T + body.translations.data[k])
    pts = np.concatenate(pts)
    return pts + sigma * rng.standard_normal(pts.shape)


# --------------------------------------------------------------------------
# metrics


@dataclass
class EvalReport:
    iou_mean: float
    iou_surf: float
    iou_unif: float
    mse_sdf: float
    mse_abs_sdf: float
    query_time: float
    points_evaluated: int

    def to_json(self) -> str:
        d = {"schema_version": REPORT_SCHEMA_VERSION, **asdict(self)}
        return json.dumps(d, indent=2, sort_keys=True)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Occupancy IoU in percent; occupancy means d < 0."""
    p = np.asarray(pred) < 0
    g = np.asarray(gt) < 0
    union = np.count_nonzero(p | g)
    if union == 0:
        return 100.0
    return 100.0 * np.count_nonzero(p & g) / union


def mean_sq(values: np.ndarray) -> float:
    v = np.asarray(values, np.float64)
    if v.size == 0:
        return 0.0
    return math.fsum((v * v).tolist()) / v.size


def eval_points(body: B.BodyState, rng, n_uniform: int = 30_000, n_surface: int = 30_000):
    uni = sample_in_box_union(body, n_uniform, rng).astype(np.float32)
    near = sample_near_surface(body, n_surface, rng).astype(np.float32)
    return uni, near


def evaluate(model_sdf, body: B.BodyState, rng, n_uniform: int = 30_000,
             n_surface: int = 30_000, gt: "callable | None" = None) -> EvalReport:
    """Compare ``model_sdf(points) -> distances`` against the exact field."""
    uni, near = eval_points(body, rng, n_uniform, n_surface)
    pts = np.concatenate([uni, near])
    truth = gt(pts) if gt is not None else gt_sdf(pts, body)
    return score_samples(model_sdf, pts, truth, len(uni))


def score_samples(model_sdf, pts: np.ndarray, truth: np.ndarray, n_uniform: int) -> EvalReport:
    """Metrics on fixed samples; the first ``n_uniform`` rows form the uniform split."""
    truth = np.asarray(truth, np.float64).reshape(-1)
    t0 = time.perf_counter()
    pred = np.asarray(model_sdf(pts), np.float64).reshape(-1)
    elapsed = (time.perf_counter() - t0) * 1e3
    if pred.shape != truth.shape:
        raise ContractViolation("model returned the wrong number of distances")
    if not np.all(np.isfinite(pred)):
        raise RejectedInput("model produced non-finite distances")
    nu = n_uniform
    iu = iou(pred[:nu], truth[:nu])
    isf = iou(pred[nu:], truth[nu:])
    return EvalReport(
        iou_mean=0.5 * (iu + isf), iou_surf=isf, iou_unif=iu,
        mse_sdf=mean_sq(pred - truth), mse_abs_sdf=mean_sq(np.abs(pred) - np.abs(truth)),
        query_time=elapsed, points_evaluated=int(len(pts)))


def mean_reports(reports: list) -> EvalReport:
    n = len(reports)
    if n == 0:
        raise ContractViolation("no reports to average")
    f = {k: math.fsum(getattr(r, k) for r in reports) / n
         for k in ("iou_mean", "iou_surf", "iou_unif", "mse_sdf", "mse_abs_sdf", "query_time")}
    return EvalReport(points_evaluated=sum(r.points_evaluated for r in reports), **f)


# --------------------------------------------------------------------------
# grids


def world_bounds(body: B.BodyState) -> np.ndarray:
    """(2, 3) axis-aligned world bounds of all padded boxes."""
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], np.float64)
    local = body.box_min[:, None] + corners[None] * (body.box_max - body.box_min)[:, None]
    w = to_world(body, local).reshape(-1, 3)
    return np.stack([w.min(axis=0), w.max(axis=0)]).astype(np.float32)


def grid_points(bounds: np.ndarray, resolution: int) -> np.ndarray:
    """float32 lattice (r^3, 3) over ``bounds`` in x-fastest order."""
    if not 8 <= resolution <= 512:
        raise ContractViolation("grid resolution must lie in [8, 512]")
    lo = bounds[0].astype(np.float64)
    hi = bounds[1].astype(np.float64)
    axes = [np.linspace(lo[i], hi[i], resolution).astype(np.float32) for i in range(3)]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def export_grid(model_sdf, body: B.BodyState, resolution: int, path) -> np.ndarray:
    from .formats import write_grid

    bounds = world_bounds(body)
    pts = grid_points(bounds, resolution)
    values = np.asarray(model_sdf(pts), np.float32)
    write_grid(path, bounds, values.reshape(resolution, resolution, resolution))
    return values


class CapsuleModel:
    """Exact part-wise capsule distances exposed through the model protocol.

    Stands in for a perfectly trained network in tests and repair studies;
    everything is differentiable with respect to the body's transforms.
    """

    dtype = np.dtype(np.float64)

    def prepare(self, body: B.BodyState, clouds=None):
        return None

    def part_values(self, points, parts, body: B.BodyState, ctx=None) -> Tensor:
        x = points if isinstance(points, Tensor) else Tensor(np.asarray(points, np.float64))
        parts = np.asarray(parts, np.int64)
        if len(parts) == 0:
            return Tensor(np.zeros(0))
        a, b, r = B.world_capsules(body)
        return capsule_sdf_tensor(T.astype(x, np.float64), T.gather(a, parts), T.gather(b, parts),
                                  T.gather(r, parts))

    def query(self, points, body: B.BodyState, ctx=None, mode: str = "hybrid"):
        from .volsdf import QueryResult

        x = points if isinstance(points, Tensor) else Tensor(np.asarray(points, np.float64))
        T.check_finite(x, "query points")
        N, K = x.shape[0], body.num_parts
        if N == 0:
            return QueryResult(Tensor(np.zeros(0)), np.zeros(0, np.uint8), np.zeros(0, np.int64))
        rows = np.tile(np.arange(N), K)
        parts = np.repeat(np.arange(K), N)
        vals = self.part_values(T.gather(x, rows), parts, body)
        d, arg = T.min_reduce(T.reshape(vals, (K, N)), axis=0)
        return QueryResult(d, np.ones(N, np.uint8), arg)

    def sdf_function(self, body: B.BodyState, ctx=None, mode: str = "hybrid"):
        return lambda pts: gt_sdf(pts, body)
