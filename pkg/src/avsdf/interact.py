"""Collision penalties, self-intersection sampling and pose repair."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import body as B
from . import oracle as O
from .errors import ContractViolation
from .numerics import T, Tape, Tensor

log = logging.getLogger(__name__)

PEN_TAU = 0.01
REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RepairConfig:
    lr: float = 1e-5
    max_iters: int = 200
    pose_prior_weight: float = 1e3
    selfpen_weight: float = 0.1
    samples_per_region: int = 300
    literal_sign: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.max_iters, self.pose_prior_weight, self.selfpen_weight,
               self.samples_per_region) <= 0:
            raise ContractViolation("repair settings must be positive")


@dataclass
class OverlapRegion:
    i: int
    j: int
    lo: np.ndarray  # world AABB of the two boxes' intersection
    hi: np.ndarray
    budget: int = 300


@dataclass
class PenSampleSet:
    points: np.ndarray  # (M, 3) world
    pairs: np.ndarray  # (M, 2) region pair each point came from

    def __len__(self):
        return len(self.points)


# --------------------------------------------------------------------------
# collisions with external points


def collision_loss(model, body: B.BodyState, ctx, points, scale: float = 1.0) -> Tensor:
    """Mean ReLU(-f(x / scale)); zero when every point is outside the body."""
    x = points if isinstance(points, Tensor) else Tensor(np.asarray(points))
    T.check_finite(x, "collision points")
    if not (math.isfinite(scale) and scale > 0):
        raise ContractViolation("scale must be positive and finite")
    if scale != 1.0:
        x = T.div(x, float(scale))
    if x.shape[0] == 0:
        return Tensor(np.zeros((), model.dtype))
    d = model.query(x, body, ctx).distance
    return T.mean(T.relu(T.neg(d)))


# --------------------------------------------------------------------------
# box overlaps


def _obb(body: B.BodyState, k: int):
    R = body.rotations.data[k]
    c = R @ body.box_center[k] + body.translations.data[k]
    return c, R, body.box_half[k]


def obb_overlap(c1, R1, h1, c2, R2, h2, eps: float = 1e-12) -> bool:
    """Separating-axis test over the 15 candidate axes of two boxes."""
    axes = [R1[:, i] for i in range(3)] + [R2[:, i] for i in range(3)]
    for i in range(3):
        for j in range(3):
            a = np.cross(R1[:, i], R2[:, j])
            n = np.linalg.norm(a)
            if n > 1e-9:
                axes.append(a / n)
    d = c2 - c1
    for a in axes:
        r1 = np.sum(h1 * np.abs(R1.T @ a))
        r2 = np.sum(h2 * np.abs(R2.T @ a))
        if abs(d @ a) > r1 + r2 + eps:
            return False
    return True


def _world_aabb(c, R, h):
    ext = np.abs(R) @ h
    return c - ext, c + ext


def detect_overlaps(body: B.BodyState, budget: int = 300) -> list:
    """Non-adjacent part pairs whose padded world boxes intersect."""
    K = body.num_parts
    boxes = [_obb(body, k) for k in range(K)]
    out = []
    for i in range(K):
        for j in range(i + 1, K):
            if (i, j) in body.adjacency:
                continue
            if not obb_overlap(*boxes[i], *boxes[j]):
                continue
            lo1, hi1 = _world_aabb(*boxes[i])
            lo2, hi2 = _world_aabb(*boxes[j])
            lo, hi = np.maximum(lo1, lo2), np.minimum(hi1, hi2)
            if np.all(hi > lo):
                out.append(OverlapRegion(i, j, lo, hi, budget))
    return out


# --------------------------------------------------------------------------
# penetrating samples


def _non_adjacent_mask(body: B.BodyState) -> np.ndarray:
    K = body.num_parts
    m = ~np.eye(K, dtype=bool)
    for i, j in body.adjacency:
        m[i, j] = False
    return m


def sample_penetrating(model, body: B.BodyState, ctx, regions: list, rng) -> PenSampleSet:
    """Points inside two non-adjacent parts according to part-wise distances.

    Each region contributes ``budget`` uniform samples from its AABB; samples
    outside either of the pair's boxes are dropped before decoding.
    """
    if not regions:
        return PenSampleSet(np.zeros((0, 3)), np.zeros((0, 2), np.int64))
    cand, pair = [], []
    for reg in regions:
        u = reg.lo + (reg.hi - reg.lo) * rng.random((reg.budget, 3))
        inside = B.inside_boxes(u, body)
        keep = inside[reg.i] & inside[reg.j]
        cand.append(u[keep])
        pair.append(np.tile([reg.i, reg.j], (int(keep.sum()), 1)))
    pts = np.concatenate(cand)
    pairs = np.concatenate(pair)
    if len(pts) == 0:
        return PenSampleSet(pts, pairs)
    pts, first = np.unique(pts, axis=0, return_index=True)
    pairs = pairs[first]
    inside = B.inside_boxes(pts, body)  # (K, M)
    pk, pn = np.nonzero(inside)
    with T.no_grad():
        vals = model.part_values(pts[pn], pk, body, ctx).data
    neg = np.zeros(inside.shape, bool)
    neg[pk, pn] = vals < 0
    allowed = _non_adjacent_mask(body)
    conflict = np.einsum("kn,kl,ln->n", neg.astype(np.int64), allowed.astype(np.int64),
                         neg.astype(np.int64)) > 0
    return PenSampleSet(pts[conflict], pairs[conflict])


# --------------------------------------------------------------------------
# self-intersection loss and repair


def penetration_term(d: Tensor, tau: float = PEN_TAU, literal_sign: bool = False) -> Tensor:
    """Sum of logistic penalties; high inside (d < 0), low outside."""
    if d.size == 0:
        return Tensor(np.zeros((), d.dtype))
    arg = T.mul(d, 1.0 / tau) if literal_sign else T.mul(d, -1.0 / tau)
    return T.sum(T.sigmoid(arg))


def prior_term(theta: Tensor, theta0: np.ndarray) -> Tensor:
    diff = T.sub(theta, Tensor(np.asarray(theta0, theta.dtype)))
    return T.sum(T.square(diff))


def selfpen_loss(model, body: B.BodyState, ctx, samples, theta: Tensor, theta0: np.ndarray,
                 cfg: RepairConfig = RepairConfig()):
    """Weighted penetration term over the frozen sample set plus the pose prior.

    Returns ``(total, penetration, prior)``.
    """
    pts = samples.points if isinstance(samples, PenSampleSet) else np.asarray(samples)
    if len(pts):
        d = model.query(pts, body, ctx).distance
    else:
        d = Tensor(np.zeros(0, np.float64))
    pen = penetration_term(d, literal_sign=cfg.literal_sign)
    prior = prior_term(theta, theta0)
    total = T.add(T.mul(pen, cfg.selfpen_weight), T.mul(prior, cfg.pose_prior_weight))
    return total, pen, prior


def gt_overlap_volume(body: B.BodyState, n_per_pair: int = 20_000, seed: int = 0) -> float:
    """Monte-Carlo volume of pairwise non-adjacent capsule intersections (m^3)."""
    rng = np.random.default_rng(seed)
    a, b, r = (t.data for t in B.world_capsules(body))
    lo = np.minimum(a, b) - r[:, None]
    hi = np.maximum(a, b) + r[:, None]
    total = 0.0
    K = body.num_parts
    for i in range(K):
        for j in range(i + 1, K):
            if (i, j) in body.adjacency:
                continue
            blo, bhi = np.maximum(lo[i], lo[j]), np.minimum(hi[i], hi[j])
            if np.any(bhi <= blo):
                continue
            u = blo + (bhi - blo) * rng.random((n_per_pair, 3))
            both = (O.capsule_sdf(u, a[i], b[i], r[i]) < 0) & (O.capsule_sdf(u, a[j], b[j], r[j]) < 0)
            total += float(np.prod(bhi - blo)) * both.mean()
    return total


@dataclass
class RepairReport:
    status: str
    iterations: int
    sample_counts: list = field(default_factory=list)
    penetration: list = field(default_factory=list)
    prior: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    theta0: list = field(default_factory=list)
    max_joint_drift: float = 0.0
    gt_overlap_initial: float | None = None
    gt_overlap_final: float | None = None

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, **asdict(self)}


def _pose_body(beta, theta_t: Tensor, padding: float):
    return B.forward_kinematics(beta, theta_t, padding=padding)


def resolve_selfpen(model, beta, theta0, clouds=None, cfg: RepairConfig = RepairConfig(),
                    padding: float = B.DEFAULT_PADDING):
    """Gradient descent on the non-root joint rotations.

    Each iteration re-detects overlapping boxes and resamples the penetrating
    set, then takes one plain gradient step. A step that raises both the
    penetration and the prior term (on the same samples) is rejected.
    Returns ``(theta, report)``; theta is the iterate with the fewest
    penetrating samples seen.
    """
    theta0 = np.asarray(theta0, np.float64).reshape(B.K, 3)
    rng = np.random.default_rng([cfg.seed, 17])
    body0 = _pose_body(beta, Tensor(theta0), padding)
    ctx = model.prepare(body0, clouds)
    theta = theta0.copy()
    free = np.ones((B.K, 3))
    free[0] = 0.0  # the root orientation is held fixed
    rep = RepairReport(status="max_iters", iterations=0, theta0=theta0.tolist())
    if body0.cap_a is not None:
        rep.gt_overlap_initial = gt_overlap_volume(body0)
    best = (math.inf, theta.copy())
    for it in range(cfg.max_iters):
        th = Tensor(theta, requires_grad=True)
        with Tape() as tape:
            body = _pose_body(beta, th, padding)
            regions = detect_overlaps(body, cfg.samples_per_region)
            S = sample_penetrating(model, body.detached(), ctx, regions, rng)
            rep.sample_counts.append(len(S))
            if len(S) < best[0]:
                best = (len(S), theta.copy())
            if len(S) == 0:
                rep.status = "converged"
                rep.penetration.append(0.0)
                rep.prior.append(float(prior_term(Tensor(theta), theta0).data))
                rep.accepted.append(True)
                break
            total, pen, prior = selfpen_loss(model, body, ctx, S, th, theta0, cfg)
        (g,) = tape.backward(total, [th])
        rep.iterations = it + 1
        rep.penetration.append(float(pen.data))
        rep.prior.append(float(prior.data))
        cand = theta - cfg.lr * g * free
        with T.no_grad():
            body_c = _pose_body(beta, Tensor(cand), padding)
            _, pen_c, prior_c = selfpen_loss(model, body_c, ctx, S, Tensor(cand), theta0, cfg)
        worse = float(pen_c.data) > float(pen.data) and float(prior_c.data) > float(prior.data)
        rep.accepted.append(not worse)
        if not worse:
            theta = cand
    else:
        rep.iterations = cfg.max_iters
    if rep.status != "converged":
        theta = best[1]
        log.warning("self-intersection repair stopped after %d iterations with %d samples left",
                    rep.iterations, best[0])
    rep.iterations = max(rep.iterations, len(rep.sample_counts))
    rep.theta = theta.tolist()
    rep.max_joint_drift = float(np.abs(theta - theta0).max())
    if body0.cap_a is not None:
        rep.gt_overlap_final = gt_overlap_volume(_pose_body(beta, Tensor(theta), padding))
    return theta, rep
