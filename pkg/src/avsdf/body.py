"""Synthetic articulated capsule body: kinematic tree, posing and part boxes.

Coordinates: z up, x towards the body's left, y forward, meters. Each part
owns a canonical frame equal to its rest-pose local frame; ``G_k`` maps that
frame to the world.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, RejectedInput
from .numerics import T, Tensor
from .numerics.tensor import custom_op

PART_NAMES = (
    "pelvis", "spine", "head",
    "left_upper_arm", "left_forearm", "left_hand",
    "right_upper_arm", "right_forearm", "right_hand",
    "left_thigh", "left_calf", "left_foot",
    "right_thigh", "right_calf", "right_foot",
)
K = len(PART_NAMES)
PARENTS = (-1, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13)
N_BETA = 10
BETA_LIMIT = 3.0
DEFAULT_PADDING = 0.125

# rest geometry of the left side and the midline; right side mirrors x
_LEFT = {
    # name: (joint offset in parent frame, capsule a, capsule b, radius)
    "pelvis": ((0, 0, 0), (-0.07, 0, 0), (0.07, 0, 0), 0.11),
    "spine": ((0, 0, 0.10), (0, 0, 0.10), (0, 0, 0.32), 0.12),
    "head": ((0, 0, 0.44), (0, 0, 0.11), (0, 0, 0.19), 0.095),
    "left_upper_arm": ((0.17, 0, 0.36), (0.04, 0, 0), (0.26, 0, 0), 0.05),
    "left_forearm": ((0.29, 0, 0), (0.02, 0, 0), (0.23, 0, 0), 0.04),
    "left_hand": ((0.26, 0, 0), (0.02, 0, 0), (0.10, 0, 0), 0.035),
    "left_thigh": ((0.10, 0, -0.08), (0, 0, -0.05), (0, 0, -0.38), 0.07),
    "left_calf": ((0, 0, -0.43), (0, 0, -0.03), (0, 0, -0.36), 0.05),
    "left_foot": ((0, 0, -0.41), (0, -0.02, -0.03), (0, 0.13, -0.03), 0.035),
}


def _rest_tables():
    off = np.zeros((K, 3))
    a = np.zeros((K, 3))
    b = np.zeros((K, 3))
    r = np.zeros(K)
    flip = np.array([-1.0, 1.0, 1.0])
    for k, name in enumerate(PART_NAMES):
        src = name.replace("right_", "left_")
        o, ca, cb, rad = _LEFT[src]
        s = flip if name.startswith("right_") else 1.0
        off[k] = np.asarray(o) * s
        a[k] = np.asarray(ca) * s
        b[k] = np.asarray(cb) * s
        r[k] = rad
    return off, a, b, r


REST_OFFSETS, REST_CAP_A, REST_CAP_B, REST_RADII = _rest_tables()


def adjacency_pairs(parents=PARENTS) -> frozenset:
    """Symmetric set of parent-child part pairs."""
    pairs = set()
    for k, p in enumerate(parents):
        if p >= 0:
            pairs.add((k, p))
            pairs.add((p, k))
    return frozenset(pairs)


ADJACENCY = adjacency_pairs()


def _shape_basis() -> np.ndarray:
    rng = np.random.default_rng(42)
    q, _ = np.linalg.qr(rng.standard_normal((2 * K, N_BETA)))
    # affine squash: |q_i . beta| <= 3 * sum_j |q_ij| keeps every scale in [0.5, 1.5]
    return q / (2.0 * BETA_LIMIT * np.abs(q).sum(axis=1, keepdims=True))


SHAPE_BASIS = _shape_basis()


def shape_scales(beta) -> Tensor:
    """Per-part ``(length_scale, radius_scale)`` as a (K, 2) f64 tensor."""
    beta = beta if isinstance(beta, Tensor) else Tensor(np.asarray(beta, np.float64))
    if beta.shape != (N_BETA,):
        raise ContractViolation(f"beta must have {N_BETA} entries, got shape {beta.shape}")
    T.check_finite(beta, "beta")
    beta = T.clip(T.astype(beta, np.float64), -BETA_LIMIT, BETA_LIMIT)
    lin = T.matmul(Tensor(SHAPE_BASIS), T.reshape(beta, (N_BETA, 1)))
    return T.reshape(T.add(lin, 1.0), (K, 2))


# --------------------------------------------------------------------------
# rotations


def _skew(w: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[:-1] + (3, 3), dtype=w.dtype)
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _rodrigues_coeffs(th: np.ndarray):
    """A = sin t / t, B = (1 - cos t)/t^2 and their derivatives divided by t."""
    small = th < 1e-2
    t = np.where(small, 1.0, th)
    t2 = th * th
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - np.cos(t)) / (t * t))
    da = np.where(small, -1 / 3 + t2 / 30 - t2 * t2 / 840,
                  (t * np.cos(t) - np.sin(t)) / t ** 3)
    db = np.where(small, -1 / 12 + t2 / 180 - t2 * t2 / 6720,
                  (t * np.sin(t) - 2 * (1 - np.cos(t))) / t ** 4)
    return a, b, da, db


def rodrigues(w) -> Tensor:
    """Axis-angle (n, 3) to rotation matrices (n, 3, 3), differentiable."""
    w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, np.float64))
    if w.ndim != 2 or w.shape[1] != 3:
        raise ContractViolation(f"axis-angle input must be (n, 3), got {w.shape}")
    wd = w.data.astype(np.float64)
    th = np.linalg.norm(wd, axis=-1)
    a, b, da, db = _rodrigues_coeffs(th)
    S = _skew(wd)
    S2 = S @ S
    out = np.eye(3) + a[:, None, None] * S + b[:, None, None] * S2

    def backward(g):
        g = g.astype(np.float64)
        gw = np.zeros_like(wd)
        gS = np.einsum("nij,nij->n", g, S)
        gS2 = np.einsum("nij,nij->n", g, S2)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            Ei = _skew(np.broadcast_to(e, wd.shape))
            dS2 = Ei @ S + S @ Ei
            gw[:, i] = (a * np.einsum("nij,nij->n", g, Ei)
                        + b * np.einsum("nij,nij->n", g, dS2)
                        + wd[:, i] * (da * gS + db * gS2))
        return (gw.astype(w.dtype),)

    return custom_op(out, (w,), backward)


def is_rigid(R: np.ndarray, tol: float = 1e-6) -> bool:
    R = np.asarray(R, np.float64)
    eye = np.broadcast_to(np.eye(3), R.shape)
    return bool(np.all(np.abs(np.swapaxes(R, -1, -2) @ R - eye) <= tol)
                and np.all(np.abs(np.linalg.det(R) - 1) <= tol))


# --------------------------------------------------------------------------
# body state


@dataclass(frozen=True)
class BodyState:
    """A posed body. ``rotations``/``translations`` hold G_k (canonical to world).

    Capsule fields are ``None`` for bodies loaded from external files, whose
    geometry is only known through point clouds.
    """

    rotations: Tensor
    translations: Tensor
    box_min: np.ndarray
    box_max: np.ndarray
    cap_a: Tensor | None = None
    cap_b: Tensor | None = None
    radii: Tensor | None = None
    parents: tuple = PARENTS
    adjacency: frozenset = field(default=ADJACENCY)
    padding: float = DEFAULT_PADDING

    @property
    def num_parts(self) -> int:
        return self.box_min.shape[0]

    @property
    def box_center(self) -> np.ndarray:
        return 0.5 * (self.box_min + self.box_max)

    @property
    def box_half(self) -> np.ndarray:
        return 0.5 * (self.box_max - self.box_min)

    def transform(self, k: int) -> np.ndarray:
        """4x4 homogeneous G_k."""
        G = np.eye(4)
        G[:3, :3] = self.rotations.data[k]
        G[:3, 3] = self.translations.data[k]
        return G

    def detached(self) -> "BodyState":
        def cut(t):
            return None if t is None else Tensor(t.data)
        return BodyState(cut(self.rotations), cut(self.translations), self.box_min, self.box_max,
                         cut(self.cap_a), cut(self.cap_b), cut(self.radii), self.parents,
                         self.adjacency, self.padding)

    def moved(self, M: np.ndarray) -> "BodyState":
        """The same body after a global rigid motion ``M`` (4x4)."""
        R = M[:3, :3]
        rots = np.einsum("ij,kjl->kil", R, self.rotations.data)
        trans = self.translations.data @ R.T + M[:3, 3]
        return BodyState(Tensor(rots), Tensor(trans), self.box_min, self.box_max,
                         self.cap_a, self.cap_b, self.radii, self.parents, self.adjacency, self.padding)


def capsule_boxes(cap_a: np.ndarray, cap_b: np.ndarray, radii: np.ndarray, padding: float):
    """Padded canonical AABBs of capsules, rounded to f32 values."""
    if padding < 0:
        raise ContractViolation("padding must be non-negative")
    r = np.asarray(radii, np.float64)[:, None]
    lo = np.minimum(cap_a, cap_b) - r
    hi = np.maximum(cap_a, cap_b) + r
    return pad_boxes(lo, hi, padding)


def pad_boxes(lo: np.ndarray, hi: np.ndarray, padding: float):
    """Grow each half-extent by ``padding`` times the full extent."""
    c = 0.5 * (lo + hi)
    h = 0.5 * (hi - lo) * (1.0 + 2.0 * padding)
    bmin = (c - h).astype(np.float32).astype(np.float64)
    bmax = (c + h).astype(np.float32).astype(np.float64)
    return bmin, bmax


def boxes_from_points(points: np.ndarray, padding: float):
    """Padded AABBs of per-part canonical point clouds (K, n, 3)."""
    pts = np.asarray(points, np.float64)
    return pad_boxes(pts.min(axis=1), pts.max(axis=1), padding)


def compute_part_boxes(body: BodyState, padding: float = DEFAULT_PADDING):
    if body.cap_a is None:
        raise ContractViolation("part boxes of an external body come from its point clouds")
    return capsule_boxes(body.cap_a.data, body.cap_b.data, body.radii.data, padding)


def forward_kinematics(beta, theta, root_translation=None, padding: float = DEFAULT_PADDING) -> BodyState:
    """Pose the capsule body.

    ``theta`` is (K, 3) axis-angle with row 0 the root rotation. ``beta`` and
    ``theta`` may be Tensors; the returned transforms and capsules are then
    differentiable with respect to them.
    """
    theta = theta if isinstance(theta, Tensor) else Tensor(np.asarray(theta, np.float64))
    if theta.shape != (K, 3):
        theta = T.reshape(theta, (K, 3)) if theta.size == 3 * K else None
        if theta is None:
            raise ContractViolation(f"theta must have {3 * K} entries")
    T.check_finite(theta, "theta")
    theta = T.astype(theta, np.float64)
    if root_translation is None:
        root_translation = Tensor(np.zeros(3))
    elif not isinstance(root_translation, Tensor):
        root_translation = Tensor(np.asarray(root_translation, np.float64))
    T.check_finite(root_translation, "root translation")
    scales = shape_scales(np.zeros(N_BETA) if beta is None else beta)
    s_len = scales[:, 0]
    s_rad = scales[:, 1]

    local = rodrigues(theta)
    rots: list = [None] * K
    trans: list = [None] * K
    for k in range(K):
        Rl = local[k]
        p = PARENTS[k]
        if p < 0:
            rots[k] = Rl
            trans[k] = T.astype(root_translation, np.float64)
            continue
        off = T.mul(T.reshape(s_len[p], (1,)), Tensor(REST_OFFSETS[k]))
        step = T.reshape(T.matmul(rots[p], T.reshape(off, (3, 1))), (3,))
        trans[k] = T.add(trans[p], step)
        rots[k] = T.matmul(rots[p], Rl)
    rotations = T.stack(rots)
    translations = T.stack(trans)
    lcol = T.reshape(s_len, (K, 1))
    cap_a = T.mul(T.broadcast_to(lcol, (K, 3)), Tensor(REST_CAP_A))
    cap_b = T.mul(T.broadcast_to(lcol, (K, 3)), Tensor(REST_CAP_B))
    radii = T.mul(s_rad, Tensor(REST_RADII))
    bmin, bmax = capsule_boxes(cap_a.data, cap_b.data, radii.data, padding)
    return BodyState(rotations, translations, bmin, bmax, cap_a, cap_b, radii,
                     PARENTS, ADJACENCY, padding)


def world_capsules(body: BodyState):
    """World-space capsule endpoints (K, 3) and radii (K,) as tensors."""
    if body.cap_a is None:
        raise ContractViolation("body has no capsule geometry")
    a = _apply(body.rotations, body.translations, body.cap_a)
    b = _apply(body.rotations, body.translations, body.cap_b)
    return a, b, body.radii


def _apply(R: Tensor, t: Tensor, p: Tensor) -> Tensor:
    """Per-part ``R_k p_k + t_k`` for (K, 3) points."""
    Rp = T.matmul(R, T.reshape(p, (p.shape[0], 3, 1)))
    return T.add(T.reshape(Rp, (p.shape[0], 3)), t)


# --------------------------------------------------------------------------
# canonicalization and the box field


def _rot_rows_impl(d, R):
    """Row-vector product ``d @ R`` with a fixed summation order per row."""
    r0 = R[..., None, 0, :]
    r1 = R[..., None, 1, :]
    r2 = R[..., None, 2, :]
    return (d[..., 0:1] * r0 + d[..., 1:2] * r1) + d[..., 2:3] * r2


def canonicalize(x, R, t) -> Tensor:
    """Map world points (N, 3) into one part frame: ``R^T (x - t)`` per row.

    ``R`` (3, 3) and ``t`` (3,) may also carry a leading part axis, in which
    case the result is (K, N, 3).
    """
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    Rt = R if isinstance(R, Tensor) else Tensor(np.asarray(R, np.float64))
    tt = t if isinstance(t, Tensor) else Tensor(np.asarray(t, np.float64))
    xd = xt.data.astype(np.float64)
    Rd = Rt.data
    td = tt.data
    d = xd - td[..., None, :]
    out = _rot_rows_impl(d, Rd)

    def backward(g):
        g = g.astype(np.float64)
        gd = _rot_rows_impl(g, np.swapaxes(Rd, -1, -2))
        gx = gd if gd.ndim == 2 else gd.sum(axis=0)
        gR = np.einsum("...ni,...nj->...ij", d, g)
        gt = -gd.sum(axis=-2)
        return gx.astype(xt.dtype), gR, gt

    return custom_op(out, (xt, Rt, tt), backward)


def box_sdf_local(xk: Tensor, center: np.ndarray, half: np.ndarray) -> Tensor:
    """Signed distance to axis-aligned boxes; ``xk`` (..., N, 3) canonical."""
    q = T.sub(T.abs(T.sub(xk, Tensor(np.broadcast_to(center[..., None, :], xk.shape).copy()))),
              Tensor(np.broadcast_to(half[..., None, :], xk.shape).copy()))
    outside = T.norm(T.relu(q), axis=-1)
    inside = T.neg(T.relu(T.neg(T.max_reduce(q, axis=-1)[0])))
    return T.add(outside, inside)


def box_distances(x, body: BodyState) -> Tensor:
    """(K, N) signed distances from world points to every padded part box."""
    xk = canonicalize(x, body.rotations, body.translations)
    return box_sdf_local(xk, body.box_center, body.box_half)


def analytic_box_sdf(x, body: BodyState):
    """Min over parts of the distance to each padded box.

    Returns ``(distance, inside)`` where ``inside`` flags points lying in some
    box; the value there is the (negative) in-box distance and should not be
    used as a body SDF.
    """
    D = box_distances(x, body)
    d, _ = T.min_reduce(D, axis=0)
    return d, d.data <= 0


def inside_boxes(x: np.ndarray, body: BodyState) -> np.ndarray:
    """(K, N) membership of world points in the closed padded boxes."""
    with T.no_grad():
        xk = canonicalize(Tensor(np.asarray(x)), body.rotations.data, body.translations.data).data
    lo = body.box_min[:, None, :]
    hi = body.box_max[:, None, :]
    return np.all((xk >= lo) & (xk <= hi), axis=-1)


# --------------------------------------------------------------------------
# external bodies


def load_external_body(path, expected_parts: int | None = K, padding: float = DEFAULT_PADDING):
    """Read a body file; returns ``(body, clouds, gt_samples_or_None)``.

    Part clouds are taken verbatim. Kinematic adjacency is only known for the
    built-in 15-part tree; other part counts get an empty adjacency.
    """
    from .formats import read_body

    ext = read_body(path, expected_parts)
    R = ext.transforms[:, :, :3].copy()
    t = ext.transforms[:, :, 3].copy()
    boxes = ext.boxes.astype(np.float64)
    n = ext.num_parts
    parents = PARENTS if n == K else (-1,) * n
    adj = ADJACENCY if n == K else frozenset()
    body = BodyState(Tensor(R), Tensor(t), boxes[:, :3].copy(), boxes[:, 3:].copy(),
                     parents=parents, adjacency=adj, padding=padding)
    return body, ext.points, ext.gt


def to_external(body: BodyState, clouds: np.ndarray, gt: np.ndarray | None = None):
    from .formats import ExternalBody

    tf = np.concatenate([body.rotations.data, body.translations.data[:, :, None]], axis=2)
    boxes = np.concatenate([body.box_min, body.box_max], axis=1).astype(np.float32)
    return ExternalBody(tf.astype(np.float64), boxes, np.asarray(clouds, np.float32),
                        None if gt is None else np.asarray(gt, np.float32))
