"""Part-wise neural SDF with blended decoder weights and hybrid querying.

Each part k decodes ``[gamma(x_k), z_k]`` with a 7-layer MLP whose weights
are ``W^l + sum_r v_k^l[r] S_k^l[r]`` and ``v_k^l = A_k^l z_k + c_k^l``.
Queries outside every padded part box fall back to the box distance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import body as B
from .encoder import LATENT, encode_body, encode_clouds, encoder_param_count, init_encoder, kaiming_uniform
from .errors import ContractViolation
from .numerics import T, Tensor
from .numerics.tensor import custom_op

NUM_LAYERS = 7
SKIP_LAYER = 2  # zero-based index of the layer that re-reads the input
GAMMA_DIM = 15
MODES = ("hybrid", "full", "implicit-only")
BRANCH_ANALYTIC = 0
BRANCH_IMPLICIT = 1


@dataclass(frozen=True)
class ModelSpec:
    rank: int = 80
    width: int = 64
    use_gamma: bool = True
    num_parts: int = B.K
    latent: int = LATENT

    @property
    def point_dim(self) -> int:
        return GAMMA_DIM if self.use_gamma else 3

    @property
    def input_dim(self) -> int:
        return self.point_dim + self.latent

    def layer_shapes(self) -> list:
        w, d = self.width, self.input_dim
        shapes = [(d, w), (w, w), (w + d, w)] + [(w, w)] * (NUM_LAYERS - 4) + [(w, 1)]
        return shapes

    def decoder_param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    def bank_param_count(self) -> int:
        return self.num_parts * self.rank * sum(i * o for i, o in self.layer_shapes())

    def coeff_param_count(self) -> int:
        return self.num_parts * NUM_LAYERS * (self.latent * self.rank + self.rank)

    def param_count(self) -> int:
        return (encoder_param_count() + self.decoder_param_count()
                + self.bank_param_count() + self.coeff_param_count())


def init_params(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> dict:
    """All trainables as leaf tensors.

    Base weights come from one stream and the blend banks from another, so
    models that differ only in rank start from identical base networks.
    """
    rng = np.random.default_rng([seed, 0])
    arrays = init_encoder(rng, dtype)
    for l, (i, o) in enumerate(spec.layer_shapes()):
        arrays[f"dec.W{l}"] = kaiming_uniform(rng, i, o, dtype)
        arrays[f"dec.b{l}"] = np.zeros(o, dtype)
    bank_rng = np.random.default_rng([seed, 1])
    K, R = spec.num_parts, spec.rank
    if R > 0:
        for l, (i, o) in enumerate(spec.layer_shapes()):
            bound = 1e-2 * np.sqrt(6.0 / i)
            arrays[f"nbw.S{l}"] = bank_rng.uniform(-bound, bound, (K, R, i, o)).astype(dtype)
            arrays[f"nbw.A{l}"] = np.zeros((K, spec.latent, R), dtype)
            arrays[f"nbw.c{l}"] = np.zeros((K, R), dtype)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


# --------------------------------------------------------------------------
# building blocks


def positional_encode(xk, dtype=None) -> Tensor:
    """[x, sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x)] per coordinate."""
    xt = xk if isinstance(xk, Tensor) else Tensor(np.asarray(xk))
    x = xt.data.astype(np.float64)
    dtype = xt.dtype if dtype is None else np.dtype(dtype)
    s1, c1 = np.sin(np.pi * x), np.cos(np.pi * x)
    s2, c2 = np.sin(2 * np.pi * x), np.cos(2 * np.pi * x)
    out = np.concatenate([x, s1, c1, s2, c2], axis=-1).astype(dtype)

    def backward(g):
        g = g.astype(np.float64)
        gx = (g[..., 0:3] + np.pi * (g[..., 3:6] * c1 - g[..., 6:9] * s1)
              + 2 * np.pi * (g[..., 9:12] * c2 - g[..., 12:15] * s2))
        return (gx.astype(xt.dtype),)

    return custom_op(out, (xt,), backward)


def blend_coefficients(z: Tensor, params: dict, spec: ModelSpec, layer: int) -> Tensor:
    """(K, R) coefficients ``A_k z_k + c_k`` for one decoder layer."""
    K, R = z.shape[0], spec.rank
    v = T.matmul(T.reshape(z, (K, 1, spec.latent)), params[f"nbw.A{layer}"])
    return T.add(T.reshape(v, (K, R)), params[f"nbw.c{layer}"])


def compose_weights(v: Tensor | None, params: dict, spec: ModelSpec, layer: int) -> Tensor:
    """(K, in, out) effective weights ``W + sum_r v[r] S[r]``."""
    i, o = spec.layer_shapes()[layer]
    K = spec.num_parts
    W = T.reshape(params[f"dec.W{layer}"], (i * o,))
    if spec.rank == 0 or v is None:
        return T.reshape(T.broadcast_to(W, (K, i * o)), (K, i, o))
    S = T.reshape(params[f"nbw.S{layer}"], (K, spec.rank, i * o))
    delta = T.matmul(T.reshape(v, (K, 1, spec.rank)), S)
    return T.reshape(T.add(T.reshape(delta, (K, i * o)), W), (K, i, o))


@dataclass
class PartDecoder:
    """Effective weights of one part with the latent folded into biases."""

    Wg0: Tensor
    c0: Tensor
    hidden: list  # (W, b) pairs for plain hidden layers, keyed by layer index
    Wh_skip: Tensor
    Wg_skip: Tensor
    c_skip: Tensor
    W_out: Tensor
    b_out: Tensor


@dataclass
class Conditioning:
    latents: Tensor  # (K, 128)
    parts: list = field(default_factory=list)


def decode(g: Tensor, dec: PartDecoder) -> Tensor:
    """Decoder forward on encoded canonical points (n, point_dim) -> (n,)."""
    h = T.relu(T.add(T.matmul(g, dec.Wg0), dec.c0))
    for l, (W, b) in enumerate(dec.hidden[:SKIP_LAYER - 1]):
        h = T.relu(T.add(T.matmul(h, W), b))
    h = T.relu(T.add(T.add(T.matmul(h, dec.Wh_skip), T.matmul(g, dec.Wg_skip)), dec.c_skip))
    for W, b in dec.hidden[SKIP_LAYER - 1:]:
        h = T.relu(T.add(T.matmul(h, W), b))
    out = T.add(T.matmul(h, dec.W_out), dec.b_out)
    return T.reshape(out, (out.shape[0],))


@dataclass
class QueryResult:
    distance: Tensor  # (N,)
    branch: np.ndarray  # (N,) BRANCH_ANALYTIC / BRANCH_IMPLICIT
    part: np.ndarray  # (N,) argmin part, -1 on the analytic branch

    def __len__(self):
        return len(self.branch)


class VolumetricSDF:
    """Encoder, blend banks and decoders bundled with the query engine."""

    def __init__(self, spec: ModelSpec | None = None, params: dict | None = None, seed: int = 0):
        self.spec = spec or ModelSpec()
        self.params = params if params is not None else init_params(self.spec, seed)
        expect = self.expected_shapes(self.spec)
        if set(self.params) != set(expect) or any(self.params[k].shape != s for k, s in expect.items()):
            raise ContractViolation("parameter set does not match the architecture")

    @staticmethod
    def expected_shapes(spec: ModelSpec) -> dict:
        shapes = {k: v.shape for k, v in init_encoder(np.random.default_rng(0)).items()}
        K, R, L = spec.num_parts, spec.rank, spec.latent
        for l, (i, o) in enumerate(spec.layer_shapes()):
            shapes[f"dec.W{l}"] = (i, o)
            shapes[f"dec.b{l}"] = (o,)
            if R > 0:
                shapes[f"nbw.S{l}"] = (K, R, i, o)
                shapes[f"nbw.A{l}"] = (K, L, R)
                shapes[f"nbw.c{l}"] = (K, R)
        return shapes

    @property
    def dtype(self):
        return self.params["dec.W0"].dtype

    def astype(self, dtype) -> "VolumetricSDF":
        p = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return VolumetricSDF(self.spec, p)

    # conditioning ----------------------------------------------------------

    def encode(self, clouds) -> Tensor:
        return encode_body(clouds, self.params, self.spec.num_parts)

    def condition(self, z: Tensor) -> Conditioning:
        spec, p = self.spec, self.params
        if z.shape != (spec.num_parts, spec.latent):
            raise ContractViolation(f"latents must be ({spec.num_parts}, {spec.latent})")
        eff = []
        for l in range(NUM_LAYERS):
            v = blend_coefficients(z, p, spec, l) if spec.rank > 0 else None
            eff.append(compose_weights(v, p, spec, l))
        pd = spec.point_dim
        w = spec.width
        parts = []
        for k in range(spec.num_parts):
            zk = T.gather(z, slice(k, k + 1))
            W0 = T.gather(eff[0], k)
            W2 = T.gather(eff[SKIP_LAYER], k)
            c0 = T.add(T.reshape(T.matmul(zk, T.gather(W0, slice(pd, None))), (w,)), p["dec.b0"])
            c2 = T.add(T.reshape(T.matmul(zk, T.gather(W2, slice(w + pd, None))), (w,)),
                       p[f"dec.b{SKIP_LAYER}"])
            hidden = [(T.gather(eff[l], k), p[f"dec.b{l}"])
                      for l in range(1, NUM_LAYERS - 1) if l != SKIP_LAYER]
            parts.append(PartDecoder(
                Wg0=T.gather(W0, slice(0, pd)), c0=c0, hidden=hidden,
                Wh_skip=T.gather(W2, slice(0, w)), Wg_skip=T.gather(W2, slice(w, w + pd)),
                c_skip=c2, W_out=T.gather(eff[-1], k), b_out=p[f"dec.b{NUM_LAYERS - 1}"]))
        return Conditioning(z, parts)

    def prepare(self, body: B.BodyState, clouds) -> Conditioning:
        return self.condition(self.encode(clouds))

    # decoding --------------------------------------------------------------

    def _features(self, xk: Tensor) -> Tensor:
        if self.spec.use_gamma:
            return positional_encode(xk, self.dtype)
        return T.astype(xk, self.dtype)

    def decode_part(self, xk, cond: Conditioning, k: int) -> Tensor:
        """Signed distance of part k at canonical points (n, 3)."""
        xt = xk if isinstance(xk, Tensor) else Tensor(np.asarray(xk, np.float64))
        return decode(self._features(xt), cond.parts[k])

    def part_values(self, points, parts: np.ndarray, body: B.BodyState, cond: Conditioning) -> Tensor:
        """Part-wise (not aggregated) distances: row i decoded by part ``parts[i]``."""
        x = points if isinstance(points, Tensor) else Tensor(np.asarray(points))
        parts = np.asarray(parts, np.int64)
        M = len(parts)
        if M == 0:
            return Tensor(np.zeros(0, self.dtype))
        order = np.argsort(parts, kind="stable")
        xs = T.gather(x, order, unique=True)
        Rs = T.gather(body.rotations, parts[order])
        ts = T.gather(body.translations, parts[order])
        xk = _canonicalize_rows(xs, Rs, ts)
        pieces = []
        bounds = np.searchsorted(parts[order], np.arange(self.spec.num_parts + 1))
        for k in range(self.spec.num_parts):
            lo, hi = bounds[k], bounds[k + 1]
            if hi > lo:
                pieces.append(self.decode_part(T.gather(xk, slice(lo, hi)), cond, k))
        vals = T.concat(pieces)
        inv = np.empty(M, np.int64)
        inv[order] = np.arange(M)
        return T.gather(vals, inv, unique=True)

    # querying --------------------------------------------------------------

    def query(self, points, body: B.BodyState, cond: Conditioning, mode: str = "hybrid") -> QueryResult:
        """Signed distances for world points (N, 3).

        ``hybrid``: box distance outside all boxes; inside, decoders of the
        boxes containing the point, with the box distance standing in for
        every other part. ``full``: same dispatch but all decoders inside.
        ``implicit-only``: all decoders for every point.
        """
        if mode not in MODES:
            raise ContractViolation(f"unknown query mode {mode!r}")
        x = points if isinstance(points, Tensor) else Tensor(np.asarray(points))
        if x.ndim != 2 or x.shape[1] != 3:
            raise ContractViolation(f"points must be (N, 3), got {x.shape}")
        T.check_finite(x, "query points")
        N = x.shape[0]
        K = self.spec.num_parts
        if body.num_parts != K:
            raise ContractViolation("body and model disagree on the part count")
        dtype = self.dtype
        if N == 0:
            return QueryResult(Tensor(np.zeros(0, dtype)), np.zeros(0, np.uint8), np.zeros(0, np.int64))

        xk = B.canonicalize(x, body.rotations, body.translations)  # (K, N, 3)
        D = B.box_sdf_local(xk, body.box_center, body.box_half)  # (K, N)
        inside = D.data <= 0
        if mode == "implicit-only":
            implicit = np.ones(N, bool)
        else:
            implicit = inside.any(axis=0)
        imp_idx = np.nonzero(implicit)[0]
        ana_idx = np.nonzero(~implicit)[0]
        n_imp = len(imp_idx)

        branch = implicit.astype(np.uint8)
        part = np.full(N, -1, np.int64)
        pieces = []
        if len(ana_idx):
            da, _ = T.min_reduce(T.gather(D, (slice(None), ana_idx), unique=True), axis=0)
            pieces.append((ana_idx, T.astype(da, dtype)))
        if n_imp:
            cand = inside[:, imp_idx] if mode == "hybrid" else np.ones((K, n_imp), bool)
            pk, pn = np.nonzero(cand)  # sorted by part, then point
            pts = T.gather(xk, (pk, imp_idx[pn]), unique=True)
            bounds = np.searchsorted(pk, np.arange(K + 1))
            vals = []
            for k in range(K):
                lo, hi = bounds[k], bounds[k + 1]
                if hi > lo:
                    vals.append(self.decode_part(T.gather(pts, slice(lo, hi)), cond, k))
            dense = T.astype(T.gather(D, (slice(None), imp_idx), unique=True), dtype)
            dense = T.index_put(dense, (pk, pn), T.concat(vals))
            di, arg = T.min_reduce(dense, axis=0)
            part[imp_idx] = arg
            pieces.append((imp_idx, di))
        out = Tensor(np.zeros(N, dtype))
        for idx, vals in pieces:
            out = T.index_put(out, idx, vals)
        return QueryResult(out, branch, part)

    def implicit_sdf(self, points, body: B.BodyState, cond: Conditioning, full: bool = False):
        """Implicit branch only; every point must lie inside some padded box."""
        x = np.asarray(points.data if isinstance(points, Tensor) else points)
        if not B.inside_boxes(x, body).any(axis=0).all():
            raise ContractViolation("implicit_sdf called on a point outside every part box")
        res = self.query(points, body, cond, "full" if full else "hybrid")
        return res.distance, res.part

    def sdf_function(self, body: B.BodyState, cond: Conditioning, mode: str = "hybrid", chunk: int = 1 << 16):
        """Plain ``points -> distances`` callable for metrics and grids."""
        def f(points):
            pts = np.asarray(points)
            out = np.empty(len(pts), self.dtype)
            with T.no_grad():
                for s in range(0, len(pts), chunk):
                    out[s:s + chunk] = self.query(pts[s:s + chunk], body, cond, mode).distance.data
            return out
        return f


def _canonicalize_rows(x: Tensor, R: Tensor, t: Tensor) -> Tensor:
    """Row-wise ``R_i^T (x_i - t_i)`` for matched rows."""
    xd = x.data.astype(np.float64)
    Rd, td = R.data, t.data
    d = xd - td
    out = (d[:, 0:1] * Rd[:, 0, :] + d[:, 1:2] * Rd[:, 1, :]) + d[:, 2:3] * Rd[:, 2, :]

    def backward(g):
        g = g.astype(np.float64)
        gd = np.einsum("nij,nj->ni", Rd, g)
        return gd.astype(x.dtype), d[:, :, None] * g[:, None, :], -gd

    return custom_op(out, (x, R, t), backward)


__all__ = [
    "ModelSpec", "VolumetricSDF", "Conditioning", "QueryResult", "init_params",
    "positional_encode", "blend_coefficients", "compose_weights", "decode",
    "encode_clouds", "MODES",
]
