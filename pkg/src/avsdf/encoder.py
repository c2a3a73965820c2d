"""Shared PointNet encoder mapping canonical part clouds to 128-d latents.

Per-point features pass an input linear layer and four residual blocks, are
max-pooled over the cloud, then go through an output linear layer.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .numerics import T, Tensor
from .numerics.tensor import _stable_gemm

LATENT = 128
HIDDEN = 128
BLOCKS = 4


def kaiming_uniform(rng, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)


def init_encoder(rng, dtype=np.float32) -> dict:
    p = {
        "enc.W_in": kaiming_uniform(rng, 3, HIDDEN, dtype),
        "enc.b_in": np.zeros(HIDDEN, dtype),
    }
    for i in range(BLOCKS):
        p[f"enc.W{i}a"] = kaiming_uniform(rng, HIDDEN, HIDDEN, dtype)
        p[f"enc.b{i}a"] = np.zeros(HIDDEN, dtype)
        p[f"enc.W{i}b"] = kaiming_uniform(rng, HIDDEN, HIDDEN, dtype)
        p[f"enc.b{i}b"] = np.zeros(HIDDEN, dtype)
    p["enc.W_out"] = kaiming_uniform(rng, HIDDEN, LATENT, dtype)
    p["enc.b_out"] = np.zeros(LATENT, dtype)
    return p


def encoder_param_count() -> int:
    per_linear = lambda i, o: i * o + o  # noqa: E731
    return per_linear(3, HIDDEN) + BLOCKS * 2 * per_linear(HIDDEN, HIDDEN) + per_linear(HIDDEN, LATENT)


def point_features(x: Tensor, p: dict) -> Tensor:
    """(P, 3) points to (P, 128) features before pooling."""
    h = T.relu(T.add(T.matmul(x, p["enc.W_in"]), p["enc.b_in"]))
    for i in range(BLOCKS):
        u = T.relu(T.add(T.matmul(h, p[f"enc.W{i}a"]), p[f"enc.b{i}a"]))
        r = T.add(T.matmul(u, p[f"enc.W{i}b"]), p[f"enc.b{i}b"])
        h = T.relu(T.add(h, r))
    return h


def _point_features_np(x: np.ndarray, p: dict) -> np.ndarray:
    """Untaped twin of :func:`point_features` with identical arithmetic."""
    def lin(h, name_w, name_b):
        out = _stable_gemm(h, p[name_w].data)
        out += p[name_b].data
        return out

    h = lin(x, "enc.W_in", "enc.b_in")
    np.maximum(h, 0, out=h)
    for i in range(BLOCKS):
        u = lin(h, f"enc.W{i}a", f"enc.b{i}a")
        np.maximum(u, 0, out=u)
        r = lin(u, f"enc.W{i}b", f"enc.b{i}b")
        r += h  # same value as h + r
        np.maximum(r, 0, out=r)
        h = r
    return h


def encode_clouds(clouds, p: dict) -> Tensor:
    """Encode C clouds of n points each, (C, n, 3) -> (C, 128).

    When a tape is recording, the pooled features are recomputed under the
    tape only for the rows that win the max-pool, so the backward pass costs
    O(C * 128) rows instead of O(C * n). Row-stable GEMMs make the recomputed
    rows bit-identical to the full pass.
    """
    ct = clouds if isinstance(clouds, Tensor) else Tensor(np.asarray(clouds))
    if ct.ndim != 3 or ct.shape[2] != 3 or ct.shape[1] < 1:
        raise ContractViolation(f"clouds must be (C, n>=1, 3), got {ct.shape}")
    T.check_finite(ct, "point cloud")
    dtype = p["enc.W_in"].dtype
    if ct.dtype != dtype:
        ct = T.astype(ct, dtype)
    C, n, _ = ct.shape
    flat = T.reshape(ct, (C * n, 3))
    if not T.is_recording(ct, *p.values()):
        feats = _point_features_np(flat.data, p).reshape(C, n, HIDDEN)
        pooled = Tensor(feats.max(axis=1))
    else:
        feats = _point_features_np(flat.data, p).reshape(C, n, HIDDEN)
        arg = feats.argmax(axis=1)
        rows, offsets = [], [0]
        for c in range(C):
            u = np.unique(arg[c]) + c * n
            rows.append(u)
            offsets.append(offsets[-1] + len(u))
        rows = np.concatenate(rows)
        sub = T.gather(flat, rows, unique=True)
        pooled = T.segment_max(point_features(sub, p), np.asarray(offsets))
    return T.add(T.matmul(pooled, p["enc.W_out"]), p["enc.b_out"])


def encode_part(cloud, p: dict) -> Tensor:
    ct = cloud if isinstance(cloud, Tensor) else Tensor(np.asarray(cloud))
    if ct.ndim != 2:
        raise ContractViolation("a part cloud must be (n, 3)")
    return T.reshape(encode_clouds(T.reshape(ct, (1,) + ct.shape), p), (LATENT,))


def encode_body(clouds, p: dict, num_parts: int = 15) -> Tensor:
    """Shared-weight encoding of every part cloud of one body, (K, 128)."""
    shape = clouds.shape
    if len(shape) != 3 or shape[0] != num_parts:
        raise ContractViolation(f"expected {num_parts} part clouds, got shape {shape}")
    return encode_clouds(clouds, p)
