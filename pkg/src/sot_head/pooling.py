"""Token aggregation: average pooling, covariance pooling and multi-head
cross-covariance pooling, with VJPs for end-to-end training.

Word tokens are the columns of ``z`` (shape ``p x q``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from .errors import ConfigurationError, ContractError, ShapeError
from .linalg import Matrix, as_matrix
from .normalization import (
    SvpnConfig,
    mpn_backward,
    mpn_forward,
    svpn_approx_backward,
    svpn_approx_forward,
    svpn_exact,
    svpn_exact_backward,
)


@dataclass(frozen=True)
class TokenBatch:
    class_token: np.ndarray
    words: Matrix

    def __post_init__(self):
        if self.class_token.ndim != 1 or self.words.ndim != 2:
            raise ShapeError("class_token must be a vector and words a matrix")
        if self.class_token.shape[0] != self.words.shape[0]:
            raise ShapeError(
                f"class token length {self.class_token.shape[0]} != token dim {self.words.shape[0]}"
            )

    def all_tokens(self) -> Matrix:
        """``[z0, Z]`` as a ``p x (q + 1)`` matrix."""
        return np.column_stack([self.class_token, self.words])


@dataclass(frozen=True)
class GcrpHeadParams:
    w: Matrix
    r: Matrix


@dataclass(frozen=True)
class MgcrpParams:
    heads: tuple[GcrpHeadParams, ...]
    svpn: SvpnConfig = SvpnConfig()

    def __post_init__(self):
        if not self.heads:
            raise ConfigurationError("MGCrP needs at least one head")
        m, p = self.heads[0].w.shape
        n = self.heads[0].r.shape[0]
        for hd in self.heads:
            if hd.w.shape != (m, p) or hd.r.shape != (n, p):
                raise ConfigurationError("all heads must share (m, n) and the token dimension")

    @property
    def token_dim(self) -> int:
        return self.heads[0].w.shape[1]

    @property
    def head_shape(self) -> tuple[int, int]:
        return self.heads[0].w.shape[0], self.heads[0].r.shape[0]

    @property
    def size(self) -> int:
        m, n = self.head_shape
        return len(self.heads) * m * n


def init_mgcrp(
    rng: np.random.Generator, p: int, h: int, m: int, n: int, svpn: SvpnConfig = SvpnConfig()
) -> MgcrpParams:
    """Gaussian projections with standard deviation ``1/sqrt(p)``."""
    std = 1.0 / np.sqrt(p)
    heads = tuple(
        GcrpHeadParams(rng.standard_normal((m, p)) * std, rng.standard_normal((n, p)) * std)
        for _ in range(h)
    )
    return MgcrpParams(heads, svpn)


def representation_size(h: int, m: int, n: int) -> int:
    return h * m * n


# ---------------------------------------------------------------------------
# forward functions


def gap(z: Matrix) -> np.ndarray:
    z = as_matrix(z, "z")
    return z.mean(axis=1)


def gcp(z: Matrix, beta: float = 0.5) -> Matrix:
    z = as_matrix(z, "z")
    out, _ = mpn_forward(z @ z.T / z.shape[1], beta)
    return out


def _cross_cov(z, head):
    if head.w.shape[1] != z.shape[0] or head.r.shape[1] != z.shape[0]:
        raise ShapeError(
            f"projections {head.w.shape}, {head.r.shape} do not accept tokens of dim {z.shape[0]}"
        )
    x = head.w @ z
    y = head.r @ z
    return x, y, (x @ y.T) / z.shape[1]


def _normalize(q, svpn):
    if svpn.exact:
        out, factors = svpn_exact(q, svpn.alpha, svpn.eps)
        return out, factors
    return svpn_approx_forward(q, svpn)


def gcrp(z: Matrix, head: GcrpHeadParams, svpn: SvpnConfig = SvpnConfig()) -> Matrix:
    """svPN of the cross-covariance ``(1/q) (W Z)(R Z)^T``; shape ``m x n``."""
    z = as_matrix(z, "z")
    _, _, q = _cross_cov(z, head)
    return _normalize(q, svpn)[0]


def mgcrp(z: Matrix, params: MgcrpParams) -> np.ndarray:
    """Concatenate every head's ``gcrp`` output, each flattened row-major."""
    return pool_forward(z, params)[0]


# ---------------------------------------------------------------------------
# cached forward / backward used by the head


PoolKind = Union[str, MgcrpParams]


@dataclass
class PoolCache:
    kind: str
    z: Matrix
    out_size: int
    beta: float = 0.5
    eig: object = None
    heads: list = field(default_factory=list)  # (x, y, norm_cache) per head
    params: MgcrpParams | None = None


class PoolGrads(NamedTuple):
    z: Matrix
    heads: tuple  # ((dW, dR), ...) for MGCrP, empty otherwise


def pooled_size(kind: PoolKind, p: int) -> int:
    if isinstance(kind, MgcrpParams):
        return kind.size
    if kind == "gap":
        return p
    if kind == "gcp":
        return p * p
    raise ConfigurationError(f"unknown pooling kind {kind!r}")


def pool_forward(z: Matrix, kind: PoolKind, beta: float = 0.5) -> tuple[np.ndarray, PoolCache]:
    """Pool word tokens into a vector and keep what the backward needs.

    ``kind`` is ``"gap"``, ``"gcp"`` or an :class:`MgcrpParams`. GCP output is
    the full ``p x p`` matrix flattened row-major.
    """
    z = as_matrix(z, "z")
    if isinstance(kind, MgcrpParams):
        cache = PoolCache("mgcrp", z, kind.size, params=kind)
        blocks = []
        for head in kind.heads:
            x, y, q = _cross_cov(z, head)
            out, norm_cache = _normalize(q, kind.svpn)
            cache.heads.append((x, y, norm_cache))
            blocks.append(out.ravel())
        return np.concatenate(blocks), cache
    if kind == "gap":
        return z.mean(axis=1), PoolCache("gap", z, z.shape[0])
    if kind == "gcp":
        out, eig = mpn_forward(z @ z.T / z.shape[1], beta)
        return out.ravel(), PoolCache("gcp", z, out.size, beta=beta, eig=eig)
    raise ConfigurationError(f"unknown pooling kind {kind!r}")


def pooling_backward(cache: PoolCache, grad_out: np.ndarray) -> PoolGrads:
    """VJP of :func:`pool_forward` for the cached call."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != (cache.out_size,):
        raise ContractError(
            f"gradient of shape {g.shape} does not match cached {cache.kind} output ({cache.out_size},)"
        )
    z = cache.z
    p, q = z.shape
    if cache.kind == "gap":
        return PoolGrads(np.repeat(g[:, None] / q, q, axis=1), ())
    if cache.kind == "gcp":
        g_p = mpn_backward(cache.eig, cache.beta, g.reshape(p, p))
        return PoolGrads((g_p + g_p.T) @ z / q, ())
    if cache.kind == "mgcrp":
        params = cache.params
        m, n = params.head_shape
        g_z = np.zeros_like(z)
        head_grads = []
        for i, (head, (x, y, norm_cache)) in enumerate(zip(params.heads, cache.heads)):
            g_out = g[i * m * n : (i + 1) * m * n].reshape(m, n)
            if params.svpn.exact:
                g_q = svpn_exact_backward(norm_cache, params.svpn.alpha, g_out, params.svpn.eps).grad
            else:
                g_q = svpn_approx_backward(norm_cache, g_out)
            g_x = g_q @ y / q
            g_y = g_q.T @ x / q
            head_grads.append((g_x @ z.T, g_y @ z.T))
            g_z += head.w.T @ g_x + head.r.T @ g_y
        return PoolGrads(g_z, tuple(head_grads))
    raise ContractError(f"unknown cached pooling kind {cache.kind!r}")
