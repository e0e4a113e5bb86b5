"""Normalizers for covariance and cross-covariance matrices.

The central pieces are singular-value power normalization, which raises each
singular value of ``Q`` to ``alpha`` while keeping the singular vectors, and
its fast approximation built from power iteration plus deflation. Baselines
(matrix power normalization for SPD inputs, element-wise power normalization,
layer norm over the flattened matrix, and a learnable scalar rescale) live
here as well. Every normalizer that participates in training has a
hand-written backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateDirectionError,
    NearSingularError,
    ShapeError,
)
from .linalg import EigFactors, Matrix, SvdFactors, as_matrix, eigh_spd, svd

EPS = 1e-12
GAP_TOL = 1e-8
FALLBACK_SEED = 0x5EED
MAX_START_ATTEMPTS = 3


@dataclass(frozen=True)
class SvpnConfig:
    """Settings for singular-value power normalization.

    ``exact`` selects the SVD route; otherwise ``num_singular`` triples are
    estimated with ``iterations`` power steps each. The defaults are the
    single-triple, single-step operating point.
    """

    alpha: float = 0.5
    num_singular: int = 1
    iterations: int = 1
    eps: float = EPS
    exact: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.num_singular < 1:
            raise ConfigurationError("num_singular must be positive")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be positive")
        if not self.eps > 0.0:
            raise ConfigurationError("eps must be positive")

    def check_shape(self, shape: tuple[int, int]) -> None:
        if not self.exact and self.num_singular > min(shape):
            raise ConfigurationError(
                f"num_singular={self.num_singular} exceeds min{shape}={min(shape)}"
            )


@dataclass(frozen=True)
class SingularTriple:
    value: float
    left: np.ndarray
    right: np.ndarray


class BackwardResult(NamedTuple):
    """Gradient plus a per-call flag raised when tied singular values were zeroed."""

    grad: Matrix
    degenerate: bool


# ---------------------------------------------------------------------------
# exact svPN


def svpn_exact(q: Matrix, alpha: float, eps: float = EPS) -> tuple[Matrix, SvdFactors]:
    """Return ``sum_i s_i**alpha u_i v_i^T`` and the SVD it was built from.

    Singular values below ``eps`` contribute nothing.
    """
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1], got {alpha}")
    factors = svd(q)
    u, s, v = factors
    powered = np.where(s >= eps, np.power(np.maximum(s, eps), alpha), 0.0)
    return (u * powered) @ v.T, factors


def _svd_backward_tall(u, s, v, alpha, g, eps, gap_tol):
    # requires m >= n so that v is square and u = q v s^-1 holds
    s_floor = np.maximum(s, eps)
    s_pow = np.power(s_floor, alpha)
    inv = 1.0 / s_floor

    # second step: Q~ = U diag(s^alpha) V^T
    g_u = (g @ v) * s_pow
    g_v = (g.T @ u) * s_pow
    g_s = alpha * np.power(s_floor, alpha - 1.0) * np.einsum("ij,ij->j", u, g @ v)

    # first step: Q -> (U, s, V)
    diff = s[:, None] ** 2 - s[None, :] ** 2
    tied = np.abs(diff) < gap_tol
    np.fill_diagonal(tied, False)
    with np.errstate(divide="ignore"):
        k = np.where(np.abs(diff) < gap_tol, 0.0, 1.0 / np.where(diff == 0.0, 1.0, diff))

    term1 = (g_u * inv) @ v.T
    diag_part = g_s - np.einsum("ij,ij->j", u, g_u) * inv
    term2 = (u * diag_part) @ v.T
    inner = v.T @ (g_v - ((v * inv) @ g_u.T @ u) * s)
    a = k.T * inner
    a_sym = 0.5 * (a + a.T)
    term3 = 2.0 * ((u * s) @ a_sym) @ v.T
    return term1 + term2 + term3, bool(np.any(tied))


def svpn_exact_backward(
    factors: SvdFactors,
    alpha: float,
    grad_out: Matrix,
    eps: float = EPS,
    gap_tol: float = GAP_TOL,
) -> BackwardResult:
    """Gradient of the loss with respect to ``Q`` given the gradient w.r.t. svPN(Q).

    Chains the power step (gradients for U, V and the singular values) into the
    structured SVD backward with ``K_ij = 1/(s_i^2 - s_j^2)``. Pairs whose
    squared gap is below ``gap_tol`` get ``K_ij = 0`` and set the
    ``degenerate`` flag. Wide inputs are handled through the transpose, since
    ``svPN(Q^T) = svPN(Q)^T``.
    """
    u, s, v = factors
    g = as_matrix(grad_out, "grad_out")
    if g.shape != (u.shape[0], v.shape[0]):
        raise ShapeError(f"grad_out shape {g.shape} does not match factors {(u.shape[0], v.shape[0])}")
    if u.shape[0] >= v.shape[0]:
        grad, degenerate = _svd_backward_tall(u, s, v, alpha, g, eps, gap_tol)
    else:
        grad_t, degenerate = _svd_backward_tall(v, s, u, alpha, g.T, eps, gap_tol)
        grad = grad_t.T
    return BackwardResult(grad, degenerate)


# ---------------------------------------------------------------------------
# power iteration and deflation


class _PowerTape(NamedTuple):
    q: Matrix
    steps: list  # (v_in, u, norm_qv, norm_qtu) per iteration
    sign: float


def _power_forward(q: Matrix, v0: np.ndarray, iterations: int, eps: float, scale: float = 1.0):
    # scale: magnitude of the undeflated matrix, so round-off residue is not mistaken for signal
    tol = eps * max(1.0, scale)
    v = v0
    steps = []
    nb = 0.0
    for _ in range(iterations):
        a = q @ v
        na = math.sqrt(float(a @ a))
        if na < tol:
            raise DegenerateDirectionError(
                f"|Qv| = {na:.3e} below {tol:.1e}; start vector is orthogonal to the row space"
            )
        u = a / na
        b = q.T @ u
        nb = math.sqrt(float(b @ b))
        v_new = b / nb
        steps.append((v, u, na, nb))
        v = v_new
    u = steps[-1][1]
    sign = -1.0 if u[np.argmax(np.abs(u))] < 0 else 1.0
    triple = SingularTriple(nb, sign * u, sign * v)
    return triple, _PowerTape(q, steps, sign)


def _normalize_vjp(y: np.ndarray, norm: float, gy: np.ndarray) -> np.ndarray:
    return (gy - y * float(y @ gy)) / norm


def _power_backward(tape: _PowerTape, g_value: float, g_left, g_right) -> Matrix:
    q = tape.q
    g_q = np.zeros_like(q)
    g_u = tape.sign * g_left
    g_v = tape.sign * g_right
    for j in range(len(tape.steps) - 1, -1, -1):
        v_in, u, na, nb = tape.steps[j]
        v_out = (q.T @ u) / nb
        # v_out = b / |b|, value = |b| on the final step
        g_b = _normalize_vjp(v_out, nb, g_v)
        if j == len(tape.steps) - 1:
            g_b = g_b + g_value * v_out
        g_q += np.outer(u, g_b)
        g_u = g_u + q @ g_b
        g_a = _normalize_vjp(u, na, g_u)
        g_q += np.outer(g_a, v_in)
        g_v = q.T @ g_a
        g_u = np.zeros_like(u)
    return g_q


def power_iterate(q: Matrix, v0: np.ndarray, iterations: int, eps: float = EPS) -> SingularTriple:
    """Estimate the dominant singular triple by alternating normalized products.

    The returned value is ``|Q^T u|`` after the last step. The pair is flipped
    jointly so that the largest-magnitude entry of ``left`` is non-negative,
    matching :func:`svd`.
    """
    q = as_matrix(q, "q")
    v0 = np.asarray(v0, dtype=np.float64)
    if v0.shape != (q.shape[1],):
        raise ShapeError(f"v0 must have length {q.shape[1]}, got {v0.shape}")
    if abs(float(np.linalg.norm(v0)) - 1.0) > 1e-10:
        raise ShapeError("v0 must be a unit vector")
    if iterations < 1:
        raise ConfigurationError("iterations must be positive")
    triple, _ = _power_forward(q, v0, iterations, eps)
    return triple


def deflate(q: Matrix, triples: list[SingularTriple]) -> Matrix:
    """Subtract ``value * left right^T`` for every triple from ``q``."""
    q = as_matrix(q, "q")
    if not triples:
        raise ConfigurationError("deflate needs at least one triple")
    out = q.copy()
    for t in triples:
        if t.left.shape != (q.shape[0],) or t.right.shape != (q.shape[1],):
            raise ShapeError(
                f"triple vectors {t.left.shape}/{t.right.shape} do not fit matrix {q.shape}"
            )
        out -= t.value * np.outer(t.left, t.right)
    return out


def start_vector(n: int, attempt: int = 0, stage: int = 0) -> np.ndarray:
    """Normalized all-ones vector; retries get Gaussian unit vectors seeded by (stage, attempt)."""
    if attempt == 0:
        return np.full(n, 1.0 / math.sqrt(n))
    rng = np.random.default_rng([FALLBACK_SEED, stage, attempt])
    x = rng.standard_normal(n)
    return x / np.linalg.norm(x)


def _iterate_with_fallback(q, iterations, eps, scale, stage):
    # a one-step estimate deflates its own start vector to zero, so every
    # deflation stage may need a fresh direction
    for attempt in range(MAX_START_ATTEMPTS):
        try:
            return _power_forward(q, start_vector(q.shape[1], attempt, stage), iterations, eps, scale)
        except DegenerateDirectionError as exc:
            err = exc
    raise err


def deflation_sequence(
    q: Matrix, count: int, iterations: int, eps: float = EPS
) -> list[SingularTriple]:
    """Run power iteration and deflation ``count`` times, largest value first."""
    q = as_matrix(q, "q")
    if iterations < 1:
        raise ConfigurationError("iterations must be positive")
    scale = float(np.linalg.norm(q))
    triples: list[SingularTriple] = []
    for stage in range(count):
        residual = deflate(q, triples) if triples else q
        triple, _ = _iterate_with_fallback(residual, iterations, eps, scale, stage)
        triples.append(triple)
    return triples


# ---------------------------------------------------------------------------
# approximate svPN


@dataclass
class ApproxCache:
    q: Matrix
    cfg: SvpnConfig
    triples: list = field(default_factory=list)
    tapes: list = field(default_factory=list)
    residual: Matrix | None = None


def svpn_approx_forward(q: Matrix, cfg: SvpnConfig) -> tuple[Matrix, ApproxCache]:
    q = as_matrix(q, "q")
    cfg.check_shape(q.shape)
    r = cfg.num_singular
    cache = ApproxCache(q, cfg)
    scale = float(np.linalg.norm(q))
    for i in range(r):
        residual = deflate(q, cache.triples) if cache.triples else q
        try:
            triple, tape = _iterate_with_fallback(residual, cfg.iterations, cfg.eps, scale, i)
        except DegenerateDirectionError as exc:
            raise NearSingularError(
                f"singular value {i + 1} of {r} is numerically zero: {exc}"
            ) from exc
        cache.triples.append(triple)
        cache.tapes.append(tape)
    last = cache.triples[-1]
    if last.value < cfg.eps:
        raise NearSingularError(f"estimated singular value {last.value:.3e} below {cfg.eps:.1e}")
    head = cache.triples[:-1]
    residual = deflate(q, head) if head else q
    cache.residual = residual
    out = residual / last.value ** (1.0 - cfg.alpha)
    for t in head:
        out = out + t.value**cfg.alpha * np.outer(t.left, t.right)
    return out, cache


def svpn_approx(q: Matrix, cfg: SvpnConfig) -> Matrix:
    """Approximate svPN from ``r`` power-iteration estimates.

    The top ``r - 1`` estimated components are powered individually; whatever
    remains is divided by the ``r``-th estimate to the power ``1 - alpha``.
    With ``r = 1`` the result is ``Q / s1**(1 - alpha)``.
    """
    return svpn_approx_forward(q, cfg)[0]


def svpn_approx_backward(cache: ApproxCache, grad_out: Matrix) -> Matrix:
    """Unrolled VJP through the deflation and power iterations of the forward."""
    g = as_matrix(grad_out, "grad_out")
    if g.shape != cache.q.shape or cache.residual is None:
        raise ContractError(f"grad_out {g.shape} does not match cached forward {cache.q.shape}")
    alpha = cache.cfg.alpha
    triples = cache.triples
    r = len(triples)
    g_q = np.zeros_like(cache.q)
    g_val = np.zeros(r)
    g_left = [np.zeros_like(t.left) for t in triples]
    g_right = [np.zeros_like(t.right) for t in triples]

    last = triples[-1]
    scale = last.value ** (alpha - 1.0)
    g_residual = g * scale
    g_val[-1] += (alpha - 1.0) * last.value ** (alpha - 2.0) * float(np.sum(g * cache.residual))
    for i, t in enumerate(triples[:-1]):
        pw = t.value**alpha
        g_val[i] += alpha * t.value ** (alpha - 1.0) * float(t.left @ g @ t.right)
        g_left[i] += pw * (g @ t.right)
        g_right[i] += pw * (g.T @ t.left)
    # residual = Q - sum_{i<r-1} value_i left_i right_i^T
    g_q += g_residual
    for i, t in enumerate(triples[:-1]):
        _deflation_vjp(t, g_residual, i, g_val, g_left, g_right)

    # each triple i was estimated from Q minus the triples before it
    for i in range(r - 1, -1, -1):
        g_res_i = _power_backward(cache.tapes[i], g_val[i], g_left[i], g_right[i])
        g_q += g_res_i
        for j in range(i):
            _deflation_vjp(triples[j], g_res_i, j, g_val, g_left, g_right)
    return g_q


def _deflation_vjp(t, g_res, j, g_val, g_left, g_right):
    g_val[j] -= float(t.left @ g_res @ t.right)
    g_left[j] -= t.value * (g_res @ t.right)
    g_right[j] -= t.value * (g_res.T @ t.left)


# ---------------------------------------------------------------------------
# matrix power normalization (SPD inputs)


def mpn_forward(p: Matrix, beta: float = 0.5, eps: float = EPS) -> tuple[Matrix, EigFactors]:
    if not 0.0 < beta <= 1.0:
        raise ConfigurationError(f"beta must lie in (0, 1], got {beta}")
    eig = eigh_spd(p)
    vec, vals = eig
    return (vec * np.power(vals, beta)) @ vec.T, eig


def mpn(p: Matrix, beta: float = 0.5) -> Matrix:
    """Raise the eigenvalues of an SPD matrix to ``beta`` along its eigenvectors."""
    return mpn_forward(p, beta)[0]


def mpn_backward(eig: EigFactors, beta: float, grad_out: Matrix, eps: float = EPS) -> Matrix:
    """Daleckii-Krein backward: ``V (L o V^T sym(G) V) V^T`` with divided differences ``L``."""
    vec, vals = eig
    g = as_matrix(grad_out, "grad_out")
    if g.shape != (vec.shape[0], vec.shape[0]):
        raise ShapeError(f"grad_out shape {g.shape} does not match {vec.shape}")
    lam = np.maximum(vals, eps)
    f = np.power(lam, beta)
    fprime = beta * np.power(lam, beta - 1.0)
    d = lam[:, None] - lam[None, :]
    close = np.abs(d) < GAP_TOL * max(1.0, float(lam[0]))
    mid = 0.5 * (lam[:, None] + lam[None, :])
    loewner = np.where(
        close,
        beta * np.power(mid, beta - 1.0),
        (f[:, None] - f[None, :]) / np.where(close, 1.0, d),
    )
    np.fill_diagonal(loewner, fprime)
    g_sym = 0.5 * (g + g.T)
    return vec @ (loewner * (vec.T @ g_sym @ vec)) @ vec.T


# ---------------------------------------------------------------------------
# element-wise, layer-norm and scalar baselines


def epn(q: Matrix) -> Matrix:
    """Signed square root of every entry, then division by the Frobenius norm."""
    q = as_matrix(q, "q")
    s = np.sign(q) * np.sqrt(np.abs(q))
    n = float(np.linalg.norm(s))
    return s if n == 0.0 else s / n


def epn_backward(q: Matrix, grad_out: Matrix, eps: float = EPS) -> Matrix:
    q = as_matrix(q, "q")
    s = np.sign(q) * np.sqrt(np.abs(q))
    n = float(np.linalg.norm(s))
    if n == 0.0:
        return np.zeros_like(q)
    y = s / n
    g_s = (grad_out - y * float(np.sum(y * grad_out))) / n
    # d sqrt|x| sign(x) / dx = 1 / (2 sqrt|x|), floored away from zero
    return g_s * 0.5 / np.sqrt(np.maximum(np.abs(q), eps))


def layer_norm_matrix(q: Matrix, gain: float = 1.0, bias: float = 0.0, eps: float = EPS) -> Matrix:
    """Standardize with one mean and one standard deviation over all entries."""
    q = as_matrix(q, "q")
    if q.size < 2:
        raise ShapeError("layer norm needs at least two entries")
    c = q - q.mean()
    return gain * c / (c.std() + eps) + bias


def layer_norm_matrix_backward(q, gain, grad_out, eps: float = EPS):
    """Return ``(grad_q, grad_gain, grad_bias)``."""
    q = as_matrix(q, "q")
    c = q - q.mean()
    sd = float(c.std())
    den = sd + eps
    xhat = c / den
    g = np.asarray(grad_out, dtype=np.float64)
    g_gain = float(np.sum(g * xhat))
    g_bias = float(np.sum(g))
    gx = gain * g
    # xhat = c / (sd + eps), sd = sqrt(mean(c^2))
    g_c = gx / den - c * (float(np.sum(gx * c)) / (den**2 * max(sd, eps) * q.size))
    g_q = g_c - g_c.mean()
    return g_q, g_gain, g_bias


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


@dataclass(frozen=True)
class AdaptiveScaleParam:
    """Learnable ``tau > 0`` stored as an unconstrained ``raw`` with ``tau = softplus(raw)``."""

    raw: float

    @property
    def tau(self) -> float:
        return _softplus(self.raw)

    @classmethod
    def from_tau(cls, tau: float) -> "AdaptiveScaleParam":
        if not tau > 0:
            raise ConfigurationError("tau must be positive")
        # inverse softplus, stable for large tau
        return cls(tau + math.log(-math.expm1(-tau)))


class ScaleGrad(NamedTuple):
    q: Matrix
    tau: float
    raw: float


def adaptive_scale(q: Matrix, param: AdaptiveScaleParam) -> Matrix:
    return as_matrix(q, "q") / param.tau


def adaptive_scale_backward(q: Matrix, param: AdaptiveScaleParam, grad_out: Matrix) -> ScaleGrad:
    q = as_matrix(q, "q")
    tau = param.tau
    g_tau = -float(np.sum(grad_out * q)) / tau**2
    sig = 1.0 / (1.0 + math.exp(-param.raw))
    return ScaleGrad(np.asarray(grad_out) / tau, g_tau, g_tau * sig)
