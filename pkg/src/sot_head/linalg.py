"""Dense double-precision linear algebra.

Matrices are plain 2-D ``float64`` numpy arrays. The factorizations here wrap
LAPACK and then pin a sign convention and ordering so that every downstream
result is deterministic.
"""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DomainError, NumericError, ShapeError

Matrix = np.ndarray


class SvdFactors(NamedTuple):
    """Thin SVD ``q = u @ diag(s) @ v.T`` with ``k = min(m, n)`` columns."""

    u: Matrix
    s: np.ndarray
    v: Matrix


class EigFactors(NamedTuple):
    """Eigendecomposition ``p = vectors @ diag(values) @ vectors.T``."""

    vectors: Matrix
    values: np.ndarray


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Coerce ``a`` to a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")
    return m


def _fix_signs(u: Matrix, v: Matrix) -> tuple[Matrix, Matrix]:
    # largest-magnitude entry of each left vector is made non-negative
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs, v * signs


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def svd(q: Matrix) -> SvdFactors:
    """Thin SVD with non-increasing singular values and a fixed sign convention.

    In each singular pair the entry of largest magnitude in the left vector is
    non-negative; ties pick the lowest row index.
    """
    q = as_matrix(q, "q")
    try:
        u, s, vt = np.linalg.svd(q, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge for {q.shape} input: {exc}") from exc
    u, v = _fix_signs(u, vt.T)
    return SvdFactors(u, s, v)


def eigh_spd(p: Matrix, sym_tol: float = 1e-10, neg_tol: float = 1e-12) -> EigFactors:
    """Eigendecomposition of a symmetric positive semi-definite matrix.

    Eigenvalues come back in non-increasing order. Negative eigenvalues within
    ``neg_tol`` (relative to the spectral radius, floor 1) are clamped to zero.
    """
    p = as_matrix(p, "p")
    if p.shape[0] != p.shape[1]:
        raise ShapeError(f"expected a square matrix, got {p.shape}")
    scale = max(1.0, float(np.max(np.abs(p))))
    asym = float(np.max(np.abs(p - p.T)))
    if asym > sym_tol * scale:
        raise DomainError(f"matrix is not symmetric (max |P - P^T| = {asym:.3e})")
    try:
        values, vectors = np.linalg.eigh(0.5 * (p + p.T))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition did not converge: {exc}") from exc
    values = values[::-1]
    vectors = vectors[:, ::-1]
    floor = -neg_tol * max(1.0, float(np.max(np.abs(values))))
    if values[-1] < floor:
        raise DomainError(f"matrix is not positive semi-definite (min eigenvalue {values[-1]:.3e})")
    values = np.maximum(values, 0.0)
    vectors, _ = _fix_signs(vectors, vectors)
    return EigFactors(vectors, values)


def frobenius_norm(a: Matrix) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(a, dtype=np.float64)))))


def read_matrix_csv(path: str | Path) -> Matrix:
    """Read the ``rows,cols`` header format used by the command line tools."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ShapeError(f"{path}: empty matrix file")
    try:
        rows, cols = (int(x) for x in lines[0].split(","))
    except ValueError as exc:
        raise ShapeError(f"{path}: bad header {lines[0]!r}") from exc
    body = lines[1:]
    if len(body) != rows:
        raise ShapeError(f"{path}: header says {rows} rows, found {len(body)}")
    data = []
    for i, ln in enumerate(body):
        vals = [float(x) for x in ln.split(",")]
        if len(vals) != cols:
            raise ShapeError(f"{path}: row {i} has {len(vals)} entries, expected {cols}")
        data.append(vals)
    return as_matrix(np.array(data), str(path))


def format_matrix_csv(a: Matrix) -> str:
    a = as_matrix(a)
    lines = [f"{a.shape[0]},{a.shape[1]}"]
    lines += [",".join(f"{x:.17g}" for x in row) for row in a]
    return "\n".join(lines) + "\n"


def write_matrix_csv(path: str | Path, a: Matrix) -> None:
    Path(path).write_text(format_matrix_csv(a))
