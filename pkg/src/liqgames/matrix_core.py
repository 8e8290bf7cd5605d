"""Structured small-matrix algebra.

Exchangeable matrices (constant diagonal, constant off-diagonal) form a
two-dimensional commutative algebra spanned by the identity and the all-ones
matrix; their spectrum is {diag + (n-1)*off, diag - off} and every analytic
function of them has a closed form through the two eigenprojections.  The
module also provides Z/M-matrix classification, diagonal-dominance gaps, the
Varah inverse-norm bound, and matrix exponentials.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._errors import DimensionError, ParameterError


@dataclass(frozen=True)
class ExchangeableMatrix:
    """n x n matrix with ``diag`` on the diagonal and ``off`` everywhere else.

    Invariant under conjugation by any permutation matrix.  Closed under
    addition, scaling and matrix multiplication, so sums/products/exponentials
    stay in the class.
    """

    n: int
    diag: float
    off: float

    def __post_init__(self):
        if self.n < 1:
            raise DimensionError(f"dimension must be >= 1, got {self.n}")

    def to_dense(self):
        m = np.full((self.n, self.n), self.off, dtype=float)
        np.fill_diagonal(m, self.diag)
        return m

    def eigenvalues(self):
        """(aligned eigenvalue, orthogonal eigenvalue) = (diag+(n-1)off, diag-off).

        The first has multiplicity 1 (eigenvector of all ones), the second
        multiplicity n-1 (the orthogonal complement).
        """
        return self.diag + (self.n - 1) * self.off, self.diag - self.off

    def __add__(self, other):
        self._check(other)
        return ExchangeableMatrix(self.n, self.diag + other.diag, self.off + other.off)

    def __sub__(self, other):
        self._check(other)
        return ExchangeableMatrix(self.n, self.diag - other.diag, self.off - other.off)

    def __neg__(self):
        return ExchangeableMatrix(self.n, -self.diag, -self.off)

    def scale(self, c):
        return ExchangeableMatrix(self.n, c * self.diag, c * self.off)

    def __matmul__(self, other):
        # (dI + o(J-I))(d'I + o'(J-I)) stays in span{I, J}; work in the
        # aligned/orthogonal eigenbasis where multiplication is entrywise.
        self._check(other)
        a1, a2 = self.eigenvalues()
        b1, b2 = other.eigenvalues()
        return from_eigenvalues(self.n, a1 * b1, a2 * b2)

    def expm(self):
        """Closed-form matrix exponential via the two eigenprojections."""
        lam1, lam2 = self.eigenvalues()
        return from_eigenvalues(self.n, float(np.exp(lam1)), float(np.exp(lam2)))

    def _check(self, other):
        if not isinstance(other, ExchangeableMatrix):
            raise TypeError("expected an ExchangeableMatrix")
        if other.n != self.n:
            raise DimensionError(f"dimension mismatch: {self.n} vs {other.n}")


def from_eigenvalues(n, aligned, orthogonal):
    """Exchangeable matrix with the given (aligned, orthogonal) eigenvalues."""
    if n == 1:
        return ExchangeableMatrix(1, aligned, 0.0)
    off = (aligned - orthogonal) / n
    return ExchangeableMatrix(n, orthogonal + off, off)


def exchangeable(n, diag, off):
    """Build an exchangeable matrix; ``n`` must be at least 1."""
    return ExchangeableMatrix(int(n), float(diag), float(off))


def identity(n):
    return ExchangeableMatrix(n, 1.0, 0.0)


def all_ones(n):
    return ExchangeableMatrix(n, 1.0, 1.0)


@dataclass(frozen=True)
class MatrixClassReport:
    """Sign-structure and dominance diagnostics for a square matrix.

    ``is_z``: off-diagonal entries all <= 0 (Z-matrix).
    ``is_m_plus``: Z-matrix with non-negative column sums (adopted
    convention); such matrices are non-negative stable, and I plus any
    positive multiple of their integral is non-singular.
    ``is_m_plus_rows``: same predicate under the row-sum convention.
    ``row_gap``: min_i(|a_ii| - sum_{j != i} |a_ij|); ``col_gap`` transposed.
    """

    is_z: bool
    is_m_plus: bool
    is_m_plus_rows: bool
    row_gap: float
    col_gap: float


def _as_square(m):
    if isinstance(m, ExchangeableMatrix):
        m = m.to_dense()
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ParameterError("matrix has non-finite entries")
    return a


def dominance_gaps(m):
    """(row_gap, col_gap) diagonal-dominance margins."""
    a = _as_square(m)
    absd = np.abs(np.diag(a))
    offsums_r = np.sum(np.abs(a), axis=1) - absd
    offsums_c = np.sum(np.abs(a), axis=0) - absd
    return float(np.min(absd - offsums_r)), float(np.min(absd - offsums_c))


def classify_matrix(m, tol=0.0):
    a = _as_square(m)
    off = a - np.diag(np.diag(a))
    is_z = bool(np.all(off <= tol))
    col_ok = bool(np.all(np.sum(a, axis=0) >= -tol))
    row_ok = bool(np.all(np.sum(a, axis=1) >= -tol))
    row_gap, col_gap = dominance_gaps(a)
    return MatrixClassReport(
        is_z=is_z,
        is_m_plus=is_z and col_ok,
        is_m_plus_rows=is_z and row_ok,
        row_gap=row_gap,
        col_gap=col_gap,
    )


def varah_bound(m):
    """Upper bound 1/gap on the inf-norm of the inverse.

    Valid for matrices that are strictly diagonally dominant by rows; raises
    if the dominance gap is not positive.
    """
    row_gap, _ = dominance_gaps(m)
    if row_gap <= 0.0:
        raise ParameterError(
            f"matrix is not strictly diagonally dominant by rows (gap={row_gap:g})"
        )
    return 1.0 / row_gap


def mat_exp(m):
    """Matrix exponential.

    Exchangeable input uses the two-projection closed form; dense input goes
    through scaling-and-squaring with a Pade approximant.  Either way
    exp(m) @ exp(-m) recovers the identity to ~1e-10 for moderate norms.
    """
    if isinstance(m, ExchangeableMatrix):
        return m.expm().to_dense()
    a = _as_square(m)
    return scipy.linalg.expm(a)


def commute_check(x, y, tol=1e-12):
    """True iff the commutator xy - yx vanishes in inf-norm up to ``tol``."""
    a, b = _as_square(x), _as_square(y)
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    comm = a @ b - b @ a
    return bool(np.max(np.abs(comm).sum(axis=1)) <= tol)
