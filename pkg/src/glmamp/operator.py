"""Unitarily-invariant sensing operators with a known spectrum.

The operator is stored in factored form ``A = U diag(d) V^H``.  The left and
right factors are either dense Haar matrices or fast orthonormal mixers
(random sign flips, an orthonormal DCT/DFT and a random permutation).  Since
the singular values are owned, every spectral quantity used by the linear
estimators is computed exactly instead of being estimated.
"""

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft
from scipy.stats import ortho_group, unitary_group

KINDS = ("dense-haar", "fast-transform")


class InvalidConfig(ValueError):
    """Raised for inconsistent operator or experiment parameters."""


def geometric_singular_values(J, N, kappa):
    """Geometric spectrum d_1 >= ... >= d_J with d_1/d_J = kappa and sum d^2 = N."""
    if J < 1:
        raise InvalidConfig("need at least one singular value")
    if not kappa >= 1:
        raise InvalidConfig(f"condition number must be >= 1, got {kappa}")
    if J == 1:
        d = np.ones(1)
    else:
        # constant ratio between neighbours, extreme ratio exactly kappa
        d = np.exp(-np.log(kappa) * np.arange(J) / (J - 1))
    return d * np.sqrt(N / np.sum(d**2))


class _Mixer:
    """Orthonormal n x n transform Q with forward(x) = Q^H x, inverse(u) = Q u."""

    def __init__(self, n, kind, rng, is_complex):
        self.n = n
        self.kind = kind
        self.is_complex = is_complex
        if kind == "dense-haar":
            if n == 1:
                self.Q = np.ones((1, 1), dtype=complex if is_complex else float)
            elif is_complex:
                self.Q = unitary_group.rvs(n, random_state=rng)
            else:
                self.Q = ortho_group.rvs(n, random_state=rng)
        else:
            if is_complex:
                self.signs = np.exp(2j * np.pi * rng.random(n))
            else:
                self.signs = rng.choice([-1.0, 1.0], size=n)
            self.perm = rng.permutation(n)

    def forward(self, x):
        if self.kind == "dense-haar":
            return self.Q.conj().T @ x
        s = self.signs if x.ndim == 1 else self.signs[:, None]
        if self.is_complex:
            u = scipy.fft.fft(s * x, axis=0, norm="ortho")
        else:
            u = scipy.fft.dct(s * x, type=2, axis=0, norm="ortho")
        return u[self.perm]

    def inverse(self, u):
        if self.kind == "dense-haar":
            return self.Q @ u
        t = np.empty_like(u, dtype=np.result_type(u, self.signs))
        t[self.perm] = u
        s = self.signs if u.ndim == 1 else self.signs[:, None]
        if self.is_complex:
            return np.conj(s) * scipy.fft.ifft(t, axis=0, norm="ortho")
        return s * scipy.fft.idct(t, type=2, axis=0, norm="ortho")


@dataclass(frozen=True)
class SpectralOperator:
    """Sensing matrix A = U diag(d) V^H of size M x N.

    ``singular_values`` has length J = min(M, N) and is sorted in
    non-increasing order.  The object is immutable and safe to share.
    """

    M: int
    N: int
    singular_values: np.ndarray
    kind: str = "fast-transform"
    seed: int = 0
    is_complex: bool = False
    kappa: float = float("nan")
    _left: _Mixer = field(default=None, repr=False, compare=False)
    _right: _Mixer = field(default=None, repr=False, compare=False)

    @property
    def J(self):
        return min(self.M, self.N)

    @property
    def delta(self):
        return self.M / self.N

    @property
    def eigenvalues(self):
        """Eigenvalues of A A^H (length M, zero padded when M > N)."""
        lam = np.zeros(self.M)
        lam[: self.J] = self.singular_values**2
        return lam

    @property
    def lambda_max(self):
        return float(self.singular_values[0] ** 2)

    @property
    def lambda_min(self):
        return float(self.singular_values[-1] ** 2)

    @property
    def lambda_dagger(self):
        return 0.5 * (self.lambda_max + self.lambda_min)

    @property
    def dtype(self):
        return np.complex128 if self.is_complex else np.float64

    # factor products
    def right_adjoint(self, x):
        """V^H x."""
        return self._right.forward(x)

    def right(self, u):
        """V u."""
        return self._right.inverse(u)

    def left_adjoint(self, v):
        """U^H v."""
        return self._left.forward(v)

    def left(self, q):
        """U q."""
        return self._left.inverse(q)

    def _check(self, v, n, what):
        v = np.asarray(v)
        if v.shape[0] != n:
            raise ValueError(f"{what}: expected leading length {n}, got {v.shape[0]}")
        return v

    def _scale(self, q, out_len, d):
        J = self.J
        out = np.zeros((out_len,) + q.shape[1:], dtype=np.result_type(q, d))
        dd = d if q.ndim == 1 else d[:, None]
        out[:J] = dd * q[:J]
        return out

    def apply(self, x):
        """A x for a length-N vector (or N x k block)."""
        x = self._check(x, self.N, "apply")
        q = self.right_adjoint(x)
        return self.left(self._scale(q, self.M, self.singular_values))

    def apply_adjoint(self, v):
        """A^H v for a length-M vector (or M x k block)."""
        v = self._check(v, self.M, "apply_adjoint")
        q = self.left_adjoint(v)
        return self.right(self._scale(q, self.N, self.singular_values))

    def apply_B(self, u):
        """B u = lambda_dagger u - A A^H u."""
        u = self._check(u, self.M, "apply_B")
        return self.lambda_dagger * u - self.apply(self.apply_adjoint(u))

    def lmmse_solve(self, rho, v):
        """A^H (rho I + A A^H)^{-1} v through the owned spectrum."""
        v = self._check(v, self.M, "lmmse_solve")
        q = self.left_adjoint(v)
        lam = self.eigenvalues
        filt = np.zeros(self.N)
        d = self.singular_values
        filt[: self.J] = d / (rho + lam[: self.J])
        r = np.zeros((self.N,) + q.shape[1:], dtype=q.dtype)
        ff = filt[: self.J] if q.ndim == 1 else filt[: self.J, None]
        r[: self.J] = ff * q[: self.J]
        return self.right(r)

    def to_dense(self):
        """Materialize A (for tests and small problems)."""
        return self.apply(np.eye(self.N, dtype=self.dtype))

    def spec(self):
        """JSON-serializable description from which the operator is rebuilt."""
        return {
            "M": int(self.M),
            "N": int(self.N),
            "kappa": float(self.kappa),
            "kind": self.kind,
            "seed": int(self.seed),
            "complex": bool(self.is_complex),
        }


def operator_from_singular_values(singular_values, M, N, kind="fast-transform",
                                  seed=0, is_complex=False):
    """Operator with a user-supplied spectrum and random orthonormal factors."""
    if M < 1 or N < 1:
        raise InvalidConfig("M and N must be positive")
    if kind not in KINDS:
        raise InvalidConfig(f"unknown operator kind {kind!r}; expected one of {KINDS}")
    d = np.sort(np.asarray(singular_values, dtype=float))[::-1].copy()
    if d.shape != (min(M, N),):
        raise InvalidConfig(f"need {min(M, N)} singular values, got {d.shape}")
    if np.any(d <= 0):
        raise InvalidConfig("singular values must be positive")
    ss = np.random.SeedSequence(seed)
    rl, rr = [np.random.default_rng(s) for s in ss.spawn(2)]
    left = _Mixer(M, kind, rl, is_complex)
    right = _Mixer(N, kind, rr, is_complex)
    d.setflags(write=False)
    return SpectralOperator(M=M, N=N, singular_values=d, kind=kind, seed=seed,
                            is_complex=is_complex, kappa=float(d[0] / d[-1]),
                            _left=left, _right=right)


def build_operator(M, N, kappa=1.0, kind="fast-transform", seed=0, is_complex=False):
    """Geometric-spectrum operator with condition number kappa and sum d^2 = N."""
    if M < 1 or N < 1:
        raise InvalidConfig("M and N must be positive")
    if not kappa >= 1:
        raise InvalidConfig(f"condition number must be >= 1, got {kappa}")
    d = geometric_singular_values(min(M, N), N, kappa)
    op = operator_from_singular_values(d, M, N, kind=kind, seed=seed, is_complex=is_complex)
    return replace(op, kappa=float(kappa))


def operator_from_spec(spec):
    """Inverse of SpectralOperator.spec()."""
    return build_operator(int(spec["M"]), int(spec["N"]), float(spec["kappa"]),
                          kind=spec.get("kind", "fast-transform"), seed=int(spec.get("seed", 0)),
                          is_complex=bool(spec.get("complex", False)))


def apply(op, x):
    return op.apply(x)


def apply_adjoint(op, v):
    return op.apply_adjoint(v)


def apply_B(op, u):
    return op.apply_B(u)


@dataclass(frozen=True)
class SpectralMoments:
    """Normalized trace moments of W_t = A^H B^t A and derived tables.

    w[t] = (1/M) sum_j d_j^2 (lambda_dagger - d_j^2)^t.  The derived tables are
    wbar[i] = lambda_dagger w[i] - w[i+1], wbar2[i, j] = wbar[i+j] - w[i] w[j],
    wtilde[i, j] = wbar[i+j]/delta - w[i] w[j] and
    wbarbar[i] = lambda_dagger wbar[i] - wbar[i+1].

    ``unit`` is 1 for the raw tables.  ``rescaled()`` divides every table
    entry with total index k by unit**k; the memory recursions only ever
    multiply such entries by products of k contraction factors, so they can
    work in either representation (the rescaled one never overflows).
    """

    M: int
    N: int
    T: int
    lambda_min: float
    lambda_max: float
    lambda_dagger: float
    lambda1: float
    w: np.ndarray
    wbar: np.ndarray
    wbar2: np.ndarray
    wtilde: np.ndarray
    wbarbar: np.ndarray
    unit: float = 1.0
    eigenvalues: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def delta(self):
        return self.M / self.N

    @property
    def w0(self):
        return float(self.w[0])

    def rescaled(self, unit=None):
        """Tables in units where the contraction B has spectral radius one."""
        if unit is None:
            lam = self.eigenvalues
            unit = float(np.max(np.abs(self.lambda_dagger - lam)))
            if unit <= 0:
                unit = 1.0
        return moments_from_eigenvalues(self.eigenvalues, self.M, self.N, self.T,
                                        lambda_min=self.lambda_min,
                                        lambda_max=self.lambda_max, unit=unit)


def moments_from_eigenvalues(eigenvalues, M, N, T, lambda_min=None, lambda_max=None, unit=1.0):
    """Moment tables from the eigenvalues of A A^H (see SpectralMoments)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    lam = np.asarray(eigenvalues, dtype=float)
    pos = lam[lam > 0]
    lmax = float(np.max(pos)) if lambda_max is None else float(lambda_max)
    lmin = float(np.min(pos)) if lambda_min is None else float(lambda_min)
    ldag = 0.5 * (lmax + lmin)
    delta = M / N
    K = 2 * T + 3
    base = (ldag - lam) / unit
    w = np.empty(K)
    pw = lam / M
    for k in range(K):
        w[k] = np.sum(pw)
        pw = pw * base
    if not np.all(np.isfinite(w)):
        raise OverflowError("moment table overflowed; use rescaled() or a smaller T")
    # identities in scaled form: x_k / unit^k
    wbar = (ldag * w[:-1] - unit * w[1:])
    wbarbar = ldag * wbar[:-1] - unit * wbar[1:]
    n = T + 1
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    wbar2 = wbar[i + j] - w[i] * w[j]
    wtilde = wbar[i + j] / delta - w[i] * w[j]
    return SpectralMoments(M=M, N=N, T=T, lambda_min=lmin, lambda_max=lmax,
                           lambda_dagger=ldag, lambda1=float(np.sum(lam) / M),
                           w=w, wbar=wbar, wbar2=wbar2, wtilde=wtilde,
                           wbarbar=wbarbar, unit=float(unit), eigenvalues=lam)


def compute_moments(op, T, rescaled=False):
    """Exact moment tables for T iterations from the operator's own spectrum.

    ``rescaled=True`` builds the tables directly in the units of
    ``SpectralMoments.rescaled``, which stay finite for any T.
    """
    unit = 1.0
    if rescaled:
        unit = float(np.max(np.abs(op.lambda_dagger - op.eigenvalues))) or 1.0
    return moments_from_eigenvalues(op.eigenvalues, op.M, op.N, T, lambda_min=op.lambda_min,
                                    lambda_max=op.lambda_max, unit=unit)
