"""BO-GMAMP: damped orthogonal denoisers plus a long-memory linear estimator.

The scalar bookkeeping (damping weights, step sizes, normalizations and the
error-covariance ledger) lives in ``MemoryController`` so that the vector
algorithm and its state evolution run the very same recursions.

Iterations are numbered from 1 as in the usual presentation; arrays are
0-based, so iteration t lives at index t-1.  Moment tables are used in
rescaled form (see ``SpectralMoments.rescaled``), which is why the stored
memory weights ``vartheta`` carry powers of ``unit``.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .denoisers import (NonInformativeDenoiser, awgn_posterior, bg_posterior,
                        clip_posterior, orthogonalize)
from .operator import compute_moments
from .records import IterationTrace

log = logging.getLogger(__name__)

COV_MODES = ("oracle", "prop2", "se-companion")
XI_SENTINEL = 1e12
DAMPING_JITTER = 1e-10
SINGULAR_RTOL = 1e-13
DIVERGENCE_FACTOR = 10.0


class DivergenceDetected(RuntimeError):
    pass


class LedgerError(ArithmeticError):
    """A tracked variance or normalization became nonpositive."""


class MissingCovarianceRows(LookupError):
    pass


def _inner(a, b):
    return float(np.real(np.vdot(b, a))) / len(a)


@dataclass
class CovarianceLedger:
    """Error covariances tracked by BO-GMAMP.

    Vx, Vz: damped NLE outputs x_i, z_i.  VVx, VVz: MLE outputs, where index
    k holds the pseudo-observation fed to iteration k+1 (VVz[0, 0] is the
    power of z since the first pseudo-observation is zero).  v_phi, v_psi:
    rows of cross covariances between the current undamped denoiser error
    and the damped history.  v_stilde: the MLE's zero-mean z-side term.
    """

    Vx: np.ndarray
    Vz: np.ndarray
    VVx: np.ndarray
    VVz: np.ndarray
    v_stilde: np.ndarray
    v_phi: list = field(default_factory=list)
    v_psi: list = field(default_factory=list)

    @classmethod
    def empty(cls, T):
        nan = lambda n: np.full((n, n), np.nan)
        return cls(Vx=nan(T), Vz=nan(T), VVx=nan(T + 1), VVz=nan(T + 1), v_stilde=nan(T))


@dataclass(frozen=True)
class DampingVectors:
    zeta: np.ndarray
    varrho: np.ndarray
    L: int
    window: np.ndarray

    @property
    def l_t(self):
        return len(self.zeta)


@dataclass
class MemoryState:
    """Vectors of one BO-GMAMP run."""

    z_hat: np.ndarray
    x_hat: np.ndarray
    Az_prev: np.ndarray
    X_hist: list = field(default_factory=list)
    Z_hist: list = field(default_factory=list)
    vartheta: np.ndarray = None
    p: np.ndarray = None
    theta: float = None
    xi: float = None
    cx: float = None
    cz: float = None
    beta: float = None


@dataclass(frozen=True)
class MleParams:
    t: int
    theta: float
    xi: float
    p: np.ndarray
    cx: float
    cz: float
    beta: float
    v_x_next: float
    v_z_next: float


def damping_weights(V):
    """Weights summing to one that minimize z^T V z.

    Falls back to [0, ..., 0, 1] when V is not numerically positive definite.
    """
    V = np.asarray(V, dtype=float)
    n = V.shape[0]
    fallback = np.zeros(n)
    fallback[-1] = 1.0
    if n == 1:
        return fallback
    if not np.all(np.isfinite(V)):
        return fallback
    ev = np.linalg.eigvalsh(0.5 * (V + V.T))
    if ev[0] <= SINGULAR_RTOL * max(ev[-1], 0.0) or ev[-1] <= 0:
        return fallback
    Vj = V + DAMPING_JITTER * np.mean(np.diag(V)) * np.eye(n)
    try:
        u = cho_solve(cho_factor(Vj), np.ones(n))
    except LinAlgError:
        return fallback
    s = np.sum(u)
    if not np.isfinite(s) or s <= 0:
        return fallback
    return u / s


def optimize_theta(v_z_tt, v_x_tt, lambda_dagger):
    """Step size minimizing the spectral radius of I - theta (rho I + A A^H)."""
    return 1.0 / (lambda_dagger + v_z_tt / v_x_tt)


def compute_c_coeffs(Vx, Vz, moments, vartheta, t):
    """Coefficients of the MLE output variance as a function of xi_t.

    ``vartheta`` holds the memory weights of iteration t for i < t (entries
    past t-1 are ignored); ``moments`` may be raw or rescaled as long as
    ``vartheta`` matches.
    """
    delta = moments.delta
    w, wt = moments.w, moments.wtilde
    w0 = w[0]
    a = np.asarray(vartheta[: t - 1], dtype=float)
    k = t - np.arange(1, t)
    c0 = float(np.sum(a * w[k]) / w0)
    c1 = float(Vx[t - 1, t - 1] * delta * wt[0, 0] + Vz[t - 1, t - 1] * w0)
    c2 = -float(np.sum(a * (Vx[: t - 1, t - 1] * delta * wt[0, k] + Vz[: t - 1, t - 1] * w[k])))
    kk = k[:, None] + k[None, :]
    c3 = float(a @ (Vx[: t - 1, : t - 1] * delta * wt[np.ix_(k, k)]
                    + Vz[: t - 1, : t - 1] * w[kk]) @ a)
    return c0, c1, c2, c3


def optimize_xi(c0, c1, c2, c3):
    """Minimizer of (c1 xi^2 - 2 c2 xi + c3) / (xi + c0)^2."""
    den = c1 * c0 + c2
    if den == 0:
        return XI_SENTINEL
    return (c2 * c0 + c3) / den


def xi_objective(xi, c0, c1, c2, c3, delta, w0):
    return (c1 * xi * xi - 2 * c2 * xi + c3) / (delta * w0 * w0 * (xi + c0) ** 2)


def optimize_cz(beta, w0, v_stilde_tt, q=0.0):
    """Normalization of the z-side MLE output minimizing its error variance.

    ``w0`` is the power of z and ``q`` the correlation of the MLE's residual
    term with z; q = 0 gives beta w0 / (beta^2 w0 + v_stilde_tt).
    """
    den = beta * beta * w0 + 2.0 * beta * q + v_stilde_tt
    if not den > 0:
        raise LedgerError("nonpositive denominator in the z normalization")
    return (beta * w0 + q) / den


def stilde_signal_corr(moments, vartheta_row, xcorr, xi, theta, t):
    """(1/M) E<s_tilde_t, z>: nonzero because the damped x-side errors lean on x.

    ``xcorr[i]`` is -(1/N) E<x, f_i> for the damped outputs up to t.
    """
    a = vartheta_row[:t]
    k = t - np.arange(1, t + 1)
    return float(np.sum(a * xcorr[:t] * moments.wbar[k]) - (xi / theta) * xcorr[t - 1] * moments.w[0])


def mle_covariance(Vx, Vz, moments, vartheta, cx, xi, theta, t, tp):
    """(VVx[t+1, t'+1] without the z side, v_stilde[t, t']) from the ledger.

    ``vartheta`` is the full lower-triangular table of memory weights, row
    t-1 holding iteration t; ``cx``, ``xi`` and ``theta`` are per-iteration
    arrays.
    """
    delta = moments.delta
    a = vartheta[t - 1, :t]
    b = vartheta[tp - 1, :tp]
    ki = t - np.arange(1, t + 1)
    kj = tp - np.arange(1, tp + 1)
    kk = ki[:, None] + kj[None, :]
    vx = Vx[:t, :tp]
    vz = Vz[:t, :tp]
    vvx = cx[t - 1] * cx[tp - 1] * float(
        a @ (moments.wtilde[np.ix_(ki, kj)] * vx + moments.w[kk] * vz / delta) @ b)
    r, rp = xi[t - 1] / theta[t - 1], xi[tp - 1] / theta[tp - 1]
    vs = float(a @ (moments.wbarbar[kk] * vx + moments.wbar2[np.ix_(ki, kj)] * vz) @ b)
    vs -= rp * float(np.sum(a * moments.wbar[ki] * Vx[:t, tp - 1]))
    vs -= r * float(np.sum(b * moments.wbar[kj] * Vx[t - 1, :tp]))
    vs += r * rp * moments.w[0] * Vx[t - 1, tp - 1]
    return vvx, vs


class MemoryController:
    """Damping, parameter optimization and covariance updates of BO-GMAMP."""

    def __init__(self, moments, T, L=3, z_power=None, xi_optimized=True, theta_optimized=True):
        if L < 1:
            raise ValueError("damping length must be >= 1")
        if moments.T < T:
            raise ValueError("moment tables are shorter than T")
        self.raw = moments
        self.mom = moments if moments.unit != 1.0 else moments.rescaled()
        self.unit = self.mom.unit
        self.T, self.L = T, L
        self.delta = moments.delta
        self.zp = moments.lambda1 if z_power is None else float(z_power)
        self.xi_optimized = xi_optimized
        self.theta_optimized = theta_optimized
        self.ledger = CovarianceLedger.empty(T)
        self.ledger.VVz[0, 0] = self.zp
        self.vartheta = np.zeros((T, T))
        self.theta = np.full(T, np.nan)
        self.xi = np.full(T, np.nan)
        self.cx = np.full(T, np.nan)
        self.cz = np.full(T, np.nan)
        self.beta = np.full(T, np.nan)
        self.xcorr = np.full(T, np.nan)
        self.q = np.full(T, np.nan)
        self.dampers = []

    def pseudo_variances(self, t):
        """Variances of the pseudo-observations entering iteration t."""
        vvx = np.inf if t == 1 else self.ledger.VVx[t - 1, t - 1]
        return vvx, self.ledger.VVz[t - 1, t - 1]

    def _damp_side(self, V, row, t, l):
        win = np.arange(t - l, t - 1)
        M = np.empty((l, l))
        M[:-1, :-1] = V[np.ix_(win, win)]
        M[:-1, -1] = M[-1, :-1] = row[win]
        M[-1, -1] = row[t - 1]
        zeta = damping_weights(M)
        for tp in range(t - 1):
            V[t - 1, tp] = V[tp, t - 1] = float(zeta[:-1] @ V[win, tp]) + zeta[-1] * row[tp]
        V[t - 1, t - 1] = float(zeta @ M @ zeta)
        return zeta, win

    def damp(self, t, phi_row, psi_row):
        """Fold the NLE rows of iteration t into the ledger; return the damping vectors."""
        phi_row = np.asarray(phi_row, dtype=float)
        psi_row = np.asarray(psi_row, dtype=float)
        if len(phi_row) != t or len(psi_row) != t:
            raise ValueError("NLE covariance rows must have length t")
        if not (phi_row[-1] > 0 and psi_row[-1] > 0):
            raise LedgerError("NLE error variances must be positive")
        self.ledger.v_phi.append(phi_row)
        self.ledger.v_psi.append(psi_row)
        l = min(self.L, t)
        zeta, win = self._damp_side(self.ledger.Vx, phi_row, t, l)
        varrho, _ = self._damp_side(self.ledger.Vz, psi_row, t, l)
        # the undamped x-side error e satisfies E<x, e> = -E<e, e>
        self.xcorr[t - 1] = float(zeta[:-1] @ self.xcorr[win]) + zeta[-1] * phi_row[-1]
        dv = DampingVectors(zeta, varrho, self.L, win)
        self.dampers.append(dv)
        return dv

    def linear_step(self, t):
        """Optimize theta, xi and the normalizations of iteration t and extend the ledger."""
        led, mom = self.ledger, self.mom
        vx_tt, vz_tt = led.Vx[t - 1, t - 1], led.Vz[t - 1, t - 1]
        if t == 1 or self.theta_optimized:
            theta = optimize_theta(vz_tt, vx_tt, mom.lambda_dagger)
        else:
            theta = self.theta[0]
        if not theta > 1e-300:
            raise ArithmeticError(f"step size {theta!r} underflowed")
        self.theta[t - 1] = theta
        if t > 1:
            self.vartheta[t - 1, : t - 1] = theta * self.unit * self.vartheta[t - 2, : t - 1]
        if t == 1 or not self.xi_optimized:
            xi = 1.0
        else:
            xi = optimize_xi(*compute_c_coeffs(led.Vx, led.Vz, mom, self.vartheta[t - 1], t))
        self.xi[t - 1] = xi
        self.vartheta[t - 1, t - 1] = xi
        p = self.vartheta[t - 1, :t] * mom.w[t - np.arange(1, t + 1)]
        cx = 1.0 / np.sum(p)
        beta = xi / theta - 1.0 / cx
        self.cx[t - 1], self.beta[t - 1] = cx, beta
        for tp in range(1, t + 1):
            vvx, vs = mle_covariance(led.Vx, led.Vz, mom, self.vartheta, self.cx,
                                     self.xi, self.theta, t, tp)
            led.VVx[t, tp] = led.VVx[tp, t] = vvx
            led.v_stilde[t - 1, tp - 1] = led.v_stilde[tp - 1, t - 1] = vs
        q = stilde_signal_corr(mom, self.vartheta[t - 1], self.xcorr, xi, theta, t)
        self.q[t - 1] = q
        cz = optimize_cz(beta, self.zp, led.v_stilde[t - 1, t - 1], q)
        self.cz[t - 1] = cz
        g = cz * beta - 1.0
        for tp in range(1, t + 1):
            czp = self.cz[tp - 1]
            gp = czp * self.beta[tp - 1] - 1.0
            led.VVz[t, tp] = led.VVz[tp, t] = (
                g * gp * self.zp + cz * czp * led.v_stilde[t - 1, tp - 1]
                + g * czp * self.q[tp - 1] + gp * cz * q)
        led.VVz[t, 0] = led.VVz[0, t] = -(g * self.zp + cz * q)
        if not (led.VVx[t, t] > 0 and led.VVz[t, t] > 0):
            raise LedgerError(f"nonpositive pseudo-observation variance after t={t}")
        return MleParams(t=t, theta=theta, xi=xi, p=p.copy(), cx=cx, cz=cz, beta=beta,
                         v_x_next=led.VVx[t, t], v_z_next=led.VVz[t, t])

    def check_divergence(self, t):
        v = self.ledger.Vx
        if v[t - 1, t - 1] > DIVERGENCE_FACTOR * v[0, 0]:
            raise DivergenceDetected(
                f"v_x[{t},{t}] = {v[t - 1, t - 1]:.3e} exceeds {DIVERGENCE_FACTOR:g} x v_x[1,1]")


def mnle_damped(phi_out, psi_out, damping, X_hist, Z_hist):
    """Damped NLE outputs from the current orthogonal estimates and the history."""
    zeta, varrho, win = damping.zeta, damping.varrho, damping.window
    x_t = zeta[-1] * phi_out
    z_t = varrho[-1] * psi_out
    for k, i in enumerate(win):
        x_t = x_t + zeta[k] * X_hist[i]
        z_t = z_t + varrho[k] * Z_hist[i]
    return x_t, z_t


def mle_step(state, op, params, x_t, z_t):
    """One memory linear step.  Returns (x_ext, z_ext); updates ``state`` in place.

    Uses three operator applications: A x_t, A^H z_hat and A (A^H z_hat).
    """
    if len(state.X_hist) != params.t or len(state.Z_hist) != params.t:
        raise ValueError("history length does not match the iteration index")
    theta, xi = params.theta, params.xi
    Ax = op.apply(x_t)
    state.z_hat = theta * (op.lambda_dagger * state.z_hat - state.Az_prev) + xi * (z_t - Ax)
    state.x_hat = op.apply_adjoint(state.z_hat)
    state.Az_prev = op.apply(state.x_hat)
    sx = np.zeros_like(x_t)
    sz = np.zeros_like(z_t)
    for pi, xi_, zi in zip(params.p, state.X_hist, state.Z_hist):
        sx += pi * xi_
        sz += pi * zi
    x_ext = params.cx * (state.x_hat / op.delta + sx)
    z_ext = params.cz * (state.Az_prev + (xi / theta) * Ax - sz)
    state.theta, state.xi, state.p = theta, xi, params.p
    state.cx, state.cz, state.beta = params.cx, params.cz, params.beta
    return x_ext, z_ext


def _z_posterior(z_ext, v, y, ch):
    if np.isinf(ch.c):
        return awgn_posterior(z_ext, v, y, ch.sigma2)
    return clip_posterior(z_ext, v, y, ch)


def estimate_nle_covariances(mode, t, phi, psi, X_hist, Z_hist, *, x=None, z=None,
                             signal_power=1.0, z_power=None, Vx=None, Vz=None,
                             se_trace=None):
    """Rows (v_phi[t, 1..t], v_psi[t, 1..t]) for iteration t.

    oracle: measured against the true x and z.
    prop2: from inner products of the iterates and the powers
      ``signal_power`` = <x, x>, ``z_power`` = <z, z>; a nonpositive diagonal
      falls back to se-companion (logged).
    se-companion: the rows of a state-evolution run with the same settings.
    """
    if mode == "oracle":
        e, s = phi - x, psi - z
        prow = [_inner(e, X_hist[i] - x) for i in range(t - 1)] + [_inner(e, e)]
        zrow = [_inner(s, Z_hist[i] - z) for i in range(t - 1)] + [_inner(s, s)]
        return np.array(prow), np.array(zrow)
    if mode == "prop2":
        vtt = signal_power - _inner(phi, phi)
        prow = [_inner(phi, X_hist[i]) + vtt + Vx[i, i] - signal_power for i in range(t - 1)]
        zrow = [_inner(psi, Z_hist[i]) - z_power for i in range(t - 1)]
        zrow.append(_inner(psi, psi) - z_power)
        prow.append(vtt)
        prow, zrow = np.array(prow), np.array(zrow)
        if prow[-1] > 0 and zrow[-1] > 0:
            return prow, zrow
        if se_trace is None:
            raise MissingCovarianceRows("prop2 gave a nonpositive variance and no SE rows exist")
        log.info("prop2 covariance estimate nonpositive at t=%d; using SE rows", t)
        mode = "se-companion"
    if mode == "se-companion":
        if se_trace is None or len(se_trace.phi_rows) < t:
            raise MissingCovarianceRows(f"SE trace has no covariance rows for t={t}")
        return np.array(se_trace.phi_rows[t - 1]), np.array(se_trace.psi_rows[t - 1])
    raise ValueError(f"unknown covariance mode {mode!r}")


def run_bo_gmamp(instance, T, L=3, cov_mode="se-companion", xi_optimized=True,
                 theta_optimized=True, se_trace=None, se_samples=200_000, se_seed=0,
                 moments=None, record_timing=True, observer=None):
    """Run BO-GMAMP for T iterations; the MSE is that of the posterior mean of x.

    ``se_trace`` supplies the covariance rows in se-companion mode (and the
    fallback rows in prop2 mode); when it is missing one is computed.
    ``observer``, if given, receives a dict snapshot after every iteration.
    """
    if cov_mode not in COV_MODES:
        raise ValueError(f"unknown covariance mode {cov_mode!r}")
    op, prior, ch = instance.op, instance.prior, instance.channel
    x, z, y = instance.x_true, instance.z_true, instance.y
    trace = IterationTrace("bo-gmamp", metadata={
        "cov_mode": cov_mode, "L": L, "xi_optimized": xi_optimized,
        "theta_optimized": theta_optimized, "seed": instance.seed})
    if T <= 0:
        return trace
    if moments is None:
        moments = compute_moments(op, T, rescaled=True)
    zp = instance.z_power
    if se_trace is None and cov_mode != "oracle":
        from .se import run_se
        se_trace = run_se(prior, ch, moments, T, L=L, samples=se_samples, seed=se_seed,
                          xi_optimized=xi_optimized, theta_optimized=theta_optimized,
                          is_complex=op.is_complex)
    # prop2 reads the realized powers <x, x> and <z, z>
    sp, zp_real = _inner(x, x), _inner(z, z)
    ctrl = MemoryController(moments, T, L=L, z_power=zp, xi_optimized=xi_optimized,
                            theta_optimized=theta_optimized)
    state = MemoryState(z_hat=np.zeros(op.M, dtype=op.dtype),
                        x_hat=np.zeros(op.N, dtype=op.dtype),
                        Az_prev=np.zeros(op.M, dtype=op.dtype))
    x_ext = np.zeros(op.N, dtype=op.dtype)
    z_ext = np.zeros(op.M, dtype=op.dtype)
    for t in range(1, T + 1):
        t0 = time.perf_counter()
        vvx, vvz = ctrl.pseudo_variances(t)
        try:
            px = bg_posterior(x_ext, vvx, prior)
            pz = _z_posterior(z_ext, vvz, y, ch)
            phi, _ = orthogonalize(px, x_ext, vvx)
            psi, _ = orthogonalize(pz, z_ext, vvz)
            prow, zrow = estimate_nle_covariances(
                cov_mode, t, phi, psi, state.X_hist, state.Z_hist, x=x, z=z,
                signal_power=sp, z_power=zp_real, Vx=ctrl.ledger.Vx,
                Vz=ctrl.ledger.Vz, se_trace=se_trace)
            damping = ctrl.damp(t, prow, zrow)
            x_t, z_t = mnle_damped(phi, psi, damping, state.X_hist, state.Z_hist)
            state.X_hist.append(x_t)
            state.Z_hist.append(z_t)
            ctrl.check_divergence(t)
            params = ctrl.linear_step(t)
            x_new, z_new = mle_step(state, op, params, x_t, z_t)
        except (NonInformativeDenoiser, DivergenceDetected, MissingCovarianceRows,
                ArithmeticError) as exc:
            trace.stop_reason = f"stopped at t={t}: {exc}"
            log.info("bo-gmamp %s", trace.stop_reason)
            break
        mse = float(np.mean(np.abs(px.mean - x) ** 2))
        wall = (time.perf_counter() - t0) * 1e3 if record_timing else 0.0
        trace.append(t, mse, v_pred=px.variance, wall_ms=wall)
        for key, val in (("theta", params.theta), ("xi", params.xi), ("cx", params.cx),
                         ("cz", params.cz), ("v_x", ctrl.ledger.Vx[t - 1, t - 1]),
                         ("v_z", ctrl.ledger.Vz[t - 1, t - 1])):
            trace.add_extra(key, float(val))
        if observer is not None:
            observer(dict(t=t, x_ext_in=x_ext, z_ext_in=z_ext, phi=phi, psi=psi,
                          x_t=x_t, z_t=z_t, x_ext=x_new, z_ext=z_new, params=params,
                          damping=damping, controller=ctrl, state=state))
        x_ext, z_ext = x_new, z_new
    return trace
