"""State evolution of BO-GMAMP.

The scalar recursions are exactly those of the vector algorithm (through
``MemoryController``); only the denoiser statistics come from Monte Carlo
samples instead of vectors.  Correlated Gaussian pseudo-observation errors
are built one iteration at a time by extending a Cholesky factor of the
tracked covariance with stored innovations, i.e. each new column is drawn
conditionally on the ones already drawn.
"""

import logging

import numpy as np
from scipy.linalg import solve_triangular

from .denoisers import NonInformativeDenoiser, bg_posterior, orthogonalize
from .gmamp import (DivergenceDetected, LedgerError, MemoryController, _z_posterior,
                    mnle_damped)
from .records import ScalarSeTrace

log = logging.getLogger(__name__)

MIN_SAMPLES = 10_000
JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8)


class CovarianceRepairError(ArithmeticError):
    """A tracked covariance stayed indefinite after the largest jitter."""


def _gauss(rng, shape, is_complex):
    if is_complex:
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
    return rng.standard_normal(shape)


def _mean_inner(a, b):
    return float(np.mean(np.real(a * np.conj(b))))


class CorrelatedGaussian:
    """Sample paths of zero-mean Gaussians whose covariance grows by one row at a time."""

    def __init__(self, samples, is_complex=False):
        self.samples = samples
        self.is_complex = is_complex
        self.chol = np.zeros((0, 0))
        self.innov = []

    def extend(self, cov_row, rng):
        """Draw the next variable given its covariances with all previous ones.

        ``cov_row`` holds the covariances with the earlier variables followed
        by the new variance.
        """
        cov_row = np.asarray(cov_row, dtype=float)
        k = len(self.innov)
        if len(cov_row) != k + 1:
            raise ValueError("covariance row has the wrong length")
        v = cov_row[-1]
        ell = solve_triangular(self.chol, cov_row[:-1], lower=True) if k else np.zeros(0)
        rem = None
        for j in JITTER_LADDER:
            d = v * (1.0 + j) - float(ell @ ell)
            if d > 0:
                rem = d
                break
        if rem is None or not np.isfinite(rem):
            raise CovarianceRepairError(
                f"covariance not positive definite at step {k + 1} (residual {d:.3e}, variance {v:.3e})")
        g = _gauss(rng, self.samples, self.is_complex)
        out = np.sqrt(rem) * g
        for lj, gj in zip(ell, self.innov):
            out += lj * gj
        new = np.zeros((k + 1, k + 1))
        new[:k, :k] = self.chol
        new[k, :k] = ell
        new[k, k] = np.sqrt(rem)
        self.chol = new
        self.innov.append(g)
        return out


def se_phi_expectation(x, noise, v_ext, prior, history):
    """Cross covariances of the orthogonal prior-denoiser error with the damped history.

    ``x`` are signal samples, ``noise`` the matching pseudo-observation errors
    (ignored when ``v_ext`` is inf), ``history`` a list of damped error sample
    vectors.  Returns (row, error samples, posterior variance, standard errors).
    """
    obs = np.zeros_like(x) if np.isinf(v_ext) else x + noise
    post = bg_posterior(obs, v_ext, prior)
    phi, _ = orthogonalize(post, obs, v_ext)
    e = phi - x
    row, se = _row(e, history)
    return row, e, post.variance, se


def se_psi_expectation(z, zb, v_ext, y, channel, history):
    """Channel-side analogue of ``se_phi_expectation`` for pseudo-observations zb of z."""
    post = _z_posterior(zb, v_ext, y, channel)
    psi, _ = orthogonalize(post, zb, v_ext)
    e = psi - z
    row, se = _row(e, history)
    return row, e, post.variance, se


def _row(e, history):
    vals = []
    errs = []
    n = len(e)
    for h in list(history) + [e]:
        prod = np.real(e * np.conj(h))
        vals.append(float(np.mean(prod)))
        errs.append(float(np.std(prod) / np.sqrt(n)))
    return np.array(vals), np.array(errs)


def run_se(prior, channel, moments, T, L=3, samples=200_000, seed=0, xi_optimized=True,
           theta_optimized=True, is_complex=False, z_power=None, signal_samples=None):
    """Predict the per-iteration MSE of BO-GMAMP without the vector iteration.

    The returned trace carries the NLE covariance rows in ``phi_rows`` and
    ``psi_rows`` so a vector run can replay them.  ``signal_samples`` =
    (x, z, y) replaces the drawn signal, channel input and observation
    samples (for instance by those of one realized problem); the
    pseudo-observation errors are still drawn.
    """
    if signal_samples is not None:
        samples = len(signal_samples[0])
    elif samples < MIN_SAMPLES:
        raise ValueError(f"sample budget {samples} is below {MIN_SAMPLES}")
    if T < 1:
        raise ValueError("T must be >= 1")
    zp = moments.lambda1 * prior.second_moment if z_power is None else float(z_power)
    ctrl = MemoryController(moments, T, L=L, z_power=zp, xi_optimized=xi_optimized,
                            theta_optimized=theta_optimized)
    trace = ScalarSeTrace("bo-gmamp-se", metadata={
        "samples": samples, "seed": seed, "L": L, "xi_optimized": xi_optimized,
        "theta_optimized": theta_optimized})
    ss = np.random.SeedSequence(seed)
    base_rng, *iter_rngs = [np.random.default_rng(s) for s in ss.spawn(T + 1)]
    if signal_samples is None:
        x = prior.sample(base_rng, samples, is_complex)
        z = np.sqrt(zp) * _gauss(base_rng, samples, is_complex)
        y = channel.clip(z) + np.sqrt(channel.sigma2) * _gauss(base_rng, samples, is_complex)
    else:
        x, z, y = (np.asarray(v) for v in signal_samples)
    x_noise = CorrelatedGaussian(len(x), is_complex)
    s_noise = CorrelatedGaussian(len(z), is_complex)
    F, S = [], []
    zb = np.zeros_like(z)
    for t in range(1, T + 1):
        rng = iter_rngs[t - 1]
        vvx, vvz = ctrl.pseudo_variances(t)
        try:
            noise = None
            if t > 1:
                noise = x_noise.extend(ctrl.ledger.VVx[1:t, t - 1], rng)
                # residual term = its projection on z plus an independent part
                kap = ctrl.q[: t - 1] / zp
                row = ctrl.ledger.v_stilde[t - 2, : t - 1] - kap[-1] * kap * zp
                s_t = kap[-1] * z + s_noise.extend(row, rng)
                zb = ctrl.cz[t - 2] * (ctrl.beta[t - 2] * z + s_t)
            prow, e, mse, _ = se_phi_expectation(x, noise, vvx, prior, F)
            zrow, ez, _, _ = se_psi_expectation(z, zb, vvz, y, channel, S)
            damping = ctrl.damp(t, prow, zrow)
            f_t, s_t_err = mnle_damped(e, ez, damping, F, S)
            F.append(f_t)
            S.append(s_t_err)
            ctrl.check_divergence(t)
            params = ctrl.linear_step(t)
        except (NonInformativeDenoiser, DivergenceDetected, CovarianceRepairError,
                LedgerError, ArithmeticError) as exc:
            trace.stop_reason = f"stopped at t={t}: {exc}"
            log.info("se %s", trace.stop_reason)
            break
        trace.phi_rows.append(prow.tolist())
        trace.psi_rows.append(zrow.tolist())
        trace.append(t, mse, v_pred=mse)
        for key, val in (("theta", params.theta), ("xi", params.xi), ("cx", params.cx),
                         ("cz", params.cz), ("v_x", ctrl.ledger.Vx[t - 1, t - 1]),
                         ("v_z", ctrl.ledger.Vz[t - 1, t - 1]),
                         ("vv_x_next", params.v_x_next), ("vv_z_next", params.v_z_next)):
            trace.add_extra(key, float(val))
    trace.controller = ctrl
    return trace
