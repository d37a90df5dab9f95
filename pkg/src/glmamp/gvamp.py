"""GVAMP: memoryless LMMSE linear step plus orthogonalized denoisers, and its scalar SE."""

import logging
import time
from dataclasses import dataclass

import numpy as np

from .denoisers import (NonInformativeDenoiser, awgn_posterior, bg_posterior,
                        clip_posterior, orthogonalize)
from .records import IterationTrace, ScalarSeTrace

log = logging.getLogger(__name__)

MIN_SE_SAMPLES = 10_000
MODES = ("blind", "oracle-tracking")


class LinearStepBreakdown(ArithmeticError):
    """The LMMSE trace ratio left (0, 1)."""


@dataclass
class GvampState:
    x_ext: np.ndarray
    z_ext: np.ndarray
    v_x_ext: float
    v_z_ext: float
    x_post: np.ndarray = None
    z_post: np.ndarray = None
    v_x: float = None
    v_z: float = None
    rho: float = None
    eps_gamma: float = None


def lmmse_trace_ratio(eigenvalues, rho):
    """(1/M) sum_j d_j^2 / (rho + d_j^2)."""
    lam = np.asarray(eigenvalues)
    return float(np.sum(lam / (rho + lam)) / len(lam))


def _le_variances(eps, delta, v_x, v_z):
    if not 0 < eps < 1 or not 0 < delta * eps < 1:
        raise LinearStepBreakdown(f"LMMSE trace ratio {eps:.3e} is degenerate")
    return (1.0 / (delta * eps) - 1.0) * v_x, v_z / (1.0 / eps - 1.0)


def gvamp_le(x_t, z_t, v_x, v_z, op):
    """LMMSE step.  Returns (x_ext, z_ext, v_x_ext, v_z_ext, eps)."""
    if not (v_x > 0 and v_z > 0):
        raise ValueError("variances must be positive")
    rho = v_z / v_x
    eps = lmmse_trace_ratio(op.eigenvalues, rho)
    vx_new, vz_new = _le_variances(eps, op.delta, v_x, v_z)
    gamma = op.lmmse_solve(rho, z_t - op.apply(x_t))
    x_new = gamma / (op.delta * eps) + x_t
    z_new = (op.apply(gamma + x_t) - eps * z_t) / (1.0 - eps)
    return x_new, z_new, vx_new, vz_new, eps


def _z_posterior(z_ext, v_z_ext, y, channel):
    if np.isinf(channel.c):
        return awgn_posterior(z_ext, v_z_ext, y, channel.sigma2)
    return clip_posterior(z_ext, v_z_ext, y, channel)


def _inner(a, b):
    return float(np.real(np.vdot(a, b))) / len(a)


def run_gvamp(instance, T, mode="blind", record_timing=True, observer=None):
    """Run GVAMP for T iterations and record the MSE of the posterior mean of x.

    In "oracle-tracking" mode the error inner products against the true x and
    z are also recorded; the iterates follow the same path as in blind mode.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    op, prior, ch = instance.op, instance.prior, instance.channel
    x, z = instance.x_true, instance.z_true
    trace = IterationTrace("gvamp", metadata={"mode": mode, "seed": instance.seed})
    if T <= 0:
        return trace
    x_ext = np.zeros(op.N, dtype=op.dtype)
    z_ext = np.zeros(op.M, dtype=op.dtype)
    vx_ext, vz_ext = np.inf, instance.z_power
    for t in range(1, T + 1):
        t0 = time.perf_counter()
        try:
            px = bg_posterior(x_ext, vx_ext, prior)
            pz = _z_posterior(z_ext, vz_ext, instance.y, ch)
            x_t, v_x = orthogonalize(px, x_ext, vx_ext)
            z_t, v_z = orthogonalize(pz, z_ext, vz_ext)
            mse = float(np.mean(np.abs(px.mean - x) ** 2))
            if mode == "oracle-tracking":
                f, s = x_t - x, z_t - z
                trace.add_extra("nle_x_corr", _inner(f, x_ext - x) if t > 1 else 0.0)
                trace.add_extra("nle_z_corr", _inner(s, z_ext - z) if t > 1 else 0.0)
                trace.add_extra("v_x_measured", _inner(f, f))
                trace.add_extra("v_z_measured", _inner(s, s))
            x_new, z_new, vx_new, vz_new, eps = gvamp_le(x_t, z_t, v_x, v_z, op)
        except (NonInformativeDenoiser, LinearStepBreakdown) as exc:
            trace.stop_reason = f"stopped at t={t}: {exc}"
            log.info("gvamp %s", trace.stop_reason)
            break
        wall = (time.perf_counter() - t0) * 1e3 if record_timing else 0.0
        trace.append(t, mse, v_pred=px.variance, wall_ms=wall)
        trace.add_extra("v_x", v_x)
        trace.add_extra("v_z", v_z)
        if mode == "oracle-tracking":
            trace.add_extra("le_x_corr", _inner(x_new - x, x_t - x))
            trace.add_extra("le_z_corr", _inner(z_new - z, z_t - z))
        if observer is not None:
            observer(dict(t=t, x_t=x_t, z_t=z_t, x_ext=x_new, z_ext=z_new,
                          v_x=v_x, v_z=v_z, v_x_ext=vx_new, v_z_ext=vz_new, eps=eps))
        x_ext, z_ext, vx_ext, vz_ext = x_new, z_new, vx_new, vz_new
    return trace


def phi_se(v_ext, prior, rng, samples, is_complex=False):
    """Posterior and extrinsic variances of the prior denoiser at input noise v_ext."""
    x = prior.sample(rng, samples, is_complex)
    if np.isinf(v_ext):
        obs = np.zeros_like(x)
    else:
        obs = x + _noise(rng, samples, v_ext, is_complex)
    post = bg_posterior(obs, v_ext, prior)
    _, v = orthogonalize(post, obs, v_ext)
    return post.variance, v


def psi_se(v_ext, z_power, channel, rng, samples, is_complex=False):
    """Same for the channel denoiser.

    z and its pseudo-observation are drawn jointly: zb ~ N(0, z_power - v_ext)
    and z = zb + N(0, v_ext).
    """
    vb = max(z_power - v_ext, 0.0)
    zb = _noise(rng, samples, vb, is_complex)
    z = zb + _noise(rng, samples, v_ext, is_complex)
    y = channel.clip(z) + _noise(rng, samples, channel.sigma2, is_complex)
    post = _z_posterior(zb, v_ext, y, channel)
    _, v = orthogonalize(post, zb, v_ext)
    return post.variance, v


def _noise(rng, n, v, is_complex):
    if is_complex:
        return np.sqrt(v / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return np.sqrt(v) * rng.standard_normal(n)


def gvamp_se(prior, channel, moments, T, samples=200_000, seed=0, is_complex=False):
    """Scalar GVAMP state evolution with Monte Carlo denoiser maps."""
    if samples < MIN_SE_SAMPLES:
        raise ValueError(f"sample budget {samples} is below {MIN_SE_SAMPLES}")
    eigs = moments.eigenvalues
    delta = moments.delta
    z_power = moments.lambda1 * prior.second_moment
    trace = ScalarSeTrace("gvamp-se", metadata={"samples": samples, "seed": seed})
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(T)]
    vx_ext, vz_ext = np.inf, z_power
    for t in range(1, T + 1):
        try:
            mse, v_x = phi_se(vx_ext, prior, rngs[t - 1], samples, is_complex)
            _, v_z = psi_se(vz_ext, z_power, channel, rngs[t - 1], samples, is_complex)
            eps = lmmse_trace_ratio(eigs, v_z / v_x)
            vx_ext, vz_ext = _le_variances(eps, delta, v_x, v_z)
        except (NonInformativeDenoiser, LinearStepBreakdown) as exc:
            trace.stop_reason = f"stopped at t={t}: {exc}"
            break
        trace.append(t, mse, v_pred=mse)
        trace.add_extra("v_x", v_x)
        trace.add_extra("v_z", v_z)
    return trace
