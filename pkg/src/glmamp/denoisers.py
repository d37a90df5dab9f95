"""Scalar MMSE denoisers and the orthogonalization step shared by the solvers.

Real inputs use real Gaussian densities.  Complex inputs use circular complex
Gaussians; the clipping channel then acts on the real and imaginary parts
separately, each part seeing half of the (complex) variances.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_ndtr, ndtr

_LOG_2PI = np.log(2.0 * np.pi)


class NonInformativeDenoiser(ArithmeticError):
    """The posterior variance did not drop below the input variance."""


@dataclass(frozen=True)
class BernoulliGaussianPrior:
    """x = b * g with b ~ Bernoulli(mu) and g ~ N(u_g, v_g).

    With the defaults u_g = 0 and v_g = 1/mu the signal has unit power.
    """

    mu: float
    u_g: float = 0.0
    v_g: float = None

    def __post_init__(self):
        if not 0 < self.mu <= 1:
            raise ValueError(f"mu must lie in (0, 1], got {self.mu}")
        if self.v_g is None:
            object.__setattr__(self, "v_g", 1.0 / self.mu)
        if not self.v_g > 0:
            raise ValueError("v_g must be positive")

    @property
    def second_moment(self):
        return self.mu * (self.v_g + abs(self.u_g) ** 2)

    @property
    def variance(self):
        return self.second_moment - abs(self.mu * self.u_g) ** 2

    def sample(self, rng, n, is_complex=False):
        b = rng.random(n) < self.mu
        if is_complex:
            g = self.u_g + np.sqrt(self.v_g / 2) * (rng.standard_normal(n)
                                                   + 1j * rng.standard_normal(n))
        else:
            g = self.u_g + np.sqrt(self.v_g) * rng.standard_normal(n)
        return np.where(b, g, 0.0)


@dataclass(frozen=True)
class ClipChannel:
    """y = Clip(z) + n with Clip saturating at +-c and n ~ N(0, sigma2).

    c = inf gives the plain AWGN channel.
    """

    c: float
    sigma2: float

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("clip threshold must be positive")
        if not self.sigma2 > 0:
            raise ValueError("noise variance must be positive")

    def clip(self, z):
        if np.iscomplexobj(z):
            return np.clip(z.real, -self.c, self.c) + 1j * np.clip(z.imag, -self.c, self.c)
        return np.clip(z, -self.c, self.c)

    def observe(self, z, rng):
        n = len(z)
        if np.iscomplexobj(z):
            noise = np.sqrt(self.sigma2 / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
        else:
            noise = np.sqrt(self.sigma2) * rng.standard_normal(n)
        return self.clip(z) + noise


def clip_power(c, v, is_complex=False):
    """E|Clip(z)|^2 for z ~ N(0, v) (or CN(0, v), clipped per part)."""
    if is_complex:
        return 2.0 * clip_power(c, v / 2.0)
    if np.isinf(c):
        return v
    s = np.sqrt(v)
    a = c / s
    phi = np.exp(-0.5 * a * a) / np.sqrt(2 * np.pi)
    inner = v * ((2 * ndtr(a) - 1) - 2 * a * phi)
    return inner + 2 * c * c * ndtr(-a)


@dataclass(frozen=True)
class PosteriorOutput:
    """Posterior mean vector and the average posterior variance.

    ``variances`` keeps the per-entry values when they are needed.
    """

    mean: np.ndarray
    variance: float
    variances: np.ndarray = None


def _check_var(v, name):
    if not v > 0:
        raise ValueError(f"{name} must be positive, got {v}")


def _lognormal(x, m, v):
    return -0.5 * (_LOG_2PI + np.log(v)) - 0.5 * (x - m) ** 2 / v


def _logcnormal(x, m, v):
    return -np.log(np.pi * v) - np.abs(x - m) ** 2 / v


def bg_posterior(pseudo, pseudo_var, prior):
    """MMSE estimate of x from x + N(0, pseudo_var) under a Bernoulli-Gaussian prior.

    ``pseudo_var = inf`` means no observation and returns the prior moments.
    """
    pseudo = np.asarray(pseudo)
    _check_var(pseudo_var, "pseudo_var")
    mu, ug, vg = prior.mu, prior.u_g, prior.v_g
    is_complex = np.iscomplexobj(pseudo)
    if np.isinf(pseudo_var):
        mean = np.full(pseudo.shape, mu * ug, dtype=pseudo.dtype if is_complex else float)
        var = prior.variance
        return PosteriorOutput(mean, float(var), np.full(pseudo.shape, var))
    v = float(pseudo_var)
    vgp = 1.0 / (1.0 / vg + 1.0 / v)
    ugp = vgp * (ug / vg + pseudo / v)
    if mu >= 1:
        p = np.ones(pseudo.shape)
    else:
        lognorm = _logcnormal if is_complex else _lognormal
        log_odds = (np.log(mu) - np.log1p(-mu)
                    + lognorm(pseudo, ug, vg + v) - lognorm(pseudo, 0.0, v))
        p = expit(log_odds)
    mean = p * ugp
    var = p * vgp + p * (1 - p) * np.abs(ugp) ** 2
    return PosteriorOutput(mean, float(np.mean(var)), var)


def awgn_posterior(pseudo, pseudo_var, y, sigma2):
    """Fuse the pseudo-prior N(pseudo, pseudo_var) with y = z + N(0, sigma2)."""
    _check_var(pseudo_var, "pseudo_var")
    _check_var(sigma2, "sigma2")
    y = np.asarray(y)
    pseudo = np.asarray(pseudo)
    if y.shape != pseudo.shape:
        raise ValueError("pseudo and y lengths differ")
    if np.isinf(pseudo_var):
        return PosteriorOutput(y.copy(), float(sigma2), np.full(y.shape, float(sigma2)))
    prec = 1.0 / sigma2 + 1.0 / pseudo_var
    v = 1.0 / prec
    mean = (y / sigma2 + pseudo / pseudo_var) * v
    return PosteriorOutput(mean, float(v), np.full(y.shape, v))


def _log_interval(a, b):
    """log(Phi(b) - Phi(a)) for a < b, accurate in both tails."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    out = np.empty(a.shape)
    up = a > 0
    lo = b < 0
    mid = ~(up | lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        la, lb = log_ndtr(-a[up]), log_ndtr(-b[up])
        out[up] = la + np.log1p(-np.exp(lb - la))
        la, lb = log_ndtr(a[lo]), log_ndtr(b[lo])
        out[lo] = lb + np.log1p(-np.exp(la - lb))
        out[mid] = np.log1p(-(ndtr(a[mid]) + ndtr(-b[mid])))
    return out


def _truncated_moments(m, sd, lo, hi):
    """log-mass, mean and variance of N(m, sd^2) restricted to [lo, hi]."""
    a = (lo - m) / sd
    b = (hi - m) / sd
    logp = _log_interval(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        ra = np.where(np.isinf(a), 0.0, np.exp(-0.5 * a * a - 0.5 * _LOG_2PI - logp))
        rb = np.where(np.isinf(b), 0.0, np.exp(-0.5 * b * b - 0.5 * _LOG_2PI - logp))
        ara = np.where(np.isinf(a), 0.0, a * ra)
        brb = np.where(np.isinf(b), 0.0, b * rb)
    diff = ra - rb
    mean = m + sd * diff
    var = sd * sd * np.maximum(1.0 + ara - brb - diff * diff, 0.0)
    return logp, mean, var


def _clip_posterior_real(zb, v, y, c, s2):
    sv = np.sqrt(v)
    inf = np.full(zb.shape, np.inf)
    cc = np.full(zb.shape, c)
    # saturated regions: likelihood constant in z
    lp_u, m_u, v_u = _truncated_moments(zb, sv, cc, inf)
    lp_l, m_l, v_l = _truncated_moments(zb, sv, -inf, -cc)
    lw_u = _lognormal(y, c, s2) + lp_u
    lw_l = _lognormal(y, -c, s2) + lp_l
    # linear region: Gaussian product, truncated to (-c, c)
    s = 1.0 / (1.0 / v + 1.0 / s2)
    mm = s * (zb / v + y / s2)
    lp_m, m_m, v_m = _truncated_moments(mm, np.sqrt(s), -cc, cc)
    lw_m = _lognormal(y, zb, v + s2) + lp_m
    lw = np.stack([lw_l, lw_m, lw_u])
    lw = lw - np.max(lw, axis=0)
    wts = np.exp(lw)
    wts /= np.sum(wts, axis=0)
    means = np.stack([m_l, m_m, m_u])
    vars_ = np.stack([v_l, v_m, v_u])
    # regions with zero weight can carry nan moments far in the tails
    means = np.where(wts > 0, means, 0.0)
    vars_ = np.where(wts > 0, vars_, 0.0)
    mean = np.sum(wts * means, axis=0)
    var = np.sum(wts * (vars_ + (means - mean) ** 2), axis=0)
    return mean, var


def clip_posterior(pseudo, pseudo_var, y, ch):
    """MMSE estimate of z from the pseudo-prior N(pseudo, pseudo_var) and y = Clip(z) + n."""
    _check_var(pseudo_var, "pseudo_var")
    y = np.asarray(y)
    pseudo = np.asarray(pseudo)
    if y.shape != pseudo.shape:
        raise ValueError("pseudo and y lengths differ")
    if np.isinf(ch.c):
        return awgn_posterior(pseudo, pseudo_var, y, ch.sigma2)
    if np.isinf(pseudo_var):
        raise ValueError("clip_posterior needs a finite pseudo-prior variance")
    if np.iscomplexobj(pseudo) or np.iscomplexobj(y):
        pseudo = pseudo.astype(complex)
        y = y.astype(complex)
        mr, vr = _clip_posterior_real(pseudo.real, pseudo_var / 2, y.real, ch.c, ch.sigma2 / 2)
        mi, vi = _clip_posterior_real(pseudo.imag, pseudo_var / 2, y.imag, ch.c, ch.sigma2 / 2)
        var = vr + vi
        return PosteriorOutput(mr + 1j * mi, float(np.mean(var)), var)
    mean, var = _clip_posterior_real(pseudo.astype(float), float(pseudo_var), y.astype(float),
                                     float(ch.c), float(ch.sigma2))
    return PosteriorOutput(mean, float(np.mean(var)), var)


def orthogonalize(post, pseudo, pseudo_var):
    """Extrinsic estimate: remove the input's contribution from the posterior.

    Returns ``(x_ext, v_ext)`` with x_ext = (mean/v_post - pseudo/v_pri) /
    (1/v_post - 1/v_pri) and 1/v_ext = 1/v_post - 1/v_pri.
    """
    v_post = float(post.variance)
    v_pri = float(pseudo_var)
    if not (0 < v_post < v_pri):
        raise NonInformativeDenoiser(
            f"posterior variance {v_post:.3e} is not below the input variance {v_pri:.3e}")
    if np.isinf(v_pri):
        return np.array(post.mean, copy=True), v_post
    eps = 1.0 - v_post / v_pri
    x_ext = (post.mean - (1.0 - eps) * np.asarray(pseudo)) / eps
    return x_ext, v_post * v_pri / (v_pri - v_post)
