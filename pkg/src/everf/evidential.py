"""Normal-inverse-gamma closed forms, the training losses, and test oracles.

The pixel color is modeled hierarchically: the conditional (mean, variance)
of a Gaussian pixel color follow a NIG distribution, and the color itself
then marginally follows a Student-t with

    location gamma,  scale^2 beta*(nu+1)/(alpha*nu),  dof 2*alpha.

Two independent oracles verify the algebra: a hierarchical Monte-Carlo
sampler for the moment/propagation formulas and a 2-D quadrature of the
NIG x Normal hierarchy for the marginal density.  Both deliberately avoid
the closed forms they are checking (the quadrature even uses the C library
lgamma rather than this package's).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import autodiff as ad

_LOG_PI = math.log(math.pi)


class EvidentialError(Exception):
    pass


@dataclass
class NIGParams:
    """gamma: location; nu: virtual-observation count; alpha > 1; beta > 0.

    gamma may be a scalar (single channel) or a length-3 array (RGB pixel
    with shared nu/alpha/beta).
    """

    gamma: object
    nu: float
    alpha: float
    beta: float

    def validate(self) -> None:
        g = np.asarray(self.gamma, dtype=np.float64)
        if not (np.all(np.isfinite(g)) and math.isfinite(self.nu)
                and math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise EvidentialError("non-finite NIG parameter")
        if not (self.nu > 0 and self.beta > 0):
            raise EvidentialError("nu and beta must be positive")
        if not self.alpha > 1:
            raise EvidentialError("alpha must exceed 1")

    def sample_mean_var(self, rng: np.random.Generator, m: int):
        """Draw m (mu, sigma^2) pairs from the NIG."""
        self.validate()
        # 1/Gamma(alpha, rate=beta) is InvGamma(alpha, beta).
        sigma_sq = 1.0 / rng.gamma(self.alpha, 1.0 / self.beta, size=m)
        mu = rng.normal(float(np.asarray(self.gamma).reshape(-1)[0]),
                        np.sqrt(sigma_sq / self.nu))
        return mu, sigma_sq


@dataclass
class DiracPrior:
    """Degenerate prior: (mu, sigma^2) are fixed point estimates."""

    mu: float
    sigma_sq: float

    def sample_mean_var(self, rng: np.random.Generator, m: int):
        return np.full(m, self.mu), np.full(m, self.sigma_sq)


@dataclass
class StudentTParams:
    loc: float
    scale_sq: float
    dof: float


@dataclass
class LossTerms:
    nll: float
    reg: float
    total: float
    lambda_reg: float
    omega: float


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def nig_moments(p: NIGParams):
    """(mean, U, U_alea, U_epis) of the predictive color."""
    p.validate()
    au = p.beta / (p.alpha - 1.0)
    eu = au / p.nu
    return p.gamma, au + eu, au, eu


def nig_to_student_t(p: NIGParams) -> StudentTParams:
    p.validate()
    return StudentTParams(
        loc=p.gamma,
        scale_sq=p.beta * (p.nu + 1.0) / (p.alpha * p.nu),
        dof=2.0 * p.alpha,
    )


def student_t_logpdf(c: float, st: StudentTParams) -> float:
    z2 = (c - st.loc) ** 2 / (st.dof * st.scale_sq)
    return float(
        ad.lgamma_val(0.5 * (st.dof + 1.0))
        - ad.lgamma_val(0.5 * st.dof)
        - 0.5 * math.log(math.pi * st.dof * st.scale_sq)
        - 0.5 * (st.dof + 1.0) * math.log1p(z2)
    )


def nll_terms(c, gamma, nu, alpha, beta):
    """Per-channel negative log marginal likelihood (polymorphic).

    Valid for ndarray, float, and tape-Tensor operands alike; the training
    loop calls this on Tensors so gradients reach all four parameters.
    """
    omega = 2.0 * beta * (nu + 1.0)
    return (
        0.5 * (_LOG_PI - ad.log(nu))
        - alpha * ad.log(omega)
        + ad.lgamma(alpha) - ad.lgamma(alpha + 0.5)
        + (alpha + 0.5) * ad.log(ad.square(c - gamma) * nu + omega)
    )


def nll_loss(c_gt: float, p: NIGParams) -> float:
    """Single-channel NLL of the ground-truth color under the NIG pixel."""
    p.validate()
    out = float(nll_terms(c_gt, float(np.asarray(p.gamma).reshape(-1)[0]),
                          p.nu, p.alpha, p.beta))
    if not math.isfinite(out):
        raise EvidentialError(f"non-finite NLL for {p}")
    return out


def reg_loss(c_gt, p: NIGParams, abs_error: float | None = None) -> float:
    """Evidence regularizer |error| * (2*nu + alpha).

    For RGB pixels pass ``abs_error`` as the mean absolute channel error;
    otherwise it is |c_gt - gamma| for the scalar channel.
    """
    p.validate()
    if abs_error is None:
        abs_error = float(np.mean(np.abs(np.asarray(c_gt, dtype=np.float64)
                                         - np.asarray(p.gamma, dtype=np.float64))))
    return abs_error * (2.0 * p.nu + p.alpha)


def total_loss(c_gt_rgb, p: NIGParams, lambda_reg: float) -> LossTerms:
    """Eq-26-style pixel loss: channel-summed NLL plus weighted regularizer.

    The three channels share (nu, alpha, beta) and have per-channel gamma.
    """
    if lambda_reg < 0:
        raise EvidentialError("lambda_reg must be >= 0")
    p.validate()
    c = np.asarray(c_gt_rgb, dtype=np.float64).reshape(-1)
    g = np.broadcast_to(np.asarray(p.gamma, dtype=np.float64).reshape(-1), c.shape)
    nll = float(np.sum(nll_terms(c, g, p.nu, p.alpha, p.beta)))
    if not math.isfinite(nll):
        raise EvidentialError(f"non-finite NLL for {p}")
    reg = reg_loss(c, p, abs_error=float(np.mean(np.abs(c - g))))
    return LossTerms(nll=nll, reg=reg, total=nll + lambda_reg * reg,
                     lambda_reg=lambda_reg, omega=2.0 * p.beta * (p.nu + 1.0))


# ---------------------------------------------------------------------------
# oracle 1: hierarchical Monte-Carlo moments
# ---------------------------------------------------------------------------


@dataclass
class MCMoments:
    mean: float
    u: float
    au: float
    eu: float
    se_mean: float
    se_u: float
    se_au: float
    se_eu: float


def _se_of_variance(x: np.ndarray) -> float:
    m = x.size
    centered = x - x.mean()
    s2 = centered @ centered / (m - 1)
    m4 = np.mean(centered ** 4)
    return math.sqrt(max(m4 - s2 * s2 * (m - 3) / (m - 1), 0.0) / m)


def mc_oracle_moments(points, m: int, rng: np.random.Generator) -> MCMoments:
    """Estimate pixel moments by sampling the hierarchy directly.

    ``points`` is a list of (weight, prior) pairs, each prior either a
    :class:`NIGParams` or a :class:`DiracPrior`.  Per draw, every point's
    (mu_i, sigma_i^2) is sampled from its prior; conditioning on the draw,
    the composited color has mean sum(w_i mu_i) and variance
    sum(w_i^2 sigma_i^2).  Averaging the conditional variances estimates
    the aleatoric part, the variance of the conditional means estimates
    the epistemic part, and the variance of actually-drawn colors checks
    the total.
    """
    if m < 10_000:
        raise EvidentialError("need at least 1e4 samples for stable moments")
    cond_mean = np.zeros(m)
    cond_var = np.zeros(m)
    for w, prior in points:
        mu, s2 = prior.sample_mean_var(rng, m)
        cond_mean += w * mu
        cond_var += (w * w) * s2
    if np.all(cond_var == 0.0):
        raise EvidentialError("degenerate hierarchy: zero conditional variance")
    colors = rng.normal(cond_mean, np.sqrt(cond_var))
    return MCMoments(
        mean=float(cond_mean.mean()),
        u=float(colors.var(ddof=1)),
        au=float(cond_var.mean()),
        eu=float(cond_mean.var(ddof=1)),
        se_mean=float(cond_mean.std(ddof=1) / math.sqrt(m)),
        se_u=_se_of_variance(colors),
        se_au=float(cond_var.std(ddof=1) / math.sqrt(m)),
        se_eu=_se_of_variance(cond_mean),
    )


# ---------------------------------------------------------------------------
# oracle 2: 2-D quadrature of the NIG x Normal hierarchy
# ---------------------------------------------------------------------------


def marginal_density_quadrature(c: float, p: NIGParams, n_hermite: int = 96,
                                tail_mass: float = 1e-10) -> float:
    """p(c) = integral N(c; mu, s2) N(mu; gamma, s2/nu) InvGamma(s2) dmu ds2.

    Outer integral over s2 is adaptive; the inner integral over mu uses
    Gauss-Hermite nodes centered on the conditional prior of mu.  Uses the
    C library lgamma so it shares nothing with the closed forms under test.
    """
    p.validate()
    gamma = float(np.asarray(p.gamma).reshape(-1)[0])
    nodes, weights = np.polynomial.hermite.hermgauss(n_hermite)
    log_norm_const = p.alpha * math.log(p.beta) - math.lgamma(p.alpha)

    def integrand_log(y: float) -> float:
        s2 = math.exp(y)
        mu = gamma + math.sqrt(2.0 * s2 / p.nu) * nodes
        gauss = np.exp(-0.5 * (c - mu) ** 2 / s2) / math.sqrt(2.0 * math.pi * s2)
        inner = float(weights @ gauss) / math.sqrt(math.pi)
        log_ig = log_norm_const - (p.alpha + 1.0) * y - p.beta / s2
        return inner * math.exp(log_ig + y)  # + y: Jacobian of s2 = e^y

    # Upper limit where the inverse-gamma tail mass drops below tail_mass;
    # solved on the Gamma side: P(s2 > s) = P(X < 1/s) for X ~ Gamma(alpha, beta).
    # The substitution s2 = e^y keeps the adaptive rule well-scaled: the
    # exp(-beta/s2) factor kills the integrand below beta/745 and the tail
    # decays exponentially in y.
    from scipy import special
    s2_max = p.beta / special.gammaincinv(p.alpha, tail_mass)
    y_lo = math.log(p.beta / 745.0)
    y_hi = math.log(s2_max)
    y_mode = math.log(p.beta / (p.alpha + 1.0))
    val, _ = integrate.quad(integrand_log, y_lo, y_hi, limit=300,
                            points=[y_mode], epsabs=1e-13, epsrel=1e-11)
    return val
