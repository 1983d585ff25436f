"""Costs -> ternary embedding probabilities -> implied Gaussian variances.

Pmfs are float arrays whose last axis holds ``(p_minus, p_zero, p_plus)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

WET_COST = 1e10
LOG2_3 = float(np.log2(3.0))

LAMBDA_BRACKET = (1e-8, 1e8)
LAMBDA_RTOL = 1e-10
LAMBDA_MAX_ITER = 200


class InfeasiblePayloadError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class CostFormatError(ValueError):
    pass


@dataclass
class CostMap:
    """Symmetric additive costs ``c_minus = c_plus = rho`` with ``c_zero = 0``."""
    rho: np.ndarray  # float64, (blocks_h, blocks_w, 8, 8)

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if np.isnan(self.rho).any():
            raise CostFormatError("cost map contains NaN")
        if (self.rho < 0).any():
            raise CostFormatError("negative costs are not supported (p_zero would drop below 1/3)")

    @property
    def wet(self) -> np.ndarray:
        return self.rho >= WET_COST

    def triplets(self) -> np.ndarray:
        """``(..., 3)`` array of (c_minus, c_zero, c_plus)."""
        z = np.zeros_like(self.rho)
        return np.stack([self.rho, z, self.rho], axis=-1)

    @classmethod
    def unit(cls, shape):
        return cls(np.ones(shape))

    @classmethod
    def quant_proportional(cls, cover):
        bh, bw = cover.blocks_shape
        q = cover.qtable.astype(np.float64)
        return cls(np.broadcast_to(q, (bh, bw, 8, 8)).copy())


def load_costs(stream, dims=None) -> CostMap:
    """Read a COST container from a path, bytes or binary file object.

    ``dims`` is the expected ``(height, width)`` in pixels.
    """
    from . import formats
    if hasattr(stream, "read"):
        return formats.parse_cost(stream.read(), getattr(stream, "name", "<stream>"), dims)
    return formats.read_cost(stream, dims)


def save_costs(path, costs: CostMap):
    from . import formats
    formats.write_cost(path, costs)


@dataclass(frozen=True)
class LambdaSolution:
    lam: float
    achieved_entropy: float  # bits
    target_entropy: float    # bits
    iterations: int = 0


def ternary_entropy(pmf) -> np.ndarray:
    """Entropy in bits over the last axis, with ``0 log 0 = 0``."""
    p = np.asarray(pmf, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def pmf_from_lambda(rho, lam) -> np.ndarray:
    """Gibbs pmf ``P(k) ~ exp(-lam c^k)`` for symmetric costs; wet -> (0, 1, 0)."""
    rho = np.asarray(rho, dtype=np.float64)
    wet = rho >= WET_COST
    e = np.exp(-lam * np.where(wet, 0.0, rho))
    e = np.where(wet, 0.0, e)
    denom = 1.0 + 2.0 * e
    p_pm = e / denom
    p0 = 1.0 / denom
    return np.stack([p_pm, p0, p_pm], axis=-1)


def _total_entropy(rho, lam):
    return float(ternary_entropy(pmf_from_lambda(rho, lam)).sum())


def probabilities_from_costs(costs: CostMap, target_bits) -> tuple[np.ndarray, LambdaSolution]:
    """Solve for the multiplier giving ``target_bits`` of total ternary entropy.

    Bisection on ``log(lambda)`` over a fixed bracket; entropy is decreasing in
    lambda for any map with at least one finite positive cost.
    """
    rho = costs.rho
    dry = ~costs.wet
    h_max = LOG2_3 * int(dry.sum())
    if not (0.0 < target_bits < h_max):
        raise InfeasiblePayloadError(
            f"target {target_bits:.6g} bits outside (0, {h_max:.6g}) for {int(dry.sum())} dry coefficients")
    r = rho[dry]
    lo, hi = np.log(LAMBDA_BRACKET[0]), np.log(LAMBDA_BRACKET[1])
    h_lo, h_hi = _total_entropy(r, np.exp(lo)), _total_entropy(r, np.exp(hi))
    if not (h_hi <= target_bits <= h_lo):
        raise NumericError(
            f"target {target_bits:.6g} bits not bracketed by lambda in {LAMBDA_BRACKET} "
            f"(entropy range [{h_hi:.6g}, {h_lo:.6g}])")
    tol = LAMBDA_RTOL * target_bits
    best = None
    for it in range(1, LAMBDA_MAX_ITER + 1):
        mid = 0.5 * (lo + hi)
        h = _total_entropy(r, np.exp(mid))
        if best is None or abs(h - target_bits) < abs(best[1] - target_bits):
            best = (mid, h)
        if h > target_bits:
            lo = mid
        else:
            hi = mid
        if abs(h - target_bits) <= tol and (hi - lo) <= 1e-13 * max(1.0, abs(mid)):
            break
        if hi - lo <= np.spacing(abs(mid)) * 4:
            break
    else:
        if abs(best[1] - target_bits) > tol:
            raise NumericError(f"lambda bisection did not converge in {LAMBDA_MAX_ITER} iterations")
    mid, h = best
    if abs(h - target_bits) > tol:
        raise NumericError(f"lambda bisection stalled at |H - target| = {abs(h - target_bits):.3g} bits")
    lam = float(np.exp(mid))
    pmf = pmf_from_lambda(rho, lam)
    return pmf, LambdaSolution(lam, float(ternary_entropy(pmf).sum()), float(target_bits), it)


def variance_from_p0(p_zero, q) -> np.ndarray:
    """Variance of the zero-mean Gaussian whose central bin ``]-q/2, q/2]`` has mass ``p_zero``."""
    p_zero = np.asarray(p_zero, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    x = special.erfinv(p_zero)
    # one Newton step on erf(x) = p0 polishes erfinv to full precision
    x = x - (special.erf(x) - p_zero) / (2.0 / np.sqrt(np.pi) * np.exp(-x * x))
    return q * q / (8.0 * x * x)


def p0_from_variance(var, q) -> np.ndarray:
    var = np.asarray(var, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return special.erf(q / (2.0 * np.sqrt(2.0 * var)))


def variance_map(pmf, q) -> np.ndarray:
    """Per-coefficient variance; exactly 0 where ``p_zero == 1``.

    ``q`` broadcasts against ``pmf[..., 1]`` (typically an ``(8, 8)`` table).
    """
    p0 = np.asarray(pmf)[..., 1]
    certain = p0 >= 1.0
    var = variance_from_p0(np.where(certain, 0.5, p0), np.broadcast_to(q, p0.shape))
    return np.where(certain, 0.0, var)


def costs_from_probabilities(pmf) -> np.ndarray:
    """``c^k = ln(p0 / p^k)``; zero-probability changes become wet."""
    p = np.asarray(pmf, dtype=np.float64)
    p0 = p[..., 1:2]
    if np.any(p0 <= 0):
        raise NumericError("p_zero must be > 0 to express a pmf as costs")
    with np.errstate(divide="ignore"):
        c = np.log(p0 / p)
    return np.where(p > 0, c, WET_COST)
