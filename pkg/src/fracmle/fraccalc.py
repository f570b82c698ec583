"""Riemann-Liouville fractional integrals on uniform grids and the
kernel transform that carries fBm-driven observations to a Wiener process.

The weakly singular kernel (t-u)^(alpha-1) is integrated exactly against
piecewise-linear data (product integration), so the left/right integral
rules are exact for constant and linear integrands. On a uniform grid the
weights depend only on k-l, which lets the transform run as a discrete
convolution instead of a dense weight matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import gamma as gamma_fn
from scipy.special import hyp2f1

from .errors import InputError, PoleError
from .fbm import TimeGrid

# direct convolution below this length; FFT convolution above
_DIRECT_CONV_LIMIT = 256


def d_H(hurst: float) -> float:
    """Normalizing constant sqrt(2H G(3/2-H) G(H+1/2) / G(2-2H)); equals 1 at H=1/2."""
    if not 1.0 / 3.0 < hurst <= 0.5:
        raise InputError(f"Hurst index {hurst} outside (1/3, 1/2]")
    return math.sqrt(
        2.0 * hurst * gamma_fn(1.5 - hurst) * gamma_fn(hurst + 0.5) / gamma_fn(2.0 - 2.0 * hurst)
    )


def gamma_H(hurst: float) -> float:
    """Score-scaling constant (d_H * G(1/2-H))^-2; undefined at H=1/2 (Gamma pole)."""
    if hurst == 0.5:
        raise PoleError("gamma_H has a Gamma(0) pole at H=1/2")
    if not 1.0 / 3.0 < hurst < 0.5:
        raise InputError(f"Hurst index {hurst} outside (1/3, 1/2)")
    return (d_H(hurst) * gamma_fn(0.5 - hurst)) ** -2.0


def _pi_kernels(alpha: float, n: int, dt: float):
    """Convolution generators (A, C) of the product-integration weights.

    I(t_k) = sum_{m=1..k} A[m] f_{k-m} + C[m] f_{k-m+1} integrates
    (t_k - u)^(alpha-1)/Gamma(alpha) against the piecewise-linear
    interpolant of f exactly.
    """
    m = np.arange(n + 1, dtype=float)
    a = np.maximum(m - 1.0, 0.0) * dt
    b = m * dt
    pa, pb = a**alpha, b**alpha
    m0 = (pb - pa) / alpha
    m1 = b * m0 - (b * pb - a * pa) / (alpha + 1.0)
    ga = gamma_fn(alpha)
    A = (m0 - m1 / dt) / ga
    C = m1 / (dt * ga)
    A[0] = 0.0
    C[0] = 0.0
    return A, C


def _conv(f: np.ndarray, kernel: np.ndarray, out_len: int) -> np.ndarray:
    if len(f) == 0:
        return np.zeros(out_len)
    if out_len <= _DIRECT_CONV_LIMIT:
        return np.convolve(f, kernel)[:out_len]
    return fftconvolve(f, kernel)[:out_len]


def _lower_triangular_kernel(hurst: float, grid: TimeGrid) -> np.ndarray:
    """kappa(t_k, m_l) for coarse nodes t_k and midpoints m_l < t_k.

    kappa(t, s) = d_H^-1 s^a I^a_{t-}[y^{-a}](s) with a = 1/2 - H, which
    has the closed form d_H^-1 s^a Phi(x) / Gamma(a), where x = (t-s)/t and
    Phi(x) = int_0^x v^(a-1)/(1-v) dv = x^a/a * 2F1(1, a; 1+a; x).
    """
    alpha = 0.5 - hurst
    n = grid.n_coarse
    dt = grid.dt
    dh = d_H(hurst)
    kk, ll = np.tril_indices(n + 1, k=-1)
    keep = ll < n  # midpoints exist for l = 0..n-1
    kk, ll = kk[keep], ll[keep]
    mids = (ll + 0.5) * dt
    x = 1.0 - (ll + 0.5) / kk
    phi = x**alpha / alpha * hyp2f1(1.0, alpha, 1.0 + alpha, x)
    vals = mids**alpha * phi / (dh * gamma_fn(alpha))
    out = np.zeros((n + 1, n))
    out[kk, ll] = vals
    return out


@dataclass(frozen=True)
class FracKernelPlan:
    """Precomputed quadrature data for one integral order on one grid.

    weights_left/weights_right hold the Toeplitz generators (A, C) of the
    product-integration weights w_{k,l} for I^a_{0+} and I^a_{T-} (the
    dense matrix is never materialized; row sums are checked through the
    rules' action on f == 1). kernel_matrix holds kappa(t_k, midpoint_l)
    for the observation-to-Wiener transform and exists only for plans
    built from a Hurst index.
    """

    hurst: float | None
    grid: TimeGrid
    alpha: float
    weights_left: tuple
    weights_right: tuple
    kernel_matrix: np.ndarray | None

    @staticmethod
    def for_order(alpha: float, grid: TimeGrid) -> "FracKernelPlan":
        """Plain fractional-integration plan of order alpha in (0, 1)."""
        if not 0.0 < alpha < 1.0:
            raise InputError(f"fractional order {alpha} outside (0, 1)")
        A, C = _pi_kernels(alpha, grid.n_coarse, grid.dt)
        for arr in (A, C):
            arr.setflags(write=False)
        return FracKernelPlan(None, grid, alpha, (A, C), (A, C), None)

    @staticmethod
    def build(hurst: float, grid: TimeGrid) -> "FracKernelPlan":
        if not 1.0 / 3.0 < hurst <= 0.5:
            raise InputError(f"Hurst index {hurst} outside (1/3, 1/2]")
        alpha = 0.5 - hurst
        if alpha == 0.0:
            # H = 1/2 diagnostic mode: I^0 = identity, kappa == 1
            kern = np.tril(np.ones((grid.n_coarse + 1, grid.n_coarse)), k=-1)
            kern.setflags(write=False)
            weights = (None, None)
            return FracKernelPlan(hurst, grid, alpha, weights, weights, kern)
        A, C = _pi_kernels(alpha, grid.n_coarse, grid.dt)
        kern = _lower_triangular_kernel(hurst, grid)
        for arr in (A, C, kern):
            arr.setflags(write=False)
        return FracKernelPlan(hurst, grid, alpha, (A, C), (A, C), kern)

    def left_row_sums(self) -> np.ndarray:
        return rl_integral_left(self, np.ones(self.grid.n_coarse + 1))

    def right_row_sums(self) -> np.ndarray:
        return rl_integral_right(self, np.ones(self.grid.n_coarse + 1))


@lru_cache(maxsize=32)
def get_plan(hurst: float, T: float, n_coarse: int) -> FracKernelPlan:
    """Process-local plan cache; plans are immutable and shared read-only."""
    return FracKernelPlan.build(hurst, TimeGrid(T, n_coarse, 0))


def rl_integral_left(plan: FracKernelPlan, f: np.ndarray) -> np.ndarray:
    """I^a_{0+} f at every grid node; exact for piecewise-linear f; 0 at t_0."""
    f = np.asarray(f, dtype=float)
    n = plan.grid.n_coarse
    if f.shape[0] != n + 1:
        raise InputError(f"expected {n + 1} samples, got {f.shape[0]}")
    if not np.all(np.isfinite(f)):
        raise InputError("non-finite samples in fractional integral input")
    if plan.alpha == 0.0:
        return f.copy()
    A, C = plan.weights_left
    out = _conv(f, A, n + 1) + _conv(f[1:], C, n + 1)
    out[0] = 0.0
    return out


def rl_integral_right(plan: FracKernelPlan, f: np.ndarray) -> np.ndarray:
    """I^a_{T-} f at every grid node (right endpoint = horizon); 0 at t_N."""
    return rl_integral_left(plan, np.asarray(f, dtype=float)[::-1])[::-1]


def kh_inverse_transform(plan: FracKernelPlan, y: np.ndarray) -> np.ndarray:
    """Transform a path Y (Y_0 = 0) into W_t = sum_{l<k} kappa(t_k, m_l) dY_l.

    When Y is a fBm with the plan's Hurst index, W is a standard Wiener
    process up to the midpoint-rule discretization (checked behaviorally:
    Var(W_t) = t, Cov(W_s, W_t) = min(s, t)).
    """
    if plan.kernel_matrix is None:
        raise InputError("plan built with for_order() has no Hurst kernel")
    y = np.asarray(y, dtype=float)
    n = plan.grid.n_coarse
    if y.shape[0] != n + 1:
        raise InputError(f"expected {n + 1} samples, got {y.shape[0]}")
    dy = np.diff(y)
    out = plan.kernel_matrix @ dy
    out[0] = 0.0
    return out


def q_transform(plan: FracKernelPlan, g: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """scale * t^(H-1/2) * I^a_{0+}[ s^a g(s) ](t) at the grid nodes, 0 at t_0.

    This is the shared shape of the likelihood field and its parameter
    derivatives; scale carries the (eps d_H)^-1 prefactor.
    """
    g = np.asarray(g, dtype=float)
    nodes = plan.grid.coarse_nodes()
    inner = rl_integral_left(plan, nodes**plan.alpha * g)
    out = np.empty_like(inner)
    out[0] = 0.0
    out[1:] = scale * nodes[1:] ** (-plan.alpha) * inner[1:]
    return out
