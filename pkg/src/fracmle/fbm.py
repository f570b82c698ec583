"""Exact multi-component fractional Brownian motion and its second-order lift.

Sampling uses circulant embedding (Davies-Harte), which reproduces the
fBm covariance 0.5*(t^2H + s^2H - |t-s|^2H) exactly on the grid; a dense
Cholesky factorization is the fallback when the embedding is not PSD.
The lift stores per-fine-step increments and areas only; values on wider
intervals are reconstructed through Chen's relation, which makes the
Chen identity hold by construction up to float rounding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

from .errors import InputError, ResourceError

log = logging.getLogger(__name__)

MAX_FINE_STEPS = 1 << 24
MAX_CHOLESKY_STEPS = 1 << 13
# all-pairs Hoelder seminorms are O(N^2); beyond this many nodes only
# dyadic gaps are scanned
ALL_PAIRS_LIMIT = 4096

HURST_LOW = 1.0 / 3.0
HURST_HIGH = 0.5


@dataclass(frozen=True)
class HurstVector:
    """Per-component Hurst indices H_i, each in (1/3, 1/2).

    With diagnostic=True the Brownian value H_i = 1/2 is also admitted so
    classical results can be used as sanity oracles.
    """

    h: tuple
    diagnostic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "h", tuple(float(v) for v in np.atleast_1d(self.h)))
        for v in self.h:
            if not np.isfinite(v):
                raise InputError(f"non-finite Hurst index {v!r}")
            if HURST_LOW < v < HURST_HIGH:
                continue
            if self.diagnostic and v == HURST_HIGH:
                continue
            raise InputError(
                f"Hurst index {v} outside (1/3, 1/2)"
                + ("" if self.diagnostic else " (diagnostic mode admits 1/2)")
            )

    @property
    def r(self) -> int:
        return len(self.h)

    def __len__(self) -> int:
        return len(self.h)

    def __iter__(self):
        return iter(self.h)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform two-level grid on [0, T].

    The coarse grid has n_coarse steps; the fine grid refines each coarse
    step into 2**refine_level substeps.
    """

    T: float
    n_coarse: int
    refine_level: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise InputError(f"horizon T must be positive, got {self.T}")
        if int(self.n_coarse) != self.n_coarse or self.n_coarse < 2:
            raise InputError(f"n_coarse must be an integer >= 2, got {self.n_coarse}")
        if int(self.refine_level) != self.refine_level or self.refine_level < 0:
            raise InputError(f"refine_level must be an integer >= 0, got {self.refine_level}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_coarse", int(self.n_coarse))
        object.__setattr__(self, "refine_level", int(self.refine_level))

    @property
    def n_fine(self) -> int:
        return self.n_coarse << self.refine_level

    @property
    def substeps(self) -> int:
        return 1 << self.refine_level

    @property
    def dt(self) -> float:
        return self.T / self.n_coarse

    @property
    def dt_fine(self) -> float:
        return self.T / self.n_fine

    def coarse_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_coarse + 1)

    def fine_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_fine + 1)

    def fine_index(self, t: float) -> int:
        """Map a time to its fine-grid node index; off-grid times are errors."""
        k = t / self.T * self.n_fine
        ki = int(round(k))
        if ki < 0 or ki > self.n_fine or abs(k - ki) > 1e-8 * self.n_fine:
            raise InputError(f"time {t} is not a fine-grid node")
        return ki

    def coarse_index(self, t: float) -> int:
        k = t / self.T * self.n_coarse
        ki = int(round(k))
        if ki < 0 or ki > self.n_coarse or abs(k - ki) > 1e-8 * self.n_coarse:
            raise InputError(f"time {t} is not a coarse-grid node")
        return ki


@dataclass(frozen=True)
class RoughPath:
    """Driver increments plus second-level areas on the two-level grid.

    values           fine-grid path, shape (n_fine+1, r)
    increments       per fine step, shape (n_fine, r)
    areas            per fine step, shape (n_fine, r, r): the single-step
                     convention (upper triangle 0, diagonal 0.5*dB^2,
                     lower triangle dB_i*dB_j) whose Chen composition over
                     a subgrid equals the left-point second-order sums
    coarse_increments, coarse_areas
                     composed per coarse step (what the solver consumes)
    """

    grid: TimeGrid
    values: np.ndarray
    increments: np.ndarray
    areas: np.ndarray
    coarse_increments: np.ndarray
    coarse_areas: np.ndarray

    @property
    def r(self) -> int:
        return self.values.shape[1]

    def coarse_values(self) -> np.ndarray:
        return self.values[:: self.grid.substeps]

    def increment(self, i: int, j: int) -> np.ndarray:
        """B_{t_i, t_j} for fine-node indices i <= j."""
        return self.values[j] - self.values[i]

    def area(self, i: int, j: int) -> np.ndarray:
        """Second-level area over fine-node indices [i, j] via Chen composition.

        Equals the left-point second-order Riemann sum over the fine
        subgrid for the upper triangle, 0.5*(B_{i,j})^2 on the diagonal,
        and the antisymmetric completion below it.
        """
        if not (0 <= i <= j <= self.grid.n_fine):
            raise InputError(f"invalid fine-node interval ({i}, {j})")
        r = self.r
        if i == j:
            return np.zeros((r, r))
        db = self.increments[i:j]
        rel = self.values[i:j] - self.values[i]
        out = np.empty((r, r))
        full = rel.T @ db  # full[a, b] = sum_k rel[k, a] * db[k, b]
        tot = self.values[j] - self.values[i]
        for a in range(r):
            out[a, a] = 0.5 * tot[a] ** 2
            for b in range(a + 1, r):
                out[a, b] = full[a, b]
                out[b, a] = -full[a, b] + tot[a] * tot[b]
        return out

    def area_t(self, s: float, t: float) -> np.ndarray:
        return self.area(self.grid.fine_index(s), self.grid.fine_index(t))

    def increment_t(self, s: float, t: float) -> np.ndarray:
        return self.increment(self.grid.fine_index(s), self.grid.fine_index(t))


def _fgn_circulant(n: int, hurst: float, rng: Generator) -> np.ndarray:
    """Unit-spacing fractional Gaussian noise by circulant embedding.

    Returns None when the embedding has a materially negative eigenvalue
    (cannot happen for H <= 1/2, kept as a guarded fallback trigger).
    """
    k = np.arange(n, dtype=float)
    rho = 0.5 * ((k + 1) ** (2 * hurst) + np.abs(k - 1) ** (2 * hurst) - 2 * k ** (2 * hurst))
    c = np.concatenate([rho, [0.0], rho[:0:-1]])
    g = np.fft.fft(c).real
    if g.min() < -1e-10 * max(g.max(), 1.0):
        return None
    g = np.clip(g, 0.0, None)
    z = np.empty(2 * n, dtype=complex)
    z[0] = rng.standard_normal()
    z[n] = rng.standard_normal()
    v = rng.standard_normal((n - 1, 2))
    z[1:n] = (v[:, 0] + 1j * v[:, 1]) / math.sqrt(2.0)
    z[n + 1 :] = np.conj(z[1:n][::-1])
    return math.sqrt(2 * n) * np.fft.ifft(np.sqrt(g) * z).real[:n]


def _fgn_cholesky(n: int, hurst: float, rng: Generator) -> np.ndarray:
    """Dense-Cholesky fallback sampler (exact, O(n^2) memory)."""
    if n > MAX_CHOLESKY_STEPS:
        raise ResourceError(f"Cholesky fallback limited to {MAX_CHOLESKY_STEPS} steps, got {n}")
    k = np.arange(n, dtype=float)
    rho = 0.5 * ((k + 1) ** (2 * hurst) + np.abs(k - 1) ** (2 * hurst) - 2 * k ** (2 * hurst))
    cov = rho[np.abs(k[:, None] - k[None, :]).astype(int)]
    chol = np.linalg.cholesky(cov + 1e-14 * np.eye(n))
    return chol @ rng.standard_normal(n)


def sample_fbm(hurst: HurstVector, grid: TimeGrid, seed) -> np.ndarray:
    """Sample an r-component fBm on the fine grid, B_0 = 0.

    Components are independent; the stream of component i is derived from
    (seed, i) through a counter-based splittable generator, so samples are
    reproducible and independent of any parallel execution layout. seed
    may be an int or a tuple of ints (e.g. (study_seed, replicate_id)).
    """
    n = grid.n_fine
    if n > MAX_FINE_STEPS:
        raise ResourceError(f"fine grid of {n} steps exceeds limit {MAX_FINE_STEPS}")
    entropy = (seed,) if isinstance(seed, int) else tuple(int(s) for s in seed)
    scale = grid.dt_fine
    path = np.zeros((n + 1, hurst.r))
    for i, h in enumerate(hurst):
        rng = Generator(Philox(SeedSequence(entropy=entropy, spawn_key=(i,))))
        if h == 0.5:
            fgn = rng.standard_normal(n)
        else:
            fgn = _fgn_circulant(n, h, rng)
            if fgn is None:
                log.warning(
                    "circulant embedding not PSD for H=%s, n=%s; falling back to Cholesky", h, n
                )
                fgn = _fgn_cholesky(n, h, rng)
        path[1:, i] = np.cumsum(fgn) * scale**h
    return path


def lift(path: np.ndarray, grid: TimeGrid) -> RoughPath:
    """Build the second-order rough path over a fine-grid driver path.

    Per fine step the area is the single-step convention (see RoughPath);
    per coarse step it is composed across the fine substeps, which yields
    the left-point second-order Riemann sum for components i < j.
    """
    path = np.asarray(path, dtype=float)
    if path.ndim == 1:
        path = path[:, None]
    n, r = grid.n_fine, path.shape[1]
    if path.shape[0] != n + 1:
        raise InputError(f"path has {path.shape[0]} nodes, fine grid needs {n + 1}")
    if not np.all(np.isfinite(path)):
        raise InputError("driver path contains non-finite values")
    if grid.refine_level == 0 and r >= 2:
        log.warning("refine_level=0 with r>=2: per-step areas use a single-term sum")

    db = np.diff(path, axis=0)
    areas = np.zeros((n, r, r))
    for a in range(r):
        areas[:, a, a] = 0.5 * db[:, a] ** 2
        for b in range(a + 1, r):
            areas[:, b, a] = db[:, a] * db[:, b]

    m = grid.substeps
    nc = grid.n_coarse
    blocks = db.reshape(nc, m, r)
    cdb = blocks.sum(axis=1)
    rel = np.cumsum(blocks, axis=1)
    rel = np.concatenate([np.zeros((nc, 1, r)), rel[:, :-1, :]], axis=1)
    cross = np.einsum("nka,nkb->nab", rel, blocks)
    careas = np.empty((nc, r, r))
    for a in range(r):
        careas[:, a, a] = 0.5 * cdb[:, a] ** 2
        for b in range(a + 1, r):
            careas[:, a, b] = cross[:, a, b]
            careas[:, b, a] = -cross[:, a, b] + cdb[:, a] * cdb[:, b]

    for arr in (path, db, areas, cdb, careas):
        arr.setflags(write=False)
    return RoughPath(
        grid=grid,
        values=path,
        increments=db,
        areas=areas,
        coarse_increments=cdb,
        coarse_areas=careas,
    )


def chen_defect(rp: RoughPath, s: float, u: float, t: float) -> np.ndarray:
    """B_{s,t} - B_{s,u} - B_{u,t} - B_{s,u} (x) B_{u,t} at grid nodes (second level)."""
    i, j, k = (rp.grid.fine_index(v) for v in (s, u, t))
    if not (i <= j <= k):
        raise InputError(f"need s <= u <= t, got ({s}, {u}, {t})")
    return (
        rp.area(i, k)
        - rp.area(i, j)
        - rp.area(j, k)
        - np.outer(rp.increment(i, j), rp.increment(j, k))
    )


def _gap_list(n: int) -> np.ndarray:
    if n <= ALL_PAIRS_LIMIT:
        return np.arange(1, n + 1)
    gaps = []
    g = 1
    while g <= n:
        gaps.append(g)
        g *= 2
    if gaps[-1] != n:
        gaps.append(n)
    return np.array(gaps)


def holder_seminorm(times: np.ndarray, values: np.ndarray, alpha: float) -> float:
    """sup over node pairs of |Y_t - Y_s| / |t-s|^alpha.

    All pairs are scanned up to ALL_PAIRS_LIMIT nodes, dyadic gaps beyond
    that (value then lower-bounds the all-pairs sup).
    """
    if not 0 < alpha <= 1:
        raise InputError(f"alpha must lie in (0, 1], got {alpha}")
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    n = len(times) - 1
    best = 0.0
    for gap in _gap_list(n):
        num = np.linalg.norm(values[gap:] - values[:-gap], axis=-1)
        den = (times[gap:] - times[:-gap]) ** alpha
        best = max(best, float(np.max(num / den)))
    return best


def area_holder_seminorm(rp: RoughPath, two_alpha: float) -> float:
    """sup over coarse-node pairs of |Area_{s,t}|_F / |t-s|^(2 alpha)."""
    if not 0 < two_alpha <= 2:
        raise InputError(f"two_alpha must lie in (0, 2], got {two_alpha}")
    nc, r = rp.grid.n_coarse, rp.r
    nodes = rp.grid.coarse_nodes()
    cb = rp.coarse_values()
    cdb = rp.coarse_increments
    starts = range(nc) if nc <= ALL_PAIRS_LIMIT else range(0, nc, max(1, nc // ALL_PAIRS_LIMIT))
    best = 0.0
    for s in starts:
        rel = cb[s:nc] - cb[s]
        contrib = rp.coarse_areas[s:] + rel[:, :, None] * cdb[s:, None, :]
        cum = np.cumsum(contrib, axis=0)
        norms = np.sqrt((cum**2).sum(axis=(1, 2)))
        dts = nodes[s + 1 :] - nodes[s]
        best = max(best, float(np.max(norms / dts**two_alpha)))
    return best


def roughpath_seminorm(rp: RoughPath, alpha: float) -> float:
    """Combined first/second-level seminorm |B|_alpha + |Area|_2alpha^(1/2) on coarse nodes."""
    b = holder_seminorm(rp.grid.coarse_nodes(), rp.coarse_values(), alpha)
    a = area_holder_seminorm(rp, 2 * alpha)
    return b + math.sqrt(a)


def dump_driver_csv(rp: RoughPath, path_file, area_file=None) -> None:
    """Write the fine-grid driver (t, B1..Br) and optionally per-step areas (k, i, j, value)."""
    r = rp.r
    header = "t," + ",".join(f"B{i + 1}" for i in range(r))
    data = np.column_stack([rp.grid.fine_nodes(), rp.values])
    np.savetxt(path_file, data, delimiter=",", header=header, comments="")
    if area_file is not None:
        rows = []
        for k in range(rp.grid.n_fine):
            for i in range(r):
                for j in range(r):
                    rows.append((k, i + 1, j + 1, rp.areas[k, i, j]))
        np.savetxt(
            area_file,
            np.array(rows),
            delimiter=",",
            header="k,i,j,area",
            comments="",
            fmt=("%d", "%d", "%d", "%.17g"),
        )
