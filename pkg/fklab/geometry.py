"""
Boundary geometry
Koch prefractals and straight control boundaries, distance / membership /
shell queries over a uniform segment grid, and empirical checks of the
volume regularity of boundary neighbourhoods.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.spatial.distance import pdist

from fklab.errors import (
    ArgumentError,
    InsufficientScalesError,
    ResolutionError,
    ResourceLimitError,
    UnsupportedDomainError,
)

logger = logging.getLogger(__name__)

KOCH_ALPHA = math.log(4) / math.log(3)
MAX_KOCH_LEVEL = 14
BRUTE_FORCE_SEGMENTS = 64
NEAR_FIELD_RINGS = 4
QUERY_CHUNK = 1 << 15
FAR_FIELD_CHUNK = 1 << 13
ON_BOUNDARY_TOL = 1e-12
DEFAULT_SHELL_RATIO = 1.0 / 3.0
DEFAULT_RESOLUTION_FACTOR = 10.0

Point = Union[Sequence[float], np.ndarray]


def _segment_distances(points: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Euclidean point-to-segment distances; broadcasts over leading axes."""
    abx = ends[..., 0] - starts[..., 0]
    aby = ends[..., 1] - starts[..., 1]
    apx = points[..., 0] - starts[..., 0]
    apy = points[..., 1] - starts[..., 1]
    denom = abx * abx + aby * aby
    t = (apx * abx + apy * aby) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(apx - t * abx, apy - t * aby)


def brute_force_distances(points: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Minimum distance over every segment; the oracle for the grid index."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty(len(points))
    rows = max(1, (1 << 22) // max(1, len(segments)))
    starts = segments[None, :, 0, :]
    ends = segments[None, :, 1, :]
    for lo in range(0, len(points), rows):
        chunk = points[lo:lo + rows, None, :]
        out[lo:lo + rows] = _segment_distances(chunk, starts, ends).min(axis=1)
    return out


def _ring_offsets(k: int) -> np.ndarray:
    """Cell offsets at Chebyshev distance exactly k."""
    if k == 0:
        return np.zeros((1, 2), dtype=np.int64)
    span = np.arange(-k, k + 1)
    inner = np.arange(-k + 1, k)
    return np.concatenate([
        np.column_stack([span, np.full_like(span, k)]),
        np.column_stack([span, np.full_like(span, -k)]),
        np.column_stack([np.full_like(inner, -k), inner]),
        np.column_stack([np.full_like(inner, k), inner]),
    ])


class SegmentGrid:
    """
    Uniform bucket grid over segment midpoints.

    Cell size is the longest segment, so every segment lies within half a
    cell of the cell holding its midpoint. Only occupied cells are stored
    (sorted keys + offsets), which keeps fine prefractals cheap. Queries scan
    rings of cells around the query until the ring lower bound exceeds the
    best distance; points still unresolved after a few rings go to a
    KD-tree over midpoints with an exact candidate radius.
    """

    def __init__(self, starts: np.ndarray, ends: np.ndarray):
        self.starts = starts
        self.ends = ends
        lengths = np.hypot(*(ends - starts).T)
        longest = float(lengths.max())
        self.cell = longest if longest > 0 else 1.0
        self.half = 0.5 * longest
        corners = np.concatenate([starts, ends])
        self.lower = corners.min(axis=0)
        self.upper = corners.max(axis=0)
        mids = 0.5 * (starts + ends)
        cells = np.floor((mids - self.lower) / self.cell).astype(np.int64)
        self.shape = cells.max(axis=0) + 1
        flat = cells[:, 0] * self.shape[1] + cells[:, 1]
        self.order = np.argsort(flat, kind="stable")
        self.keys, counts = np.unique(flat[self.order], return_counts=True)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.tree = cKDTree(mids)

    def _cell_ranges(self, cells: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        valid = (cells >= 0).all(axis=1) & (cells < self.shape).all(axis=1)
        flat = cells[:, 0] * self.shape[1] + cells[:, 1]
        pos = np.minimum(np.searchsorted(self.keys, flat), len(self.keys) - 1)
        hit = valid & (self.keys[pos] == flat)
        begin = np.where(hit, self.offsets[pos], 0)
        end = np.where(hit, self.offsets[pos + 1], 0)
        return begin, end

    def _scan_ring(self, points, home, best, pending, k):
        offsets = _ring_offsets(k)
        cells = (home[pending][:, None, :] + offsets[None, :, :]).reshape(-1, 2)
        owners = np.repeat(pending, len(offsets))
        begin, end = self._cell_ranges(cells)
        counts = end - begin
        keep = counts > 0
        if not keep.any():
            return
        owners, begin, counts = owners[keep], begin[keep], counts[keep]
        total = int(counts.sum())
        pair_owner = np.repeat(owners, counts)
        within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        seg = self.order[np.repeat(begin, counts) + within]
        d = _segment_distances(points[pair_owner], self.starts[seg], self.ends[seg])
        np.minimum.at(best, pair_owner, d)

    def _far_field(self, points: np.ndarray) -> np.ndarray:
        out = np.empty(len(points))
        for lo in range(0, len(points), FAR_FIELD_CHUNK):
            chunk = points[lo:lo + FAR_FIELD_CHUNK]
            nearest, _ = self.tree.query(chunk)
            radius = nearest + self.half * (1.0 + 1e-9) + 1e-12
            groups = self.tree.query_ball_point(chunk, radius)
            counts = np.fromiter((len(g) for g in groups), dtype=np.int64, count=len(chunk))
            seg = np.fromiter(itertools.chain.from_iterable(groups), dtype=np.int64,
                              count=int(counts.sum()))
            owner = np.repeat(np.arange(len(chunk)), counts)
            best = np.full(len(chunk), np.inf)
            d = _segment_distances(chunk[owner], self.starts[seg], self.ends[seg])
            np.minimum.at(best, owner, d)
            out[lo:lo + FAR_FIELD_CHUNK] = best
        return out

    def _query_chunk(self, points: np.ndarray, limit: Optional[float]) -> np.ndarray:
        best = np.full(len(points), np.inf)
        proj = np.clip(points, self.lower, self.upper)
        gap = np.hypot(*(points - proj).T)
        home = np.clip(np.floor((proj - self.lower) / self.cell).astype(np.int64), 0, self.shape - 1)
        pending = np.arange(len(points))
        covering = int(self.shape.max()) - 1
        k = 0
        while pending.size and k <= NEAR_FIELD_RINGS:
            self._scan_ring(points, home, best, pending, k)
            # unscanned midpoints sit >= k cells away; minus half a segment and projection slack
            reach = max(0.0, (k - 1) * self.cell)
            bound = np.sqrt(gap[pending] ** 2 + reach ** 2)
            done = best[pending] <= bound
            if limit is not None:
                done |= bound > limit
            if k >= covering:
                done[:] = True
            pending = pending[~done]
            k += 1
        if pending.size:
            best[pending] = self._far_field(points[pending])
        return best

    def query(self, points: np.ndarray, limit: Optional[float] = None) -> np.ndarray:
        out = np.empty(len(points))
        for lo in range(0, len(points), QUERY_CHUNK):
            out[lo:lo + QUERY_CHUNK] = self._query_chunk(points[lo:lo + QUERY_CHUNK], limit)
        return out


def _diameter(vertices: np.ndarray) -> float:
    pts = np.unique(vertices, axis=0)
    if len(pts) < 2:
        return 0.0
    if len(pts) > 3:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    return float(pdist(pts).max())


@dataclass
class PrefractalBoundary:
    """Polyline approximation of a boundary set K"""
    segments: np.ndarray
    level: int
    nominal_alpha: float
    closed: bool
    exact: bool = False  # the polyline is the set itself, no resolution floor
    index: Optional[SegmentGrid] = field(init=False, repr=False, default=None)
    diameter: float = field(init=False, default=0.0)

    def __post_init__(self):
        self.segments = np.ascontiguousarray(self.segments, dtype=float).reshape(-1, 2, 2)
        if len(self.segments) == 0:
            raise ArgumentError("boundary needs at least one segment")
        if len(self.segments) >= BRUTE_FORCE_SEGMENTS:
            self.index = SegmentGrid(self.segments[:, 0], self.segments[:, 1])
        self.diameter = _diameter(self.vertices)

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def vertices(self) -> np.ndarray:
        if self.closed:
            return self.segments[:, 0]
        return np.concatenate([self.segments[:, 0], self.segments[-1:, 1]])

    @property
    def lengths(self) -> np.ndarray:
        return np.hypot(*(self.segments[:, 1] - self.segments[:, 0]).T)

    @property
    def resolution(self) -> float:
        """Finest scale at which the polyline stands in for the ideal set."""
        return 0.0 if self.exact else 3.0 ** (-self.level)

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        flat = self.segments.reshape(-1, 2)
        return flat.min(axis=0), flat.max(axis=0)

    def distances(self, points: Point, limit: Optional[float] = None) -> np.ndarray:
        """
        Distances from many points to the polyline.

        With `limit`, values up to the limit are exact and anything farther
        comes back as some value above the limit (possibly inf).
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.index is None:
            return brute_force_distances(points, self.segments)
        return self.index.query(points, limit)

    def sample_points(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Points drawn uniformly by arc length."""
        lengths = self.lengths
        seg = rng.choice(len(lengths), size=n, p=lengths / lengths.sum())
        frac = rng.random(n)
        return self.segments[seg, 0] + frac[:, None] * (self.segments[seg, 1] - self.segments[seg, 0])


class Orientation(str, Enum):
    INTERIOR_IS_BOUNDED = "interior_is_bounded"
    INTERIOR_IS_HALFPLANE_UPPER = "interior_is_halfplane_upper"
    EXTERIOR = "exterior"


@dataclass
class DomainSpec:
    boundary: PrefractalBoundary
    orientation: Orientation = Orientation.INTERIOR_IS_BOUNDED


@dataclass
class RegularityReport:
    alpha_hat: float
    alpha_ci: Tuple[float, float]
    c1_hat: Optional[float]
    c2_hat: Optional[float]
    scale_range: Tuple[float, float]
    sample_count: int
    nominal_alpha: float = float("nan")
    ratios: List[Tuple[float, float, float]] = field(default_factory=list)  # (r, gamma, ratio)


def koch_prefractal(level: int) -> PrefractalBoundary:
    """
    Closed level-`level` snowflake on the unit-side triangle
    (0,0), (1,0), (1/2, sqrt(3)/2), traversed counter-clockwise so every
    bump points out of the bounded component.
    """
    if level < 0:
        raise ArgumentError(f"level must be non-negative, got {level}")
    if level > MAX_KOCH_LEVEL:
        raise ResourceLimitError(
            f"level {level} exceeds the cap {MAX_KOCH_LEVEL} "
            f"({3 * 4 ** level} segments requested)"
        )
    pts = np.array([0.0, 1.0, 0.5 + 0.5j * math.sqrt(3.0), 0.0], dtype=complex)
    turn = np.exp(-1j * math.pi / 3.0)
    for _ in range(level):
        p1, p2 = pts[:-1], pts[1:]
        step = (p2 - p1) / 3.0
        s1 = p1 + step
        s2 = p1 + 2.0 * step
        tip = s1 + step * turn
        pts = np.append(np.column_stack([p1, s1, tip, s2]).ravel(), pts[-1])
    xy = np.column_stack([pts.real, pts.imag])
    segments = np.stack([xy[:-1], xy[1:]], axis=1)
    logger.debug("koch level %d: %d segments", level, len(segments))
    return PrefractalBoundary(segments=segments, level=level, nominal_alpha=KOCH_ALPHA, closed=True)


def line_boundary(half_width: float) -> PrefractalBoundary:
    """The segment {(x, 0): |x| <= half_width}."""
    if not half_width > 0:
        raise ArgumentError(f"half_width must be positive, got {half_width}")
    segments = np.array([[[-half_width, 0.0], [half_width, 0.0]]])
    return PrefractalBoundary(segments=segments, level=0, nominal_alpha=1.0, closed=False, exact=True)


def slit_boundary(length: float = 1e3) -> PrefractalBoundary:
    """A long ray {(x, 0): -length <= x <= 0} ending at the origin."""
    if not length > 0:
        raise ArgumentError(f"length must be positive, got {length}")
    segments = np.array([[[-length, 0.0], [0.0, 0.0]]])
    return PrefractalBoundary(segments=segments, level=0, nominal_alpha=1.0, closed=False, exact=True)


def halfplane_domain(half_width: float = 1e3) -> DomainSpec:
    return DomainSpec(line_boundary(half_width), Orientation.INTERIOR_IS_HALFPLANE_UPPER)


def distance_to_boundary(boundary: PrefractalBoundary, point: Point) -> float:
    return float(boundary.distances(np.asarray(point, dtype=float)[None, :])[0])


def _even_odd(points: np.ndarray, segments: np.ndarray) -> np.ndarray:
    inside = np.zeros(len(points), dtype=bool)
    x1, y1 = segments[:, 0, 0], segments[:, 0, 1]
    x2, y2 = segments[:, 1, 0], segments[:, 1, 1]
    rows = max(1, (1 << 22) // len(segments))
    for lo in range(0, len(points), rows):
        px = points[lo:lo + rows, 0:1]
        py = points[lo:lo + rows, 1:2]
        straddle = (y1 > py) != (y2 > py)
        dy = np.where(y2 != y1, y2 - y1, 1.0)
        cross_x = x1 + (py - y1) * (x2 - x1) / dy
        hits = straddle & (px < cross_x)
        inside[lo:lo + rows] = (hits.sum(axis=1) % 2) == 1
    return inside


def contains_interior(domain: DomainSpec, point: Point) -> Union[bool, np.ndarray]:
    """
    Membership in the domain's interior. Accepts one point or an (n, 2)
    array; points on the boundary polyline report False.
    """
    pts = np.asarray(point, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    boundary = domain.boundary
    if domain.orientation is Orientation.INTERIOR_IS_HALFPLANE_UPPER:
        inside = pts[:, 1] > 0
    else:
        if not boundary.closed:
            raise UnsupportedDomainError(
                f"orientation {domain.orientation.value} needs a closed boundary"
            )
        inside = _even_odd(pts, boundary.segments)
        if domain.orientation is Orientation.EXTERIOR:
            inside = ~inside
    on_curve = boundary.distances(pts, limit=ON_BOUNDARY_TOL) <= ON_BOUNDARY_TOL
    inside = inside & ~on_curve
    return bool(inside[0]) if single else inside


def shell_indicator(boundary: PrefractalBoundary, point: Point, a: float, n: int) -> int:
    """1 iff a^(n+1) < d_K(point) <= a^n."""
    if not 0 < a < 1:
        raise ArgumentError(f"shell ratio must lie in (0, 1), got {a}")
    d = distance_to_boundary(boundary, point)
    return int(a ** (n + 1) < d <= a ** n)


def shell_membership(distances: np.ndarray, a: float, n: int) -> np.ndarray:
    """Vectorised shell_indicator on precomputed distances."""
    return (distances > a ** (n + 1)) & (distances <= a ** n)


def required_level(gamma: float, factor: float = DEFAULT_RESOLUTION_FACTOR) -> int:
    """Smallest prefractal level with 3^-L <= gamma / factor."""
    return max(0, int(math.ceil(math.log(factor / gamma) / math.log(3.0) - 1e-12)))


def check_resolution(boundary: PrefractalBoundary, gamma: float,
                     factor: float = DEFAULT_RESOLUTION_FACTOR) -> None:
    if boundary.exact or boundary.resolution <= gamma / factor:
        return
    need = required_level(gamma, factor)
    raise ResolutionError(
        f"prefractal level {boundary.level} is too coarse for scale {gamma:.3g}; "
        f"use level >= {need}",
        required_level=need,
    )


def neighborhood_cells(
    boundary: PrefractalBoundary,
    lower: np.ndarray,
    upper: np.ndarray,
    rho: float,
    cell: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Centres (and their distances to K) of the `cell`-sized squares tiling
    the box [lower, upper] whose centres lie within `rho` of K.

    Found by quadtree refinement from a coarse grid, discarding squares that
    cannot reach K_rho.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    extent = float((upper - lower).max())
    levels = max(0, int(math.ceil(math.log2(max(extent / cell, 1.0) / 64.0))))
    size = cell * 2 ** levels
    nx, ny = np.maximum(1, np.ceil((upper - lower) / size)).astype(int)
    gx, gy = np.meshgrid(lower[0] + (np.arange(nx) + 0.5) * size,
                         lower[1] + (np.arange(ny) + 0.5) * size, indexing="ij")
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    while True:
        reach = rho + size * math.sqrt(0.5)
        dist = boundary.distances(centers, limit=reach)
        keep = dist <= reach
        centers, dist = centers[keep], dist[keep]
        if levels == 0:
            break
        levels -= 1
        size /= 2.0
        q = size / 2.0
        quads = np.array([[-q, -q], [-q, q], [q, -q], [q, q]])
        centers = (centers[:, None, :] + quads[None, :, :]).reshape(-1, 2)
    inside = dist <= rho
    return centers[inside], dist[inside]


def _sample_along(segments: np.ndarray, spacing: float) -> np.ndarray:
    starts, ends = segments[:, 0], segments[:, 1]
    lengths = np.hypot(*(ends - starts).T)
    pieces = np.maximum(1, np.ceil(lengths / spacing)).astype(np.int64)
    counts = pieces + 1
    owner = np.repeat(np.arange(len(segments)), counts)
    j = np.arange(int(counts.sum())) - np.repeat(np.cumsum(counts) - counts, counts)
    frac = j / pieces[owner]
    return starts[owner] + frac[:, None] * (ends - starts)[owner]


def box_count(boundary: PrefractalBoundary, scale: float) -> float:
    """Occupied boxes of side `scale`, averaged over four half-box grid offsets."""
    pts = _sample_along(boundary.segments, scale / 4.0)
    lower, _ = boundary.bounds
    counts = []
    for ox, oy in itertools.product((0.0, 0.5), repeat=2):
        shifted = (pts - lower) / scale + np.array([ox, oy])
        keys = np.floor(shifted).astype(np.int64)
        counts.append(len(np.unique(keys, axis=0)))
    return float(np.mean(counts))


def _triadic_scales(scale_range: Tuple[float, float]) -> np.ndarray:
    lo, hi = sorted(scale_range)
    k_min = int(math.ceil(-math.log(hi) / math.log(3.0) - 1e-9))
    k_max = int(math.floor(-math.log(lo) / math.log(3.0) + 1e-9))
    return 3.0 ** -np.arange(k_min, k_max + 1, dtype=float)


def minkowski_fit(boundary: PrefractalBoundary, scale_range: Tuple[float, float]) -> RegularityReport:
    """Box-counting slope of log N(s) against log(1/s) over powers of 1/3."""
    lo, hi = sorted(scale_range)
    if lo <= 0 or hi >= boundary.diameter:
        raise ArgumentError(
            f"scale range {scale_range} must lie inside (0, {boundary.diameter:.4g})"
        )
    if lo < boundary.resolution:
        logger.warning(
            "scales below %.3g resolve the level-%d polyline, not the ideal set",
            boundary.resolution, boundary.level,
        )
    scales = _triadic_scales((lo, hi))
    if len(scales) < 3:
        raise InsufficientScalesError(
            f"only {len(scales)} powers of 1/3 inside {scale_range}; need at least 3"
        )
    counts = np.array([box_count(boundary, s) for s in scales])
    fit = stats.linregress(np.log(1.0 / scales), np.log(counts))
    half = stats.t.ppf(0.975, len(scales) - 2) * fit.stderr
    logger.info("box dimension %.4f over %d scales", fit.slope, len(scales))
    return RegularityReport(
        alpha_hat=float(fit.slope),
        alpha_ci=(float(fit.slope - half), float(fit.slope + half)),
        c1_hat=None,
        c2_hat=None,
        scale_range=(lo, hi),
        sample_count=len(scales),
        nominal_alpha=boundary.nominal_alpha,
    )


def _uniform_disk(rng: np.random.Generator, n: int) -> np.ndarray:
    """Rejection sampling of n points in the unit disk."""
    out = np.empty((0, 2))
    while len(out) < n:
        need = n - len(out)
        cand = rng.uniform(-1.0, 1.0, size=(int(need * 1.3) + 16, 2))
        cand = cand[(cand ** 2).sum(axis=1) <= 1.0]
        out = np.concatenate([out, cand[:need]])
    return out


def regularity_probe(
    boundary: PrefractalBoundary,
    n_centers: int,
    scale_range: Tuple[float, float],
    rng,
    n_points: int = 10 ** 6,
    d: int = 2,
) -> RegularityReport:
    """
    Monte Carlo volumes |K_gamma ∩ B(x, r)| for random centres x ∈ K_{r/2}
    over every pair r >= gamma of powers of 1/3 in `scale_range`.

    c1_hat / c2_hat are the sup / inf of |K_gamma ∩ B| / (r^α γ^(d-α)) with
    the nominal α; alpha_hat is d minus the fitted gamma-exponent of the
    volumes.
    """
    if n_centers < 1 or n_points < 1:
        raise ArgumentError("regularity probe needs at least one centre and one point")
    lo, hi = sorted(scale_range)
    if hi > 1.0 or lo <= boundary.resolution:
        raise ArgumentError(
            f"scales must satisfy 1 >= r >= gamma > {boundary.resolution:.3g}, got {scale_range}"
        )
    scales = _triadic_scales((lo, hi))
    if len(scales) == 0:
        raise ArgumentError(f"no power of 1/3 inside {scale_range}")
    alpha = boundary.nominal_alpha
    gen = rng.generator() if hasattr(rng, "generator") else rng
    rows = []
    for r, gamma in itertools.product(scales, scales):
        if gamma > r:
            continue
        anchors = boundary.sample_points(gen, n_centers)
        centers = anchors + 0.5 * r * _uniform_disk(gen, n_centers)
        for center in centers:
            pts = center + r * _uniform_disk(gen, n_points)
            frac = float(np.mean(boundary.distances(pts, limit=gamma) <= gamma))
            volume = frac * math.pi * r ** d
            rows.append((r, gamma, volume, volume / (r ** alpha * gamma ** (d - alpha))))
    table = np.array(rows)
    ratios = table[:, 3]
    positive = table[:, 2] > 0
    alpha_hat, alpha_ci = float("nan"), (float("nan"), float("nan"))
    if positive.sum() >= 4 and len(np.unique(table[positive, 1])) >= 2:
        design = np.column_stack([
            np.ones(positive.sum()), np.log(table[positive, 0]), np.log(table[positive, 1]),
        ])
        target = np.log(table[positive, 2])
        coef, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
        dof = len(target) - rank
        alpha_hat = float(d - coef[2])
        if dof > 0:
            resid = target - design @ coef
            cov = resid @ resid / dof * np.linalg.pinv(design.T @ design)
            half = stats.t.ppf(0.975, dof) * math.sqrt(max(cov[2, 2], 0.0))
            alpha_ci = (alpha_hat - half, alpha_hat + half)
    logger.info("regularity probe: %d balls, ratio spread [%.3g, %.3g]",
                len(rows), ratios.min(), ratios.max())
    return RegularityReport(
        alpha_hat=alpha_hat,
        alpha_ci=alpha_ci,
        c1_hat=float(ratios.max()),
        c2_hat=float(ratios.min()),
        scale_range=(lo, hi),
        sample_count=len(rows) * n_points,
        nominal_alpha=alpha,
        ratios=[(float(r), float(g), float(q)) for r, g, _, q in rows],
    )


def shell_ratio_admissible(report: RegularityReport, a: float, d: int = 2) -> bool:
    """Whether C2/2 >= a^(d-α) C1, so each shell K'_n carries a fixed share of volume."""
    if report.c1_hat is None or report.c2_hat is None:
        raise ArgumentError("report carries no volume constants; run regularity_probe")
    return report.c2_hat / 2.0 >= a ** (d - report.nominal_alpha) * report.c1_hat


def verify_boundary(boundary: PrefractalBoundary) -> List[str]:
    """Invariant problems of a boundary (empty when it is sound)."""
    problems = []
    if boundary.closed:
        ends = boundary.segments[:, 1]
        starts = np.roll(boundary.segments[:, 0], -1, axis=0)
        gap = float(np.abs(ends - starts).max())
        if gap > 1e-12:
            problems.append(f"polygon is not closed (gap {gap:.3g})")
    if not boundary.exact:
        expected = 3 * 4 ** boundary.level
        if boundary.n_segments != expected:
            problems.append(f"{boundary.n_segments} segments, expected {expected}")
        lengths = boundary.lengths
        target = 3.0 ** (-boundary.level)
        worst = float(np.abs(lengths - target).max() / target)
        if worst > 1e-9:
            problems.append(f"segment lengths deviate from {target:.6g} by {worst:.3g} relative")
    return problems


def export_boundary_csv(boundary: PrefractalBoundary, path: Union[str, Path]) -> Path:
    """Segment endpoints under a one-line `level,alpha,closed` header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(boundary.segments.reshape(-1, 4), columns=["x1", "y1", "x2", "y2"])
    with open(path, "w", newline="") as handle:
        handle.write("level,alpha,closed\n")
        handle.write(f"{boundary.level},{boundary.nominal_alpha!r},{str(boundary.closed).lower()}\n")
        frame.to_csv(handle, index=False)
    return path


def import_boundary_csv(path: Union[str, Path]) -> PrefractalBoundary:
    path = Path(path)
    try:
        with open(path) as handle:
            header = handle.readline().strip()
            if header != "level,alpha,closed":
                raise ArgumentError(f"{path}: expected header 'level,alpha,closed', got {header!r}")
            level, alpha, closed = handle.readline().strip().split(",")
            frame = pd.read_csv(handle, float_precision="round_trip")
    except OSError as exc:
        raise OSError(f"cannot read boundary file {path}: {exc}") from exc
    is_closed = closed.strip().lower() == "true"
    segments = frame[["x1", "y1", "x2", "y2"]].to_numpy(dtype=float).reshape(-1, 2, 2)
    # only snowflake prefractals are stored closed; open polylines are exact sets
    return PrefractalBoundary(
        segments=segments,
        level=int(level),
        nominal_alpha=float(alpha),
        closed=is_closed,
        exact=not is_closed,
    )
