"""
Reproducible Brownian sampling
Keyed random substreams, free and pinned Brownian skeletons under the
kernel p_t(x, y) = (4πt)^(-d/2) exp(-|x - y|² / 4t), and walk-on-spheres.
"""
import hashlib
import json
import logging
import math
import pathlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from fklab.errors import ArgumentError
from fklab.geometry import DomainSpec, PrefractalBoundary
from fklab.parallel import map_chunks, pairwise_mean

logger = logging.getLogger(__name__)

GENERATOR_ID = "numpy.Philox4x64-10/sha256-key"
FIXTURE_SEED = 20240601
FIXTURE_LABELS = (("fixture", 0),)
FIXTURE_DRAWS = 4
DEFAULT_MAX_STEPS = 10 ** 5

Point = Union[Sequence[float], np.ndarray]
Ball = Tuple[Point, float]


@dataclass(frozen=True)
class RngKey:
    """Seed plus an ordered label path naming one independent substream."""
    seed: int
    labels: Tuple[Tuple[str, int], ...] = ()

    def child(self, name: str, index: int = 0) -> "RngKey":
        return RngKey(self.seed, self.labels + ((str(name), int(index)),))

    @property
    def key(self) -> int:
        payload = json.dumps([int(self.seed), [[n, i] for n, i in self.labels]], separators=(",", ":"))
        digest = hashlib.sha256(payload.encode("utf-8")).digest()
        return int.from_bytes(digest[:16], "little")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key))


def substream(seed: int, labels: Iterable[Tuple[str, int]] = ()) -> RngKey:
    return RngKey(int(seed), tuple((str(name), int(index)) for name, index in labels))


# --- reference fixture -------------------------------------------------------

def reference_uniforms() -> np.ndarray:
    return substream(FIXTURE_SEED, FIXTURE_LABELS).generator().random(FIXTURE_DRAWS)


def freeze_fixture(path: Union[str, pathlib.Path]) -> pathlib.Path:
    """Write the reference draws of the documented seed."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "generator": GENERATOR_ID,
        "seed": FIXTURE_SEED,
        "labels": [list(label) for label in FIXTURE_LABELS],
        "uniforms": [float(u) for u in reference_uniforms()],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
    return path


def verify_fixture(path: Union[str, pathlib.Path], freeze_missing: bool = False) -> bool:
    """
    Compare the generator against the committed reference draws.
    A missing fixture fails unless `freeze_missing` asks to write a new one.
    """
    path = pathlib.Path(path)
    if not path.exists():
        if not freeze_missing:
            logger.error("RNG fixture %s is missing", path)
            return False
        logger.warning("RNG fixture %s missing; freezing it from the current generator", path)
        freeze_fixture(path)
        return True
    try:
        with open(path) as f:
            payload = json.load(f)
        expected = [float(u) for u in payload["uniforms"]]
        generator = payload["generator"]
    except (ValueError, KeyError, TypeError) as exc:
        logger.error("RNG fixture %s is unreadable: %s", path, exc)
        return False
    if generator != GENERATOR_ID:
        logger.error("RNG fixture %s was made by %s, not %s", path, generator, GENERATOR_ID)
        return False
    return [float(u) for u in reference_uniforms()] == expected


def fixture_digest(path: Union[str, pathlib.Path]) -> str:
    path = pathlib.Path(path)
    if not path.exists():
        return "missing"
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- kernels ------------------------------------------------------------------

def transition_density(x: Point, y: Point, t: float, d: int = 2):
    """Heat kernel (4πt)^(-d/2) exp(-|x-y|²/4t); broadcasts over leading axes of y."""
    if not t > 0:
        raise ArgumentError(f"t must be positive, got {t}")
    diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    r2 = np.sum(diff * diff, axis=-1)
    value = (4.0 * math.pi * t) ** (-d / 2.0) * np.exp(-r2 / (4.0 * t))
    return float(value) if np.ndim(value) == 0 else value


def dirichlet_halfplane_density(x: Point, y: Point, t: float):
    """Kernel of the upper half-plane killed on {y = 0}, by the image method."""
    y = np.asarray(y, dtype=float)
    mirror = y * np.array([1.0, -1.0])
    value = transition_density(x, y, t) - transition_density(x, mirror, t)
    inside = (np.asarray(x, dtype=float)[..., 1] > 0) & (y[..., 1] > 0)
    value = np.where(inside, value, 0.0)
    return float(value) if np.ndim(value) == 0 else value


# --- paths ----------------------------------------------------------------------

@dataclass
class Path:
    """Brownian skeleton on a uniform time grid"""
    times: np.ndarray
    points: np.ndarray
    horizon: float

    @property
    def step(self) -> float:
        return self.horizon / (len(self.times) - 1)


@dataclass
class BridgePath(Path):
    start: np.ndarray = field(default_factory=lambda: np.zeros(2))
    end: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass
class PathBatch:
    """Many skeletons sharing one time grid; points has shape (n_paths, n_steps + 1, 2)."""
    times: np.ndarray
    points: np.ndarray
    horizon: float
    start: Optional[np.ndarray] = None
    end: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i: int) -> Path:
        if self.end is None:
            return Path(self.times, self.points[i], self.horizon)
        return BridgePath(self.times, self.points[i], self.horizon, self.start, self.end)


def _check_grid(horizon: float, n_steps: int):
    if not horizon > 0:
        raise ArgumentError(f"horizon must be positive, got {horizon}")
    if n_steps < 1:
        raise ArgumentError(f"n_steps must be at least 1, got {n_steps}")


def time_grid(horizon: float, n_steps: int) -> np.ndarray:
    return np.linspace(0.0, horizon, n_steps + 1)


def brownian_points(gen: np.random.Generator, x0: Point, horizon: float, n_steps: int, count: int) -> np.ndarray:
    """Free skeletons, per-coordinate increment variance 2h."""
    x0 = np.asarray(x0, dtype=float)
    h = horizon / n_steps
    steps = gen.standard_normal((count, n_steps, 2)) * math.sqrt(2.0 * h)
    points = np.empty((count, n_steps + 1, 2))
    points[:, 0] = x0
    np.cumsum(steps, axis=1, out=points[:, 1:])
    points[:, 1:] += x0
    return points


def bridge_points(gen: np.random.Generator, x: Point, y: Point, horizon: float, n_steps: int, count: int) -> np.ndarray:
    """
    Pinned skeletons by forward conditioning: from Y at remaining time τ,
    the next point is Gaussian with mean Y + (Δ/τ)(y - Y) and per-coordinate
    variance 2Δ(τ - Δ)/τ. The last point is set to y exactly.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    times = time_grid(horizon, n_steps)
    noise = gen.standard_normal((count, max(n_steps - 1, 0), 2))
    points = np.empty((count, n_steps + 1, 2))
    points[:, 0] = x
    current = np.repeat(x[None, :], count, axis=0)
    for k in range(n_steps - 1):
        remaining = horizon - times[k]
        dt = times[k + 1] - times[k]
        mean = current + (dt / remaining) * (y - current)
        current = mean + math.sqrt(2.0 * dt * (remaining - dt) / remaining) * noise[:, k]
        points[:, k + 1] = current
    points[:, -1] = y
    return points


def _path_chunk(key: RngKey, count: int, x0, horizon, n_steps):
    return brownian_points(key.generator(), x0, horizon, n_steps, count)


def _bridge_chunk(key: RngKey, count: int, x, y, horizon, n_steps):
    return bridge_points(key.generator(), x, y, horizon, n_steps, count)


def sample_paths(rng: RngKey, x0: Point, horizon: float, n_steps: int, n_paths: int, workers: int = 1) -> PathBatch:
    _check_grid(horizon, n_steps)
    points = map_chunks(_path_chunk, n_paths, rng, n_steps, workers,
                        x0=np.asarray(x0, dtype=float), horizon=horizon, n_steps=n_steps)
    return PathBatch(time_grid(horizon, n_steps), points, horizon)


def sample_bridges(rng: RngKey, x: Point, y: Point, horizon: float, n_steps: int, n_paths: int,
                   workers: int = 1) -> PathBatch:
    _check_grid(horizon, n_steps)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    points = map_chunks(_bridge_chunk, n_paths, rng, n_steps, workers,
                        x=x, y=y, horizon=horizon, n_steps=n_steps)
    return PathBatch(time_grid(horizon, n_steps), points, horizon, start=x, end=y)


def sample_path(rng: RngKey, x0: Point, horizon: float, n_steps: int) -> Path:
    return sample_paths(rng, x0, horizon, n_steps, 1)[0]


def sample_bridge(rng: RngKey, x: Point, y: Point, horizon: float, n_steps: int) -> BridgePath:
    return sample_bridges(rng, x, y, horizon, n_steps, 1)[0]


def write_path_csv(path: Path, filename: Union[str, pathlib.Path]) -> str:
    """Debug dump of one skeleton as time,x1,x2."""
    target = pathlib.Path(filename)
    target.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"time": path.times, "x1": path.points[:, 0], "x2": path.points[:, 1]})
    frame.to_csv(target, index=False)
    return str(target)


def chapman_kolmogorov_check(rng: RngKey, x: Point, y: Point, t: float, n_samples: int = 10 ** 5) -> Tuple[float, float]:
    """
    Monte Carlo value of ∫ p_{t/2}(x, z) p_{t/2}(z, y) dz with its standard
    error; compare against transition_density(x, y, t).
    """
    if not t > 0:
        raise ArgumentError(f"t must be positive, got {t}")
    gen = rng.generator()
    z = np.asarray(x, dtype=float) + gen.standard_normal((n_samples, 2)) * math.sqrt(t)
    values = transition_density(y, z, t / 2.0)
    return pairwise_mean(values), float(np.std(values, ddof=1) / math.sqrt(n_samples))


# --- walk on spheres ----------------------------------------------------------

class Outcome(IntEnum):
    HIT_BOUNDARY = 0
    HIT_TARGET = 1
    TIMEOUT = 2


def default_eps(boundary: PrefractalBoundary, start: Point, target: Optional[Ball] = None) -> float:
    """1e-4 of the problem scale: the diameter, capped near a close target."""
    scale = boundary.diameter
    if target is not None:
        center = np.asarray(target[0], dtype=float)
        scale = min(scale, 4.0 * float(np.hypot(*(np.asarray(start, dtype=float) - center))))
    return 1e-4 * scale


def _enclosing_circle(boundary: PrefractalBoundary, center, radius) -> Tuple[np.ndarray, float]:
    lower, upper = boundary.bounds
    if center is not None:
        lower = np.minimum(lower, center - radius)
        upper = np.maximum(upper, center + radius)
    mid = 0.5 * (lower + upper)
    return mid, 1.01 * 0.5 * float(np.hypot(*(upper - lower))) + 1e-9


def _return_from_far(gen: np.random.Generator, p: np.ndarray, mid: np.ndarray, rho: float) -> np.ndarray:
    """
    First hitting point on the circle |z - mid| = rho for walkers outside it.
    The exterior Poisson kernel equals the interior one at the inverted point,
    which is the image of a uniform angle under a disk automorphism.
    """
    rel = (p[:, 0] - mid[0]) + 1j * (p[:, 1] - mid[1])
    inner = rho / np.conj(rel)
    u = np.exp(1j * gen.uniform(0.0, 2.0 * math.pi, size=len(rel)))
    hit = rho * (u + inner) / (1.0 + np.conj(inner) * u)
    return np.column_stack([mid[0] + hit.real, mid[1] + hit.imag])


def _wos_chunk(key: RngKey, count: int, boundary, start, center, radius, eps, max_steps):
    gen = key.generator()
    pos = np.repeat(start[None, :], count, axis=0)
    outcome = np.full(count, int(Outcome.TIMEOUT), dtype=np.int8)
    active = np.arange(count)
    mid, rho = _enclosing_circle(boundary, center, radius)
    for _ in range(max_steps):
        if not active.size:
            break
        p = pos[active]
        # walkers far outside everything return to the enclosing circle in one jump
        far = np.hypot(p[:, 0] - mid[0], p[:, 1] - mid[1]) > 2.0 * rho
        if far.any():
            p[far] = _return_from_far(gen, p[far], mid, rho)
        if center is None:
            to_target = np.full(len(p), np.inf)
            d_k = boundary.distances(p)
        else:
            to_target = np.hypot(p[:, 0] - center[0], p[:, 1] - center[1]) - radius
            d_k = boundary.distances(p, limit=float(to_target.max()))
        absorbed = d_k <= eps
        reached = ~absorbed & (to_target <= eps)
        outcome[active[absorbed]] = int(Outcome.HIT_BOUNDARY)
        outcome[active[reached]] = int(Outcome.HIT_TARGET)
        moving = ~(absorbed | reached)
        jump = np.minimum(d_k, to_target)[moving]
        angle = gen.uniform(0.0, 2.0 * math.pi, size=len(jump))
        active = active[moving]
        pos[active] = p[moving] + jump[:, None] * np.column_stack([np.cos(angle), np.sin(angle)])
    return outcome


def walk_on_spheres_batch(
    rng: RngKey,
    domain: DomainSpec,
    start: Point,
    target_ball: Optional[Ball],
    eps: Optional[float] = None,
    max_steps: int = DEFAULT_MAX_STEPS,
    n_walks: int = 1,
    workers: int = 1,
) -> np.ndarray:
    """
    Outcome codes of `n_walks` independent walks. Each step jumps to a
    uniform point on the largest circle around the walker that touches
    neither K nor the target ball. Walkers beyond twice the enclosing
    radius are returned to the enclosing circle by its exterior Poisson
    kernel, so planar exterior walks do not run out of steps.
    """
    boundary = domain.boundary
    start = np.asarray(start, dtype=float)
    if eps is None:
        eps = default_eps(boundary, start, target_ball)
    center, radius = None, 0.0
    if target_ball is not None:
        center = np.asarray(target_ball[0], dtype=float)
        radius = float(target_ball[1])
        if not eps < radius:
            raise ArgumentError(f"eps {eps:.3g} must be below the target radius {radius:.3g}")
        if np.hypot(*(start - center)) <= radius:
            raise ArgumentError("start lies inside the target ball")
    if not eps > 0:
        raise ArgumentError(f"eps must be positive, got {eps}")
    if boundary.distances(start[None, :])[0] <= 0.0:
        raise ArgumentError("start lies on the boundary")
    # chunk size keyed on a nominal walk length
    return map_chunks(_wos_chunk, n_walks, rng, 255, workers, boundary=boundary, start=start,
                      center=center, radius=radius, eps=eps, max_steps=max_steps)


def walk_on_spheres(
    rng: RngKey,
    domain: DomainSpec,
    start: Point,
    target_ball: Optional[Ball],
    eps: Optional[float] = None,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> Outcome:
    return Outcome(int(walk_on_spheres_batch(rng, domain, start, target_ball, eps, max_steps, 1)[0]))
