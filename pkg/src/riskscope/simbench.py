"""Stochastic planar robot benchmark.

A robot starts in the input box and moves for a fixed horizon.  Each step it
draws a heading from the rule of the area it is in, travels
``base_speed + U[0, speed_noise]``, and if that would hit a wall or obstacle it
takes the nearest collision-free heading instead.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

from .dlgp import RobustnessLevels
from .lgp import Grid, make_grid
from .numerics import make_rng
from .stl import Signal, parse, robustness_batch

__all__ = [
    "InvalidState",
    "DegenerateTruth",
    "Rect",
    "World",
    "SimConfig",
    "LabeledDataset",
    "TruthField",
    "default_world",
    "default_formula",
    "clip_input",
    "sample_inputs",
    "sample_input",
    "direction_rule",
    "step_batch",
    "step",
    "simulate_batch",
    "simulate",
    "generate_dataset",
    "truth_from_samples",
    "build_truth_proxy",
]

TRUTH_SCHEMA = "riskscope.truth/1"

# sub-stream ids for make_rng
STREAM_DATA = 11
STREAM_TRUTH = 12


class InvalidState(ValueError):
    pass


class DegenerateTruth(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate rectangle {self}")

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p)
        return ((p[..., 0] >= self.x0) & (p[..., 0] <= self.x1)
                & (p[..., 1] >= self.y0) & (p[..., 1] <= self.y1))

    def interior(self, p) -> np.ndarray:
        p = np.asarray(p)
        return ((p[..., 0] > self.x0) & (p[..., 0] < self.x1)
                & (p[..., 1] > self.y0) & (p[..., 1] < self.y1))


@dataclass(frozen=True)
class World:
    region: Rect
    goal: tuple
    obstacles: tuple  # ((name, Rect), ...)
    areas: tuple  # ((name, Rect), ...) in lookup order
    version: int = 1

    @classmethod
    def parse(cls, text: str) -> "World":
        fields = {"obstacles": [], "areas": []}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            nums = [float(v) for v in value.split()]
            parts = key.split()
            if parts[0] == "version":
                fields["version"] = int(nums[0])
            elif parts[0] == "region":
                fields["region"] = Rect(*nums)
            elif parts[0] == "goal":
                fields["goal"] = tuple(nums)
            elif parts[0] in ("obstacle", "area") and len(parts) == 2:
                fields[parts[0] + "s"].append((parts[1], Rect(*nums)))
            else:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
        if fields.get("version") != 1:
            raise ValueError("unsupported world version")
        world = cls(fields["region"], fields["goal"], tuple(fields["obstacles"]),
                    tuple(fields["areas"]), fields["version"])
        unknown = {name for name, _ in world.areas} - set(_RULES)
        if unknown:
            raise ValueError(f"areas without a motion rule: {sorted(unknown)}")
        return world

    @classmethod
    def load(cls, path) -> "World":
        return cls.parse(Path(path).read_text())

    def canonical(self) -> str:
        r = self.region
        lines = [f"version = {self.version}", f"region = {r.x0!r} {r.y0!r} {r.x1!r} {r.y1!r}",
                 f"goal = {' '.join(repr(float(g)) for g in self.goal)}"]
        for kind, items in (("obstacle", self.obstacles), ("area", self.areas)):
            for name, q in items:
                lines.append(f"{kind} {name} = {q.x0!r} {q.y0!r} {q.x1!r} {q.y1!r}")
        return "\n".join(lines) + "\n"

    @property
    def geometry_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def in_obstacle(self, p) -> np.ndarray:
        p = np.asarray(p)
        out = np.zeros(p.shape[:-1], dtype=bool)
        for _, r in self.obstacles:
            out |= r.interior(p)
        return out

    def free(self, p) -> np.ndarray:
        return self.region.contains(p) & ~self.in_obstacle(p)

    def area_index(self, p) -> np.ndarray:
        """Index into ``areas`` of the first rectangle containing each point.

        Points covered by no area (e.g. the outer edge of an obstacle lying on
        the region boundary) take the nearest area.
        """
        p = np.asarray(p)
        idx = np.full(p.shape[:-1], -1, dtype=int)
        for k, (_, r) in enumerate(self.areas):
            idx = np.where((idx < 0) & r.contains(p), k, idx)
        miss = idx < 0
        if miss.any():
            q = p[miss]
            dist = np.stack([np.hypot(np.clip(q[..., 0], r.x0, r.x1) - q[..., 0],
                                      np.clip(q[..., 1], r.y0, r.y1) - q[..., 1])
                             for _, r in self.areas], axis=-1)
            idx[miss] = np.argmin(dist, axis=-1)
        return idx

    def area_name(self, p) -> str:
        k = int(self.area_index(np.asarray(p, dtype=float)))
        return self.areas[k][0] if k >= 0 else ""


def default_world() -> World:
    return World.parse(resources.files("riskscope").joinpath("data/world_default.txt").read_text())


def default_formula():
    return parse(resources.files("riskscope").joinpath("data/reach_goal.stl").read_text())


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    horizon: float = 10.0
    base_speed: float = 0.3
    speed_noise: float = 0.5
    input_region: tuple = ((0.0, 10.0), (0.0, 10.0))
    # "printed": sigma(x) = 1/(1+exp(x)); "conventional": 1/(1+exp(-x))
    sigmoid: str = "printed"
    angle_step: float = 15.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError("horizon must be a multiple of dt")
        if self.sigmoid not in ("printed", "conventional"):
            raise ValueError("sigmoid must be 'printed' or 'conventional'")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def sigma(self, x):
        return expit(-x) if self.sigmoid == "printed" else expit(x)


# --- motion rules -----------------------------------------------------------
# Each rule maps (positions, uniforms, config) -> (heading in degrees, stay mask).


def _rule_a(p, u, cfg):
    up = u < cfg.sigma(p[:, 0] - p[:, 1])
    return np.where(up, 90.0, 0.0), np.zeros(len(p), dtype=bool)


def _rule_b(p, u, cfg):
    upper = u < cfg.sigma(5.0 - p[:, 1])
    return np.where(upper, 60.0, -60.0), np.zeros(len(p), dtype=bool)


def _rule_c(p, u, cfg):
    return np.zeros(len(p)), u >= 0.3


def _rule_d(p, u, cfg):
    return np.full(len(p), 30.0), np.zeros(len(p), dtype=bool)


def _rule_e(p, u, cfg):
    return np.zeros(len(p)), u >= 0.9


def _rule_f(p, u, cfg):
    return np.zeros(len(p)), np.zeros(len(p), dtype=bool)


def _rule_g(p, u, cfg):
    return np.full(len(p), -90.0), np.zeros(len(p), dtype=bool)


_RULES = {"A": _rule_a, "B": _rule_b, "C": _rule_c, "D": _rule_d,
          "E": _rule_e, "F": _rule_f, "G": _rule_g}


def direction_rule(world: World, positions, u, config: SimConfig = SimConfig()):
    """Heading (degrees) and stay flag for each robot given uniforms ``u``."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any(~world.free(positions)):
        raise InvalidState("robot position is outside the free space")
    area = world.area_index(positions)
    heading = np.zeros(len(positions))
    stay = np.zeros(len(positions), dtype=bool)
    for k, (name, _) in enumerate(world.areas):
        sel = area == k
        if sel.any():
            h, s = _RULES[name](positions[sel], u[sel], config)
            heading[sel] = h
            stay[sel] = s
    return heading, stay


def _offsets(step_deg):
    # 0, -s, +s, -2s, +2s, ..., 180: nearest first, clockwise (negative) first on ties
    out = [0.0]
    n = int(round(180.0 / step_deg))
    for k in range(1, n):
        out += [-k * step_deg, k * step_deg]
    out.append(180.0)
    return out


_SEGMENT_FRACTIONS = np.array([0.25, 0.5, 0.75, 1.0])


def _segment_free(world, start, end):
    pts = start[:, None, :] + _SEGMENT_FRACTIONS[None, :, None] * (end - start)[:, None, :]
    return np.all(world.free(pts), axis=1)


def step_batch(positions, rng, world: World, config: SimConfig = SimConfig()) -> np.ndarray:
    """Advance every robot by one time step."""
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    n = len(pos)
    u = rng.random(n)
    dist = config.base_speed + rng.uniform(0.0, config.speed_noise, n)
    heading, stay = direction_rule(world, pos, u, config)
    out = pos.copy()
    pending = ~stay
    for off in _offsets(config.angle_step):
        if not pending.any():
            break
        idx = np.flatnonzero(pending)
        ang = np.deg2rad(heading[idx] + off)
        target = pos[idx] + dist[idx, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        ok = _segment_free(world, pos[idx], target)
        out[idx[ok]] = target[ok]
        pending[idx[ok]] = False
    return out


def step(position, rng, world: World, config: SimConfig = SimConfig()) -> np.ndarray:
    return step_batch(np.asarray(position, dtype=float)[None], rng, world, config)[0]


def simulate_batch(starts, rng, world: World, config: SimConfig = SimConfig()) -> np.ndarray:
    """Trajectories of shape (B, n_steps + 1, 2); the first sample is the start."""
    pos = np.atleast_2d(np.asarray(starts, dtype=float))
    if np.any(~world.free(pos)):
        raise InvalidState("start position is outside the free space")
    traj = np.empty((len(pos), config.n_steps + 1, 2))
    traj[:, 0] = pos
    for t in range(1, config.n_steps + 1):
        pos = step_batch(pos, rng, world, config)
        traj[:, t] = pos
    return traj


def simulate(x, rng, world: World, config: SimConfig = SimConfig()) -> Signal:
    return Signal(config.times, simulate_batch(np.asarray(x, dtype=float)[None], rng, world, config)[0])


# --- inputs -----------------------------------------------------------------

MIXTURE_MEANS = np.array([[1.0, 5.0], [5.0, 1.0]])
MIXTURE_VARS = np.array([[2.0, 10.0], [10.0, 2.0]])


def clip_input(raw, config: SimConfig = SimConfig()) -> np.ndarray:
    lo = np.array([r[0] for r in config.input_region])
    hi = np.array([r[1] for r in config.input_region])
    return np.clip(np.asarray(raw, dtype=float), lo, hi)


def sample_inputs(n: int, rng, config: SimConfig = SimConfig()) -> np.ndarray:
    """Equal-weight mixture of two axis-aligned Gaussians, clipped to the box."""
    comp = (rng.random(n) >= 0.5).astype(int)
    z = rng.standard_normal((n, 2))
    raw = MIXTURE_MEANS[comp] + np.sqrt(MIXTURE_VARS[comp]) * z
    return clip_input(raw, config)


def sample_input(rng, config: SimConfig = SimConfig()) -> np.ndarray:
    return sample_inputs(1, rng, config)[0]


# --- datasets ---------------------------------------------------------------


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # (N, d)
    rho: np.ndarray  # (N,)
    labels: np.ndarray  # (N,) 0-based level indices
    levels: RobustnessLevels

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(len(self.rho), -1)
        self.rho = np.asarray(self.rho, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if not (len(self.inputs) == len(self.rho) == len(self.labels)):
            raise ValueError("inputs, rho and labels must have equal length")
        if len(self.rho) and not np.array_equal(self.labels, self.levels.classify(self.rho)):
            raise ValueError("labels are inconsistent with the robustness levels")

    def __len__(self):
        return len(self.rho)

    def level_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.levels.m)

    def to_csv(self, path) -> None:
        """Header ``x0,x1,...,rho,level``; levels are written 1-based."""
        d = self.inputs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{k}" for k in range(d)] + ["rho", "level"])
            for x, r, l in zip(self.inputs, self.rho, self.labels):
                w.writerow([f"{v:.17g}" for v in x] + [f"{r:.17g}", int(l) + 1])

    @classmethod
    def from_csv(cls, path, levels: RobustnessLevels) -> "LabeledDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        xcols = [i for i, h in enumerate(header) if h.startswith("x")]
        ri, li = header.index("rho"), header.index("level")
        inputs = np.array([[float(r[i]) for i in xcols] for r in body]).reshape(len(body), len(xcols))
        rho = np.array([float(r[ri]) for r in body])
        labels = np.array([int(r[li]) - 1 for r in body], dtype=int)
        return cls(inputs, rho, labels, levels)


def generate_dataset(n: int, levels: RobustnessLevels, phi, rng, world: World | None = None,
                     config: SimConfig = SimConfig()) -> LabeledDataset:
    if n < 1:
        raise ValueError("need at least one input")
    world = default_world() if world is None else world
    inputs = sample_inputs(n, rng, config)
    traj = simulate_batch(inputs, rng, world, config)
    rho = robustness_batch(phi, config.times, traj)
    return LabeledDataset(inputs, rho, levels.classify(rho), levels)


# --- truth proxy ------------------------------------------------------------


@dataclass
class TruthField:
    grid: Grid
    pi: np.ndarray  # (K, m)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema": TRUTH_SCHEMA, "grid": self.grid.to_dict(), "meta": self.meta,
                "pi": self.pi.tolist()}

    @classmethod
    def from_dict(cls, d) -> "TruthField":
        if d.get("schema") != TRUTH_SCHEMA:
            raise ValueError("not a serialized truth field")
        return cls(Grid.from_dict(d["grid"]), np.asarray(d["pi"]), d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TruthField":
        return cls.from_dict(json.loads(Path(path).read_text()))


def truth_from_samples(inputs, labels, m: int, points, bandwidth: float,
                       chunk: int = 16) -> np.ndarray:
    """Ratio of level-weighted Gaussian KDEs at ``points``.

    ``N_l * kde_l(x)`` is the unnormalised kernel sum over level-l samples, so
    the ratio reduces to per-level kernel-weight shares (computed in log space
    because a narrow bandwidth underflows).
    """
    inputs = np.asarray(inputs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    points = np.atleast_2d(points)
    counts = np.bincount(labels, minlength=m)
    if np.any(counts == 0):
        raise DegenerateTruth(f"levels without samples: {np.flatnonzero(counts == 0).tolist()}")
    out = np.empty((len(points), m))
    groups = [inputs[labels == l] for l in range(m)]
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        logs = np.empty((len(p), m))
        for l, g in enumerate(groups):
            d2 = np.sum((p[:, None, :] - g[None, :, :]) ** 2, axis=-1)
            logs[:, l] = logsumexp(-0.5 * d2 / bandwidth**2, axis=1)
        logs -= logs.max(axis=1, keepdims=True)
        w = np.exp(logs)
        out[s:s + chunk] = w / w.sum(axis=1, keepdims=True)
    return out


def build_truth_proxy(M: int, bandwidth: float, levels: RobustnessLevels, phi, seed: int,
                      grid: Grid | None = None, world: World | None = None,
                      config: SimConfig = SimConfig(), cache_dir=None) -> TruthField:
    """High-sample truth proxy on the grid centres from ``M`` uniform starts.

    With ``cache_dir`` the result is stored under a key built from the seed,
    M, bandwidth, levels, formula, grid, world geometry and dynamics config.
    """
    world = default_world() if world is None else world
    grid = make_grid(config.input_region, 0.5) if grid is None else grid
    meta = {"M": int(M), "bandwidth": float(bandwidth), "seed": int(seed),
            "levels": list(levels.boundaries), "formula": str(phi),
            "geometry": world.geometry_hash, "config": _config_dict(config)}
    path = None
    if cache_dir is not None:
        key = hashlib.sha256(json.dumps([meta, grid.to_dict()], sort_keys=True).encode())
        path = Path(cache_dir) / f"truth-{key.hexdigest()[:20]}.json"
        if path.exists():
            return TruthField.load(path)
    rng = make_rng(seed, STREAM_TRUTH)
    lo = np.array([r[0] for r in config.input_region])
    hi = np.array([r[1] for r in config.input_region])
    starts = lo + (hi - lo) * rng.random((M, len(lo)))
    traj = simulate_batch(starts, rng, world, config)
    labels = levels.classify(robustness_batch(phi, config.times, traj))
    meta["level_counts"] = np.bincount(labels, minlength=levels.m).tolist()
    pi = truth_from_samples(starts, labels, levels.m, grid.centers, bandwidth)
    truth = TruthField(grid, pi, meta)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        truth.save(path)
    return truth


def _config_dict(config: SimConfig) -> dict:
    d = asdict(config)
    d["input_region"] = [list(r) for r in config.input_region]
    return d
