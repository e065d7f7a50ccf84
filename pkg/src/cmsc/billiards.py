"""Frictionless billiard worlds: sampling, elastic dynamics, rasterization.

Worlds are immutable values. A step advances every ball by its velocity,
then resolves wall and ball-ball contacts; walls reflect the normal
velocity component and mirror any penetration back inside, equal-mass
ball pairs exchange the velocity component along their center line. Both
resolutions preserve kinetic energy, so a trajectory's energy is constant
up to float rounding.

Rasterization draws the table border as the outermost pixel ring and each
ball as a one-pixel ring: the pixels whose distance from the rounded ball
center rounds to the ball radius (distance in [r-0.5, r+0.5)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .tensor import SeededRng


class SimulationError(RuntimeError):
    """World sampling could not satisfy its constraints within budget."""


@dataclass(frozen=True)
class Ball:
    x: float
    y: float
    vx: float
    vy: float
    radius: float


@dataclass(frozen=True)
class BilliardWorld:
    side: int
    balls: Tuple[Ball, ...]


class StepEvents(NamedTuple):
    wall_collisions: int
    ball_collisions: int


@dataclass
class SimConfig:
    side_choices: Sequence[int] = (96, 128, 160, 192, 256)
    velocity_range: int = 3
    radius: float = 13.0
    n_balls: int = 1
    wall_band_bias: float = 0.5
    wall_band: float = 40.0
    max_wall_collisions: Optional[int] = 2
    max_frames: Optional[int] = 64
    min_frames: int = 0
    allow_zero_velocity: bool = False
    spawn_budget: int = 10_000

    def __post_init__(self):
        if self.velocity_range < 1 and not self.allow_zero_velocity:
            raise ValueError("velocity range is empty once (0,0) is excluded")
        if self.max_wall_collisions is None and self.max_frames is None:
            raise ValueError("need a wall-collision or frame-count termination rule")


def preset_config(name, n_balls=1, seedless=True, **overrides):
    """Named generation presets.

    ``paper``: sides {96..256}, radius 13, velocities in [-3,3]^2; single
    ball sequences stop after two wall collisions (hard cap 64 frames),
    multi-ball sequences run to 200 frames.
    ``desk``: one 64px table, radius 6, velocities in [-2,2]^2, sized so a
    full train/evaluate cycle fits on one CPU core.
    """
    if name == "paper":
        cfg = SimConfig(n_balls=n_balls)
        if n_balls > 1:
            cfg.max_wall_collisions = None
            cfg.max_frames = 200
    elif name == "desk":
        cfg = SimConfig(side_choices=(64,), velocity_range=2, radius=6.0, n_balls=n_balls)
        if n_balls > 1:
            cfg.max_wall_collisions = None
            cfg.max_frames = 200
    else:
        raise ValueError(f"unknown preset {name!r}")
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown SimConfig field {key!r}")
        setattr(cfg, key, value)
    return cfg


def kinetic_energy(world):
    """Sum of squared speeds (unit masses)."""
    return sum(b.vx * b.vx + b.vy * b.vy for b in world.balls)


def _draw_velocity(cfg, rng):
    v = cfg.velocity_range
    while True:
        vx = int(rng.integers(-v, v))
        vy = int(rng.integers(-v, v))
        if cfg.allow_zero_velocity or vx or vy:
            return float(vx), float(vy)


def _draw_position(cfg, rng, side):
    lo, hi = cfg.radius, side - cfg.radius
    if hi < lo:
        raise SimulationError(f"ball radius {cfg.radius} does not fit side {side}")
    in_band_possible = cfg.radius <= cfg.wall_band
    use_band = in_band_possible and rng.uniform(0.0, 1.0) < cfg.wall_band_bias
    for _ in range(10_000):
        x = rng.uniform(lo, hi)
        y = rng.uniform(lo, hi)
        if not use_band:
            return x, y
        if min(x, y, side - x, side - y) <= cfg.wall_band:
            return x, y
    return x, y  # band fills the table for every supported geometry


def sample_world(cfg, rng):
    """Draw a world: uniform side, integer velocities, rejection-sampled positions.

    Placement restarts from scratch whenever two balls overlap; exceeding
    the spawn budget (overcrowded configurations) raises SimulationError.
    """
    side = int(rng.choice(list(cfg.side_choices)))
    for _ in range(cfg.spawn_budget):
        positions = []
        ok = True
        for _ in range(cfg.n_balls):
            x, y = _draw_position(cfg, rng, side)
            if any((x - px) ** 2 + (y - py) ** 2 < (2 * cfg.radius) ** 2 for px, py in positions):
                ok = False
                break
            positions.append((x, y))
        if ok:
            balls = tuple(
                Ball(x, y, *_draw_velocity(cfg, rng), cfg.radius) for x, y in positions
            )
            return BilliardWorld(side=side, balls=balls)
    raise SimulationError(
        f"could not place {cfg.n_balls} balls of radius {cfg.radius} on side {side} "
        f"within {cfg.spawn_budget} attempts"
    )


def _reflect_walls(side, ball):
    x, y, vx, vy = ball.x, ball.y, ball.vx, ball.vy
    r = ball.radius
    hits = 0
    if x < r:
        x = 2 * r - x
        if vx < 0:
            vx = -vx
        hits += 1
    elif x > side - r:
        x = 2 * (side - r) - x
        if vx > 0:
            vx = -vx
        hits += 1
    if y < r:
        y = 2 * r - y
        if vy < 0:
            vy = -vy
        hits += 1
    elif y > side - r:
        y = 2 * (side - r) - y
        if vy > 0:
            vy = -vy
        hits += 1
    if hits:
        return Ball(x, y, vx, vy, r), hits
    return ball, 0


def step(world):
    """Advance one frame; returns (new world, collision event counts)."""
    balls = [replace(b, x=b.x + b.vx, y=b.y + b.vy) for b in world.balls]
    wall_hits = 0
    ball_hits = 0
    for _ in range(8):
        changed = False
        for i, b in enumerate(balls):
            nb, hits = _reflect_walls(world.side, b)
            if hits:
                balls[i] = nb
                wall_hits += hits
                changed = True
        for i in range(len(balls)):
            for j in range(i + 1, len(balls)):
                bi, bj = balls[i], balls[j]
                dx, dy = bi.x - bj.x, bi.y - bj.y
                dist = math.hypot(dx, dy)
                min_dist = bi.radius + bj.radius
                if dist >= min_dist:
                    continue
                changed = True
                if dist == 0.0:
                    nx, ny = 1.0, 0.0
                else:
                    nx, ny = dx / dist, dy / dist
                rel = (bi.vx - bj.vx) * nx + (bi.vy - bj.vy) * ny
                if rel < 0:  # approaching: exchange the normal components
                    ball_hits += 1
                    impulse_x, impulse_y = rel * nx, rel * ny
                    bi = replace(bi, vx=bi.vx - impulse_x, vy=bi.vy - impulse_y)
                    bj = replace(bj, vx=bj.vx + impulse_x, vy=bj.vy + impulse_y)
                push = (min_dist - dist) / 2
                bi = replace(bi, x=bi.x + nx * push, y=bi.y + ny * push)
                bj = replace(bj, x=bj.x - nx * push, y=bj.y - ny * push)
                balls[i], balls[j] = bi, bj
        if not changed:
            break
    return BilliardWorld(world.side, tuple(balls)), StepEvents(wall_hits, ball_hits)


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def rasterize(world):
    """Render the border ring and ball rings as a binary float32 image."""
    side = world.side
    img = np.zeros((side, side), dtype=np.float32)
    img[0, :] = img[-1, :] = 1.0
    img[:, 0] = img[:, -1] = 1.0
    for b in world.balls:
        cx, cy = _round_half_up(b.x), _round_half_up(b.y)
        r = b.radius
        span = int(math.ceil(r)) + 1
        y0, y1 = max(0, cy - span), min(side, cy + span + 1)
        x0, x1 = max(0, cx - span), min(side, cx + span + 1)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        dist = np.hypot(xs - cx, ys - cy)
        ring = (dist >= r - 0.5) & (dist < r + 0.5)
        img[y0:y1, x0:x1][ring] = 1.0
    return img


def strip_border(image):
    """Zero the outermost pixel ring (removes the rasterized table border)."""
    out = np.array(image, copy=True)
    out[0, :] = out[-1, :] = 0
    out[:, 0] = out[:, -1] = 0
    return out


def sample_sequence(cfg, rng):
    """Sample a world and roll it forward, rasterizing every frame.

    Stops once the configured wall-collision budget is spent (but not
    before ``min_frames``), or at the ``max_frames`` hard cap. Returns the
    frame stack (L, side, side) and the world trajectory.
    """
    world = sample_world(cfg, rng)
    frames = [rasterize(world)]
    worlds = [world]
    wall_events = 0
    while True:
        if cfg.max_frames is not None and len(frames) >= cfg.max_frames:
            break
        world, events = step(world)
        frames.append(rasterize(world))
        worlds.append(world)
        wall_events += events.wall_collisions
        collision_done = (
            cfg.max_wall_collisions is not None and wall_events >= cfg.max_wall_collisions
        )
        if collision_done and len(frames) >= cfg.min_frames:
            break
    return np.stack(frames), worlds


def generate_sequences(cfg, seed, count):
    """Deterministic dataset: sequence i always comes from RNG child i."""
    streams = SeededRng(seed).split(count)
    return [sample_sequence(cfg, streams[i]) for i in range(count)]
