"""Procedural labeled point-cloud scenes: a floor plus box, sphere and panel primitives."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import InvalidConfig

PRIMITIVES = ("box", "sphere", "plane")
FLOOR_MARGIN = 0.1  # no floor points this close to an object footprint
OBJECT_GAP = 0.2
LAYOUT_ATTEMPTS = 50


class Scene(NamedTuple):
    points: np.ndarray  # (N, 3) float64, metres
    labels: np.ndarray  # (N,) int64; 0 is the floor


@dataclass
class SceneConfig:
    num_points: int = 4800
    num_classes: int = 3
    extent: float = 1.4
    mix: dict = field(default_factory=lambda: {"box": 1.0, "sphere": 1.0, "plane": 0.0})
    noise_sigma: float = 0.005
    seed: int = 0
    num_objects: int = 4

    def active_types(self) -> list:
        return [p for p in PRIMITIVES if self.mix.get(p, 0.0) > 0]

    def validate(self) -> "SceneConfig":
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be at least 2")
        unknown = set(self.mix) - set(PRIMITIVES)
        if unknown:
            raise InvalidConfig(f"unknown primitive types {sorted(unknown)}")
        weights = [self.mix.get(p, 0.0) for p in PRIMITIVES]
        if any(w < 0 or not np.isfinite(w) for w in weights) or sum(weights) <= 0:
            raise InvalidConfig("primitive weights must be non-negative and not all zero")
        if self.num_classes - 1 > len(self.active_types()):
            raise InvalidConfig(
                f"{self.num_classes} classes need {self.num_classes - 1} primitive types with nonzero weight"
            )
        if self.num_objects < self.num_classes - 1:
            raise InvalidConfig("num_objects must cover every primitive class")
        if self.num_points < 10 * self.num_classes:
            raise InvalidConfig("num_points too small for the requested classes")
        if self.extent <= 0.8:
            raise InvalidConfig("extent must exceed 0.8 m")
        if self.noise_sigma < 0:
            raise InvalidConfig("noise_sigma must be non-negative")
        return self

    def class_types(self) -> list:
        """Primitive type of labels 1..num_classes-1."""
        return self.active_types()[: self.num_classes - 1]


# -- primitive surface samplers; each returns points and a 2D footprint radius --


def _box(rng, n, centre):
    sx, sy, sz = rng.uniform(0.2, 0.4, size=3)
    faces = [  # (area, sampler) for the five visible faces
        (sx * sy, lambda m: np.c_[rng.uniform(-sx / 2, sx / 2, m), rng.uniform(-sy / 2, sy / 2, m), np.full(m, sz)]),
        (sx * sz, lambda m: np.c_[rng.uniform(-sx / 2, sx / 2, m), np.full(m, -sy / 2), rng.uniform(0, sz, m)]),
        (sx * sz, lambda m: np.c_[rng.uniform(-sx / 2, sx / 2, m), np.full(m, sy / 2), rng.uniform(0, sz, m)]),
        (sy * sz, lambda m: np.c_[np.full(m, -sx / 2), rng.uniform(-sy / 2, sy / 2, m), rng.uniform(0, sz, m)]),
        (sy * sz, lambda m: np.c_[np.full(m, sx / 2), rng.uniform(-sy / 2, sy / 2, m), rng.uniform(0, sz, m)]),
    ]
    area = np.array([a for a, _ in faces])
    counts = rng.multinomial(n, area / area.sum())
    pts = np.concatenate([f(m) for (_, f), m in zip(faces, counts)])
    return pts + [centre[0], centre[1], 0.0], float(np.hypot(sx, sy) / 2)


def _sphere(rng, n, centre):
    r = rng.uniform(0.12, 0.22)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * r + [centre[0], centre[1], r], float(r)


def _plane(rng, n, centre):
    """A free-standing vertical panel with a random heading."""
    w, h = rng.uniform(0.25, 0.45), rng.uniform(0.3, 0.5)
    theta = rng.uniform(0, np.pi)
    u = rng.uniform(-w / 2, w / 2, n)
    z = rng.uniform(0.05, 0.05 + h, n)
    pts = np.c_[centre[0] + u * np.cos(theta), centre[1] + u * np.sin(theta), z]
    return pts, float(w / 2)


_SAMPLERS = {"box": _box, "sphere": _sphere, "plane": _plane}
_AREA_HINT = {"box": 0.35, "sphere": 0.35, "plane": 0.14}


def _place(rng, radius, placed, extent):
    for _ in range(200):
        c = rng.uniform(radius + 0.05, extent - radius - 0.05, size=2)
        if all(np.hypot(*(c - p)) > radius + r + OBJECT_GAP for p, r in placed):
            return c
    return None


def _layout(rng, types, kinds, density, extent):
    """Sample and place every object; None if a mandatory one does not fit."""
    pts, labels, placed = [], [], []
    for i, k in enumerate(kinds):
        kind = types[k]
        n = max(20, int(round(density * _AREA_HINT[kind])))
        # draw the shape first so its footprint is known, then translate
        shape_rng = np.random.default_rng(rng.integers(2**63))
        local, radius = _SAMPLERS[kind](shape_rng, n, (0.0, 0.0))
        centre = _place(rng, radius, placed, extent)
        if centre is None:
            if i < len(types):
                return None
            continue
        placed.append((centre, radius))
        pts.append(local + [centre[0], centre[1], 0.0])
        labels.append(np.full(len(local), k + 1, dtype=np.int64))
    return pts, labels, placed


def _truncated_noise(rng, sigma, shape):
    """Gaussian noise with draws beyond 3 sigma redrawn."""
    noise = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(noise) > 3 * sigma
    while bad.any():
        noise[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(noise) > 3 * sigma
    return noise


def generate_scene(config: SceneConfig) -> Scene:
    """Sample one scene; deterministic under ``config.seed``.

    Label 0 is the floor, labels 1.. follow ``config.class_types()``. Every
    class receives at least one object, further objects are drawn from the
    primitive mix restricted to those types.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    types = config.class_types()
    weights = np.array([config.mix[t] for t in types], dtype=np.float64)
    kinds = list(range(len(types)))
    extra = rng.choice(len(types), size=config.num_objects - len(types), p=weights / weights.sum())
    kinds += [int(k) for k in extra]

    floor_area = config.extent**2
    density = config.num_points / (floor_area + sum(_AREA_HINT[types[k]] for k in kinds))
    for _ in range(LAYOUT_ATTEMPTS):
        layout = _layout(rng, types, kinds, density, config.extent)
        if layout is not None:
            break
    else:
        raise InvalidConfig("extent too small to place one object of every class")
    pts, labels, placed = layout

    # floor points under an object footprint are rejected and redrawn
    n_floor = max(config.num_points - sum(len(p) for p in pts), 10)
    floor = np.zeros((0, 2))
    for _ in range(100):
        if len(floor) >= n_floor:
            break
        cand = rng.uniform(0, config.extent, size=(2 * (n_floor - len(floor)), 2))
        keep = np.ones(len(cand), dtype=bool)
        for c, r in placed:
            keep &= np.hypot(cand[:, 0] - c[0], cand[:, 1] - c[1]) > r + FLOOR_MARGIN
        floor = np.vstack([floor, cand[keep]])
    if len(floor) < n_floor:
        raise InvalidConfig("objects leave no free floor")
    floor = np.c_[floor[:n_floor], np.zeros(n_floor)]
    pts.insert(0, floor)
    labels.insert(0, np.zeros(len(floor), dtype=np.int64))

    points = np.concatenate(pts)
    if config.noise_sigma > 0:
        points = points + _truncated_noise(rng, config.noise_sigma, points.shape)
    return Scene(points, np.concatenate(labels))


def generate_scenes(config: SceneConfig, count: int) -> list:
    """``count`` scenes with seeds ``config.seed, config.seed + 1, ...``."""
    return [generate_scene(replace(config, seed=config.seed + i)) for i in range(count)]
