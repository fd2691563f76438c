"""Deterministic synthetic scenes: Gaussian clusters with piecewise-linear motion."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .model import SH_COEFFS, FrameSequence, GaussianCloud, save_ply


@dataclass
class ClusterSpec:
    center: tuple = (0.0, 0.0, 0.0)
    spread: tuple = (1.0, 1.0, 1.0)  # per-axis std of member positions
    count: int = 100
    velocity: tuple = (0.0, 0.0, 0.0)  # units per second, used when path is empty
    # piecewise-linear offsets: [[t_seconds, [dx, dy, dz]], ...]
    path: list = field(default_factory=list)
    birth_frame: int = 0
    death_frame: int | None = None

    def offset_at(self, t: float) -> np.ndarray:
        if self.path:
            times = np.array([p[0] for p in self.path], dtype=np.float64)
            offs = np.array([p[1] for p in self.path], dtype=np.float64)
            return np.array([np.interp(t, times, offs[:, a]) for a in range(3)])
        return np.asarray(self.velocity, dtype=np.float64) * t

    def alive(self, frame: int) -> bool:
        return frame >= self.birth_frame and (self.death_frame is None or frame < self.death_frame)


@dataclass
class SceneSpec:
    clusters: list = field(default_factory=list)
    opacity_range: tuple = (0.05, 1.0)
    scale_range: tuple = (0.005, 0.05)  # log-uniform
    sh_rest_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.clusters = [c if isinstance(c, ClusterSpec) else ClusterSpec(**c)
                         for c in self.clusters]
        if self.count < 1:
            raise ParameterError("a scene needs at least one primitive")

    @property
    def count(self) -> int:
        return sum(c.count for c in self.clusters)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def random_attributes(n: int, rng: np.random.Generator, opacity_range=(0.05, 1.0),
                      scale_range=(0.005, 0.05), sh_rest_std=0.0):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    lo, hi = np.log(scale_range[0]), np.log(scale_range[1])
    scales = np.exp(rng.uniform(lo, hi, size=(n, 3)))
    opac = rng.uniform(*opacity_range, size=n)
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0, :] = rng.uniform(-1.0, 1.0, size=(n, 3))
    if sh_rest_std > 0:
        sh[:, 1:, :] = rng.normal(scale=sh_rest_std, size=(n, SH_COEFFS - 1, 3))
    return q, scales, opac, sh


def random_cloud(n: int, rng: np.random.Generator, extent: float = 1.0, **kw) -> GaussianCloud:
    """Uniformly scattered primitives in [0, extent]^3 with random attributes."""
    pos = rng.uniform(0.0, extent, size=(n, 3))
    q, s, o, sh = random_attributes(n, rng, **kw)
    return GaussianCloud.from_activated(pos, q, s, o, sh)


def gen_sequence(spec: SceneSpec, frames: int, fps: float = 30.0) -> FrameSequence:
    if frames < 1:
        raise ParameterError("frames must be >= 1")
    rng = np.random.default_rng(spec.seed)
    bases = []
    for c in spec.clusters:
        pos = np.asarray(c.center, float) + rng.normal(size=(c.count, 3)) * np.asarray(c.spread, float)
        q, s, o, sh = random_attributes(c.count, rng, spec.opacity_range, spec.scale_range,
                                        spec.sh_rest_std)
        bases.append(GaussianCloud.from_activated(pos, q, s, o, sh))

    out = []
    for f in range(frames):
        t = f / fps
        parts = []
        for c, base in zip(spec.clusters, bases):
            if not c.alive(f):
                continue
            off = c.offset_at(t)
            if np.any(off != 0):
                pos = base.positions.astype(np.float64) + off
                parts.append(base.replace(positions=pos))
            else:
                parts.append(base)
        out.append(GaussianCloud.concat(parts))
    return FrameSequence(out, fps)


def default_scene(count: int = 5000, seed: int = 0, fg_fraction: float = 0.3) -> SceneSpec:
    """A static room-sized background with two moving foreground clusters."""
    n_fg = max(2, int(round(count * fg_fraction)))
    n_bg = max(1, count - n_fg)
    n_a = n_fg // 2
    return SceneSpec(
        clusters=[
            ClusterSpec(center=(0.0, 0.0, 0.0), spread=(4.0, 1.5, 4.0), count=n_bg),
            ClusterSpec(center=(-1.0, 0.0, 0.0), spread=(0.3, 0.6, 0.3), count=n_a,
                        velocity=(0.5, 0.0, 0.0)),
            ClusterSpec(center=(1.5, 0.0, 1.0), spread=(0.25, 0.5, 0.25), count=n_fg - n_a,
                        path=[[0.0, [0.0, 0.0, 0.0]], [1.0, [0.0, 0.0, -0.5]],
                              [2.0, [0.5, 0.0, -0.5]]]),
        ],
        seed=seed,
    )


def write_sequence(seq: FrameSequence, directory, prefix: str = "frame") -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(seq.frames):
        p = d / f"{prefix}_{i:04d}.ply"
        save_ply(frame, p)
        paths.append(p)
    return paths
