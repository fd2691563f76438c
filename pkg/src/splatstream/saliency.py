"""Uniform grid partition, per-cell static/dynamic saliency, and saliency-driven tile merging."""
from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParameterError
from .gof import GoF, match_features, reconstruct_frame
from .model import GaussianCloud
from .metrics import SH_C0

NEIGHBOR_OFFSETS = ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1))
TILING_GRIDS = {"NT": (1, 1, 1), "32T": (4, 4, 2), "64T": (4, 4, 4)}
DEFAULT_RESOLUTION = 8
DEFAULT_EPSILON = 0.15
DEFAULT_MAX_CELLS = 16


@dataclass(frozen=True)
class SaliencyWeights:
    w_intra: float = 0.25
    w_inter: float = 0.25
    w_dyn: float = 0.5

    def __post_init__(self):
        w = (self.w_intra, self.w_inter, self.w_dyn)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ParameterError("saliency weights must be non-negative and sum to 1")


@dataclass(frozen=True)
class SaliencyRecord:
    s_intra: float
    s_inter: float
    s_dyn: float
    fused: float


@dataclass(frozen=True)
class Grid:
    origin: tuple
    cell_size: tuple
    dims: tuple

    @classmethod
    def over(cls, lo, hi, resolution) -> "Grid":
        dims = _dims(resolution)
        lo = np.asarray(lo, float)
        size = (np.asarray(hi, float) - lo) / np.asarray(dims)
        return cls(tuple(lo), tuple(size), dims)

    def assign(self, positions) -> np.ndarray:
        """Cell index per point; points on an interior plane go to the lower cell."""
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        size = np.asarray(self.cell_size)
        safe = np.where(size > 0, size, 1.0)
        rel = (p - np.asarray(self.origin)) / safe
        idx = np.where(size > 0, np.ceil(rel) - 1, 0)
        return np.clip(idx, 0, np.asarray(self.dims) - 1).astype(np.int64)

    def cell_aabb(self, cid) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin) + np.asarray(cid) * np.asarray(self.cell_size)
        return lo, lo + np.asarray(self.cell_size)


@dataclass(frozen=True, eq=False)
class GridCell:
    id: tuple
    aabb: tuple
    member_indices: np.ndarray

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.aabb[1] - self.aabb[0]))


@dataclass(frozen=True, eq=False)
class AdaptiveTile:
    id: int
    cells: tuple
    aabb: tuple
    saliency: float
    member_indices: np.ndarray

    def to_dict(self) -> dict:
        return {"id": self.id, "cells": [list(c) for c in self.cells],
                "aabb": [list(map(float, self.aabb[0])), list(map(float, self.aabb[1]))],
                "saliency": float(self.saliency), "members": int(len(self.member_indices))}


def _dims(resolution) -> tuple:
    dims = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
    if len(dims) != 3 or min(dims) < 1:
        raise ParameterError("grid resolution must be >= 1 on every axis")
    return tuple(int(d) for d in dims)


def cells_for(grid: Grid, cloud: GaussianCloud) -> list[GridCell]:
    idx = grid.assign(cloud.positions)
    flat = np.ravel_multi_index(idx.T, grid.dims) if len(idx) else np.zeros(0, np.int64)
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(np.prod(grid.dims) + 1))
    cells = []
    for n, cid in enumerate(np.ndindex(*grid.dims)):
        members = np.sort(order[bounds[n]:bounds[n + 1]])
        cells.append(GridCell(cid, grid.cell_aabb(cid), members))
    return cells


def grid_partition(cloud: GaussianCloud, resolution=DEFAULT_RESOLUTION) -> list[GridCell]:
    """Split the cloud's bounding box into a uniform grid; cells in (i, j, k) order."""
    lo, hi = cloud.bbox
    return cells_for(Grid.over(lo, hi, resolution), cloud)


def neighbors_of(cell: GridCell, by_id: dict) -> list[GridCell]:
    out = []
    for off in NEIGHBOR_OFFSETS:
        nid = tuple(a + b for a, b in zip(cell.id, off))
        if nid in by_id:
            out.append(by_id[nid])
    return out


def luminance(sh_dc: np.ndarray) -> np.ndarray:
    rgb = np.clip(0.5 + SH_C0 * sh_dc, 0.0, 1.0)
    return rgb @ np.array([0.2126, 0.7152, 0.0722])


def cell_features(cell: GridCell, cloud: GaussianCloud) -> np.ndarray:
    """(member count, mean opacity, mean DC luminance); zeros for an empty cell."""
    m = cell.member_indices
    if len(m) == 0:
        return np.zeros(3)
    return np.array([len(m), cloud.opacities[m].mean(), luminance(cloud.sh_dc[m]).mean()])


def feature_bounds(cells, cloud: GaussianCloud) -> tuple[np.ndarray, np.ndarray]:
    f = np.array([cell_features(c, cloud) for c in cells])
    return f.min(axis=0), f.max(axis=0)


def intra_dispersion(cell: GridCell, cloud: GaussianCloud) -> float:
    m = cell.member_indices
    if len(m) < 2:
        return 0.0
    w = cloud.opacities[m]
    if w.sum() <= 0:
        return 0.0
    p = cloud.positions[m].astype(np.float64)
    mu = w @ p / w.sum()
    spread = w @ np.sum((p - mu) ** 2, axis=1) / w.sum()
    norm = (cell.diagonal / 2.0) ** 2
    if norm <= 0:
        return 0.0
    return float(np.clip(spread / norm, 0.0, 1.0))


def static_saliency(cell: GridCell, neighbors, cloud: GaussianCloud,
                    bounds=None) -> tuple[float, float]:
    """(s_intra, s_inter) for one cell.

    bounds are the per-feature (min, max) over the whole grid; without them the
    cell and its neighbours are used.
    """
    if len(cell.member_indices) == 0:
        return 0.0, 0.0
    s_intra = intra_dispersion(cell, cloud)
    if not neighbors:
        return s_intra, 0.0
    if bounds is None:
        bounds = feature_bounds([cell, *neighbors], cloud)
    fmin, fmax = bounds
    span = fmax - fmin
    safe = np.where(span > 0, span, 1.0)

    def norm(f):
        return np.where(span > 0, (f - fmin) / safe, 0.0)

    f = norm(cell_features(cell, cloud))
    fn = np.mean([norm(cell_features(n, cloud)) for n in neighbors], axis=0)
    s_inter = float(np.clip(np.linalg.norm(f - fn) / np.sqrt(3.0), 0.0, 1.0))
    return s_intra, s_inter


def dynamic_saliency(cell_first: GridCell, cell_last: GridCell, clouds) -> float:
    """Motion between the first and last frame within one cell, in [0, 1]."""
    if tuple(cell_first.id) != tuple(cell_last.id):
        raise ParameterError("dynamic saliency compares cells with the same id")
    first, last = clouds
    ca = first.subset(cell_first.member_indices)
    cb = last.subset(cell_last.member_indices)
    na, nb = len(ca), len(cb)
    if na == 0 and nb == 0:
        return 0.0
    disp = 0.0
    diag = cell_first.diagonal
    if na and nb and diag > 0:
        # mutual nearest neighbours in the joint position/attribute space
        fa, fb = match_features(ca, diag), match_features(cb, diag)
        _, j = cKDTree(fb).query(fa)
        _, i = cKDTree(fa).query(fb)
        mutual = i[j] == np.arange(na)
        if np.any(mutual):
            d = cb.positions[j[mutual]].astype(np.float64) - ca.positions[mutual].astype(np.float64)
            disp = float(np.linalg.norm(d, axis=1).mean()) / diag
    density = abs(na - nb) / max(na, nb, 1)
    return float(np.clip(disp + density, 0.0, 1.0))


def fuse_saliency(r, w: SaliencyWeights = SaliencyWeights()) -> float:
    if not isinstance(w, SaliencyWeights):
        w = SaliencyWeights(*w)
    s_intra, s_inter, s_dyn = r
    v = w.w_intra * s_intra + w.w_inter * s_inter + w.w_dyn * s_dyn
    return float(np.clip(v, 0.0, 1.0))


def merge_tiles(grid, saliency: dict, epsilon: float = DEFAULT_EPSILON,
                max_cells_per_tile: int = DEFAULT_MAX_CELLS) -> list[AdaptiveTile]:
    """Greedy region growing from the most salient unassigned cell."""
    if epsilon < 0 or max_cells_per_tile < 1:
        raise ParameterError("need epsilon >= 0 and max_cells_per_tile >= 1")
    by_id = {tuple(c.id): c for c in grid}
    seeds = sorted(by_id, key=lambda cid: (-saliency[cid], cid))
    assigned: set = set()
    tiles = []
    for seed in seeds:
        if seed in assigned:
            continue
        s0 = saliency[seed]
        members = [seed]
        assigned.add(seed)
        queue = deque([seed])
        while queue and len(members) < max_cells_per_tile:
            cur = queue.popleft()
            for off in NEIGHBOR_OFFSETS:
                nid = tuple(a + b for a, b in zip(cur, off))
                if nid not in by_id or nid in assigned:
                    continue
                if abs(saliency[nid] - s0) > epsilon:
                    continue
                members.append(nid)
                assigned.add(nid)
                queue.append(nid)
                if len(members) >= max_cells_per_tile:
                    break
        tiles.append(_make_tile(len(tiles), [by_id[c] for c in members], saliency))
    return tiles


def _make_tile(tid: int, cells, saliency: dict) -> AdaptiveTile:
    cells = sorted(cells, key=lambda c: tuple(c.id))
    lo = np.min([c.aabb[0] for c in cells], axis=0)
    hi = np.max([c.aabb[1] for c in cells], axis=0)
    members = np.sort(np.concatenate([c.member_indices for c in cells]))
    sal = float(np.mean([saliency[tuple(c.id)] for c in cells]))
    return AdaptiveTile(tid, tuple(tuple(c.id) for c in cells), (lo, hi), sal, members)


def uniform_tiles(grid, saliency: dict) -> list[AdaptiveTile]:
    """One tile per grid cell (the fixed 32T/64T baselines)."""
    return [_make_tile(n, [c], saliency) for n, c in enumerate(grid)]


def single_tile(grid, saliency: dict) -> list[AdaptiveTile]:
    return [_make_tile(0, list(grid), saliency)]


def gof_saliency(gof: GoF, resolution=DEFAULT_RESOLUTION,
                 weights: SaliencyWeights = SaliencyWeights()):
    """Per-cell saliency records for a GoF: static terms on the keyframe, motion on first/last."""
    key = gof.keyframe
    lo, hi = key.bbox
    grid = Grid.over(lo, hi, resolution)
    cells = cells_for(grid, key)
    last = reconstruct_frame(gof, gof.frame_count - 1)
    last_cells = cells_for(grid, last)
    by_id = {c.id: c for c in cells}
    bounds = feature_bounds(cells, key)
    records = {}
    for c, cl in zip(cells, last_cells):
        s_i, s_e = static_saliency(c, neighbors_of(c, by_id), key, bounds)
        s_d = dynamic_saliency(c, cl, (key, last))
        records[c.id] = SaliencyRecord(s_i, s_e, s_d, fuse_saliency((s_i, s_e, s_d), weights))
    return cells, records


def build_tiling(gof: GoF, mode: str = "AT", resolution=DEFAULT_RESOLUTION,
                 weights: SaliencyWeights = SaliencyWeights(), epsilon: float = DEFAULT_EPSILON,
                 max_cells_per_tile: int = DEFAULT_MAX_CELLS):
    """Tiles for one GoF under a tiling mode (AT, NT, 32T, 64T) plus the cell saliency."""
    if mode == "AT":
        cells, records = gof_saliency(gof, resolution, weights)
        fused = {cid: r.fused for cid, r in records.items()}
        return merge_tiles(cells, fused, epsilon, max_cells_per_tile), records
    if mode not in TILING_GRIDS:
        raise ParameterError(f"unknown tiling mode {mode!r}")
    cells, records = gof_saliency(gof, TILING_GRIDS[mode], weights)
    fused = {cid: r.fused for cid, r in records.items()}
    if mode == "NT":
        return single_tile(cells, fused), records
    return uniform_tiles(cells, fused), records


def saliency_csv(rows) -> str:
    """rows: iterable of (gof_index, records dict)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gof", "i", "j", "k", "s_intra", "s_inter", "s_dyn", "fused"])
    for g, records in rows:
        for cid in sorted(records):
            r = records[cid]
            w.writerow([g, *cid, repr(r.s_intra), repr(r.s_inter), repr(r.s_dyn), repr(r.fused)])
    return buf.getvalue()
