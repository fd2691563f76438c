"""QoE model, FoV culling, bandwidth prediction and exact tile-quality selection.

Quality selection is a multiple-choice knapsack: one level per visible tile,
maximising summed utility within a byte budget. ``select_qualities`` solves it
exactly by dynamic programming over a 1 KiB-discretised budget;
``brute_force_select`` enumerates the same problem as an oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, aabb_in_frustum
from .errors import InfeasibleError, ParameterError, SizeError

GRANULARITY = 1024
UTILITY_SCALE = 10 ** 9  # utilities compared as integers at 1e-9 resolution
BRUTE_FORCE_MAX_TILES = 12


@dataclass(frozen=True)
class QoEWeights:
    w_quality: float = 100.0
    w_stall_time: float = 10.0
    w_stall_count: float = 5.0

    def __post_init__(self):
        if min(self.w_quality, self.w_stall_time, self.w_stall_count) < 0:
            raise ParameterError("QoE weights must be non-negative")


def qoe(avg_quality: float, stall_seconds: float, stall_count: int,
        w: QoEWeights = QoEWeights()) -> float:
    if stall_seconds < 0 or stall_count < 0:
        raise ParameterError("stall time and count must be non-negative")
    return w.w_quality * avg_quality - w.w_stall_time * stall_seconds - w.w_stall_count * stall_count


def visible_tiles(tiles, cam: Camera) -> list[int]:
    """Ids of tiles whose box meets the camera frustum, ascending."""
    return sorted(int(t.id) for t in tiles if aabb_in_frustum(cam, t.aabb[0], t.aabb[1]))


def predict_bandwidth(history, k: int = 5) -> float:
    """Harmonic mean of the last k samples, zeros excluded; 0 if nothing positive remains."""
    history = list(history)
    if not history:
        raise ParameterError("bandwidth history is empty")
    if k < 1:
        raise ParameterError("k must be >= 1")
    window = [x for x in history[-k:] if x > 0]
    if not window:
        return 0.0
    inv = sum(1.0 / x for x in window)
    return math.inf if inv == 0 else len(window) / inv


@dataclass(frozen=True)
class SelectionProblem:
    tiles: tuple
    options: tuple  # per tile: ((size_bytes, utility), ...) ordered by level
    budget_bytes: int

    def __post_init__(self):
        object.__setattr__(self, "tiles", tuple(self.tiles))
        object.__setattr__(self, "options", tuple(tuple((int(s), float(u)) for s, u in o)
                                                  for o in self.options))
        if len(self.tiles) != len(self.options):
            raise ParameterError("one option list per tile")
        if self.budget_bytes < 0:
            raise ParameterError("budget must be non-negative")
        for opts in self.options:
            if not opts:
                raise ParameterError("every tile needs at least one level")
            for (s0, u0), (s1, u1) in zip(opts, opts[1:]):
                if s1 < s0 or u1 < u0:
                    raise ParameterError("sizes and utilities must be non-decreasing with level")

    def to_dict(self) -> dict:
        return {"tiles": list(self.tiles), "options": [[list(o) for o in opts] for opts in self.options],
                "budget_bytes": self.budget_bytes}

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionProblem":
        return cls(tuple(d["tiles"]), tuple(tuple(tuple(o) for o in opts) for opts in d["options"]),
                   int(d["budget_bytes"]))


@dataclass(frozen=True)
class Assignment:
    levels: dict = field(default_factory=dict)  # tile id -> level (1-based)
    total_bytes: int = 0
    total_utility: float = 0.0

    def to_dict(self) -> dict:
        return {"levels": {str(k): v for k, v in self.levels.items()},
                "total_bytes": self.total_bytes, "total_utility": self.total_utility}


def _units(size: int) -> int:
    return -(-size // GRANULARITY)


def _prepare(problem: SelectionProblem):
    cap = problem.budget_bytes // GRANULARITY
    units = [[_units(s) for s, _ in opts] for opts in problem.options]
    utils = [[int(round(u * UTILITY_SCALE)) for _, u in opts] for opts in problem.options]
    if sum(u[0] for u in units) > cap:
        raise InfeasibleError("level-1 sizes exceed the budget")
    return cap, units, utils


def _assignment(problem: SelectionProblem, choice) -> Assignment:
    total_b = 0
    total_u = 0.0
    for opts, c in zip(problem.options, choice):
        total_b += opts[c][0]
        total_u += opts[c][1]
    return Assignment({t: c + 1 for t, c in zip(problem.tiles, choice)}, total_b, total_u)


def _top_fits(problem, cap, units) -> bool:
    return sum(u[-1] for u in units) <= cap


def select_qualities(problem: SelectionProblem) -> Assignment:
    """Exact optimum. Ties: all-top if it fits, then fewer bytes, then higher levels on earlier tiles."""
    if not problem.tiles:
        return Assignment()
    cap, units, utils = _prepare(problem)
    if _top_fits(problem, cap, units):
        return _assignment(problem, [len(o) - 1 for o in problem.options])

    n = len(problem.tiles)
    neg = np.iinfo(np.int64).min // 4
    big = np.iinfo(np.int64).max // 4
    # best_u[t][c]: best utility of tiles t.. with c units left; best_b: bytes at that optimum
    best_u = [None] * (n + 1)
    best_b = [None] * (n + 1)
    best_u[n] = np.zeros(cap + 1, dtype=np.int64)
    best_b[n] = np.zeros(cap + 1, dtype=np.int64)
    for t in range(n - 1, -1, -1):
        cu = np.full(cap + 1, neg, dtype=np.int64)
        cb = np.full(cap + 1, big, dtype=np.int64)
        for lvl, (s, (size, _)) in enumerate(zip(units[t], problem.options[t])):
            if s > cap:
                continue
            nu = np.full(cap + 1, neg, dtype=np.int64)
            nb = np.full(cap + 1, big, dtype=np.int64)
            prev_u = best_u[t + 1][: cap + 1 - s]
            ok = prev_u > neg
            nu[s:] = np.where(ok, prev_u + utils[t][lvl], neg)
            nb[s:] = np.where(ok, best_b[t + 1][: cap + 1 - s] + size, big)
            better = (nu > cu) | ((nu == cu) & (nb < cb))
            cu = np.where(better, nu, cu)
            cb = np.where(better, nb, cb)
        best_u[t] = cu
        best_b[t] = cb

    choice = []
    c = cap
    for t in range(n):
        target = (best_u[t][c], best_b[t][c])
        for lvl in range(len(units[t]) - 1, -1, -1):
            s = units[t][lvl]
            if s > c:
                continue
            rest_u = best_u[t + 1][c - s]
            if rest_u <= neg:
                continue
            if (rest_u + utils[t][lvl], best_b[t + 1][c - s] + problem.options[t][lvl][0]) == target:
                choice.append(lvl)
                c -= s
                break
        else:  # pragma: no cover - the forward pass always finds the optimum it recorded
            raise RuntimeError("selection reconstruction failed")
    return _assignment(problem, choice)


def brute_force_select(problem: SelectionProblem) -> Assignment:
    """Exhaustive enumeration with the same objective and tie rules as select_qualities.

    All combinations are materialised as flat numpy arrays (4**12 at most), so
    the enumeration is exhaustive but vectorised.
    """
    if len(problem.tiles) > BRUTE_FORCE_MAX_TILES:
        raise SizeError(f"brute force limited to {BRUTE_FORCE_MAX_TILES} tiles")
    if not problem.tiles:
        return Assignment()
    cap, units, utils = _prepare(problem)
    if _top_fits(problem, cap, units):
        return _assignment(problem, [len(o) - 1 for o in problem.options])
    tot_units = np.zeros(1, np.int64)
    tot_util = np.zeros(1, np.int64)
    tot_bytes = np.zeros(1, np.int64)
    for t, opts in enumerate(problem.options):
        tot_units = np.add.outer(tot_units, np.array(units[t], np.int64)).ravel()
        tot_util = np.add.outer(tot_util, np.array(utils[t], np.int64)).ravel()
        tot_bytes = np.add.outer(tot_bytes, np.array([s for s, _ in opts], np.int64)).ravel()
    ok = np.flatnonzero(tot_units <= cap)
    u = tot_util[ok]
    ok = ok[u == u.max()]
    b = tot_bytes[ok]
    ok = ok[b == b.min()]
    # flat index is C-ordered with levels ascending, so the largest index is the
    # lexicographically highest choice
    flat = int(ok.max())
    choice = np.unravel_index(flat, [len(o) for o in problem.options])
    return _assignment(problem, [int(c) for c in choice])
