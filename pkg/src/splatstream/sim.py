"""Trace-driven streaming-session simulator with dual-mode (encoded/reconstructed) delivery."""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .abr import (GRANULARITY, Assignment, InfeasibleError, QoEWeights, SelectionProblem,
                  predict_bandwidth, qoe, select_qualities, visible_tiles)
from .camera import Camera
from .errors import ParameterError, TraceCoverageError
from .metrics import PSNR_CAP

STD5G_RANGE = (350.0, 700.0)
EXT5G_RANGE = (0.0, 1200.0)
STD5G_STEP_STD = 25.0


# traces ---------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BandwidthTrace:
    """Piecewise-constant rate: samples[i] holds on [t_i, t_{i+1}); the last until end_s."""

    times: np.ndarray
    mbps: np.ndarray
    kind: str = "File"
    end_s: float | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        r = np.asarray(self.mbps, dtype=np.float64)
        if t.ndim != 1 or len(t) == 0 or len(t) != len(r):
            raise ParameterError("trace needs matching, non-empty time and rate arrays")
        if t[0] != 0 or np.any(np.diff(t) <= 0):
            raise ParameterError("trace times must start at 0 and strictly increase")
        if np.any(np.isnan(r)) or np.any(r < 0):
            raise ParameterError("rates must be non-negative")
        lo, hi = {"Std5G": STD5G_RANGE, "Ext5G": EXT5G_RANGE}.get(self.kind, (0.0, math.inf))
        if np.any(r < lo) or np.any(r > hi):
            raise ParameterError(f"{self.kind} rates must lie in [{lo}, {hi}]")
        end = self.end_s
        if end is None:
            end = t[-1] + (t[-1] - t[-2] if len(t) > 1 else 1.0)
        if end <= t[-1]:
            raise ParameterError("trace end must follow the last sample")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "mbps", r)
        object.__setattr__(self, "end_s", float(end))

    def __eq__(self, other):
        return (isinstance(other, BandwidthTrace) and self.kind == other.kind
                and self.end_s == other.end_s and np.array_equal(self.times, other.times)
                and np.array_equal(self.mbps, other.mbps))

    __hash__ = None

    def samples_until(self, t: float) -> list[float]:
        return self.mbps[: int(np.searchsorted(self.times, t, side="right"))].tolist()

    def _segments(self, t0: float):
        i = max(int(np.searchsorted(self.times, t0, side="right")) - 1, 0)
        start = t0
        while start < self.end_s:
            stop = self.times[i + 1] if i + 1 < len(self.times) else self.end_s
            yield start, stop, self.mbps[i]
            start = stop
            i += 1

    def download_finish(self, t0: float, nbytes: int) -> float | None:
        """Completion time of nbytes started at t0, or None if the trace ends first."""
        bits = 8.0 * nbytes
        if bits <= 0:
            return t0
        for start, stop, rate in self._segments(t0):
            if rate == math.inf:
                return start
            cap = rate * 1e6 * (stop - start)
            if bits <= cap:
                return start + bits / (rate * 1e6)
            bits -= cap
        return None

    def integral_bytes(self, t0: float, t1: float) -> float:
        total = 0.0
        for start, stop, rate in self._segments(t0):
            if start >= t1:
                break
            total += rate * 1e6 / 8 * (min(stop, t1) - start)
        return total

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_seconds", "mbps"])
        for t, r in zip(self.times, self.mbps):
            w.writerow([repr(float(t)), repr(float(r))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, end_s: float | None = None) -> "BandwidthTrace":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([float(r["t_seconds"]) for r in rows], [float(r["mbps"]) for r in rows],
                   "File", end_s)


def _reflect(x: float, lo: float, hi: float) -> float:
    w = hi - lo
    y = (x - lo) % (2 * w)
    return lo + (2 * w - y if y > w else y)


def gen_trace(kind: str, duration_s: float, step_s: float, seed: int) -> BandwidthTrace:
    """Synthetic 5G traces: Std5G is a reflected random walk, Ext5G a regime-switching process."""
    if not duration_s > 0 or not step_s > 0:
        raise ParameterError("duration and step must be positive")
    n = max(1, int(math.ceil(duration_s / step_s - 1e-9)))
    times = np.arange(n) * step_s
    rng = np.random.default_rng(seed)
    if kind == "Std5G":
        lo, hi = STD5G_RANGE
        x = rng.uniform(lo, hi)
        steps = rng.normal(0.0, STD5G_STEP_STD, size=n)
        vals = np.empty(n)
        for i in range(n):
            if i:
                x = _reflect(x + steps[i], lo, hi)
            vals[i] = x
    elif kind == "Ext5G":
        lo, hi = EXT5G_RANGE
        vals = np.empty(n)
        i = 0
        while i < n:
            dwell = int(max(1, round(rng.uniform(1.0, 5.0) / step_s)))
            if rng.random() < 0.15:
                seg = np.zeros(min(dwell, n - i))
            else:
                target = rng.uniform(lo, hi)
                seg = np.clip(target + rng.normal(0.0, 30.0, size=min(dwell, n - i)), lo, hi)
            vals[i:i + len(seg)] = seg
            i += len(seg)
    else:
        raise ParameterError(f"unknown trace kind {kind!r}")
    return BandwidthTrace(times, vals, kind, float(duration_s))


@dataclass(frozen=True, eq=False)
class FovTrace:
    times: np.ndarray
    cameras: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if len(t) == 0 or len(t) != len(self.cameras):
            raise ParameterError("FoV trace needs one camera per timestamp")
        if np.any(np.diff(t) <= 0):
            raise ParameterError("FoV times must strictly increase")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "cameras", tuple(self.cameras))

    def camera_at(self, t: float) -> Camera:
        i = max(int(np.searchsorted(self.times, t, side="right")) - 1, 0)
        return self.cameras[i]

    COLUMNS = ("t_seconds", "px", "py", "pz", "qw", "qx", "qy", "qz", "vfov_rad", "aspect",
               "near", "far")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for t, c in zip(self.times, self.cameras):
            w.writerow([repr(float(v)) for v in (t, *c.position, *c.orientation, c.vertical_fov,
                                                 c.aspect, c.near, c.far)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FovTrace":
        rows = list(csv.DictReader(io.StringIO(text)))
        cams = [Camera((float(r["px"]), float(r["py"]), float(r["pz"])),
                       (float(r["qw"]), float(r["qx"]), float(r["qy"]), float(r["qz"])),
                       float(r["vfov_rad"]), float(r["aspect"]), float(r["near"]), float(r["far"]))
                for r in rows]
        return cls([float(r["t_seconds"]) for r in rows], cams)


def gen_fov_orbit(center, radius: float, duration_s: float, step_s: float = 0.5,
                  period_s: float = 20.0, height: float = 0.0, phase: float = 0.0,
                  **camera_kw) -> FovTrace:
    """Camera circling `center` in the x-z plane, always looking at it."""
    center = np.asarray(center, float)
    n = max(1, int(math.ceil(duration_s / step_s)))
    times = np.arange(n) * step_s
    cams = []
    for t in times:
        a = phase + 2 * np.pi * t / period_s
        eye = center + np.array([radius * np.cos(a), height, radius * np.sin(a)])
        cams.append(Camera.look_at(eye, center, **camera_kw))
    return FovTrace(times, cams)


# manifest -------------------------------------------------------------------------------

class DeliveryMode(str, enum.Enum):
    ENCODED = "encoded"
    RECONSTRUCTED = "reconstructed"


@dataclass
class LevelEntry:
    level: int
    encoded_bytes: int
    reconstructed_bytes: int
    gpsnr_vs_full: float
    retained: int = 0

    @property
    def quality(self) -> float:
        """GPSNR normalised to [0, 1] by the PSNR cap."""
        return float(np.clip(self.gpsnr_vs_full, 0.0, PSNR_CAP) / PSNR_CAP)


@dataclass
class TileEntry:
    tile_id: int
    saliency: float
    aabb: tuple
    decode_ms_per_frame: float
    levels: list

    def __post_init__(self):
        self.levels = [l if isinstance(l, LevelEntry) else LevelEntry(**l) for l in self.levels]
        self.aabb = (tuple(map(float, self.aabb[0])), tuple(map(float, self.aabb[1])))
        for l in self.levels:
            if l.reconstructed_bytes < l.encoded_bytes:
                raise ParameterError("reconstructed size must be >= encoded size")

    @property
    def id(self) -> int:
        return self.tile_id

    @property
    def qualities(self) -> list[float]:
        """Normalised level quality, made non-decreasing (a level is never worth less than
        the one below it, since it contains it)."""
        return np.maximum.accumulate([l.quality for l in self.levels]).tolist()

    def row(self, level: int) -> "ManifestRow":
        l = self.levels[level - 1]
        return ManifestRow(self.tile_id, level, self.decode_ms_per_frame, l.encoded_bytes,
                           l.reconstructed_bytes)


@dataclass(frozen=True)
class ManifestRow:
    tile_id: int
    level: int
    decode_ms_per_frame: float
    encoded_bytes: int
    reconstructed_bytes: int


@dataclass
class GofEntry:
    index: int
    duration_s: float
    frame_count: int
    tiles: list

    def __post_init__(self):
        self.tiles = [t if isinstance(t, TileEntry) else TileEntry(**t) for t in self.tiles]
        if not self.duration_s > 0:
            raise ParameterError("GoF duration must be positive")


@dataclass
class Manifest:
    gofs: list
    fps: float = 30.0
    mode: str = "AT"

    def __post_init__(self):
        self.gofs = [g if isinstance(g, GofEntry) else GofEntry(**g) for g in self.gofs]

    @property
    def duration_s(self) -> float:
        return sum(g.duration_s for g in self.gofs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def choose_mode(row: ManifestRow, headroom_bytes: int, decode_budget_ms: float) -> DeliveryMode:
    """Ship pre-reconstructed frames when decoding would blow the budget and bytes allow it."""
    extra = row.reconstructed_bytes - row.encoded_bytes
    if row.decode_ms_per_frame > decode_budget_ms and extra <= headroom_bytes:
        return DeliveryMode.RECONSTRUCTED
    return DeliveryMode.ENCODED


# session --------------------------------------------------------------------------------

@dataclass
class SimConfig:
    safety_factor: float = 0.9
    predictor_k: int = 5
    qoe_weights: QoEWeights = field(default_factory=QoEWeights)
    decode_budget_ms: float | None = None  # default: one frame interval
    count_startup_stall: bool = True
    budget_bytes_override: int | None = None
    max_buffer_s: float = math.inf
    dual_mode: bool = True  # False ships every tile encoded

    def __post_init__(self):
        if isinstance(self.qoe_weights, dict):
            self.qoe_weights = QoEWeights(**self.qoe_weights)
        if not 0 < self.safety_factor <= 1:
            raise ParameterError("safety_factor must lie in (0, 1]")
        if self.predictor_k < 1:
            raise ParameterError("predictor_k must be >= 1")


@dataclass
class GofReport:
    index: int
    request_t: float
    finish_t: float | None
    predicted_mbps: float
    budget_bytes: int
    visible: list
    dropped: list
    levels: dict
    modes: dict
    downloaded_bytes: int
    payload_bytes: int  # encoded-form size of the selected levels, whatever the delivery mode
    decode_ms: float
    stall_s: float
    quality: float


@dataclass
class SessionReport:
    gofs: list
    stall_s: float
    stall_count: int
    startup_s: float
    playback_s: float
    wall_s: float
    mean_quality: float
    qoe: float
    downloaded_bytes: int
    payload_bytes: int
    completed: bool
    mode: str = ""
    trace_kind: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gof", "request_t", "finish_t", "predicted_mbps", "budget_bytes", "visible",
                    "dropped", "downloaded_bytes", "payload_bytes", "decode_ms", "stall_s", "quality", "levels",
                    "modes"])
        for g in self.gofs:
            w.writerow([g.index, _num(g.request_t), _num(g.finish_t), _num(g.predicted_mbps),
                        g.budget_bytes, len(g.visible), len(g.dropped), g.downloaded_bytes, g.payload_bytes,
                        _num(g.decode_ms), _num(g.stall_s), _num(g.quality),
                        " ".join(f"{k}:{v}" for k, v in sorted(g.levels.items())),
                        " ".join(f"{k}:{v}" for k, v in sorted(g.modes.items()))])
        return buf.getvalue()


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def _select_with_drops(tiles, budget: int):
    """Solve the selection, dropping the least salient tile while infeasible."""
    live = sorted(tiles, key=lambda t: t.tile_id)
    dropped = []
    while live:
        problem = SelectionProblem(
            [t.tile_id for t in live],
            [[(l.encoded_bytes, t.saliency * q) for l, q in zip(t.levels, t.qualities)]
             for t in live],
            budget)
        try:
            return select_qualities(problem), dropped
        except InfeasibleError:
            victim = min(live, key=lambda t: (t.saliency, -t.tile_id))
            if len(live) == 1:
                # a GoF must carry some content: keep the most salient tile at level 1
                l1 = victim.levels[0]
                return Assignment({victim.tile_id: 1}, l1.encoded_bytes,
                                  victim.saliency * victim.qualities[0]), dropped
            live.remove(victim)
            dropped.append(victim.tile_id)
    return None, dropped


def simulate_session(manifest: Manifest, bw: BandwidthTrace, fov: FovTrace,
                     cfg: SimConfig = SimConfig()) -> SessionReport:
    """Replay one viewing session: per-GoF request, selection, download and playback."""
    if not manifest.gofs:
        raise ParameterError("manifest has no GoFs")
    if bw.end_s < manifest.duration_s:
        raise TraceCoverageError(f"bandwidth trace ends at {bw.end_s}s, video lasts "
                                 f"{manifest.duration_s}s")
    frame_ms = cfg.decode_budget_ms if cfg.decode_budget_ms is not None else 1000.0 / manifest.fps

    t = 0.0
    play_end = 0.0
    media_t = 0.0
    stall = startup = playback = 0.0
    count = 0
    total_bytes = 0
    reports = []
    completed = True
    for gi, g in enumerate(manifest.gofs):
        if gi and math.isfinite(cfg.max_buffer_s):
            t = max(t, play_end - cfg.max_buffer_s)
        cam = fov.camera_at(media_t)
        by_id = {tile.tile_id: tile for tile in g.tiles}
        vis = visible_tiles(g.tiles, cam)
        pred = predict_bandwidth(bw.samples_until(t), cfg.predictor_k)
        if cfg.budget_bytes_override is not None:
            budget = int(cfg.budget_bytes_override)
        else:
            raw = pred * 1e6 / 8.0 * g.duration_s * cfg.safety_factor
            # an unbounded prediction affords every visible tile in its largest form
            budget = int(raw) if math.isfinite(raw) else \
                2 * sum(by_id[i].levels[-1].reconstructed_bytes + GRANULARITY for i in vis)
        assignment, dropped = _select_with_drops([by_id[i] for i in vis], budget)
        levels = dict(assignment.levels) if assignment else {}

        headroom = budget - (assignment.total_bytes if assignment else 0)
        load = sum(by_id[i].decode_ms_per_frame for i in levels)
        modes = {i: DeliveryMode.ENCODED for i in levels}
        for i in sorted(levels, key=lambda i: (-by_id[i].decode_ms_per_frame, i)):
            if load <= frame_ms or not cfg.dual_mode:
                break
            row = by_id[i].row(levels[i])
            if choose_mode(row, headroom, frame_ms - (load - row.decode_ms_per_frame)) \
                    is DeliveryMode.RECONSTRUCTED:
                modes[i] = DeliveryMode.RECONSTRUCTED
                headroom -= row.reconstructed_bytes - row.encoded_bytes
                load -= row.decode_ms_per_frame
        nbytes = sum(by_id[i].row(l).reconstructed_bytes if modes[i] is DeliveryMode.RECONSTRUCTED
                     else by_id[i].row(l).encoded_bytes for i, l in levels.items())

        payload = sum(by_id[i].levels[l - 1].encoded_bytes for i, l in levels.items())
        weight = payload + sum(by_id[i].levels[0].encoded_bytes for i in dropped)
        score = sum(by_id[i].levels[l - 1].encoded_bytes * by_id[i].qualities[l - 1]
                    for i, l in levels.items())
        quality = score / weight if weight > 0 else 0.0

        finish = bw.download_finish(t, nbytes)
        report = GofReport(g.index, t, finish, pred, budget, vis, dropped, levels,
                           {i: m.value for i, m in modes.items()}, nbytes, payload, load, 0.0,
                           quality)
        reports.append(report)
        if finish is None:
            completed = False
            report.quality = 0.0
            total_bytes += int(bw.integral_bytes(t, bw.end_s))
            break
        total_bytes += nbytes
        overrun = g.frame_count * max(0.0, load - frame_ms) / 1000.0
        start = max(finish, play_end)
        gap = start - play_end
        if gi == 0 and not cfg.count_startup_stall:
            startup += gap
            gap = 0.0
        here = gap + overrun
        if here > 0:
            count += 1
            stall += here
        report.stall_s = here
        play_end = start + overrun + g.duration_s
        playback += g.duration_s
        media_t += g.duration_s
        t = finish

    wall = play_end
    if not completed:
        tail = max(0.0, bw.end_s - play_end)
        if tail > 0:
            stall += tail
            count += 1
            reports[-1].stall_s = tail
        wall = max(play_end, bw.end_s)
    played = [r.quality for r in reports if r.finish_t is not None]
    mean_q = sum(played) / len(manifest.gofs)
    score = qoe(mean_q, stall, count, cfg.qoe_weights)
    payload = sum(r.payload_bytes for r in reports if r.finish_t is not None)
    return SessionReport(reports, stall, count, startup, playback, wall, mean_q, score,
                         total_bytes, payload, completed, manifest.mode, bw.kind)
