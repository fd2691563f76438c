"""Per-tile quality ladders built by significance-threshold masking, and tile blob encoding."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, ParameterError, TruncationError
from .model import BYTES_PER_PRIMITIVE, RECORD_DTYPE, GaussianCloud, GaussianPrimitive

LEVELS = 4
DEFAULT_RETENTION = (0.15, 0.40, 0.70, 1.00)
DEFAULT_SALIENCY_GAIN = 0.3
R_MIN = 0.05
TILE_HEADER = struct.Struct("<4sIIII12x")  # magic, tile id, level, count, crc32
TILE_MAGIC = b"GTIL"
assert TILE_HEADER.size == 32


def significance(p: GaussianPrimitive) -> float:
    """Opacity times geometric-mean radius."""
    sx, sy, sz = p.scale
    return p.opacity * (sx * sy * sz) ** (1.0 / 3.0)


def significance_array(cloud: GaussianCloud) -> np.ndarray:
    return cloud.opacities * np.exp(cloud.log_scale.astype(np.float64).mean(axis=1))


def apply_mask(members, cloud: GaussianCloud, threshold: float, sig=None) -> np.ndarray:
    """Members whose significance is at least threshold, in ascending index order."""
    if threshold < 0:
        raise ParameterError("threshold must be >= 0")
    members = np.asarray(members, dtype=np.int64)
    if sig is None:
        sig = significance_array(cloud)
    return np.sort(members[sig[members] >= threshold])


@dataclass(frozen=True, eq=False)
class QualityLevel:
    level: int
    retained_indices: np.ndarray
    threshold: float
    encoded_bytes: int
    gpsnr_vs_full: float | None = None

    @property
    def retained(self) -> int:
        return int(len(self.retained_indices))


@dataclass(frozen=True, eq=False)
class TileLadder:
    tile_id: int
    levels: tuple
    saliency: float

    def with_gpsnr(self, values) -> "TileLadder":
        return replace(self, levels=tuple(replace(l, gpsnr_vs_full=float(v))
                                          for l, v in zip(self.levels, values)))


def effective_retention(targets, saliency: float, gain: float) -> list[float]:
    out = [float(np.clip(t + gain * (saliency - 0.5), R_MIN, 1.0)) for t in targets[:-1]]
    return out + [1.0]


def _check_targets(targets) -> None:
    t = list(targets)
    if len(t) != LEVELS or t[-1] != 1.0 or t[0] <= 0:
        raise ParameterError("need 4 retention targets in (0, 1] ending at 1.0")
    if any(b <= a for a, b in zip(t, t[1:])):
        raise ParameterError("retention targets must be strictly increasing")


def build_ladder(tile, cloud: GaussianCloud, retention_targets=DEFAULT_RETENTION,
                 saliency_gain: float = DEFAULT_SALIENCY_GAIN) -> TileLadder:
    """Four nested quality levels; level thresholds are per-tile significance quantiles."""
    _check_targets(retention_targets)
    members = np.asarray(tile.member_indices, dtype=np.int64)
    n = len(members)
    sig = significance_array(cloud)
    ranked = np.sort(sig[members])[::-1]
    levels = []
    for lvl, r in enumerate(effective_retention(retention_targets, tile.saliency, saliency_gain), 1):
        if lvl == LEVELS:
            threshold = 0.0
        else:
            keep = int(np.floor(r * n + 1e-9))
            if keep == 0:
                threshold = float(np.nextafter(ranked[0], np.inf)) if n else 0.0
            else:
                threshold = float(ranked[keep - 1])
        retained = apply_mask(members, cloud, threshold, sig)
        size = TILE_HEADER.size + BYTES_PER_PRIMITIVE * len(retained)
        levels.append(QualityLevel(lvl, retained, threshold, size))
    return TileLadder(int(tile.id), tuple(levels), float(tile.saliency))


def encode_tile(level: QualityLevel, cloud: GaussianCloud, tile_id: int = 0) -> bytes:
    body = cloud.subset(level.retained_indices).to_records().tobytes()
    head = TILE_HEADER.pack(TILE_MAGIC, tile_id, level.level, level.retained,
                            zlib.crc32(body))
    return head + body


def decode_tile(blob: bytes) -> tuple[int, int, GaussianCloud]:
    """Inverse of encode_tile: (tile id, level, retained primitives)."""
    if len(blob) < TILE_HEADER.size:
        raise TruncationError("tile blob shorter than its header")
    magic, tile_id, level, count, crc = TILE_HEADER.unpack_from(blob)
    if magic != TILE_MAGIC:
        raise FormatError("not a tile blob")
    body = blob[TILE_HEADER.size:]
    if len(body) < count * BYTES_PER_PRIMITIVE:
        raise TruncationError("tile body shorter than declared count")
    body = body[:count * BYTES_PER_PRIMITIVE]
    if zlib.crc32(body) != crc:
        raise FormatError("tile checksum mismatch")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE, count=count)
    return tile_id, level, GaussianCloud.from_records(rec)


def ladder_rows(gof_index: int, ladder: TileLadder) -> list[dict]:
    return [{"gof": gof_index, "tile": ladder.tile_id, "level": l.level, "retained": l.retained,
             "bytes": l.encoded_bytes, "threshold": l.threshold, "gpsnr_vs_full": l.gpsnr_vs_full}
            for l in ladder.levels]
