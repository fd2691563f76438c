"""Group-of-Frames construction: keyframe plus quantized per-frame deformation deltas.

Each later frame is described relative to the keyframe by mutual nearest-neighbour
correspondences. Matched primitives carry 16-bit position, opacity and DC-colour
deltas; unmatched targets are shipped whole as births and unmatched keyframe
primitives are listed as deaths. Frame records are independent of one another, so
any frame reconstructs from the keyframe and its own record.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, ParameterError, RangeError, TruncationError
from .model import (BYTES_PER_PRIMITIVE, RECORD_DTYPE, FrameSequence, GaussianCloud,
                    logit, parse_ply, sigmoid, write_ply)

QMAX = 32767  # signed 16-bit magnitude; 0 decodes to exactly 0
OPACITY_RANGE = 1.0
DC_RANGE = 2.0
ATTR_WEIGHT = 10.0
MAX_REL_CHANGE = 0.10

_MAGIC = b"GOF1"


@dataclass(frozen=True, eq=False)
class FrameRecord:
    key_idx: np.ndarray  # keyframe indices, ascending
    target_idx: np.ndarray  # matching indices in the original frame
    pos_q: np.ndarray  # (M, 3) int16
    opacity_q: np.ndarray  # (M,) int16
    dc_q: np.ndarray  # (M, 3) int16
    births: GaussianCloud
    deaths: np.ndarray

    @property
    def match_count(self) -> int:
        return len(self.key_idx)

    def birth_targets(self) -> np.ndarray:
        """Original-frame indices of the births, in the order they are stored."""
        n = self.match_count + len(self.births)
        mask = np.ones(n, dtype=bool)
        mask[self.target_idx] = False
        return np.flatnonzero(mask)


@dataclass(frozen=True, eq=False)
class DeformationTrack:
    frame_count: int
    pos_range: np.ndarray  # per-axis half-range of the position quantizer
    records: tuple

    @property
    def pos_step(self) -> np.ndarray:
        return self.pos_range / QMAX

    def decode_positions(self, rec: FrameRecord) -> np.ndarray:
        return rec.pos_q.astype(np.float64) * self.pos_step


@dataclass(frozen=True, eq=False)
class GoF:
    index: int
    keyframe: GaussianCloud
    track: DeformationTrack
    fps: float

    @property
    def frame_count(self) -> int:
        return self.track.frame_count

    @property
    def duration_s(self) -> float:
        return self.track.frame_count / self.fps


@dataclass(frozen=True, eq=False)
class SceneSplit:
    foreground: GaussianCloud
    background: GaussianCloud
    fg_indices: np.ndarray


def segment_gofs(seq, gof_len: int) -> list[range]:
    """Contiguous frame ranges of length gof_len; the last may be shorter."""
    n = len(seq) if not isinstance(seq, int) else seq
    if gof_len < 1:
        raise ParameterError("gof_len must be >= 1")
    return [range(s, min(s + gof_len, n)) for s in range(0, n, gof_len)]


def _union_bbox(frames):
    los, his = [], []
    for f in frames:
        if len(f):
            lo, hi = f.bbox
            los.append(lo)
            his.append(hi)
    if not los:
        return np.zeros(3), np.zeros(3)
    return np.min(los, axis=0), np.max(his, axis=0)


def match_features(c: GaussianCloud, diag: float, w: float = ATTR_WEIGHT) -> np.ndarray:
    """Joint position/attribute vectors used for mutual-nearest-neighbour matching."""
    q = c.rotations
    q = q * np.where(q[:, :1] < 0, -1.0, 1.0)
    return np.hstack([
        c.positions.astype(np.float64) / diag,
        w * c.sh_dc,
        w * c.opacities[:, None],
        w * c.log_scale.astype(np.float64),
        w * q,
    ])


def _match(key: GaussianCloud, tgt: GaussianCloud, diag: float, r_match: float,
           pos_range: np.ndarray, attr_weight: float):
    if len(key) == 0 or len(tgt) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    fk = match_features(key, diag, attr_weight)
    ft = match_features(tgt, diag, attr_weight)
    _, nn_t = cKDTree(ft).query(fk)
    _, nn_k = cKDTree(fk).query(ft)
    ki = np.flatnonzero(nn_k[nn_t] == np.arange(len(key)))
    ti = nn_t[ki]

    dpos = tgt.positions[ti].astype(np.float64) - key.positions[ki].astype(np.float64)
    ok = np.linalg.norm(dpos, axis=1) <= r_match
    ok &= np.all(np.abs(dpos) <= pos_range + 1e-12, axis=1)
    rel = np.abs(tgt.scales[ti] / key.scales[ki] - 1.0)
    ok &= np.all(rel <= MAX_REL_CHANGE, axis=1)
    qk, qt = key.rotations[ki], tgt.rotations[ti]
    qdist = np.minimum(np.linalg.norm(qk - qt, axis=1), np.linalg.norm(qk + qt, axis=1))
    ok &= qdist <= MAX_REL_CHANGE
    ok &= np.all(np.abs(tgt.sh_dc[ti] - key.sh_dc[ki]) <= DC_RANGE, axis=1)
    return ki[ok], ti[ok]


def _quantize(d: np.ndarray, half_range) -> np.ndarray:
    half_range = np.broadcast_to(np.asarray(half_range, dtype=np.float64), d.shape)
    safe = np.where(half_range > 0, half_range, 1.0)
    q = np.where(half_range > 0, np.rint(d / safe * QMAX), 0.0)
    return np.clip(q, -QMAX, QMAX).astype(np.int16)


def _identity_record(n: int) -> FrameRecord:
    idx = np.arange(n, dtype=np.int64)
    return FrameRecord(idx, idx.copy(), np.zeros((n, 3), np.int16), np.zeros(n, np.int16),
                       np.zeros((n, 3), np.int16), GaussianCloud.empty(), np.zeros(0, np.int64))


def build_deformation(frames, fps: float | None = None, index: int = 0,
                      r_match: float | None = None, attr_weight: float = ATTR_WEIGHT) -> GoF:
    """Encode frames[0] as keyframe and every later frame as a correspondence record.

    fps defaults to the sequence rate when given a FrameSequence, else 30.
    """
    if fps is None:
        fps = frames.fps if isinstance(frames, FrameSequence) else 30.0
    frames = list(frames.frames if isinstance(frames, FrameSequence) else frames)
    if not frames:
        raise ParameterError("cannot build a GoF from zero frames")
    key = frames[0]
    lo, hi = _union_bbox(frames)
    pos_range = hi - lo
    diag = float(np.linalg.norm(pos_range))
    diag_safe = diag if diag > 0 else 1.0
    if r_match is None:
        r_match = diag
    records = [_identity_record(len(key))]
    key_op = key.opacities
    key_dc = key.sh_dc
    for tgt in frames[1:]:
        ki, ti = _match(key, tgt, diag_safe, r_match, pos_range, attr_weight)
        dpos = tgt.positions[ti].astype(np.float64) - key.positions[ki].astype(np.float64)
        dop = tgt.opacities[ti] - key_op[ki]
        ddc = tgt.sh_dc[ti] - key_dc[ki]
        births_mask = np.ones(len(tgt), dtype=bool)
        births_mask[ti] = False
        deaths_mask = np.ones(len(key), dtype=bool)
        deaths_mask[ki] = False
        records.append(FrameRecord(
            ki.astype(np.int64), ti.astype(np.int64),
            _quantize(dpos, pos_range), _quantize(dop, OPACITY_RANGE), _quantize(ddc, DC_RANGE),
            tgt.subset(np.flatnonzero(births_mask)), np.flatnonzero(deaths_mask),
        ))
    track = DeformationTrack(len(frames), pos_range, tuple(records))
    return GoF(index, key, track, float(fps))


def reconstruct_frame(gof: GoF, k: int) -> GaussianCloud:
    if not 0 <= k < gof.track.frame_count:
        raise RangeError(f"frame {k} outside GoF of {gof.track.frame_count} frames")
    if k == 0:
        return gof.keyframe
    rec = gof.track.records[k]
    base = gof.keyframe.subset(rec.key_idx)
    pos = base.positions.astype(np.float64) + gof.track.decode_positions(rec)

    op_logit = base.opacity_logit.copy()
    moved = rec.opacity_q != 0
    if np.any(moved):
        op = sigmoid(op_logit[moved]) + rec.opacity_q[moved] / QMAX * OPACITY_RANGE
        op_logit[moved] = logit(np.clip(op, 0.0, 1.0))

    sh = base.sh.copy()
    dq = rec.dc_q != 0
    dc = sh[:, 0, :].astype(np.float64) + rec.dc_q / QMAX * DC_RANGE
    sh[:, 0, :] = np.where(dq, dc.astype(np.float32), sh[:, 0, :])

    moved_cloud = base.replace(positions=pos, opacity_logit=op_logit, sh=sh)
    return GaussianCloud.concat([moved_cloud, rec.births])


def frame_targets(gof: GoF, k: int) -> np.ndarray:
    """Original-frame index of each primitive in reconstruct_frame(gof, k), in order."""
    if k == 0:
        return np.arange(len(gof.keyframe))
    rec = gof.track.records[k]
    return np.concatenate([rec.target_idx, rec.birth_targets()])


def max_displacement(gof: GoF) -> np.ndarray:
    """Largest decoded displacement magnitude of each keyframe primitive over the GoF."""
    out = np.zeros(len(gof.keyframe))
    for rec in gof.track.records[1:]:
        d = np.linalg.norm(gof.track.decode_positions(rec), axis=1)
        np.maximum.at(out, rec.key_idx, d)
    return out


def split_foreground(gof: GoF, motion_threshold: float) -> SceneSplit:
    """Partition the keyframe into moving/dying primitives and a static remainder.

    Births are not part of the keyframe; callers treat them as foreground.
    """
    if motion_threshold < 0:
        raise ParameterError("motion_threshold must be >= 0")
    fg = max_displacement(gof) > motion_threshold
    for rec in gof.track.records[1:]:
        fg[rec.deaths] = True
    fg_idx = np.flatnonzero(fg)
    return SceneSplit(gof.keyframe.subset(fg_idx), gof.keyframe.subset(np.flatnonzero(~fg)),
                      fg_idx)


# container ------------------------------------------------------------------------------

def track_to_bytes(track: DeformationTrack) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", track.frame_count))
    for rec in track.records[1:]:  # frame 0 is the keyframe itself
        m = rec.match_count
        buf.write(struct.pack("<I", m))
        pairs = np.empty((m, 2), dtype="<u4")
        pairs[:, 0] = rec.key_idx
        pairs[:, 1] = rec.target_idx
        buf.write(pairs.tobytes())
        deltas = np.hstack([rec.pos_q, rec.opacity_q[:, None], rec.dc_q]).astype(np.int32) + QMAX
        buf.write(deltas.astype("<u2").tobytes())
        buf.write(struct.pack("<I", len(rec.births)))
        buf.write(rec.births.to_records().tobytes())
        buf.write(struct.pack("<I", len(rec.deaths)))
        buf.write(np.asarray(rec.deaths, dtype="<u4").tobytes())
    return buf.getvalue()


def gof_to_bytes(gof: GoF) -> bytes:
    key_blob = write_ply(gof.keyframe)
    head = _MAGIC + struct.pack("<IId3dQ", gof.index, gof.track.frame_count, gof.fps,
                                *gof.track.pos_range.tolist(), len(key_blob))
    return head + key_blob + track_to_bytes(gof.track)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError("GoF container ends early")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt, count=count)


def gof_from_bytes(data: bytes) -> GoF:
    if data[:4] != _MAGIC:
        raise FormatError("not a GoF container")
    r = _Reader(data, 4)
    index, frame_count, fps, rx, ry, rz, key_len = r.unpack("<IId3dQ")
    keyframe = parse_ply(r.take(key_len))
    (fc,) = r.unpack("<I")
    if fc != frame_count:
        raise FormatError("frame count mismatch between header and track")
    records = [_identity_record(len(keyframe))]
    for _ in range(fc - 1):
        (m,) = r.unpack("<I")
        pairs = r.array("<u4", 2 * m).reshape(m, 2).astype(np.int64)
        deltas = r.array("<u2", 7 * m).reshape(m, 7).astype(np.int32) - QMAX
        (b,) = r.unpack("<I")
        births = GaussianCloud.from_records(r.array(RECORD_DTYPE, b))
        (d,) = r.unpack("<I")
        deaths = r.array("<u4", d).astype(np.int64)
        records.append(FrameRecord(pairs[:, 0], pairs[:, 1], deltas[:, 0:3].astype(np.int16),
                                   deltas[:, 3].astype(np.int16), deltas[:, 4:7].astype(np.int16),
                                   births, deaths))
    track = DeformationTrack(fc, np.array([rx, ry, rz]), tuple(records))
    return GoF(index, keyframe, track, fps)


def track_size_bytes(track: DeformationTrack) -> int:
    # 4 (frame count) + per non-key frame: 4 + 22*M + 4 + 248*B + 4 + 4*D
    return 4 + sum(12 + 22 * r.match_count + BYTES_PER_PRIMITIVE * len(r.births) + 4 * len(r.deaths)
                   for r in track.records[1:])
