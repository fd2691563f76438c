"""Gaussian primitives, clouds, and the binary PLY layout used by splat assets.

A :class:`GaussianCloud` keeps its attributes in the on-disk parameterization
(float32 positions, logit opacity, log scale, raw quaternion) so that PLY
round-trips are bit-exact; activated values are exposed as properties.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ParameterError, SchemaError, TruncationError

SH_COEFFS = 16
SH_DIM = SH_COEFFS * 3

PLY_PROPERTIES = (
    ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    + [f"f_rest_{i}" for i in range(45)]
    + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
)
RECORD_DTYPE = np.dtype([(name, "<f4") for name in PLY_PROPERTIES])
FLOATS_PER_PRIMITIVE = len(PLY_PROPERTIES)  # 62
BYTES_PER_PRIMITIVE = RECORD_DTYPE.itemsize  # 248

_REQUIRED = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "<u2", "uint16": "<u2", "short": "<i2", "int16": "<i2",
    "uint": "<u4", "uint32": "<u4", "int": "<i4", "int32": "<i4",
}

_OPACITY_EPS = 1e-12


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), _OPACITY_EPS, 1.0 - _OPACITY_EPS)
    return np.log(p / (1.0 - p))


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrices for (w, x, y, z) quaternions; accepts shape (4,) or (N, 4)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    m = np.empty((len(q), 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m[0] if single else m


def _frozen(a, dtype, shape) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True).reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianPrimitive:
    """A single anisotropic Gaussian with activated attribute values."""

    position: tuple
    rotation: tuple  # unit quaternion (w, x, y, z)
    scale: tuple
    opacity: float
    sh: tuple  # 48 values, coefficient-major RGB; sh[0:3] is the DC band

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "rotation", tuple(float(v) for v in self.rotation))
        object.__setattr__(self, "scale", tuple(float(v) for v in self.scale))
        object.__setattr__(self, "sh", tuple(float(v) for v in self.sh))
        if len(self.position) != 3 or len(self.scale) != 3 or len(self.rotation) != 4:
            raise ParameterError("position/scale need 3 entries, rotation 4")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ParameterError("rotation must be a unit quaternion")
        if min(self.scale) <= 0:
            raise ParameterError("scale components must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ParameterError("opacity must lie in [0, 1]")
        if len(self.sh) != SH_DIM:
            raise ParameterError(f"sh needs exactly {SH_DIM} entries")


def covariance_of(p: GaussianPrimitive) -> np.ndarray:
    """World-space covariance R diag(s)^2 R^T of a primitive."""
    r = quat_to_matrix(p.rotation)
    s2 = np.square(np.asarray(p.scale))
    return (r * s2) @ r.T


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """One frame of primitives, stored in PLY parameterization (float32)."""

    positions: np.ndarray
    normals: np.ndarray
    sh: np.ndarray  # (N, 16, 3)
    opacity_logit: np.ndarray
    log_scale: np.ndarray
    rotation_raw: np.ndarray  # (N, 4) as stored, (w, x, y, z)

    def __post_init__(self):
        n = len(np.asarray(self.positions).reshape(-1, 3))
        object.__setattr__(self, "positions", _frozen(self.positions, np.float32, (n, 3)))
        object.__setattr__(self, "normals", _frozen(self.normals, np.float32, (n, 3)))
        object.__setattr__(self, "sh", _frozen(self.sh, np.float32, (n, SH_COEFFS, 3)))
        object.__setattr__(self, "opacity_logit", _frozen(self.opacity_logit, np.float32, (n,)))
        object.__setattr__(self, "log_scale", _frozen(self.log_scale, np.float32, (n, 3)))
        object.__setattr__(self, "rotation_raw", _frozen(self.rotation_raw, np.float32, (n, 4)))

    # construction -----------------------------------------------------------------

    @classmethod
    def empty(cls) -> "GaussianCloud":
        z3 = np.zeros((0, 3))
        return cls(z3, z3, np.zeros((0, SH_COEFFS, 3)), np.zeros(0), z3, np.zeros((0, 4)))

    @classmethod
    def from_activated(cls, positions, rotations, scales, opacities, sh=None,
                       normals=None) -> "GaussianCloud":
        """Build a cloud from activated values (opacity in [0,1], linear scale)."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        scales = np.asarray(scales, dtype=np.float64).reshape(n, 3)
        if np.any(scales <= 0):
            raise ParameterError("scale components must be positive")
        opacities = np.asarray(opacities, dtype=np.float64).reshape(n)
        if np.any((opacities < 0) | (opacities > 1)):
            raise ParameterError("opacity must lie in [0, 1]")
        rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        norms = np.linalg.norm(rotations, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ParameterError("zero quaternion")
        if sh is None:
            sh = np.zeros((n, SH_COEFFS, 3))
        sh = np.asarray(sh, dtype=np.float64).reshape(n, SH_COEFFS, 3)
        if normals is None:
            normals = np.zeros((n, 3))
        return cls(positions, normals, sh, logit(opacities), np.log(scales), rotations / norms)

    @classmethod
    def from_primitives(cls, prims: Iterable[GaussianPrimitive]) -> "GaussianCloud":
        prims = list(prims)
        if not prims:
            return cls.empty()
        return cls.from_activated(
            [p.position for p in prims], [p.rotation for p in prims],
            [p.scale for p in prims], [p.opacity for p in prims],
            [np.reshape(p.sh, (SH_COEFFS, 3)) for p in prims],
        )

    @classmethod
    def concat(cls, clouds: Sequence["GaussianCloud"]) -> "GaussianCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(*(np.concatenate([getattr(c, f) for c in clouds])
                     for f in ("positions", "normals", "sh", "opacity_logit",
                               "log_scale", "rotation_raw")))

    # activated views ----------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale.astype(np.float64))

    @property
    def rotations(self) -> np.ndarray:
        q = self.rotation_raw.astype(np.float64)
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        ident = np.array([1.0, 0.0, 0.0, 0.0])
        safe = np.where(norms > 0, norms, 1.0)
        return np.where(norms > 0, q / safe, ident)

    @property
    def sh_dc(self) -> np.ndarray:
        return self.sh[:, 0, :].astype(np.float64)

    @cached_property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        p = self.positions.astype(np.float64)
        return p.min(axis=0), p.max(axis=0)

    @property
    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.positions[i], self.rotations[i], self.scales[i],
            float(self.opacities[i]), self.sh[i].astype(np.float64).ravel(),
        )

    def primitives(self) -> list[GaussianPrimitive]:
        return [self[i] for i in range(len(self))]

    def subset(self, indices) -> "GaussianCloud":
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        return GaussianCloud(self.positions[idx], self.normals[idx], self.sh[idx],
                             self.opacity_logit[idx], self.log_scale[idx],
                             self.rotation_raw[idx])

    def replace(self, **changes) -> "GaussianCloud":
        fields = {f: getattr(self, f) for f in ("positions", "normals", "sh", "opacity_logit",
                                                 "log_scale", "rotation_raw")}
        fields.update(changes)
        return GaussianCloud(**fields)

    def covariances(self) -> np.ndarray:
        r = quat_to_matrix(self.rotations) if len(self) else np.zeros((0, 3, 3))
        s2 = np.square(self.scales)
        return np.einsum("nij,nj,nkj->nik", r, s2, r)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GaussianCloud):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("positions", "normals", "sh", "opacity_logit",
                             "log_scale", "rotation_raw"))

    __hash__ = None

    # PLY records --------------------------------------------------------------------

    def to_records(self) -> np.ndarray:
        rec = np.empty(len(self), dtype=RECORD_DTYPE)
        for a, name in enumerate("xyz"):
            rec[name] = self.positions[:, a]
            rec["n" + name] = self.normals[:, a]
        for c in range(3):
            rec[f"f_dc_{c}"] = self.sh[:, 0, c]
            for k in range(1, SH_COEFFS):
                rec[f"f_rest_{c * 15 + k - 1}"] = self.sh[:, k, c]
        rec["opacity"] = self.opacity_logit
        for a in range(3):
            rec[f"scale_{a}"] = self.log_scale[:, a]
        for a in range(4):
            rec[f"rot_{a}"] = self.rotation_raw[:, a]
        return rec

    @classmethod
    def from_records(cls, rec: np.ndarray) -> "GaussianCloud":
        names = rec.dtype.names or ()
        missing = [p for p in _REQUIRED if p not in names]
        if missing:
            raise SchemaError(f"missing required properties: {', '.join(missing)}")
        n = len(rec)

        def col(name):
            return rec[name].astype(np.float32) if name in names else np.zeros(n, np.float32)

        sh = np.zeros((n, SH_COEFFS, 3), dtype=np.float32)
        for c in range(3):
            sh[:, 0, c] = col(f"f_dc_{c}")
            for k in range(1, SH_COEFFS):
                sh[:, k, c] = col(f"f_rest_{c * 15 + k - 1}")
        return cls(
            np.stack([col(a) for a in "xyz"], axis=1),
            np.stack([col("n" + a) for a in "xyz"], axis=1),
            sh,
            col("opacity"),
            np.stack([col(f"scale_{a}") for a in range(3)], axis=1),
            np.stack([col(f"rot_{a}") for a in range(4)], axis=1),
        )


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple
    fps: float = 30.0

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise ParameterError("a frame sequence needs at least one frame")
        if not self.fps > 0:
            raise ParameterError("fps must be positive")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def duration_s(self) -> float:
        return len(self.frames) / self.fps


# PLY I/O --------------------------------------------------------------------------------

def ply_header(count: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {count}"]
    lines += [f"property float {name}" for name in PLY_PROPERTIES]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_ply(cloud: GaussianCloud) -> bytes:
    rec = cloud.to_records()
    if len(rec) and not np.all(np.isfinite(rec.view(np.float32).reshape(len(rec), -1))):
        raise ValueError("cloud contains non-finite values")
    return ply_header(len(cloud)) + rec.tobytes()


def parse_ply(data: bytes) -> GaussianCloud:
    marker = b"end_header\n"
    end = data.find(marker)
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file or header not terminated")
    try:
        lines = data[:end].decode("ascii").split("\n")[1:]
    except UnicodeDecodeError as exc:
        raise FormatError("header is not ASCII") from exc

    count = None
    fields: list[tuple[str, str]] = []
    in_vertex = False
    seen_format = False
    for line in lines:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:] != ["binary_little_endian", "1.0"]:
                raise FormatError(f"unsupported format line: {line!r}")
            seen_format = True
        elif tok[0] == "element":
            if len(tok) != 3:
                raise FormatError(f"bad element line: {line!r}")
            if count is not None:
                # later elements are not read; vertex data comes first in the body
                in_vertex = False
                continue
            if tok[1] != "vertex":
                raise FormatError("first element must be 'vertex'")
            try:
                count = int(tok[2])
            except ValueError as exc:
                raise FormatError(f"bad vertex count: {tok[2]!r}") from exc
            if count < 0:
                raise FormatError("negative vertex count")
            in_vertex = True
        elif tok[0] == "property":
            if not in_vertex:
                continue
            if len(tok) != 3 or tok[1] == "list":
                raise FormatError(f"unsupported property line: {line!r}")
            if tok[1] not in _PLY_TYPES:
                raise FormatError(f"unknown property type {tok[1]!r}")
            fields.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise FormatError(f"unexpected header line: {line!r}")
    if not seen_format or count is None:
        raise FormatError("header lacks format or vertex element")
    try:
        dtype = np.dtype(fields)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid property list: {exc}") from exc

    body = data[end + len(marker):]
    need = count * dtype.itemsize
    if len(body) < need:
        raise TruncationError(f"body has {len(body)} bytes, header declares {need}")
    rec = np.frombuffer(body, dtype=dtype, count=count)
    return GaussianCloud.from_records(rec)


def read_ply(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        return parse_ply(fh.read())


def save_ply(cloud: GaussianCloud, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_ply(cloud))


def raw_size_bytes(cloud: GaussianCloud) -> int:
    """Uncompressed payload size: 62 float32 scalars per primitive, header excluded."""
    return len(cloud) * FLOATS_PER_PRIMITIVE * 4
