"""Quality measurement: ICP alignment, geometric PSNR, a splat rasterizer and image PSNR."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera
from .errors import DegenerateInputError, ParameterError
from .model import GaussianCloud

PSNR_CAP = 100.0
COLOR_PEAK = 2.0
DENSITY_K = 8


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    @property
    def angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


def best_fit_transform(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform taking src onto dst (Kabsch, reflection-safe)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, mu_d - r @ mu_s)


def _check_points(p: np.ndarray, name: str) -> None:
    if p.ndim != 2 or p.shape[1] != 3 or len(p) < 3:
        raise DegenerateInputError(f"{name} needs at least 3 points")
    s = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if s[0] == 0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateInputError(f"{name} is collinear or coincident")


def _principal_axes(p: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(np.cov((p - p.mean(axis=0)).T))
    return v[:, np.argsort(w)[::-1]]


def _initial_guesses(src: np.ndarray, dst: np.ndarray) -> list[RigidTransform]:
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    guesses = [RigidTransform.identity(), RigidTransform(np.eye(3), mu_d - mu_s)]
    es, ed = _principal_axes(src), _principal_axes(dst)
    for signs in itertools.product((1.0, -1.0), repeat=3):
        r = ed @ np.diag(signs) @ es.T
        if np.linalg.det(r) > 0:
            guesses.append(RigidTransform(r, mu_d - r @ mu_s))
    return guesses


def _icp_from(src, dst, tree, init: RigidTransform, max_iters: int, tol: float):
    cur = init.apply(src)
    prev = np.inf
    idx = None
    for _ in range(max_iters):
        dist, idx = tree.query(cur)
        rms = float(np.sqrt(np.mean(dist ** 2)))
        if rms == 0.0 or prev - rms < tol:
            break
        prev = rms
        step = best_fit_transform(cur, dst[idx])
        cur = step.apply(cur)
    dist, idx = tree.query(cur)
    # one refit from the original points removes drift accumulated by composition
    final = best_fit_transform(src, dst[idx])
    d2, _ = tree.query(final.apply(src))
    return final, float(np.sqrt(np.mean(d2 ** 2)))


def icp_align(src, dst, max_iters: int = 100, tol: float = 1e-12) -> RigidTransform:
    """Point-to-point ICP taking src toward dst.

    Several starts are tried (identity, centroid shift, principal-axis alignments)
    and the one converging to the lowest RMS residual wins.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    _check_points(src, "src")
    _check_points(dst, "dst")
    tree = cKDTree(dst)
    d0, _ = tree.query(src)
    if np.all(d0 == 0):
        return RigidTransform.identity()
    best, best_rms = None, np.inf
    for guess in _initial_guesses(src, dst):
        t, rms = _icp_from(src, dst, tree, guess, max_iters, tol)
        if rms < best_rms:
            best, best_rms = t, rms
    return best


def density_weights(points: np.ndarray, k: int = DENSITY_K) -> np.ndarray:
    """Inverse local density (k-NN ball volume / k) per point; uniform when degenerate."""
    n = len(points)
    kk = min(k, n - 1)
    if kk <= 0:
        return np.ones(n)
    dist, _ = cKDTree(points).query(points, kk + 1)
    r = dist[:, kk]
    w = (4.0 / 3.0) * np.pi * r ** 3 / kk
    if not np.any(w > 0):
        return np.ones(n)
    return w


def _directional_mse(src_p, src_c, w, dst_p, dst_c):
    dist, idx = cKDTree(dst_p).query(src_p)
    geo = dist ** 2
    col = np.sum((src_c - dst_c[idx]) ** 2, axis=1)
    ws = w.sum()
    return float(np.dot(w, geo) / ws), float(np.dot(w, col) / ws)


def psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def geometric_psnr(reference: GaussianCloud, test: GaussianCloud, lambda_geo: float = 0.8,
                   lambda_col: float = 0.2, use_icp: bool = True, k: int = DENSITY_K) -> float:
    """ICP-aligned, bidirectional, density-weighted position+DC-colour PSNR in dB."""
    if len(reference) == 0 or len(test) == 0:
        raise ParameterError("geometric_psnr needs two non-empty clouds")
    if lambda_geo < 0 or lambda_col < 0 or abs(lambda_geo + lambda_col - 1.0) > 1e-9:
        raise ParameterError("lambda_geo + lambda_col must equal 1")
    ref_p = reference.positions.astype(np.float64)
    tst_p = test.positions.astype(np.float64)
    if use_icp:
        try:
            tst_p = icp_align(tst_p, ref_p).apply(tst_p)
        except DegenerateInputError:
            pass
    ref_c, tst_c = reference.sh_dc, test.sh_dc
    w_ref = density_weights(ref_p, k)
    w_tst = density_weights(tst_p, k)
    g1, c1 = _directional_mse(tst_p, tst_c, w_tst, ref_p, ref_c)
    g2, c2 = _directional_mse(ref_p, ref_c, w_ref, tst_p, tst_c)
    peak = max(reference.bbox_diagonal, 1e-9)
    mse = lambda_geo * max(g1, g2) / peak ** 2 + lambda_col * max(c1, c2) / COLOR_PEAK ** 2
    return psnr_from_mse(mse)


# rasterizer -----------------------------------------------------------------------------

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def eval_sh(degree: int, sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Real spherical-harmonics radiance for unit directions; sh has shape (N, 16, 3)."""
    res = SH_C0 * sh[:, 0]
    if degree < 1:
        return res
    x, y, z = (dirs[:, i:i + 1] for i in range(3))
    res = res - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
    if degree < 2:
        return res
    xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
    res = (res + SH_C2[0] * xy * sh[:, 4] + SH_C2[1] * yz * sh[:, 5]
           + SH_C2[2] * (2 * zz - xx - yy) * sh[:, 6] + SH_C2[3] * xz * sh[:, 7]
           + SH_C2[4] * (xx - yy) * sh[:, 8])
    if degree < 3:
        return res
    return (res + SH_C3[0] * y * (3 * xx - yy) * sh[:, 9] + SH_C3[1] * xy * z * sh[:, 10]
            + SH_C3[2] * y * (4 * zz - xx - yy) * sh[:, 11]
            + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[:, 12]
            + SH_C3[4] * x * (4 * zz - xx - yy) * sh[:, 13]
            + SH_C3[5] * z * (xx - yy) * sh[:, 14] + SH_C3[6] * x * (xx - 3 * yy) * sh[:, 15])


@dataclass(frozen=True, eq=False)
class Image:
    pixels: np.ndarray  # (height, width, 3) in [0, 1]

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ParameterError("image must be (height, width, 3) with positive size")
        if np.any(p < 0) or np.any(p > 1):
            raise ParameterError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4


def render(cloud: GaussianCloud, cam: Camera, width: int, height: int,
           sh_degree: int = 0) -> Image:
    """Depth-sorted front-to-back splatting of the cloud into an RGB image."""
    if width < 1 or height < 1:
        raise ParameterError("image dimensions must be positive")
    img = np.zeros((height, width, 3))
    if len(cloud) == 0:
        return Image(img)

    pw = cloud.positions.astype(np.float64)
    inside = np.flatnonzero(cam.contains(pw))
    if inside.size == 0:
        return Image(img)
    pc = cam.to_camera(pw[inside])
    # content-based tie-break keeps the output independent of input order
    keys = (pw[inside, 2], pw[inside, 1], pw[inside, 0], pc[:, 2])
    order = np.lexsort(keys)
    sel = inside[order]
    pc = pc[order]

    tx, ty = cam.tan_half_fov
    fx, fy = (width / 2.0) / tx, (height / 2.0) / ty
    cx, cy = width / 2.0, height / 2.0
    x, y, z = pc.T
    u = fx * x / z + cx
    v = fy * y / z + cy

    rot = cam.rotation
    cov_w = cloud.subset(sel).covariances()
    cov_c = np.einsum("ji,njk,kl->nil", rot, cov_w, rot)
    jac = np.zeros((len(sel), 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / z ** 2
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / z ** 2
    cov2 = np.einsum("nij,njk,nlk->nil", jac, cov_c, jac)

    dirs = pw[sel] - np.asarray(cam.position)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    colors = np.clip(eval_sh(sh_degree, cloud.sh[sel].astype(np.float64), dirs) + 0.5, 0.0, None)
    opac = cloud.opacities[sel]

    trans = np.ones((height, width))
    for n in range(len(sel)):
        if opac[n] < ALPHA_MIN:
            continue
        a, b, c = cov2[n, 0, 0], cov2[n, 0, 1], cov2[n, 1, 1]
        det = a * c - b * b
        if not det > 0:
            continue
        lam = 0.5 * (a + c) + np.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
        radius = 3.0 * np.sqrt(lam)
        x0 = max(int(np.floor(u[n] - radius)), 0)
        x1 = min(int(np.ceil(u[n] + radius)), width)
        y0 = max(int(np.floor(v[n] - radius)), 0)
        y1 = min(int(np.ceil(v[n] + radius)), height)
        if x0 >= x1 or y0 >= y1:
            continue
        dx = (np.arange(x0, x1) + 0.5 - u[n])[None, :]
        dy = (np.arange(y0, y1) + 0.5 - v[n])[:, None]
        maha = (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
        alpha = np.minimum(ALPHA_MAX, opac[n] * np.exp(-0.5 * maha))
        alpha = np.where((maha <= 9.0) & (alpha >= ALPHA_MIN), alpha, 0.0)
        t = trans[y0:y1, x0:x1]
        alpha = np.where(t >= T_MIN, alpha, 0.0)
        img[y0:y1, x0:x1] += (t * alpha)[..., None] * colors[n]
        trans[y0:y1, x0:x1] = t * (1.0 - alpha)
    return Image(np.clip(img, 0.0, 1.0))


def image_psnr(a: Image, b: Image) -> float:
    if a.pixels.shape != b.pixels.shape:
        raise ParameterError("images differ in size")
    mse = float(np.mean((a.pixels - b.pixels) ** 2))
    return psnr_from_mse(mse)


def write_ppm(image: Image, path) -> None:
    data = np.rint(image.pixels * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> Image:
    with open(path, "rb") as fh:
        raw = fh.read()
    # header: four whitespace-separated tokens, then exactly one whitespace byte
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParameterError("truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ParameterError("only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1: pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise ParameterError("truncated PPM body")
    return Image(np.frombuffer(body, np.uint8).reshape(h, w, 3) / 255.0)
