import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splatstream.camera import Camera
from splatstream.errors import DegenerateInputError, ParameterError
from splatstream.ladder import apply_mask, significance_array
from splatstream.metrics import (SH_C0, Image, RigidTransform, density_weights, geometric_psnr,
                                 icp_align, image_psnr, read_ppm, render, write_ppm)
from splatstream.model import GaussianCloud
from splatstream.synth import random_cloud

from oracles import brute_density_weights, brute_gpsnr, pixel_loop_psnr


def points_cloud(points, dc=None, opacity=1.0, scale=0.01):
    p = np.asarray(points, float).reshape(-1, 3)
    n = len(p)
    sh = np.zeros((n, 16, 3))
    if dc is not None:
        sh[:, 0, :] = dc
    return GaussianCloud.from_activated(p, np.tile([1, 0, 0, 0], (n, 1)), np.full((n, 3), scale),
                                        np.full(n, opacity), sh)


def dc_for(rgb):
    """SH-DC coefficients whose degree-0 colour is rgb."""
    return (np.asarray(rgb, float) - 0.5) / SH_C0


def front_camera(**kw):
    return Camera.look_at((0, 0, -5), (0, 0, 0), **kw)


# ICP -------------------------------------------------------------------------------------

def test_icp_identity(rng):
    p = rng.uniform(-1, 1, (150, 3))
    t = icp_align(p, p)
    assert np.allclose(t.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(t.translation, 0, atol=1e-9)


def test_icp_translation(rng):
    p = rng.uniform(-1, 1, (150, 3))
    t = icp_align(p, p + (1, 2, 3))
    assert np.allclose(t.translation, (1, 2, 3), atol=1e-6)
    assert np.allclose(t.rotation, np.eye(3), atol=1e-6)


def test_icp_rotation_z(rng):
    p = rng.uniform(-1, 1, (200, 3))
    r = Rotation.from_euler("z", 10, degrees=True).as_matrix()
    t = icp_align(p, p @ r.T)
    assert RigidTransform(t.rotation @ r.T, np.zeros(3)).angle < 1e-4


def test_icp_degenerate():
    with pytest.raises(DegenerateInputError):
        icp_align(np.zeros((2, 3)), np.zeros((5, 3)))
    line = np.outer(np.arange(10.0), (1, 1, 0))
    with pytest.raises(DegenerateInputError):
        icp_align(line, line)


@settings(max_examples=15)
@given(st.integers(0, 2 ** 31))
def test_icp_recovery_property(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1, 1, (100, 3)) * (1.0, 0.7, 0.4)
    axis = rng.normal(size=3)
    rot = Rotation.from_rotvec(axis / np.linalg.norm(axis) * rng.uniform(0, np.radians(30)))
    r = rot.as_matrix()
    tr = rng.uniform(-1, 1, 3)
    t = icp_align(p, p @ r.T + tr)
    assert RigidTransform(t.rotation @ r.T, np.zeros(3)).angle < 1e-4
    assert np.abs(t.translation - tr).max() < 1e-6


def test_transform_compose():
    a = RigidTransform(Rotation.from_euler("x", 20, degrees=True).as_matrix(), np.array([1.0, 0, 0]))
    b = RigidTransform(Rotation.from_euler("y", 5, degrees=True).as_matrix(), np.array([0, 2.0, 0]))
    p = np.array([[0.3, -0.2, 0.9]])
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)))


# geometric PSNR --------------------------------------------------------------------------

def test_gpsnr_identical_is_cap(cloud):
    assert geometric_psnr(cloud, cloud) == 100.0
    assert geometric_psnr(cloud, cloud, use_icp=False) == 100.0


def test_gpsnr_two_point_example():
    ref = points_cloud([(0, 0, 0), (1, 0, 0)])
    tst = points_cloud([(0.1, 0, 0), (1.1, 0, 0)])
    # two points are too few to align, so ICP is skipped and the offset survives
    v = geometric_psnr(ref, tst, lambda_geo=1.0, lambda_col=0.0)
    assert v == geometric_psnr(ref, tst, lambda_geo=1.0, lambda_col=0.0, use_icp=False)
    # positions are float32, so 0.1 carries a representation error of about 1e-8
    assert v == pytest.approx(20.0, abs=1e-5)
    exact = points_cloud([(0.125, 0, 0), (1.125, 0, 0)])
    v = geometric_psnr(ref, exact, lambda_geo=1.0, lambda_col=0.0, use_icp=False)
    assert v == pytest.approx(10 * np.log10(64), abs=1e-9)


def test_gpsnr_guards(cloud):
    with pytest.raises(ParameterError):
        geometric_psnr(GaussianCloud.empty(), cloud)
    with pytest.raises(ParameterError):
        geometric_psnr(cloud, cloud, 0.5, 0.6)


def test_density_weights_oracle(rng):
    p = rng.normal(size=(120, 3))
    assert np.allclose(density_weights(p), brute_density_weights(p), rtol=1e-12)
    assert np.allclose(density_weights(p[:4]), brute_density_weights(p[:4]), rtol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gpsnr_masked_oracle(seed):
    c = random_cloud(300, np.random.default_rng(seed), extent=2.0)
    sig = significance_array(c)
    keep = apply_mask(np.arange(len(c)), c, float(np.median(sig)))
    t = c.subset(keep)
    got = geometric_psnr(c, t)
    ref_p = c.positions.astype(np.float64)
    want = brute_gpsnr(ref_p, c.sh_dc, t.positions.astype(np.float64), t.sh_dc, c.bbox_diagonal)
    assert got == pytest.approx(want, abs=1e-9)
    assert got < 100


def test_gpsnr_decreases_with_perturbation(rng):
    c = random_cloud(300, rng, extent=2.0)
    diag = c.bbox_diagonal
    noise = rng.normal(size=(len(c), 3))
    noise /= np.linalg.norm(noise, axis=1, keepdims=True)
    vals = [geometric_psnr(c, c.replace(positions=c.positions.astype(np.float64) + m * diag * noise))
            for m in (0.01, 0.02, 0.04)]
    assert vals[0] > vals[1] > vals[2]


# rasterizer ------------------------------------------------------------------------------

def test_render_empty_is_black():
    img = render(GaussianCloud.empty(), front_camera(), 16, 9)
    assert img.width == 16 and img.height == 9 and not img.pixels.any()


def test_render_axis_gaussian_centre():
    c = points_cloud([(0, 0, 0)], dc=dc_for((1, 1, 1)), scale=0.3)
    img = render(c, front_camera(), 33, 21)
    y, x = np.unravel_index(np.argmax(img.pixels.sum(axis=2)), (21, 33))
    assert abs(x - 16) <= 1 and abs(y - 10) <= 1


def test_render_left_red_right_green():
    c = points_cloud([(-1, 0, 0), (1, 0, 0)], dc=np.array([dc_for((1, 0, 0)), dc_for((0, 1, 0))]),
                     scale=0.2)
    img = render(c, front_camera(), 64, 36).pixels
    left, right = img[:, :32], img[:, 32:]
    lp = left.reshape(-1, 3)[np.argmax(left.sum(axis=2))]
    rp = right.reshape(-1, 3)[np.argmax(right.sum(axis=2))]
    assert lp[0] > lp[1] and rp[1] > rp[0]


def test_render_culls_behind_camera():
    c = points_cloud([(0, 0, -10)], dc=dc_for((1, 1, 1)), scale=0.5)
    assert not render(c, front_camera(), 16, 16).pixels.any()


def test_render_permutation_invariant(rng):
    c = random_cloud(80, rng, extent=1.5)
    cam = front_camera()
    a = render(c, cam, 48, 27)
    b = render(c.subset(rng.permutation(len(c))), cam, 48, 27)
    assert np.array_equal(a.pixels, b.pixels)


def test_render_zero_opacity_contributes_nothing(rng):
    c = random_cloud(60, rng, extent=1.5)
    op = c.opacities.copy()
    op[::3] = 0.0
    with_zero = GaussianCloud.from_activated(c.positions, c.rotations, c.scales, op, c.sh)
    without = with_zero.subset(np.flatnonzero(op > 0))
    cam = front_camera()
    a = render(with_zero, cam, 40, 30).pixels
    assert np.array_equal(a, render(without, cam, 40, 30).pixels)
    assert a.min() >= 0 and a.max() <= 1


def test_render_guard(cloud):
    with pytest.raises(ParameterError):
        render(cloud, front_camera(), 0, 10)


# image PSNR ------------------------------------------------------------------------------

def test_image_psnr_examples():
    black = Image(np.zeros((4, 5, 3)))
    grey = Image(np.full((4, 5, 3), 0.5))
    assert image_psnr(black, black) == 100.0
    assert image_psnr(black, grey) == pytest.approx(6.0206, abs=1e-4)
    with pytest.raises(ParameterError):
        image_psnr(black, Image(np.zeros((5, 4, 3))))


def test_image_psnr_oracle(rng):
    for _ in range(5):
        a, b = rng.random((7, 9, 3)), rng.random((7, 9, 3))
        assert image_psnr(Image(a), Image(b)) == pytest.approx(pixel_loop_psnr(a, b), abs=1e-9)


def test_image_validation():
    with pytest.raises(ParameterError):
        Image(np.full((2, 2, 3), 1.5))
    with pytest.raises(ParameterError):
        Image(np.zeros((0, 2, 3)))


def test_ppm_roundtrip(tmp_path, rng):
    img = Image(np.rint(rng.random((6, 10, 3)) * 255) / 255)
    path = tmp_path / "a.ppm"
    write_ppm(img, path)
    back = read_ppm(path)
    assert np.allclose(back.pixels, img.pixels)
    assert path.read_bytes().startswith(b"P6\n10 6\n255\n")
    path.write_bytes(b"P3\n1 1\n255\n000")
    with pytest.raises(ParameterError):
        read_ppm(path)
