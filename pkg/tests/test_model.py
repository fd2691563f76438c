import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splatstream.errors import FormatError, ParameterError, SchemaError, TruncationError
from splatstream.model import (BYTES_PER_PRIMITIVE, PLY_PROPERTIES, FrameSequence, GaussianCloud,
                               GaussianPrimitive, covariance_of, parse_ply, ply_header,
                               raw_size_bytes, read_ply, save_ply, write_ply)
from splatstream.synth import random_cloud


def unit_prim(**kw):
    base = dict(position=(0, 0, 0), rotation=(1, 0, 0, 0), scale=(1, 1, 1), opacity=1.0,
                sh=(0.0,) * 48)
    base.update(kw)
    return GaussianPrimitive(**base)


def test_header_property_order():
    head = ply_header(7).decode()
    lines = head.strip().split("\n")
    assert lines[:3] == ["ply", "format binary_little_endian 1.0", "element vertex 7"]
    props = [l.split()[2] for l in lines[3:-1]]
    assert props[:9] == ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    assert props[9:54] == [f"f_rest_{i}" for i in range(45)]
    assert props[54:] == ["opacity", "scale_0", "scale_1", "scale_2",
                          "rot_0", "rot_1", "rot_2", "rot_3"]
    assert len(PLY_PROPERTIES) == 62
    assert head.endswith("end_header\n")


def test_roundtrip_bytes_identity(cloud):
    b = write_ply(cloud)
    assert write_ply(parse_ply(b)) == b
    assert parse_ply(b) == cloud


def test_empty_cloud_ply():
    b = write_ply(GaussianCloud.empty())
    assert b"element vertex 0\n" in b
    assert len(parse_ply(b)) == 0


def test_unit_scale_stores_zero_log():
    c = GaussianCloud.from_primitives([unit_prim()])
    rec = c.to_records()
    assert rec["scale_0"][0] == rec["scale_1"][0] == rec["scale_2"][0] == 0.0


def test_logit_zero_parses_to_half():
    c = GaussianCloud.from_primitives([unit_prim(position=(i, 0, 0)) for i in range(3)])
    c = c.replace(opacity_logit=np.zeros(3))
    parsed = parse_ply(write_ply(c))
    assert np.all(parsed.opacities == 0.5)


def test_missing_opacity_is_schema_error(cloud):
    props = [p for p in PLY_PROPERTIES if p != "opacity"]
    rec = cloud.to_records()
    body = np.empty(len(rec), dtype=[(p, "<f4") for p in props])
    for p in props:
        body[p] = rec[p]
    head = "\n".join(["ply", "format binary_little_endian 1.0", f"element vertex {len(rec)}"]
                     + [f"property float {p}" for p in props] + ["end_header"]) + "\n"
    with pytest.raises(SchemaError):
        parse_ply(head.encode() + body.tobytes())


def test_optional_properties_default_to_zero(cloud):
    keep = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1",
            "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    rec = cloud.to_records()
    body = np.empty(len(rec), dtype=[(p, "<f4") for p in keep])
    for p in keep:
        body[p] = rec[p]
    head = "\n".join(["ply", "format binary_little_endian 1.0", f"element vertex {len(rec)}"]
                     + [f"property float {p}" for p in keep] + ["end_header"]) + "\n"
    c = parse_ply(head.encode() + body.tobytes())
    assert np.array_equal(c.positions, cloud.positions)
    assert not c.normals.any() and not c.sh[:, 1:].any()


def test_truncated_body(cloud):
    b = write_ply(cloud)
    with pytest.raises(TruncationError):
        parse_ply(b[:-1])


@pytest.mark.parametrize("data", [
    b"not a ply",
    b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n",
    b"ply\nformat binary_little_endian 1.0\nelement vertex x\nend_header\n",
    b"ply\nelement vertex 0\nend_header\n",
    b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\n",
])
def test_malformed_headers(data):
    with pytest.raises(FormatError):
        parse_ply(data)


def test_non_finite_rejected(cloud):
    pos = cloud.positions.copy()
    pos[0, 0] = np.nan
    with pytest.raises(ValueError):
        write_ply(cloud.replace(positions=pos))


def test_file_roundtrip(tmp_path, cloud):
    p = tmp_path / "a.ply"
    save_ply(cloud, p)
    assert read_ply(p) == cloud


def test_raw_size():
    one = GaussianCloud.from_primitives([unit_prim()])
    assert raw_size_bytes(one) == 248 == BYTES_PER_PRIMITIVE
    assert raw_size_bytes(GaussianCloud.empty()) == 0


def test_raw_size_linear(rng):
    a, b = random_cloud(13, rng), random_cloud(29, rng)
    assert raw_size_bytes(GaussianCloud.concat([a, b])) == raw_size_bytes(a) + raw_size_bytes(b)


def test_primitive_validation():
    with pytest.raises(ParameterError):
        unit_prim(rotation=(2, 0, 0, 0))
    with pytest.raises(ParameterError):
        unit_prim(scale=(1, 0, 1))
    with pytest.raises(ParameterError):
        unit_prim(opacity=1.5)
    with pytest.raises(ParameterError):
        unit_prim(sh=(0.0,) * 47)
    with pytest.raises(ParameterError):
        FrameSequence([], 30)
    with pytest.raises(ParameterError):
        FrameSequence([GaussianCloud.empty()], 0)


def test_covariance_identity_rotation():
    p = unit_prim(scale=(2, 3, 5))
    assert np.allclose(covariance_of(p), np.diag([4, 9, 25]))


def test_covariance_isotropic(rng):
    q = rng.normal(size=4)
    p = unit_prim(rotation=tuple(q / np.linalg.norm(q)))
    assert np.allclose(covariance_of(p), np.eye(3), atol=1e-12)


def test_covariance_eigenvalues(rng):
    q = rng.normal(size=4)
    p = unit_prim(rotation=tuple(q / np.linalg.norm(q)), scale=(2, 1, 1))
    ev = np.sort(np.linalg.eigvalsh(covariance_of(p)))
    assert np.allclose(ev, [1, 1, 4], atol=1e-9)


def test_covariance_matches_scipy(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    p = unit_prim(rotation=tuple(q), scale=(0.3, 0.2, 0.1))
    r = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    assert np.allclose(covariance_of(p), r @ np.diag([0.09, 0.04, 0.01]) @ r.T, atol=1e-12)


def test_cloud_covariances_match_primitives(cloud):
    cov = cloud.covariances()
    for i in (0, 5, 17):
        assert np.allclose(cov[i], covariance_of(cloud[i]), atol=1e-9)


def test_bbox_contains_positions(cloud):
    lo, hi = cloud.bbox
    assert np.all(cloud.positions >= lo) and np.all(cloud.positions <= hi)


@given(st.integers(0, 40), st.integers(0, 2 ** 32 - 1), st.floats(0.0, 0.5))
def test_roundtrip_property(n, seed, sh_std):
    c = random_cloud(n, np.random.default_rng(seed), extent=5.0, sh_rest_std=sh_std)
    assert parse_ply(write_ply(c)) == c


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 10.0), st.floats(0.01, 10.0),
       st.floats(0.01, 10.0))
def test_covariance_psd_property(seed, a, b, c):
    q = np.random.default_rng(seed).normal(size=4)
    p = unit_prim(rotation=tuple(q / np.linalg.norm(q)), scale=(a, b, c))
    cov = covariance_of(p)
    assert np.abs(cov - cov.T).max() <= 1e-12 * max(1.0, np.abs(cov).max())
    assert np.linalg.eigvalsh(cov).min() >= -1e-9 * max(a, b, c) ** 2
