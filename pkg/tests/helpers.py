"""Fixture builders shared by several test modules."""
import numpy as np

from splatstream.camera import Camera
from splatstream.gof import build_deformation, frame_targets, reconstruct_frame
from splatstream.sim import (BandwidthTrace, FovTrace, GofEntry, LevelEntry, Manifest, SimConfig,
                             TileEntry, simulate_session)
from splatstream.synth import ClusterSpec, SceneSpec, gen_sequence


def sequence_with_ids(spec, frames, fps=30.0):
    """Frames plus the generator-level identity of every primitive in each frame."""
    seq = gen_sequence(spec, frames, fps)
    offsets = np.cumsum([0] + [c.count for c in spec.clusters])
    ids = []
    for f in range(frames):
        ids.append(np.concatenate([np.arange(offsets[i], offsets[i + 1])
                                   for i, c in enumerate(spec.clusters) if c.alive(f)]
                                  or [np.zeros(0, np.int64)]))
    return seq, ids


def random_rigid_spec(rng, frames=10):
    clusters = []
    for _ in range(rng.integers(1, 4)):
        v = rng.uniform(-1, 1, 3) * rng.uniform(0, 3)
        birth = int(rng.integers(0, 3)) if rng.random() < 0.3 else 0
        death = int(rng.integers(birth + 1, frames + 1)) if rng.random() < 0.3 else None
        clusters.append(ClusterSpec(center=tuple(rng.uniform(-3, 3, 3)),
                                    spread=tuple(rng.uniform(0.2, 1.0, 3)),
                                    count=int(rng.integers(20, 80)), velocity=tuple(v),
                                    birth_frame=birth, death_frame=death))
    clusters[0].birth_frame, clusters[0].death_frame = 0, None
    return SceneSpec(clusters, seed=int(rng.integers(2 ** 31)))


def check_fidelity(seq, ids):
    gof = build_deformation(seq)
    lo = np.min([f.bbox[0] for f in seq.frames if len(f)], axis=0)
    hi = np.max([f.bbox[1] for f in seq.frames if len(f)], axis=0)
    bound = np.linalg.norm(hi - lo) / 65535
    key_ids = ids[0]
    for k in range(gof.frame_count):
        out = reconstruct_frame(gof, k)
        tgt = frame_targets(gof, k)
        rec = gof.track.records[k]
        m = rec.match_count
        # correspondences are the true ones
        assert np.array_equal(key_ids[rec.key_idx], ids[k][rec.target_idx])
        err = np.abs(out.positions[:m].astype(np.float64)
                     - seq.frames[k].positions[rec.target_idx].astype(np.float64))
        assert err.max(initial=0) <= bound
        # births are bit-exact copies and deaths are exactly the vanished ids
        births = out.subset(np.arange(m, len(out)))
        assert births == seq.frames[k].subset(tgt[m:])
        assert set(key_ids[rec.deaths]) == set(key_ids) - set(ids[k])
        assert len(out) == len(seq.frames[k])
    return gof


# simulator fixtures ------------------------------------------------------------------

MB = 1_000_000


def tile(tid, sizes, gpsnr=(40, 60, 80, 100), saliency=0.5, decode_ms=0.0,
         lo=(-1, -1, -1), hi=(1, 1, 1), recon_factor=1):
    levels = [LevelEntry(i + 1, s, s * recon_factor, g) for i, (s, g) in enumerate(zip(sizes, gpsnr))]
    return TileEntry(tid, saliency, (lo, hi), decode_ms, levels)


def manifest(n_gofs, tiles_fn, duration=1.0, fps=30.0):
    return Manifest([GofEntry(i, duration, int(round(duration * fps)), tiles_fn())
                     for i in range(n_gofs)], fps)


def looking_fov(duration=100.0):
    return FovTrace([0.0], [Camera.look_at((0, 0, -5), (0, 0, 0))])


def const_trace(mbps, end_s):
    return BandwidthTrace([0.0], [mbps], "File", end_s)


def hand_fixture():
    m = manifest(2, lambda: [tile(0, [10 * MB] * 4)])
    cfg = SimConfig(budget_bytes_override=100 * MB)
    return simulate_session(m, const_trace(40.0, 10.0), looking_fov(), cfg)
