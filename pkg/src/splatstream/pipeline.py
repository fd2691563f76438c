"""Server-side pipeline stages and the tiling-baseline evaluation loop.

Every stage reads its inputs from disk and writes its outputs under one output
directory, so stages can be rerun independently. Each stage records a stamp
(a digest of its configuration slice and input artifacts); a rerun with an
unchanged stamp is skipped.
"""
from __future__ import annotations

import csv
import glob
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .abr import QoEWeights
from .errors import ParameterError, SplatStreamError, StageError
from .gof import build_deformation, gof_from_bytes, gof_to_bytes, segment_gofs, track_size_bytes
from .ladder import (DEFAULT_RETENTION, TILE_HEADER, _check_targets, build_ladder, decode_tile,
                     encode_tile, ladder_rows)
from .metrics import geometric_psnr, PSNR_CAP
from .model import BYTES_PER_PRIMITIVE, FrameSequence, read_ply
from .saliency import AdaptiveTile, SaliencyWeights, TILING_GRIDS, build_tiling, saliency_csv
from .sim import (FovTrace, Manifest, SimConfig, gen_fov_orbit, gen_trace,
                  simulate_session)
from .synth import default_scene, gen_sequence, write_sequence

log = logging.getLogger(__name__)

STAGES = ("ingest", "gof", "tile", "ladder", "annotate", "simulate", "report")
TILING_MODES = ("AT",) + tuple(TILING_GRIDS)


# config ---------------------------------------------------------------------------------

@dataclass
class SceneConfig:
    count: int = 5000
    frames: int = 30
    seed: int = 0
    fg_fraction: float = 0.3


@dataclass
class TraceConfig:
    kinds: list = field(default_factory=lambda: ["Std5G", "Ext5G"])
    step_s: float = 0.5
    slack_s: float = 5.0  # trace runs this long past the end of the video
    seed: int = 0


@dataclass
class FovConfig:
    radius_frac: float = 0.1  # orbit radius as a fraction of the scene bbox diagonal
    height: float = 0.0
    period_s: float = 20.0
    step_s: float = 0.5
    vfov_rad: float = math.pi / 3
    aspect: float = 16 / 9


@dataclass
class DecodeConfig:
    simple_ms: float = 20.0
    complex_ms: float = 40.0
    complex_threshold: int = 5000  # keyframe primitive count at which a scene is "complex"


@dataclass
class PipelineConfig:
    input_glob: str = "frames/*.ply"  # relative paths resolve against out_dir
    out_dir: str = "out"
    fps: float = 30.0
    gof_len: int = 10
    grid_resolution: int = 8
    saliency_weights: list = field(default_factory=lambda: [0.25, 0.25, 0.5])
    epsilon: float = 0.15
    max_cells_per_tile: int = 16
    retention_targets: list = field(default_factory=lambda: list(DEFAULT_RETENTION))
    saliency_gain: float = 0.3
    qoe_weights: list = field(default_factory=lambda: [100.0, 10.0, 5.0])
    lambda_geo: float = 0.8
    lambda_col: float = 0.2
    tiling_modes: list = field(default_factory=lambda: ["AT", "NT", "32T", "64T"])
    safety_factor: float = 0.9
    predictor_k: int = 5
    count_startup_stall: bool = True
    dual_mode: bool = True
    scene: SceneConfig = field(default_factory=SceneConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    fov: FovConfig = field(default_factory=FovConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self):
        for name, cls in (("scene", SceneConfig), ("trace", TraceConfig), ("fov", FovConfig),
                          ("decode", DecodeConfig)):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, _build(cls, v, name))
        self.validate()

    def validate(self) -> None:
        """Re-check every constraint the owning modules enforce, before any work starts."""
        def need(ok, msg):
            if not ok:
                raise ParameterError(msg)
        need(self.fps > 0, "fps must be positive")
        need(isinstance(self.gof_len, int) and self.gof_len >= 1, "gof_len must be >= 1")
        need(isinstance(self.grid_resolution, int) and self.grid_resolution >= 1,
             "grid_resolution must be >= 1")
        SaliencyWeights(*self.saliency_weights)
        need(0 <= self.epsilon <= 1, "epsilon must lie in [0, 1]")
        need(self.max_cells_per_tile >= 1, "max_cells_per_tile must be >= 1")
        _check_targets(self.retention_targets)
        need(self.saliency_gain >= 0, "saliency_gain must be >= 0")
        QoEWeights(*self.qoe_weights)
        need(min(self.lambda_geo, self.lambda_col) >= 0
             and abs(self.lambda_geo + self.lambda_col - 1) <= 1e-9,
             "lambda_geo + lambda_col must equal 1")
        need(self.tiling_modes and all(m in TILING_MODES for m in self.tiling_modes)
             and len(set(self.tiling_modes)) == len(self.tiling_modes),
             f"tiling_modes must be distinct values from {TILING_MODES}")
        SimConfig(self.safety_factor, self.predictor_k)
        need(self.scene.count >= 1 and self.scene.frames >= 1, "scene needs primitives and frames")
        need(0 < self.scene.fg_fraction < 1, "fg_fraction must lie in (0, 1)")
        need(self.trace.kinds and all(k in ("Std5G", "Ext5G") for k in self.trace.kinds),
             "trace kinds must be Std5G or Ext5G")
        need(self.trace.step_s > 0 and self.trace.slack_s >= 0, "bad trace step or slack")
        need(self.fov.radius_frac > 0 and self.fov.period_s > 0 and self.fov.step_s > 0,
             "bad FoV orbit parameters")
        need(0 < self.fov.vfov_rad < math.pi and self.fov.aspect > 0, "bad FoV camera")
        need(0 < self.decode.simple_ms <= self.decode.complex_ms, "bad decode estimates")

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d or {}, "config")

    @classmethod
    def load(cls, path, overrides=()) -> "PipelineConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(apply_overrides(data, overrides))


def _build(cls, d: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ParameterError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**d)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply `dotted.key=value` strings; values are parsed as YAML scalars or lists."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ParameterError(f"override must look like key=value: {item!r}")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return data


# stamps ---------------------------------------------------------------------------------

def _digest(*items) -> str:
    h = hashlib.sha256()
    for it in items:
        h.update(json.dumps(it, sort_keys=True, default=str).encode())
    return h.hexdigest()


def _file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(map(str, paths)):
        h.update(p.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _stamp_path(cfg: PipelineConfig, stage: str) -> Path:
    return cfg.out / ".stamps" / f"{stage}.json"


def _fresh(cfg: PipelineConfig, stage: str, key: str, outputs) -> bool:
    p = _stamp_path(cfg, stage)
    if not p.exists() or not all(Path(o).exists() for o in outputs):
        return False
    return json.loads(p.read_text()).get("key") == key


def _stamp(cfg: PipelineConfig, stage: str, key: str) -> None:
    p = _stamp_path(cfg, stage)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps({"stage": stage, "key": key}, sort_keys=True))


def _write(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _load_json(stage: str, path: Path):
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise StageError(stage, f"cannot read artifact: {exc}", path) from exc


# stages ---------------------------------------------------------------------------------

def stage_synth(cfg: PipelineConfig) -> list[Path]:
    """Write a deterministic synthetic sequence into <out>/frames."""
    spec = default_scene(cfg.scene.count, cfg.scene.seed, cfg.scene.fg_fraction)
    seq = gen_sequence(spec, cfg.scene.frames, cfg.fps)
    _write(cfg.out / "frames" / "scene.yaml", yaml.safe_dump(spec.to_dict(), sort_keys=True))
    return write_sequence(seq, cfg.out / "frames")


def _input_paths(cfg: PipelineConfig) -> list[str]:
    pattern = cfg.input_glob
    if not Path(pattern).is_absolute():
        pattern = str(cfg.out / pattern)
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise StageError("ingest", "input glob matched no frames", pattern)
    return paths


def stage_ingest(cfg: PipelineConfig) -> Path:
    paths = _input_paths(cfg)
    out = cfg.out / "ingest.json"
    key = _digest("ingest", _file_digest(paths))
    if _fresh(cfg, "ingest", key, [out]):
        return out
    frames = []
    for p in paths:
        try:
            cloud = read_ply(p)
        except (OSError, SplatStreamError) as exc:
            raise StageError("ingest", str(exc), p) from exc
        frames.append({"path": str(Path(p).resolve()), "count": len(cloud),
                       "sha256": hashlib.sha256(Path(p).read_bytes()).hexdigest()})
    _write(out, _dump({"fps": cfg.fps, "frames": frames}))
    _stamp(cfg, "ingest", key)
    return out


def _load_frames(cfg: PipelineConfig) -> FrameSequence:
    idx = _load_json("gof", cfg.out / "ingest.json")
    frames = []
    for f in idx["frames"]:
        try:
            frames.append(read_ply(f["path"]))
        except (OSError, SplatStreamError) as exc:
            raise StageError("gof", str(exc), f["path"]) from exc
    return FrameSequence(frames, idx["fps"])


def _gof_paths(cfg: PipelineConfig) -> list[Path]:
    index = _load_json("gof", cfg.out / "gof" / "index.json")
    return [cfg.out / "gof" / name for name in index["gofs"]]


def stage_gof(cfg: PipelineConfig) -> Path:
    src = cfg.out / "ingest.json"
    if not src.exists():
        raise StageError("gof", "missing ingest artifact", src)
    out = cfg.out / "gof" / "index.json"
    key = _digest("gof", cfg.gof_len, cfg.fps, _file_digest([src]))
    if _fresh(cfg, "gof", key, [out]):
        return out
    seq = _load_frames(cfg)
    names = []
    for gi, r in enumerate(segment_gofs(seq, cfg.gof_len)):
        gof = build_deformation([seq.frames[i] for i in r], fps=cfg.fps, index=gi)
        name = f"gof_{gi:04d}.bin"
        _write(cfg.out / "gof" / name, gof_to_bytes(gof))
        names.append(name)
    _write(out, _dump({"gofs": names, "gof_len": cfg.gof_len, "fps": cfg.fps}))
    _stamp(cfg, "gof", key)
    return out


def _read_gof(stage: str, path: Path):
    try:
        return gof_from_bytes(path.read_bytes())
    except (OSError, SplatStreamError) as exc:
        raise StageError(stage, str(exc), path) from exc


def _tile_to_json(t: AdaptiveTile) -> dict:
    d = t.to_dict()
    d["member_indices"] = [int(i) for i in t.member_indices]
    return d


def _tile_from_json(d: dict) -> AdaptiveTile:
    return AdaptiveTile(int(d["id"]), tuple(tuple(c) for c in d["cells"]),
                        (np.asarray(d["aabb"][0]), np.asarray(d["aabb"][1])),
                        float(d["saliency"]), np.asarray(d["member_indices"], dtype=np.int64))


def stage_tile(cfg: PipelineConfig) -> list[Path]:
    gof_paths = _gof_paths(cfg)
    key = _digest("tile", cfg.tiling_modes, cfg.grid_resolution, cfg.saliency_weights,
                  cfg.epsilon, cfg.max_cells_per_tile, _file_digest(gof_paths))
    outs = [cfg.out / "tiles" / m / "index.json" for m in cfg.tiling_modes]
    if _fresh(cfg, "tile", key, outs):
        return outs
    weights = SaliencyWeights(*cfg.saliency_weights)
    for mode in cfg.tiling_modes:
        rows, names = [], []
        for p in gof_paths:
            gof = _read_gof("tile", p)
            tiles, records = build_tiling(gof, mode, cfg.grid_resolution, weights, cfg.epsilon,
                                          cfg.max_cells_per_tile)
            name = f"gof_{gof.index:04d}.json"
            _write(cfg.out / "tiles" / mode / name, _dump([_tile_to_json(t) for t in tiles]))
            names.append(name)
            rows.append((gof.index, records))
        _write(cfg.out / "tiles" / mode / "saliency.csv", saliency_csv(rows))
        _write(cfg.out / "tiles" / mode / "index.json", _dump({"mode": mode, "gofs": names}))
    _stamp(cfg, "tile", key)
    return outs


def _load_tiles(stage: str, cfg: PipelineConfig, mode: str, gi: int) -> list[AdaptiveTile]:
    return [_tile_from_json(d) for d in
            _load_json(stage, cfg.out / "tiles" / mode / f"gof_{gi:04d}.json")]


def stage_ladder(cfg: PipelineConfig) -> list[Path]:
    gof_paths = _gof_paths(cfg)
    tile_files = sorted((cfg.out / "tiles").rglob("*.json"))
    key = _digest("ladder", cfg.tiling_modes, cfg.retention_targets, cfg.saliency_gain,
                  _file_digest(gof_paths + tile_files))
    outs = [cfg.out / "ladders" / m / "index.json" for m in cfg.tiling_modes]
    if _fresh(cfg, "ladder", key, outs):
        return outs
    for mode in cfg.tiling_modes:
        entries = []
        for p in gof_paths:
            gof = _read_gof("ladder", p)
            for tile in _load_tiles("ladder", cfg, mode, gof.index):
                lad = build_ladder(tile, gof.keyframe, cfg.retention_targets, cfg.saliency_gain)
                for lvl in lad.levels:
                    blob = encode_tile(lvl, gof.keyframe, tile.id)
                    _write(cfg.out / "ladders" / mode / f"gof_{gof.index:04d}"
                           / f"tile_{tile.id:04d}_l{lvl.level}.bin", blob)
                entries.extend(ladder_rows(gof.index, lad))
        _write(cfg.out / "ladders" / mode / "index.json", _dump({"mode": mode, "rows": entries}))
    _stamp(cfg, "ladder", key)
    return outs


def level_gpsnr(full, level, lambda_geo: float, lambda_col: float) -> float:
    """GPSNR of a level against its full tile; empty tiles lose nothing, empty levels lose all."""
    if len(full) == 0:
        return PSNR_CAP
    if len(level) == 0:
        return 0.0
    return geometric_psnr(full, level, lambda_geo, lambda_col)


def decode_ms_per_frame(cfg: PipelineConfig, tile_count: int, scene_count: int) -> float:
    """Scene-class decode estimate, apportioned to the tile by its primitive share."""
    scene_ms = (cfg.decode.complex_ms if scene_count >= cfg.decode.complex_threshold
                else cfg.decode.simple_ms)
    return scene_ms * tile_count / max(scene_count, 1)


def build_manifest(cfg: PipelineConfig, mode: str, stage: str = "annotate") -> Manifest:
    gofs = []
    for p in _gof_paths(cfg):
        gof = _read_gof(stage, p)
        n_key = len(gof.keyframe)
        track_bytes = track_size_bytes(gof.track)
        tiles = []
        for tile in _load_tiles(stage, cfg, mode, gof.index):
            full = gof.keyframe.subset(tile.member_indices)
            levels = []
            for lvl in range(1, 5):
                path = (cfg.out / "ladders" / mode / f"gof_{gof.index:04d}"
                        / f"tile_{tile.id:04d}_l{lvl}.bin")
                try:
                    blob = path.read_bytes()
                    _, _, cloud = decode_tile(blob)
                except (OSError, SplatStreamError) as exc:
                    raise StageError(stage, str(exc), path) from exc
                retained = len(cloud)
                share = -(-track_bytes * retained // max(n_key, 1))
                encoded = len(blob) + share
                recon = gof.frame_count * (TILE_HEADER.size + BYTES_PER_PRIMITIVE * retained)
                levels.append({"level": lvl, "encoded_bytes": encoded,
                               "reconstructed_bytes": max(recon, encoded), "retained": retained,
                               "gpsnr_vs_full": level_gpsnr(full, cloud, cfg.lambda_geo,
                                                            cfg.lambda_col)})
            tiles.append({"tile_id": tile.id, "saliency": tile.saliency,
                          "aabb": [list(map(float, tile.aabb[0])), list(map(float, tile.aabb[1]))],
                          "decode_ms_per_frame": decode_ms_per_frame(
                              cfg, len(tile.member_indices), n_key),
                          "levels": levels})
        gofs.append({"index": gof.index, "duration_s": gof.duration_s,
                     "frame_count": gof.frame_count, "tiles": tiles})
    return Manifest(gofs, cfg.fps, mode)


def stage_annotate(cfg: PipelineConfig) -> Path:
    ladder_files = sorted((cfg.out / "ladders").rglob("*"))
    ladder_files = [p for p in ladder_files if p.is_file()]
    gof_paths = _gof_paths(cfg)
    out = cfg.out / "manifest.json"
    key = _digest("annotate", cfg.tiling_modes, cfg.lambda_geo, cfg.lambda_col, asdict(cfg.decode),
                  _file_digest(gof_paths + ladder_files))
    if _fresh(cfg, "annotate", key, [out]):
        return out
    doc = {"fps": cfg.fps,
           "manifests": {m: build_manifest(cfg, m).to_dict() for m in cfg.tiling_modes}}
    _write(out, _dump(doc))
    _stamp(cfg, "annotate", key)
    return out


def load_manifests(path) -> dict:
    doc = _load_json("simulate", Path(path))
    try:
        return {m: Manifest.from_dict(d) for m, d in doc["manifests"].items()}
    except (KeyError, TypeError, SplatStreamError) as exc:
        raise StageError("simulate", f"malformed manifest: {exc}", path) from exc


def scene_bounds(manifest: Manifest) -> tuple[np.ndarray, np.ndarray]:
    lo = np.min([t.aabb[0] for g in manifest.gofs for t in g.tiles], axis=0)
    hi = np.max([t.aabb[1] for g in manifest.gofs for t in g.tiles], axis=0)
    return lo, hi


def fov_trace_for(cfg: PipelineConfig, manifest: Manifest, duration_s: float) -> FovTrace:
    lo, hi = scene_bounds(manifest)
    center = (lo + hi) / 2
    radius = cfg.fov.radius_frac * float(np.linalg.norm(hi - lo))
    return gen_fov_orbit(center, radius, duration_s, cfg.fov.step_s, cfg.fov.period_s,
                         cfg.fov.height, vertical_fov=cfg.fov.vfov_rad, aspect=cfg.fov.aspect)


def stage_simulate(cfg: PipelineConfig) -> list[Path]:
    src = cfg.out / "manifest.json"
    if not src.exists():
        raise StageError("simulate", "missing manifest", src)
    manifests = load_manifests(src)
    missing = [m for m in cfg.tiling_modes if m not in manifests]
    if missing:
        raise StageError("simulate", f"manifest lacks tiling modes {missing}", src)
    rep = cfg.out / "reports"
    duration = manifests[cfg.tiling_modes[0]].duration_s
    horizon = duration + cfg.trace.slack_s
    sim_cfg = SimConfig(cfg.safety_factor, cfg.predictor_k, QoEWeights(*cfg.qoe_weights),
                        count_startup_stall=cfg.count_startup_stall,
                        dual_mode=cfg.dual_mode)
    fov = fov_trace_for(cfg, manifests[cfg.tiling_modes[0]], horizon)
    _write(rep / "traces" / "fov.csv", fov.to_csv())
    outs = []
    for ki, kind in enumerate(cfg.trace.kinds):
        bw = gen_trace(kind, horizon, cfg.trace.step_s, cfg.trace.seed * 1000 + ki)
        _write(rep / "traces" / f"bw_{kind}.csv", bw.to_csv())
        for mode in cfg.tiling_modes:
            report = simulate_session(manifests[mode], bw, fov, sim_cfg)
            stem = rep / f"session_{mode}_{kind}"
            _write(stem.with_suffix(".json"), report.to_json() + "\n")
            _write(stem.with_suffix(".csv"), report.to_csv())
            outs.append(stem.with_suffix(".json"))
    return outs


MATRIX_COLUMNS = ("mode", "trace", "qoe", "mean_quality", "stall_s", "stall_count",
                  "downloaded_bytes", "payload_bytes", "completed")


def stage_report(cfg: PipelineConfig) -> Path:
    rows = []
    for kind in cfg.trace.kinds:
        for mode in cfg.tiling_modes:
            path = cfg.out / "reports" / f"session_{mode}_{kind}.json"
            if not path.exists():
                raise StageError("report", "missing session report", path)
            d = _load_json("report", path)
            rows.append({"mode": mode, "trace": kind, **{k: d[k] for k in MATRIX_COLUMNS[2:]}})
    buf = io.StringIO()
    w = csv.DictWriter(buf, MATRIX_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write(cfg.out / "reports" / "comparison.csv", buf.getvalue())
    out = cfg.out / "reports" / "summary.json"
    _write(out, _dump({"config": cfg.to_dict(), "matrix": rows}))
    return out


STAGE_FUNCS = {"ingest": stage_ingest, "gof": stage_gof, "tile": stage_tile,
               "ladder": stage_ladder, "annotate": stage_annotate, "simulate": stage_simulate,
               "report": stage_report}


def run_stage(cfg: PipelineConfig, stage: str):
    if stage not in STAGE_FUNCS:
        raise ParameterError(f"unknown stage {stage!r}")
    log.info("stage %s", stage)
    try:
        return STAGE_FUNCS[stage](cfg)
    except StageError:
        raise
    except SplatStreamError as exc:
        raise StageError(stage, str(exc), cfg.out) from exc


def run_pipeline(cfg: PipelineConfig, synth: bool = False) -> Path:
    """Run every stage in order; returns the summary report path."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    if synth:
        stage_synth(cfg)
    out = None
    for stage in STAGES:
        out = run_stage(cfg, stage)
    return out
