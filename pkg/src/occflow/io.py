"""On-disk workspaces, binary codecs and run configuration.

Workspace layout (paths relative to the root)::

    manifest.json
    poses.txt                       one 4x4 ego->world matrix per line, row-major
    frames/t{t:03d}_{camera}.ppm    RGB image
    cues/t{t:03d}_{camera}.flo      flow cue to frame t+1
    cues/t{t:03d}_to{a:03d}_{camera}.flo   backward cue to an earlier frame
    masks/t{t:03d}_{camera}.pgm     movable mask
    lidar/t{t:03d}.pfm              (P, 3) points in the ego frame
    truth/...                       optional reference depth, flow, hit maps and grids

Grids use the OCCF container: magic ``OCCF``, u32 version, u32 H W Z C,
3 f64 origin, 3 f64 voxel size, then float32 values (x slowest, z fastest,
channel innermost), all little-endian.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Camera, FrameSet, Intrinsics, RigidTransform
from .grid import FeatureVolume, GridSpec, ScalarField, VectorField
from .losses import LossWeights
from .optim import FitConfig
from .render import RenderParams

MANIFEST_VERSION = 1
GRID_MAGIC = b"OCCF"
GRID_VERSION = 1


class WorkspaceError(Exception):
    """Base class for workspace and codec problems."""


class ManifestError(WorkspaceError):
    pass


class CodecError(WorkspaceError):
    pass


class DimensionMismatch(WorkspaceError):
    pass


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------- grids

def encode_grid(values, spec):
    values = np.asarray(values)
    channels = 1 if values.ndim == 3 else values.shape[-1]
    if values.shape[:3] != spec.dims:
        raise CodecError(f"grid of shape {values.shape} does not match dims {spec.dims}")
    head = GRID_MAGIC + struct.pack("<5I", GRID_VERSION, *spec.dims, channels)
    head += struct.pack("<6d", *spec.origin, *spec.voxel_size)
    return head + np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_grid(data, name="<bytes>"):
    """Returns (values, spec); values are (H, W, Z) for one channel, else (H, W, Z, C)."""
    head = 4 + 5 * 4 + 6 * 8
    if len(data) < head or data[:4] != GRID_MAGIC:
        raise CodecError(f"{name}: not an OCCF grid")
    version, H, W, Z, C = struct.unpack_from("<5I", data, 4)
    if version != GRID_VERSION:
        raise CodecError(f"{name}: unsupported grid version {version}")
    geo = struct.unpack_from("<6d", data, 24)
    count = H * W * Z * C
    if len(data) != head + 4 * count:
        raise CodecError(f"{name}: payload holds {len(data) - head} bytes, expected {4 * count}")
    try:
        spec = GridSpec(geo[:3], geo[3:], (H, W, Z))
    except ValueError as exc:
        raise CodecError(f"{name}: {exc}") from None
    values = np.frombuffer(data, dtype="<f4", offset=head).reshape(H, W, Z, C)
    return (values[..., 0] if C == 1 else values).copy(), spec


def save_grid(path, field_):
    """Write a ScalarField or VectorField (values are stored as float32)."""
    Path(path).write_bytes(encode_grid(field_.values, field_.spec))


def load_grid(path):
    path = Path(path)
    values, spec = decode_grid(_read(path), str(path))
    values = values.astype(np.float64)
    try:
        if values.ndim == 3:
            return ScalarField(spec, values)
        if values.shape[-1] == 2:
            return VectorField(spec, values)
        return FeatureVolume(spec, values)
    except ValueError as exc:
        raise CodecError(f"{path}: {exc}") from None


def _read(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CodecError(f"{path}: {exc.strerror}") from None


# ----------------------------------------------------------------- netpbm

def _pnm_header(data, magic, name):
    """Parse a binary PNM header; returns (width, height, maxval, offset)."""
    if data[:2] != magic:
        raise CodecError(f"{name}: expected {magic.decode()} magic")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CodecError(f"{name}: truncated header")
        tokens.append(data[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise CodecError(f"{name}: non-integer header field") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise CodecError(f"{name}: invalid header values")
    return w, h, maxval, pos + 1


def _encode_pnm(array, magic, channels):
    array = np.asarray(array)
    if array.dtype not in (np.uint8, np.uint16):
        raise CodecError("netpbm payloads must be uint8 or uint16")
    h, w = array.shape[:2]
    maxval = 255 if array.dtype == np.uint8 else 65535
    body = array.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    return magic + f"\n{w} {h}\n{maxval}\n".encode() + body


def _decode_pnm(data, magic, channels, name):
    w, h, maxval, off = _pnm_header(data, magic, name)
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    count = w * h * channels
    if len(data) - off != count * dtype.itemsize:
        raise CodecError(f"{name}: payload size does not match {w}x{h}")
    arr = np.frombuffer(data, dtype=dtype, offset=off).reshape((h, w, channels) if channels > 1 else (h, w))
    return arr.astype(np.uint8 if maxval < 256 else np.uint16)


def save_ppm(path, rgb):
    """RGB (H, W, 3) uint8 or uint16 as binary P6."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise CodecError("PPM images must be (H, W, 3)")
    Path(path).write_bytes(_encode_pnm(rgb, b"P6", 3))


def load_ppm(path):
    return _decode_pnm(_read(path), b"P6", 3, str(path))


def save_pgm(path, gray):
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise CodecError("PGM images must be (H, W)")
    Path(path).write_bytes(_encode_pnm(gray, b"P5", 1))


def load_pgm(path):
    return _decode_pnm(_read(path), b"P5", 1, str(path))


def image_to_u16(image):
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)


def u16_to_image(pixels):
    return np.asarray(pixels, dtype=np.float64) / (255.0 if pixels.dtype == np.uint8 else 65535.0)


# ----------------------------------------------------------------- PFM

def save_pfm(path, values):
    """(H, W) or (H, W, 3) float32, little-endian, top row first.

    PFM stores rows bottom to top; the flip happens here.
    """
    values = np.asarray(values, dtype="<f4")
    if values.ndim == 2:
        magic = b"Pf"
    elif values.ndim == 3 and values.shape[2] == 3:
        magic = b"PF"
    else:
        raise CodecError("PFM payloads must be (H, W) or (H, W, 3)")
    h, w = values.shape[:2]
    head = magic + f"\n{w} {h}\n-1.0\n".encode()
    Path(path).write_bytes(head + np.ascontiguousarray(values[::-1]).tobytes())


def load_pfm(path):
    data = _read(path)
    name = str(path)
    if data[:2] not in (b"Pf", b"PF"):
        raise CodecError(f"{name}: expected PFM magic")
    channels = 3 if data[:2] == b"PF" else 1
    lines = data.split(b"\n", 3)
    if len(lines) < 4:
        raise CodecError(f"{name}: truncated header")
    try:
        w, h = (int(v) for v in lines[1].split())
        scale = float(lines[2])
    except ValueError:
        raise CodecError(f"{name}: malformed header") from None
    if w <= 0 or h <= 0 or scale == 0.0:
        raise CodecError(f"{name}: invalid header values")
    off = sum(len(x) + 1 for x in lines[:3])
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    if len(data) - off != 4 * count:
        raise CodecError(f"{name}: payload size does not match {w}x{h}")
    arr = np.frombuffer(data, dtype=dtype, offset=off).astype(np.float32)
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))
    return arr[::-1].copy()


# ----------------------------------------------------------------- .flo

FLO_MAGIC = b"PIEH"


def save_flo(path, flow):
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise CodecError("flow maps must be (H, W, 2)")
    h, w = flow.shape[:2]
    Path(path).write_bytes(FLO_MAGIC + struct.pack("<2i", w, h) + flow.tobytes())


def load_flo(path):
    data = _read(path)
    name = str(path)
    if len(data) < 12 or data[:4] != FLO_MAGIC:
        raise CodecError(f"{name}: missing PIEH magic")
    w, h = struct.unpack_from("<2i", data, 4)
    if w <= 0 or h <= 0 or len(data) != 12 + 8 * w * h:
        raise CodecError(f"{name}: payload size does not match {w}x{h}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


# ----------------------------------------------------------------- poses

def format_poses(poses):
    return "".join(" ".join(repr(float(v)) for v in np.asarray(p.matrix).reshape(-1)) + "\n" for p in poses)


def parse_poses(text, name="poses"):
    poses = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            vals = [float(v) for v in line.split()]
        except ValueError:
            raise ManifestError(f"{name}:{n}: non-numeric pose entry") from None
        if len(vals) != 16:
            raise ManifestError(f"{name}:{n}: expected 16 values, got {len(vals)}")
        try:
            poses.append(RigidTransform(np.reshape(vals, (4, 4))))
        except ValueError as exc:
            raise ManifestError(f"{name}:{n}: {exc}") from None
    return poses


# ----------------------------------------------------------------- run config

def _from_section(cls, section, name, exclude=()):
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


@dataclass
class GridConfig:
    origin: tuple = (-0.4, -6.4, -1.0)
    extent: tuple = (12.8, 12.8, 6.4)
    voxel: float = 0.2

    def __post_init__(self):
        if len(self.origin) != 3 or len(self.extent) != 3:
            raise ValueError("origin and extent need three components")
        self.spec()

    def spec(self):
        return GridSpec.from_extent(self.origin, self.extent, self.voxel)


_FIT_MANAGED = ("seed", "sigma_aux", "n_samples", "xi")


@dataclass
class RunConfig:
    """Everything needed to synthesize, fit and evaluate one run."""

    grid: GridConfig = field(default_factory=GridConfig)
    render: RenderParams = field(default_factory=lambda: RenderParams(64, 50.0, True))
    loss: LossWeights = field(default_factory=LossWeights)
    fit: FitConfig = field(default_factory=FitConfig)
    seed: int = 0
    sigma_aux: float = 1.0
    sigma_cue: float = 0.5
    stereo_baseline: float = 0.54

    def __post_init__(self):
        if self.sigma_aux <= 0 or self.sigma_cue < 0 or self.stereo_baseline <= 0:
            raise ConfigError("sigma_aux and stereo_baseline must be positive, sigma_cue nonnegative")
        self.fit = self.fit.replace(seed=int(self.seed), sigma_aux=float(self.sigma_aux),
                                    n_samples=self.render.n_samples, xi=self.render.xi)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        top = {"grid", "render", "loss", "fit", "seed", "sigma_aux", "sigma_cue", "stereo_baseline"}
        unknown = sorted(set(data) - top)
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        kw = {}
        if "grid" in data:
            kw["grid"] = _from_section(GridConfig, data["grid"], "grid")
        if "render" in data:
            kw["render"] = _from_section(RenderParams, {"n_samples": 64, "xi": 50.0, "jitter": True, **data["render"]}
                                         if isinstance(data["render"], dict) else data["render"], "render")
        if "loss" in data:
            kw["loss"] = _from_section(LossWeights, data["loss"], "loss")
        if "fit" in data:
            kw["fit"] = _from_section(FitConfig, data["fit"], "fit", exclude=_FIT_MANAGED)
        for key, typ in (("seed", int), ("sigma_aux", float), ("sigma_cue", float), ("stereo_baseline", float)):
            if key in data:
                value = data[key]
                if isinstance(value, bool) or not isinstance(value, (int, float)) or (typ is int and value != int(value)):
                    raise ConfigError(f"{key} must be a number")
                kw[key] = typ(value)
        return cls(**kw)

    def to_dict(self):
        fit = {k: v for k, v in asdict(self.fit).items() if k not in _FIT_MANAGED}
        return {
            "grid": asdict(self.grid),
            "render": asdict(self.render),
            "loss": asdict(self.loss),
            "fit": fit,
            "seed": self.seed,
            "sigma_aux": self.sigma_aux,
            "sigma_cue": self.sigma_cue,
            "stereo_baseline": self.stereo_baseline,
        }


def load_config(path):
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(data)


def save_config(path, config):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


# ----------------------------------------------------------------- workspace

@dataclass
class ReferenceData:
    """Per-pixel reference maps plus reference grids at the key frame."""

    depth: np.ndarray
    hit: np.ndarray
    flow: np.ndarray
    sdf: Optional[ScalarField] = None
    flow_field: Optional[VectorField] = None


@dataclass
class Workspace:
    root: Path
    manifest: dict
    frames: FrameSet
    spec: GridSpec
    key_frame: int
    reference: Optional[ReferenceData] = None


def _frame_name(t, cam):
    return f"t{t:03d}_{cam}"


def save_workspace(root, frames, spec, key_frame, reference=None):
    """Write ``frames`` (and optional reference data) under ``root``."""
    root = Path(root)
    for sub in ("frames", "cues", "masks", "lidar", "truth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "poses.txt").write_text(format_poses(frames.poses))
    T = frames.num_frames
    W, H = frames.image_size
    cams = [c.name for c in frames.cameras]
    entries = []
    for t in range(T):
        e = {"index": t, "images": [], "flow_cues": None, "movable_masks": None, "lidar": None, "lidar_origin": None}
        for c, name in enumerate(cams):
            rel = f"frames/{_frame_name(t, name)}.ppm"
            save_ppm(root / rel, image_to_u16(frames.images[t, c]))
            e["images"].append(rel)
        if frames.flow_cues is not None:
            e["flow_cues"] = []
            for c, name in enumerate(cams):
                rel = f"cues/{_frame_name(t, name)}.flo"
                save_flo(root / rel, frames.flow_cues[t, c])
                e["flow_cues"].append(rel)
        if frames.movable_masks is not None:
            e["movable_masks"] = []
            for c, name in enumerate(cams):
                rel = f"masks/{_frame_name(t, name)}.pgm"
                save_pgm(root / rel, frames.movable_masks[t, c].astype(np.uint8) * 255)
                e["movable_masks"].append(rel)
        if frames.lidar is not None:
            pts, origin = frames.lidar[t]
            rel = f"lidar/t{t:03d}.pfm"
            save_pfm(root / rel, np.asarray(pts).reshape(-1, 3))
            e["lidar"] = rel
            e["lidar_origin"] = [float(v) for v in origin]
        entries.append(e)
    backward = []
    for (t, ta), maps in sorted((frames.backward_cues or {}).items()):
        files = []
        for c, name in enumerate(cams):
            rel = f"cues/t{t:03d}_to{ta:03d}_{name}.flo"
            save_flo(root / rel, maps[c])
            files.append(rel)
        backward.append({"frame": int(t), "target": int(ta), "files": files})
    manifest = {
        "version": MANIFEST_VERSION,
        "image_size": [W, H],
        "frame_interval": frames.frame_interval,
        "key_frame": int(key_frame),
        "grid": {"origin": spec.origin.tolist(), "voxel_size": spec.voxel_size.tolist(), "dims": list(spec.dims)},
        "cameras": [
            {"name": c.name, "K": c.intrinsics.K.tolist(), "extrinsic": c.extrinsic.matrix.tolist()}
            for c in frames.cameras
        ],
        "poses": "poses.txt",
        "frames": entries,
        "backward_cues": backward,
        "reference": None,
    }
    if reference is not None:
        ref = {"depth": [], "hit": [], "flow": [], "sdf": None, "flow_field": None}
        for t in range(T):
            for key in ("depth", "hit", "flow"):
                ref[key].append([])
            for c, name in enumerate(cams):
                base = f"truth/{_frame_name(t, name)}"
                save_pfm(root / f"{base}_depth.pfm", reference.depth[t, c])
                save_pgm(root / f"{base}_hit.pgm", reference.hit[t, c].astype(np.uint8) * 255)
                save_flo(root / f"{base}_flow.flo", reference.flow[t, c])
                ref["depth"][t].append(f"{base}_depth.pfm")
                ref["hit"][t].append(f"{base}_hit.pgm")
                ref["flow"][t].append(f"{base}_flow.flo")
        if reference.sdf is not None:
            save_grid(root / "truth/sdf.occf", reference.sdf)
            ref["sdf"] = "truth/sdf.occf"
        if reference.flow_field is not None:
            save_grid(root / "truth/flow.occf", reference.flow_field)
            ref["flow_field"] = "truth/flow.occf"
        manifest["reference"] = ref
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return root


_MANIFEST_KEYS = {"version", "image_size", "frame_interval", "key_frame", "grid", "cameras", "poses", "frames",
                  "backward_cues", "reference"}
_FRAME_KEYS = {"index", "images", "flow_cues", "movable_masks", "lidar", "lidar_origin"}


def _require(d, keys, where):
    if not isinstance(d, dict):
        raise ManifestError(f"{where} must be an object")
    missing = sorted(k for k in keys if k not in d)
    extra = sorted(set(d) - set(keys))
    if missing:
        raise ManifestError(f"{where}: missing key(s) {', '.join(missing)}")
    if extra:
        raise ManifestError(f"{where}: unknown key(s) {', '.join(extra)}")


def load_workspace(path):
    """Read and validate a workspace; every referenced asset is loaded eagerly."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise ManifestError(f"{mpath}: manifest not found")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{mpath}: {exc}") from None
    _require(m, _MANIFEST_KEYS, str(mpath))
    if m["version"] != MANIFEST_VERSION:
        raise ManifestError(f"{mpath}: unsupported version {m['version']}")

    def asset(rel):
        p = root / rel
        if not p.is_file():
            raise ManifestError(f"{p}: referenced file does not exist")
        return p

    W, H = (int(v) for v in m["image_size"])

    def check(arr, p, shape):
        if arr.shape[: len(shape)] != shape:
            raise DimensionMismatch(f"{p}: shape {arr.shape[:2]} does not match image size {shape}")
        return arr

    try:
        g = m["grid"]
        spec = GridSpec(g["origin"], g["voxel_size"], g["dims"])
        cameras = [
            Camera(c["name"], Intrinsics(np.asarray(c["K"], dtype=np.float64), W, H), RigidTransform(c["extrinsic"]))
            for c in m["cameras"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{mpath}: invalid grid or camera entry ({exc})") from None
    poses = parse_poses(asset(m["poses"]).read_text(), str(root / m["poses"]))
    T, C = len(m["frames"]), len(cameras)
    if len(poses) != T:
        raise ManifestError(f"{root / m['poses']}: {len(poses)} poses for {T} frames")

    images = np.zeros((T, C, H, W, 3))
    have_cues = all(f.get("flow_cues") is not None for f in m["frames"])
    have_masks = all(f.get("movable_masks") is not None for f in m["frames"])
    have_lidar = all(f.get("lidar") is not None for f in m["frames"])
    cues = np.zeros((T, C, H, W, 2)) if have_cues else None
    masks = np.zeros((T, C, H, W), dtype=bool) if have_masks else None
    lidar = [] if have_lidar else None
    for t, f in enumerate(m["frames"]):
        _require(f, _FRAME_KEYS, f"{mpath} frame {t}")
        if len(f["images"]) != C:
            raise ManifestError(f"{mpath} frame {t}: {len(f['images'])} images for {C} cameras")
        for c, rel in enumerate(f["images"]):
            p = asset(rel)
            images[t, c] = u16_to_image(check(load_ppm(p), p, (H, W)))
        if have_cues:
            for c, rel in enumerate(f["flow_cues"]):
                p = asset(rel)
                cues[t, c] = check(load_flo(p), p, (H, W))
        if have_masks:
            for c, rel in enumerate(f["movable_masks"]):
                p = asset(rel)
                masks[t, c] = check(load_pgm(p), p, (H, W)) > 0
        if have_lidar:
            p = asset(f["lidar"])
            pts = load_pfm(p)
            if pts.ndim != 2 or pts.shape[1] != 3:
                raise DimensionMismatch(f"{p}: LiDAR points must be (P, 3)")
            lidar.append((pts.astype(np.float64), np.asarray(f["lidar_origin"], dtype=np.float64)))
    backward = {}
    for e in m["backward_cues"]:
        _require(e, {"frame", "target", "files"}, f"{mpath} backward cue")
        maps = np.zeros((C, H, W, 2))
        for c, rel in enumerate(e["files"]):
            p = asset(rel)
            maps[c] = check(load_flo(p), p, (H, W))
        backward[(int(e["frame"]), int(e["target"]))] = maps
    try:
        frames = FrameSet(cameras, poses, images, float(m["frame_interval"]), cues, masks, backward or None, lidar)
    except ValueError as exc:
        raise DimensionMismatch(f"{mpath}: {exc}") from None

    reference = None
    ref = m["reference"]
    if ref is not None:
        _require(ref, {"depth", "hit", "flow", "sdf", "flow_field"}, f"{mpath} reference")
        depth = np.zeros((T, C, H, W))
        hit = np.zeros((T, C, H, W), dtype=bool)
        flow = np.zeros((T, C, H, W, 2))
        for t in range(T):
            for c in range(C):
                p = asset(ref["depth"][t][c])
                depth[t, c] = check(load_pfm(p), p, (H, W))
                p = asset(ref["hit"][t][c])
                hit[t, c] = check(load_pgm(p), p, (H, W)) > 0
                p = asset(ref["flow"][t][c])
                flow[t, c] = check(load_flo(p), p, (H, W))
        sdf = load_grid(asset(ref["sdf"])) if ref["sdf"] else None
        ff = load_grid(asset(ref["flow_field"])) if ref["flow_field"] else None
        for grid_, rel in ((sdf, ref["sdf"]), (ff, ref["flow_field"])):
            if grid_ is not None and grid_.spec != spec:
                raise DimensionMismatch(f"{root / rel}: grid does not match the workspace grid")
        reference = ReferenceData(depth, hit, flow, sdf, ff)
    key = int(m["key_frame"])
    if not 0 <= key < T - 1:
        raise ManifestError(f"{mpath}: key frame {key} needs a following frame")
    return Workspace(root, m, frames, spec, key, reference)
