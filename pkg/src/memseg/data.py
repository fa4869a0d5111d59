"""Synthetic moving-shape videos, PPM/PGM IO and the dataset manifest."""
from __future__ import annotations

import colorsys
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import substream
from .tensor import ConfigError

IGNORE = 255
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


class DataIOError(OSError):
    pass


class ManifestError(ValueError):
    pass


class ManifestVersionError(ManifestError):
    pass


# ---------------------------------------------------------------- netpbm


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 from an (H, W, 3) uint8 array."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, c = rgb.shape
    if c != 3:
        raise ValueError(f"PPM needs 3 channels, got {c}")
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary P5 from an (H, W) uint8 array."""
    gray = np.asarray(gray)
    if gray.min(initial=0) < 0 or gray.max(initial=0) > 255:
        raise ValueError("PGM values must fit in 8 bits")
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(gray.tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise DataIOError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    if buf[:2] != magic:
        raise DataIOError(f"{path}: expected {magic.decode()} header")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataIOError(f"{path}: truncated or malformed header")
        fields.append(int(buf[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise DataIOError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    n = w * h * channels
    data = buf[pos:pos + n]
    if len(data) != n:
        raise DataIOError(f"{path}: truncated pixel data ({len(data)} of {n} bytes)")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3).copy()


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1).copy()


# ---------------------------------------------------------------- clips and manifest


@dataclass
class VideoClip:
    id: str
    frames: list  # (H, W, 3) uint8
    masks: list   # (H, W) uint8

    def __post_init__(self):
        if len(self.frames) != len(self.masks):
            raise ValueError(f"clip {self.id}: {len(self.frames)} frames but {len(self.masks)} masks")
        shapes = {f.shape[:2] for f in self.frames} | {m.shape for m in self.masks}
        if len(shapes) > 1:
            raise ValueError(f"clip {self.id}: inconsistent frame dims {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.frames)

    def float_frames(self, dtype=np.float32) -> list:
        """Frames as (3, H, W) in [0, 1]."""
        return [to_chw(f, dtype) for f in self.frames]


def to_chw(rgb: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (np.moveaxis(np.asarray(rgb), -1, 0) / 255.0).astype(dtype)


@dataclass
class VideoEntry:
    id: str
    frames: int
    split: str


@dataclass
class DatasetManifest:
    root: Path
    num_classes: int
    height: int
    width: int
    videos: list = field(default_factory=list)
    generator: dict = field(default_factory=dict)

    def split(self, tag: str) -> list:
        return [v for v in self.videos if v.split == tag]

    def frame_path(self, vid: str, t: int) -> Path:
        return self.root / vid / "frames" / f"{t:05d}.ppm"

    def mask_path(self, vid: str, t: int) -> Path:
        return self.root / vid / "masks" / f"{t:05d}.pgm"

    def to_json(self) -> dict:
        return {"format": "memseg-dataset", "version": MANIFEST_VERSION, "K": self.num_classes,
                "height": self.height, "width": self.width,
                "videos": [asdict(v) for v in self.videos], "generator": self.generator}

    def save(self) -> None:
        with open(self.root / MANIFEST_NAME, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        try:
            with open(path) as f:
                doc = json.load(f)
        except FileNotFoundError as exc:
            raise DataIOError(f"{path}: manifest not found") from exc
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
        if doc.get("version") != MANIFEST_VERSION:
            raise ManifestVersionError(f"{path}: unsupported manifest version {doc.get('version')!r}")
        try:
            videos = [VideoEntry(str(v["id"]), int(v["frames"]), str(v["split"])) for v in doc["videos"]]
            m = cls(root, int(doc["K"]), int(doc["height"]), int(doc["width"]), videos,
                    doc.get("generator", {}))
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: missing or malformed field ({exc})") from exc
        for v in videos:
            if v.split not in ("train", "val"):
                raise ManifestError(f"{path}: video {v.id} has unknown split {v.split!r}")
        return m


def save_clip(manifest: DatasetManifest, clip: VideoClip) -> None:
    os.makedirs(manifest.root / clip.id / "frames", exist_ok=True)
    os.makedirs(manifest.root / clip.id / "masks", exist_ok=True)
    for t, (f, m) in enumerate(zip(clip.frames, clip.masks)):
        write_ppm(manifest.frame_path(clip.id, t), f)
        write_pgm(manifest.mask_path(clip.id, t), m)


def load_clip(manifest: DatasetManifest, vid: str) -> VideoClip:
    entry = next((v for v in manifest.videos if v.id == vid), None)
    if entry is None:
        raise ManifestError(f"video {vid!r} not in manifest {manifest.root}")
    frames, masks = [], []
    for t in range(entry.frames):
        frames.append(read_ppm(manifest.frame_path(vid, t)))
        mask = read_pgm(manifest.mask_path(vid, t))
        bad = (mask != IGNORE) & (mask >= manifest.num_classes)
        if bad.any():
            raise ManifestError(f"{manifest.mask_path(vid, t)}: label {int(mask[bad].max())} "
                                f"exceeds K={manifest.num_classes}")
        if mask.shape != (manifest.height, manifest.width):
            raise ManifestError(f"{manifest.mask_path(vid, t)}: dims {mask.shape} disagree with manifest")
        masks.append(mask)
    return VideoClip(vid, frames, masks)


def load_split(manifest: DatasetManifest, tag: str) -> list:
    return [load_clip(manifest, v.id) for v in manifest.split(tag)]


# ---------------------------------------------------------------- synthetic generator


@dataclass
class SyntheticConfig:
    n_train: int = 40
    n_val: int = 10
    frames_per_video: int = 8
    height: int = 64
    width: int = 64
    num_classes: int = 5
    # shape half-extent range as a fraction of the shorter side
    size_range: tuple = (0.12, 0.22)
    max_speed: int = 3
    # per-video shift of each class colour, and per-pixel noise
    color_jitter: float = 0.12
    noise: float = 0.08
    # if set, object classes (1,2), (3,4), ... share a colour and differ only in shape
    paired_colors: bool = False

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.height % 32 or self.width % 32 or self.height <= 0 or self.width <= 0:
            raise ConfigError(f"frame dims must be positive multiples of 32, got {self.height}x{self.width}")
        if self.frames_per_video < 1 or self.n_train < 0 or self.n_val < 0 or self.n_train + self.n_val < 1:
            raise ConfigError("need at least one video with at least one frame")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad size range {self.size_range}")
        side = min(self.height, self.width)
        min_half = max(1, int(round(lo * side)))
        if (self.num_classes - 1) * (2 * min_half + 1) ** 2 > 0.6 * self.height * self.width:
            raise ConfigError(f"{self.num_classes - 1} shapes of half-size {min_half} cannot fit "
                              f"in {self.height}x{self.width}")


@dataclass
class ShapeTrack:
    cls: int
    kind: str  # 'rect' or 'disk'
    center: tuple  # integer (y, x) at frame 0
    velocity: tuple  # integer pixels per frame
    half: tuple  # (half height, half width); disks use half[0] as radius

    def center_at(self, t: int, h: int, w: int) -> tuple:
        return ((self.center[0] + t * self.velocity[0]) % h, (self.center[1] + t * self.velocity[1]) % w)


def class_palette(num_classes: int, seed: int, paired: bool) -> np.ndarray:
    rng = substream(seed, "palette")
    offset = rng.random()
    n_colors = num_classes if not paired else 1 + num_classes // 2
    colors = []
    for i in range(n_colors):
        hue = (offset + i / n_colors) % 1.0
        sat = 0.35 if i == 0 else 0.75
        val = 0.35 if i == 0 else 0.8
        colors.append(colorsys.hsv_to_rgb(hue, sat, val))
    colors = np.array(colors)
    if not paired:
        return colors[:num_classes]
    pal = [colors[0]] + [colors[1 + (k - 1) // 2] for k in range(1, num_classes)]
    return np.array(pal)


def shape_mask(track: ShapeTrack, t: int, h: int, w: int) -> np.ndarray:
    """Toroidally wrapped footprint of ``track`` at frame ``t``."""
    cy, cx = track.center_at(t, h, w)
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    dy = (ys - cy + h // 2) % h - h // 2
    dx = (xs - cx + w // 2) % w - w // 2
    if track.kind == "rect":
        return (np.abs(dy) <= track.half[0]) & (np.abs(dx) <= track.half[1])
    return dy * dy + dx * dx <= track.half[0] ** 2


def render_mask(tracks, t: int, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=np.uint8)
    for tr in tracks:  # later classes occlude earlier ones
        mask[shape_mask(tr, t, h, w)] = tr.cls
    return mask


def _sample_tracks(rng, cfg: SyntheticConfig):
    h, w = cfg.height, cfg.width
    side = min(h, w)
    lo, hi = (max(1, int(round(f * side))) for f in cfg.size_range)
    tracks = []
    for k in range(1, cfg.num_classes):
        kind = "rect" if k % 2 else "disk"
        half = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
        center = (int(rng.integers(h)), int(rng.integers(w)))
        vel = (0, 0)
        while vel == (0, 0):
            vel = (int(rng.integers(-cfg.max_speed, cfg.max_speed + 1)),
                   int(rng.integers(-cfg.max_speed, cfg.max_speed + 1)))
        tracks.append(ShapeTrack(k, kind, center, vel, half))
    return tracks


def generate_video(rng, cfg: SyntheticConfig, palette: np.ndarray, vid: str, max_tries: int = 200):
    h, w = cfg.height, cfg.width
    for _ in range(max_tries):
        tracks = _sample_tracks(rng, cfg)
        masks = [render_mask(tracks, t, h, w) for t in range(cfg.frames_per_video)]
        present = np.zeros(cfg.num_classes, dtype=bool)
        for m in masks:
            present[np.unique(m)] = True
        if present.all():
            break
    else:
        raise ConfigError(f"could not place {cfg.num_classes - 1} visible shapes in {h}x{w} "
                          f"after {max_tries} tries")
    colors = np.clip(palette + rng.uniform(-cfg.color_jitter, cfg.color_jitter, palette.shape), 0, 1)
    frames = []
    for m in masks:
        img = colors[m] + rng.normal(0.0, cfg.noise, (h, w, 3))
        frames.append(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
    return VideoClip(vid, frames, masks), tracks


def generate_synthetic(root, seed: int, cfg: SyntheticConfig | None = None) -> DatasetManifest:
    """Write a deterministic moving-shapes dataset under ``root`` and return its manifest."""
    cfg = cfg or SyntheticConfig()
    cfg.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    palette = class_palette(cfg.num_classes, seed, cfg.paired_colors)
    gen = asdict(cfg)
    gen["size_range"] = list(cfg.size_range)
    gen["seed"] = seed
    manifest = DatasetManifest(root, cfg.num_classes, cfg.height, cfg.width, [], gen)
    splits = ["train"] * cfg.n_train + ["val"] * cfg.n_val
    for i, split in enumerate(splits):
        vid = f"{split}{i:03d}"
        clip, _ = generate_video(substream(seed, f"video/{i}"), cfg, palette, vid)
        save_clip(manifest, clip)
        manifest.videos.append(VideoEntry(vid, len(clip), split))
    manifest.save()
    return manifest


def video_tracks(seed: int, cfg: SyntheticConfig, index: int):
    """Re-derive the shape tracks of video ``index`` (for motion checks)."""
    palette = class_palette(cfg.num_classes, seed, cfg.paired_colors)
    _, tracks = generate_video(substream(seed, f"video/{index}"), cfg, palette, "probe")
    return tracks
