"""Synthetic two-modality segmentation scenes, PGM I/O and the dataset manifest.

Each scene is one label mask (background, a large ellipse, three sub-regions
nested inside it) rendered twice: domain A with category-specific intensities,
domain B with inverted, compressed intensities under a smooth bias field.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DOMAIN_A_MEANS = (0.05, 0.2, 0.45, 0.65, 0.85)  # background first
NOISE_A = 0.03
NOISE_B = 0.05
MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ("split", "domain", "image_path", "mask_path")
SPLITS = ("train", "val", "test")
DOMAINS = ("A", "B")


class PGMError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class TargetMaskAccessError(PermissionError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int = 64
    width: int = 64
    num_classes: int = 5

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 categories")
        if self.height < 16 or self.width < 16:
            raise ValueError(f"scene {self.height}x{self.width} too small, structures need at least 16x16")


def domain_b_means(num_classes: int = 5) -> np.ndarray:
    """Inverted domain-A means compressed into [0.15, 0.9]."""
    return 0.15 + 0.75 * (1.0 - _domain_a_means(num_classes))


def _domain_a_means(num_classes: int) -> np.ndarray:
    if num_classes == len(DOMAIN_A_MEANS):
        return np.array(DOMAIN_A_MEANS)
    fg = np.linspace(0.2, 0.85, num_classes - 1)
    return np.concatenate([[0.05], fg])


def _blob(yy, xx, cy, cx, ry, rx, angle, rng, wobble=0.06):
    """Ellipse with a smooth low-order Fourier perturbation of its radius."""
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    r = np.hypot(u, v)
    t = np.arctan2(v, u)
    amp = rng.uniform(0.0, wobble, size=2)
    phase = rng.uniform(0.0, 2 * np.pi, size=2)
    edge = 1.0 + amp[0] * np.cos(2 * t + phase[0]) + amp[1] * np.cos(3 * t + phase[1])
    return r <= edge


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(mask, image_a, image_b)``; images are (H, W) on the 16-bit grid in [0, 1]."""
    rng = np.random.default_rng(spec.seed)
    h, w, n_cls = spec.height, spec.width, spec.num_classes
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    cy = h / 2 + rng.uniform(-0.06, 0.06) * h
    cx = w / 2 + rng.uniform(-0.06, 0.06) * w
    ry = rng.uniform(0.30, 0.36) * h
    rx = rng.uniform(0.34, 0.40) * w
    angle = rng.uniform(-0.35, 0.35)
    outer = _blob(yy, xx, cy, cx, ry, rx, angle, rng)
    mask = np.zeros((h, w), dtype=np.int64)
    mask[outer] = 1

    n_sub = n_cls - 2
    if n_sub > 0:
        base = angle + np.pi / 2 + rng.uniform(-0.25, 0.25)
        sizes = np.linspace(0.50, 0.36, n_sub)
        for k in range(n_sub):
            theta = base + 2 * np.pi * k / n_sub + rng.uniform(-0.2, 0.2)
            dist = rng.uniform(0.40, 0.48)
            sy = cy + dist * ry * np.sin(theta)
            sx = cx + dist * rx * np.cos(theta)
            size = sizes[k] * min(ry, rx) * rng.uniform(0.88, 1.12)
            sub = _blob(yy, xx, sy, sx, size * rng.uniform(0.85, 1.0), size, rng.uniform(0, np.pi), rng, 0.08)
            mask[sub & outer] = k + 2

    means_a = _domain_a_means(n_cls)
    means_b = domain_b_means(n_cls)
    img_a = means_a[mask] + rng.normal(0.0, NOISE_A, size=(h, w))

    u = (xx / (w - 1)) * 2 - 1
    v = (yy / (h - 1)) * 2 - 1
    coef = rng.uniform(-1.0, 1.0, size=4)
    bias = 1.0 + 0.12 * (coef[0] * u + coef[1] * v + coef[2] * u * v + coef[3] * (u * u - v * v) * 0.5)
    img_b = means_b[mask] * bias + rng.normal(0.0, NOISE_B, size=(h, w))
    return mask, quantize16(img_a), quantize16(img_b)


def quantize16(img: np.ndarray) -> np.ndarray:
    """Snap intensities to the 16-bit PGM grid so files round-trip exactly."""
    return np.round(np.clip(img, 0.0, 1.0) * 65535.0) / 65535.0


# --------------------------------------------------------------------- PGM I/O

def write_pgm(path, raster: np.ndarray, maxval: int | None = None) -> None:
    """Write a binary (P5) PGM. Integer rasters are stored as-is; float rasters
    in [0, 1] are scaled to 16 bit."""
    arr = np.asarray(raster)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise ValueError(f"PGM raster must be 2-D, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.floating):
        maxval = 65535 if maxval is None else maxval
        values = np.round(np.clip(arr, 0.0, 1.0) * maxval).astype(np.int64)
    else:
        values = arr.astype(np.int64)
        if maxval is None:
            maxval = 255 if values.max(initial=0) <= 255 else 65535
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval {maxval} outside 1..65535")
    if values.min(initial=0) < 0 or values.max(initial=0) > maxval:
        raise ValueError(f"raster values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.astype(dtype).tobytes())


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PGMError("unexpected end of header", pos)
    return buf[start:pos], pos


def parse_pgm(buf: bytes) -> tuple[np.ndarray, int]:
    """Parse P5 bytes into ``(raster, maxval)``; raster dtype is uint8 or uint16."""
    if buf[:2] != b"P5":
        raise PGMError(f"bad magic {buf[:2]!r}, expected b'P5'", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise PGMError(f"malformed {name} {tok!r}", start)
        fields.append(int(tok))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PGMError(f"non-positive dimensions {width}x{height}", 2)
    if not 0 < maxval < 65536:
        raise PGMError(f"maxval {maxval} outside 1..65535", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PGMError("missing whitespace after maxval", pos)
    pos += 1
    bpp = 2 if maxval > 255 else 1
    need = width * height * bpp
    have = len(buf) - pos
    if have < need:
        raise PGMError(f"truncated payload: need {need} bytes, have {have}", len(buf))
    dtype = ">u2" if bpp == 2 else "u1"
    data = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos).reshape(height, width)
    out = data.astype(np.uint16 if bpp == 2 else np.uint8)
    if out.max(initial=0) > maxval:
        raise PGMError(f"sample exceeds maxval {maxval}", pos)
    return out, maxval


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raster, _ = parse_pgm(fh.read())
    return raster


def read_image(path) -> np.ndarray:
    """16-bit image file -> float raster in [0, 1]."""
    with open(path, "rb") as fh:
        raster, maxval = parse_pgm(fh.read())
    return raster.astype(np.float64) / maxval


# -------------------------------------------------------------- dataset files

def scene_paths(split: str, domain: str, index: int) -> tuple[str, str]:
    stem = f"{split}/{domain}/{index:05d}"
    return f"{stem}_image.pgm", f"{stem}_mask.pgm"


def generate_dataset(out_dir, scenes: int, seed: int = 0, size: tuple[int, int] = (64, 64),
                     val_scenes: int = 0, test_scenes: int = 0, num_classes: int = 5) -> Path:
    """Render train/val/test scenes for both domains and write the manifest.

    Scene ``i`` (counted across train, val, test in that order) uses seed ``seed + i``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counter = 0
    for split, count in zip(SPLITS, (scenes, val_scenes, test_scenes)):
        for i in range(count):
            spec = SceneSpec(seed + counter, size[0], size[1], num_classes)
            counter += 1
            mask, img_a, img_b = generate_scene(spec)
            for domain, img in zip(DOMAINS, (img_a, img_b)):
                ipath, mpath = scene_paths(split, domain, i)
                (out / ipath).parent.mkdir(parents=True, exist_ok=True)
                write_pgm(out / ipath, img)
                write_pgm(out / mpath, mask.astype(np.uint8), maxval=255)
    return build_manifest(out)


def build_manifest(root) -> Path:
    """Scan ``root`` for scene files and write ``manifest.csv`` (split,domain,image_path,mask_path)."""
    root = Path(root)
    rows = []
    for split in SPLITS:
        for domain in DOMAINS:
            folder = root / split / domain
            if not folder.is_dir():
                continue
            for img in sorted(folder.glob("*_image.pgm")):
                mask = img.with_name(img.name.replace("_image.pgm", "_mask.pgm"))
                rows.append((split, domain, img.relative_to(root).as_posix(), mask.relative_to(root).as_posix()))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    writer.writerows(rows)
    path = root / MANIFEST_NAME
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


class SceneDataset:
    """Manifest-backed loader.

    With ``role="train"`` any request for a target-domain mask raises
    ``TargetMaskAccessError``. With ``role="eval"`` target masks are served for
    the val and test splits only.
    """

    def __init__(self, root, role: str = "train", target_domain: str = "B"):
        self.root = Path(root)
        manifest = self.root / MANIFEST_NAME
        if not manifest.is_file():
            raise FileNotFoundError(f"no manifest at {manifest}")
        if role not in ("train", "eval"):
            raise ValueError(f"unknown role {role!r}")
        self.role = role
        self.target_domain = target_domain
        with open(manifest, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
                raise ValueError(f"manifest columns {reader.fieldnames}, expected {MANIFEST_COLUMNS}")
            self.rows = list(reader)
        self._cache: dict[tuple, np.ndarray] = {}

    def _select(self, split: str, domain: str) -> list[dict]:
        return [r for r in self.rows if r["split"] == split and r["domain"] == domain]

    def count(self, split: str, domain: str) -> int:
        return len(self._select(split, domain))

    def images(self, split: str, domain: str) -> np.ndarray:
        key = ("img", split, domain)
        if key not in self._cache:
            rows = self._select(split, domain)
            arr = [read_image(self.root / r["image_path"]) for r in rows]
            self._cache[key] = np.stack(arr)[..., None] if arr else np.zeros((0, 0, 0, 1))
        return self._cache[key]

    def masks(self, split: str, domain: str) -> np.ndarray:
        if domain == self.target_domain and (self.role == "train" or split == "train"):
            raise TargetMaskAccessError(
                f"target-domain ({domain}) masks of split {split!r} are not readable with role {self.role!r}")
        key = ("mask", split, domain)
        if key not in self._cache:
            rows = self._select(split, domain)
            arr = [read_pgm(self.root / r["mask_path"]).astype(np.int64) for r in rows]
            self._cache[key] = np.stack(arr) if arr else np.zeros((0, 0, 0), dtype=np.int64)
        return self._cache[key]
