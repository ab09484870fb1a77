"""Procedural compositing dataset: objects, backgrounds, loose boxes and
ground-truth composites, plus the on-disk layout.

Every sample is a pure function of its seed. Geometry is rasterized with
integer arithmetic (fixed-point sines, half-pixel coordinates) so the bytes
do not depend on the platform's libm.

Scene convention: the background carries a tilted horizon, and the object
is rotated to lie parallel to it, so the target geometry is recoverable from
the background and the box.
"""
from __future__ import annotations

import hashlib
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .pnm import PnmError, read_pnm, write_pnm

PathLike = Union[str, os.PathLike]

MASK64 = (1 << 64) - 1
FP = 1 << 12  # fixed-point scale for sines/cosines
WHITE = 255

# saturated object colors; no channel reaches 255 so white marks transparency
PALETTE = (
    (220, 40, 40), (40, 170, 60), (40, 70, 220), (230, 200, 30), (200, 60, 200), (30, 190, 200),
    (240, 130, 20), (120, 60, 20), (20, 20, 20), (150, 230, 90), (110, 40, 160), (200, 200, 200),
)


class SplitMix64:
    """64-bit splitmix generator (Steele, Lea & Flood constants)."""

    GAMMA = 0x9E3779B97F4A7C15
    MIX1 = 0xBF58476D1CE4E5B9
    MIX2 = 0x94D049BB133111EB

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + self.GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * self.MIX1) & MASK64
        z = ((z ^ (z >> 27)) * self.MIX2) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.next_u64() % (hi - lo + 1)


def _fixed_cos_sin(deg: int) -> Tuple[int, int]:
    r = math.radians(deg)
    return int(round(math.cos(r) * FP)), int(round(math.sin(r) * FP))


@dataclass
class DataConfig:
    image_size: int = 64
    radius: Tuple[int, int] = (10, 16)            # object radius range in px at size 64
    rotation: Tuple[int, int] = (-45, 45)         # degrees, integer
    scale: Tuple[float, float] = (0.6, 1.0)       # quantized to multiples of 1/20
    looseness: float = 1.2                        # box half-extent / silhouette half-extent
    stripe_width: Tuple[int, int] = (4, 7)
    checker_cell: Tuple[int, int] = (5, 8)
    noise_amp: float = 12.0                       # 8-bit levels

    def __post_init__(self):
        self.radius = tuple(int(v) for v in self.radius)
        self.rotation = tuple(int(v) for v in self.rotation)
        self.scale = tuple(float(v) for v in self.scale)
        if self.image_size < 16 or self.image_size % 4:
            raise ValueError(f"image_size must be a multiple of 4 and >= 16, got {self.image_size}")
        lo, hi = self.scale_steps()
        if not (1 <= lo <= hi <= 20):
            raise ValueError(f"scale range {self.scale} must lie in (0, 1]")
        if not self.rotation[0] <= self.rotation[1]:
            raise ValueError(f"bad rotation range {self.rotation}")
        if self.looseness < math.sqrt(1.2):
            raise ValueError("looseness below sqrt(1.2) cannot guarantee the box/silhouette area ratio")
        r_lo, r_hi = self.pixel_radius()
        if not 4 <= r_lo <= r_hi:  # smaller sprites can vanish under rotation + downscale
            raise ValueError(f"radius range {self.radius} too small for size {self.image_size}")
        # worst-case box must fit the 60% area budget
        half = self.loose(r_hi + 1) + 1
        if (2 * half) ** 2 > 0.6 * self.image_size ** 2:
            raise ValueError(f"radius {r_hi}px yields boxes above 60% of the image")

    def pixel_radius(self) -> Tuple[int, int]:
        f = self.image_size / 64
        return max(2, int(round(self.radius[0] * f))), max(2, int(round(self.radius[1] * f)))

    def scale_steps(self) -> Tuple[int, int]:
        return int(round(self.scale[0] * 20)), int(round(self.scale[1] * 20))

    def loose(self, extent: int) -> int:
        num = int(round(self.looseness * 1000))
        return (extent * num + 999) // 1000


@dataclass
class CompositeSample:
    obj: np.ndarray                      # [H,W,3] uint8, object on white
    bg: np.ndarray                       # [H,W,3] uint8
    tgt: np.ndarray                      # [H,W,3] uint8
    box: Tuple[int, int, int, int]       # x0, y0, x1, y1 (exclusive upper bounds)
    rotation: int                        # degrees
    scale: float
    seed: int = 0
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def image_size(self) -> int:
        return self.obj.shape[0]

    @property
    def i_obj(self) -> torch.Tensor:
        return to_tensor(self.obj)

    @property
    def i_bg(self) -> torch.Tensor:
        return to_tensor(self.bg)

    @property
    def i_tgt(self) -> torch.Tensor:
        return to_tensor(self.tgt)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.obj.shape[:2], dtype=np.uint8)
        x0, y0, x1, y1 = self.box
        m[y0:y1, x0:x1] = 255
        return m

    def object_alpha(self) -> np.ndarray:
        return (self.obj != WHITE).any(axis=2)


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """[H,W,3] uint8 -> [3,H,W] in [-1,1]."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype) / 127.5 - 1.0


def to_uint8(t: torch.Tensor) -> np.ndarray:
    """[3,H,W] in [-1,1] -> [H,W,3] uint8."""
    arr = ((t.detach().double().clamp(-1, 1) + 1.0) * 127.5).numpy()
    return np.floor(arr + 0.5).astype(np.uint8).transpose(1, 2, 0)


# --- rasterization -----------------------------------------------------------

def _half_grid(n: int, offset2: int) -> Tuple[np.ndarray, np.ndarray]:
    """Doubled pixel-center coordinates 2*i+1-offset2 as int64 (x along columns)."""
    c = 2 * np.arange(n, dtype=np.int64) + 1 - offset2
    return np.meshgrid(c, c)


def _convex_hull(points: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
    pts = sorted(set(points))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: List[Tuple[int, int]] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: List[Tuple[int, int]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _polygon_alpha(u2: np.ndarray, v2: np.ndarray, hull: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Inside test for a counter-clockwise hull in 1/8-px units; u2/v2 are half-px."""
    U, V = u2 * 4, v2 * 4
    inside = np.ones(u2.shape, dtype=bool)
    for i in range(len(hull)):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % len(hull)]
        inside &= (bx - ax) * (V - ay) - (by - ay) * (U - ax) >= 0
    return inside


def _ellipse_alpha(u2, v2, a2: int, b2: int, psi: int) -> np.ndarray:
    c, s = _fixed_cos_sin(psi)
    X = c * u2 + s * v2
    Y = -s * u2 + c * v2
    return X * X * (b2 * b2) + Y * Y * (a2 * a2) <= (a2 * b2 * FP) ** 2


def _render_object(rng: SplitMix64, cfg: DataConfig) -> Tuple[np.ndarray, Dict[str, str]]:
    S = cfg.image_size
    r_lo, r_hi = cfg.pixel_radius()
    R = rng.randint(r_lo, r_hi)
    u2, v2 = _half_grid(S, S)
    meta: Dict[str, str] = {"radius": str(R)}
    if rng.randint(0, 1) == 0:
        n = rng.randint(5, 8)
        pts = []
        for i in range(n):
            ang = (360 * i) // n + rng.randint(0, 360 // n - 1)
            r8 = rng.randint(R * 8 * 3 // 4, R * 8)  # 1/8 px
            c, s = _fixed_cos_sin(ang)
            pts.append(((r8 * c) // FP, (r8 * s) // FP))
        hull = _convex_hull(pts)
        alpha = _polygon_alpha(u2, v2, hull)
        meta["shape"] = f"polygon{len(hull)}"
    else:
        a2 = rng.randint(R * 2 * 6 // 10, R * 2)  # half-px
        b2 = rng.randint(R * 2 * 4 // 10, R * 2)
        psi = rng.randint(0, 179)
        alpha = _ellipse_alpha(u2, v2, a2, b2, psi)
        meta["shape"] = "ellipse"
    i1 = rng.randint(0, len(PALETTE) - 1)
    i2 = (i1 + rng.randint(1, len(PALETTE) - 1)) % len(PALETTE)
    if rng.randint(0, 1) == 0:
        wpx = rng.randint(*cfg.stripe_width)
        c, s = _fixed_cos_sin(rng.randint(0, 179))
        phase = rng.randint(0, wpx * 2 * FP - 1)
        band = ((c * u2 + s * v2 + phase) // (wpx * 2 * FP)) & 1
        meta["texture"] = f"stripes{wpx}"
    else:
        cell = rng.randint(*cfg.checker_cell)
        ox, oy = rng.randint(0, 2 * cell - 1), rng.randint(0, 2 * cell - 1)
        band = ((u2 + ox) // (2 * cell) + (v2 + oy) // (2 * cell)) & 1
        meta["texture"] = f"checker{cell}"
    colors = np.array([PALETTE[i1], PALETTE[i2]], dtype=np.uint8)
    img = np.full((S, S, 3), WHITE, dtype=np.uint8)
    img[alpha] = colors[band[alpha]]
    return img, meta


def _transform_sprite(obj: np.ndarray, rotation: int, scale_num: int, half: int):
    """Resample the object canvas into a (2*half)^2 window centred on a pixel corner.

    Nearest-neighbour inverse mapping: window pixel p (relative to the centre)
    reads canvas pixel R(-rotation) p / scale + S/2.
    """
    S = obj.shape[0]
    px2, py2 = _half_grid(2 * half, 2 * half)
    c, s = _fixed_cos_sin(rotation)
    qx = c * px2 + s * py2
    qy = -s * px2 + c * py2
    den = 2 * FP * scale_num
    ix = (qx * 20 + S * FP * scale_num) // den
    iy = (qy * 20 + S * FP * scale_num) // den
    valid = (ix >= 0) & (ix < S) & (iy >= 0) & (iy < S)
    ixc, iyc = np.clip(ix, 0, S - 1), np.clip(iy, 0, S - 1)
    colors = obj[iyc, ixc]
    alpha = valid & (colors != WHITE).any(axis=2)
    return colors, alpha


def _bilinear_up(grid: np.ndarray, size: int) -> np.ndarray:
    g = grid.shape[0]
    pos = (np.arange(size) + 0.5) * ((g - 1) / size)
    i0 = np.minimum(np.floor(pos).astype(int), g - 2)
    w = pos - i0
    rows = grid[i0] * (1 - w)[:, None] + grid[i0 + 1] * w[:, None]
    return rows[:, i0] * (1 - w)[None, :] + rows[:, i0 + 1] * w[None, :]


def _render_background(rng: SplitMix64, cfg: DataConfig, rotation: int) -> np.ndarray:
    S = cfg.image_size
    sky = np.array([rng.randint(60, 220) for _ in range(3)], dtype=np.float64)
    ground = np.array([rng.randint(30, 190) for _ in range(3)], dtype=np.float64)
    hx2 = 2 * rng.randint(S // 4, 3 * S // 4)
    hy2 = 2 * rng.randint(S // 4, 3 * S // 4)
    x2, y2 = _half_grid(S, 0)
    c, s = _fixed_cos_sin(rotation)
    d = (-s * (x2 - hx2) + c * (y2 - hy2)).astype(np.float64) / (2.0 * FP * S)  # ~[-1,1], >0 below horizon
    below = d > 0
    img = np.where(below[..., None], ground - 50.0 * d[..., None], sky + 40.0 * d[..., None])
    for ch in range(3):
        grid = np.array([[rng.uniform() * 2.0 - 1.0 for _ in range(5)] for _ in range(5)])
        img[..., ch] += cfg.noise_amp * _bilinear_up(grid, S)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def _mix_seed(seed: int) -> int:
    return SplitMix64(seed ^ 0x5DEECE66D).next_u64()


def generate_sample(seed: int, cfg: Optional[DataConfig] = None) -> CompositeSample:
    cfg = cfg or DataConfig()
    S = cfg.image_size
    rng = SplitMix64(_mix_seed(seed))
    obj, meta = _render_object(rng, cfg)
    rotation = rng.randint(*cfg.rotation)
    scale_num = rng.randint(*cfg.scale_steps())
    bg = _render_background(rng, cfg, rotation)

    # transformed silhouette lies within radius R*scale of the centre
    win = cfg.pixel_radius()[1] + 2
    colors, alpha = _transform_sprite(obj, rotation, scale_num, win)
    ys, xs = np.nonzero(alpha)
    if len(xs) == 0:
        raise ValueError(f"seed {seed}: object vanished after transform")
    ext_x = int(max(win - xs.min(), xs.max() + 1 - win))
    ext_y = int(max(win - ys.min(), ys.max() + 1 - win))
    hw, hh = cfg.loose(ext_x) + 1, cfg.loose(ext_y) + 1
    if 4 * hw * hh > 0.6 * S * S or 2 * hw > S or 2 * hh > S:
        raise ValueError(f"seed {seed}: box {2 * hw}x{2 * hh} violates the area budget")
    cx = rng.randint(hw, S - hw)
    cy = rng.randint(hh, S - hh)
    box = (cx - hw, cy - hh, cx + hw, cy + hh)

    tgt = bg.copy()
    # window may overhang the image; crop it to the valid range
    y_lo, x_lo = max(0, win - cy), max(0, win - cx)
    y_hi = 2 * win - max(0, cy + win - S)
    x_hi = 2 * win - max(0, cx + win - S)
    region = tgt[cy - win + y_lo:cy - win + y_hi, cx - win + x_lo:cx - win + x_hi]
    a = alpha[y_lo:y_hi, x_lo:x_hi]
    region[a] = colors[y_lo:y_hi, x_lo:x_hi][a]
    meta.update({"seed": str(seed), "scale_num": str(scale_num)})
    return CompositeSample(obj, bg, tgt, box, rotation, scale_num / 20, seed, meta)


def paste_object(obj: np.ndarray, bg: np.ndarray, box: Tuple[int, int, int, int]) -> np.ndarray:
    """Untransformed paste of the object canvas centred in ``box``, clipped to the box."""
    S = obj.shape[0]
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
    out = bg.copy()
    for y in range(y0, y1):
        sy = y - cy + S // 2
        if not 0 <= sy < S:
            continue
        for x in range(x0, x1):
            sx = x - cx + S // 2
            if 0 <= sx < S and (obj[sy, sx] != WHITE).any():
                out[y, x] = obj[sy, sx]
    return out


# --- on-disk format ----------------------------------------------------------

SAMPLE_FILES = ("obj.ppm", "bg.ppm", "mask.pgm", "tgt.ppm", "meta.txt")


def _format_meta(s: CompositeSample) -> str:
    lines = [f"seed={s.seed}", f"image_size={s.image_size}", "box=%d,%d,%d,%d" % s.box,
             f"rotation={s.rotation}", f"scale={s.scale!r}"]
    lines += [f"{k}={v}" for k, v in sorted(s.meta.items()) if k not in ("seed",)]
    return "\n".join(lines) + "\n"


def parse_kv(text: str, source: str = "<text>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            if "=" not in stripped:
                raise ValueError(f"{source}: malformed line at byte offset {offset}: {stripped!r}")
            k, v = stripped.split("=", 1)
            out[k.strip()] = v.strip()
        offset += len(line.encode())
    return out


def write_sample(path: PathLike, s: CompositeSample) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    write_pnm(d / "obj.ppm", s.obj)
    write_pnm(d / "bg.ppm", s.bg)
    write_pnm(d / "mask.pgm", s.mask())
    write_pnm(d / "tgt.ppm", s.tgt)
    (d / "meta.txt").write_text(_format_meta(s))


def read_sample(path: PathLike) -> CompositeSample:
    d = Path(path)
    meta = parse_kv((d / "meta.txt").read_text(), str(d / "meta.txt"))
    try:
        box = tuple(int(v) for v in meta.pop("box").split(","))
        rotation = int(meta.pop("rotation"))
        scale = float(meta.pop("scale"))
        seed = int(meta.pop("seed"))
        size = int(meta.pop("image_size"))
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{d / 'meta.txt'}: missing or malformed field ({exc})") from None
    if len(box) != 4:
        raise ValueError(f"{d / 'meta.txt'}: box needs 4 integers")
    images = {}
    for name in ("obj.ppm", "bg.ppm", "tgt.ppm", "mask.pgm"):
        try:
            images[name] = read_pnm(d / name)
        except PnmError as exc:
            raise PnmError(f"{d / name}: {exc.args[0].rsplit(' (byte offset', 1)[0]}", exc.offset) from None
    for name in ("obj.ppm", "bg.ppm", "tgt.ppm"):
        if images[name].shape != (size, size, 3):
            raise ValueError(f"{d / name}: shape {images[name].shape} does not match image_size {size}")
    s = CompositeSample(images["obj.ppm"], images["bg.ppm"], images["tgt.ppm"], box, rotation, scale, seed, meta)
    if not np.array_equal(images["mask.pgm"], s.mask()):
        raise ValueError(f"{d / 'mask.pgm'}: mask does not match the box in meta.txt")
    return s


# --- datasets -------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    count: int
    image_size: int
    seed: int
    records: List[Tuple[int, int, str, str]]  # (index, seed, split, relative path)
    content_hash: str = ""
    root: Optional[Path] = None

    def split(self, name: str) -> List[Tuple[int, int, str, str]]:
        return [r for r in self.records if r[2] == name]

    def split_counts(self) -> Dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}

    def to_text(self) -> str:
        lines = ["format=dgad-manifest-1", f"count={self.count}", f"image_size={self.image_size}",
                 f"seed={self.seed}"]
        lines += [f"n_{k}={v}" for k, v in self.split_counts().items()]
        lines.append(f"content_hash={self.content_hash}")
        lines += [f"sample={i:06d} seed={sd} split={sp} path={p}" for i, sd, sp, p in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, root: Optional[Path] = None) -> "DatasetManifest":
        header: Dict[str, str] = {}
        records = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("sample="):
                fields = dict(part.split("=", 1) for part in line.split())
                records.append((int(fields["sample"]), int(fields["seed"]), fields["split"], fields["path"]))
            elif "=" in line:
                k, v = line.split("=", 1)
                header[k] = v
            else:
                raise ValueError(f"manifest line {lineno}: cannot parse {line!r}")
        if header.get("format") != "dgad-manifest-1":
            raise ValueError(f"unsupported manifest format {header.get('format')!r}")
        m = cls(int(header["count"]), int(header["image_size"]), int(header["seed"]), records,
                header.get("content_hash", ""), root)
        if len(records) != m.count:
            raise ValueError(f"manifest lists {len(records)} samples but count={m.count}")
        return m


def split_sizes(n: int) -> Dict[str, int]:
    n_hold = max(1, n // 20) if n >= 3 else 0
    return {"train": n - 2 * n_hold, "val": n_hold, "test": n_hold}


def split_of(index: int, n: int) -> str:
    sizes = split_sizes(n)
    if index < sizes["train"]:
        return "train"
    return "val" if index < sizes["train"] + sizes["val"] else "test"


def _hash_files(root: Path, records) -> str:
    h = hashlib.sha256()
    for _, _, _, rel in records:
        for name in SAMPLE_FILES:
            h.update((root / rel / name).read_bytes())
    return h.hexdigest()


def build_dataset(n: int, seed: int, out_dir: PathLike, cfg: Optional[DataConfig] = None,
                  force: bool = False, workers: int = 1) -> DatasetManifest:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cfg = cfg or DataConfig()
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} is not empty; pass force to overwrite")
        for child in root.iterdir():
            if child.is_dir():
                shutil.rmtree(child)
            else:
                child.unlink()
    root.mkdir(parents=True, exist_ok=True)
    records = []
    jobs = []
    for i in range(n):
        sp = split_of(i, n)
        rel = f"{sp}/{i:06d}"
        records.append((i, seed + i, sp, rel))
        jobs.append((seed + i, root / rel))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_generate_and_write, jobs, [cfg] * len(jobs), chunksize=16))
    else:
        for job in jobs:
            _generate_and_write(job, cfg)
    manifest = DatasetManifest(n, cfg.image_size, seed, records, _hash_files(root, records), root)
    (root / "manifest.txt").write_text(manifest.to_text())
    return manifest


def _generate_and_write(job, cfg: DataConfig) -> None:
    seed, path = job
    write_sample(path, generate_sample(seed, cfg))


def load_manifest(root: PathLike, verify: bool = False) -> DatasetManifest:
    root = Path(root)
    m = DatasetManifest.from_text((root / "manifest.txt").read_text(), root)
    if verify:
        for _, _, _, rel in m.records:
            for name in SAMPLE_FILES:
                if not (root / rel / name).is_file():
                    raise FileNotFoundError(f"manifest references missing file {root / rel / name}")
        actual = _hash_files(root, m.records)
        if m.content_hash and actual != m.content_hash:
            raise ValueError(f"dataset content hash mismatch: manifest {m.content_hash[:12]}, files {actual[:12]}")
    return m


def load_split(root: PathLike, split: str, limit: Optional[int] = None) -> List[CompositeSample]:
    m = load_manifest(root)
    recs = m.split(split)
    if limit is not None:
        recs = recs[:limit]
    return [read_sample(Path(root) / rel) for _, _, _, rel in recs]
