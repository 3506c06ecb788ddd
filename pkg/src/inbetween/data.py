"""Synthetic triplets, triplet-directory manifests, few-shot subsets and PPM I/O."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
FRAMES = ("prev", "mid", "next")
SUPERSAMPLE = 4


class PPMError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# --- PPM (binary P6, maxval 255) ---------------------------------------------


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PPMError("malformed PPM header: unexpected end of header")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise PPMError(f"malformed PPM header: expected magic b'P6', got {buf[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise PPMError(f"malformed PPM header: non-numeric field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PPMError(f"malformed PPM header: bad size {width}x{height}")
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval} (only 255 is supported)")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PPMError("malformed PPM header: missing whitespace before payload")
    pos += 1
    expected = width * height * 3
    payload = buf[pos:]
    if len(payload) != expected:
        raise PPMError(f"payload length mismatch: expected {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """Read a P6 file into an HxWx3 float array in [0, 1] (value / 255)."""
    return decode_ppm(Path(path).read_bytes()).astype(np.float64) / 255.0


def write_image(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise PPMError(f"expected an HxWx3 image, got shape {img.shape}")
    pixels = img if img.dtype == np.uint8 else quantize(img)
    Path(path).write_bytes(encode_ppm(pixels))


# --- synthetic scenes -----------------------------------------------------------


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 64
    n_triplets: int = 64
    min_shapes: int = 1
    max_shapes: int = 4
    shape_kinds: tuple[str, ...] = ("rectangle", "disc")
    velocity_range: tuple[float, float] = (1.0, 4.0)
    pan_mode: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_triplets < 1:
            raise ValueError("n must be ≥ 1")
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if not 1 <= self.min_shapes <= self.max_shapes <= 4:
            raise ValueError(f"shape count range must lie in [1, 4], got [{self.min_shapes}, {self.max_shapes}]")
        lo, hi = self.velocity_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad velocity range {self.velocity_range}")
        bad = set(self.shape_kinds) - {"rectangle", "disc"}
        if bad or not self.shape_kinds:
            raise ValueError(f"unknown shape kinds {sorted(bad)}")
        object.__setattr__(self, "shape_kinds", tuple(self.shape_kinds))
        object.__setattr__(self, "velocity_range", tuple(float(v) for v in self.velocity_range))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape_kinds"] = list(self.shape_kinds)
        d["velocity_range"] = list(self.velocity_range)
        return d


@dataclass
class Shape:
    kind: str
    center: np.ndarray  # (x, y) at t = 0, pixels
    velocity: np.ndarray  # px per frame
    half_size: np.ndarray  # half extents (rectangle) or radius in both slots (disc)
    color: np.ndarray

    def position(self, t: float) -> np.ndarray:
        return self.center + self.velocity * t


@dataclass
class Scene:
    """Time-parametric scene: frames at any t are rendered from positions at t."""

    size: int
    background: list  # (amplitude rgb, kx, ky, phase) sinusoid terms
    base_color: np.ndarray
    shapes: list[Shape] = field(default_factory=list)
    pan: np.ndarray = field(default_factory=lambda: np.zeros(2))


def _sample_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    s = SUPERSAMPLE
    coords = (np.arange(size * s) + 0.5) / s
    return np.meshgrid(coords, coords)  # x varies along columns


def render(scene: Scene, t: float) -> np.ndarray:
    xs, ys = _sample_grid(scene.size)
    ox, oy = scene.pan * t
    img = np.broadcast_to(scene.base_color, xs.shape + (3,)).copy()
    for amp, kx, ky, phase in scene.background:
        img += np.sin(kx * (xs - ox) + ky * (ys - oy) + phase)[..., None] * amp
    for sh in scene.shapes:
        cx, cy = sh.position(t)
        if sh.kind == "disc":
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= sh.half_size[0] ** 2
        else:
            mask = (np.abs(xs - cx) <= sh.half_size[0]) & (np.abs(ys - cy) <= sh.half_size[1])
        img[mask] = sh.color
    s = SUPERSAMPLE
    img = img.reshape(scene.size, s, scene.size, s, 3).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def random_scene(cfg: GenConfig, rng: np.random.Generator) -> Scene:
    size = cfg.image_size
    terms = []
    for _ in range(3):
        k = rng.uniform(0.5, 2.0) * 2 * math.pi / size
        theta = rng.uniform(0, 2 * math.pi)
        terms.append((rng.uniform(-0.08, 0.08, 3), k * math.cos(theta), k * math.sin(theta), rng.uniform(0, 2 * math.pi)))
    scene = Scene(size=size, background=terms, base_color=rng.uniform(0.3, 0.7, 3))
    lo, hi = cfg.velocity_range
    if cfg.pan_mode:
        speed = rng.uniform(lo, hi)
        ang = rng.uniform(0, 2 * math.pi)
        scene.pan = np.array([speed * math.cos(ang), speed * math.sin(ang)])
    for _ in range(int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))):
        kind = str(rng.choice(list(cfg.shape_kinds)))
        if kind == "disc":
            r = rng.uniform(0.08, 0.2) * size
            half = np.array([r, r])
        else:
            half = rng.uniform(0.06, 0.2, 2) * size
        speed = rng.uniform(lo, hi)
        ang = rng.uniform(0, 2 * math.pi)
        vel = np.array([speed * math.cos(ang), speed * math.sin(ang)])
        if cfg.pan_mode:
            vel = vel * 0.0 + scene.pan
        # keep the full shape inside the frame at t = -1, 0, +1
        margin = half + np.abs(vel)
        if np.any(2 * margin >= size):
            vel = vel * 0.0
            margin = half
        center = rng.uniform(margin, size - margin)
        scene.shapes.append(Shape(kind, center, vel, half, rng.uniform(0.0, 1.0, 3)))
    return scene


def render_triplet(scene: Scene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return render(scene, -1.0), render(scene, 0.0), render(scene, 1.0)


# --- manifests --------------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: str
    entries: list[dict]
    gen_config: dict | None = None
    format_version: int = FORMAT_VERSION
    source_counts: dict | None = None

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e["id"] for e in self.entries]

    def paths(self, entry: dict) -> tuple[Path, Path, Path]:
        root = Path(entry.get("root", self.root))
        return tuple(root / entry[k] for k in FRAMES)

    def load_triplet(self, entry: dict):
        return tuple(read_image(p) for p in self.paths(entry))

    def triplets(self):
        for e in self.entries:
            yield self.load_triplet(e)

    def with_entries(self, entries: list[dict], **extra) -> "DatasetManifest":
        return DatasetManifest(
            root=self.root, entries=entries, gen_config=self.gen_config, format_version=self.format_version, **extra
        )

    def to_dict(self) -> dict:
        d = {"format_version": self.format_version, "root": self.root, "entries": self.entries, "gen_config": self.gen_config}
        if self.source_counts is not None:
            d["source_counts"] = self.source_counts
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    """Load ``manifest.json`` (or a directory containing one) and check every frame exists."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if raw.get("format_version") != FORMAT_VERSION:
        raise ManifestError(f"unsupported manifest format_version {raw.get('format_version')!r}")
    root = raw.get("root") or "."
    if not os.path.isabs(root):
        root = str((path.parent / root).resolve())
    m = DatasetManifest(
        root=root, entries=list(raw["entries"]), gen_config=raw.get("gen_config"), source_counts=raw.get("source_counts")
    )
    seen = set()
    for e in m.entries:
        if e["id"] in seen:
            raise ManifestError(f"duplicate id {e['id']!r} in {path}")
        seen.add(e["id"])
        for p in m.paths(e):
            if not p.is_file():
                raise ManifestError(f"manifest {path} references missing file {p}")
    return m


def generate_synthetic(cfg: GenConfig, out_dir, source: str = "synthetic") -> DatasetManifest:
    """Render ``cfg.n_triplets`` scenes to ``out_dir/triplets/<id>/{prev,mid,next}.ppm``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(cfg.n_triplets - 1)))
    entries = []
    for i in range(cfg.n_triplets):
        rng = np.random.default_rng([cfg.seed, i])
        frames = render_triplet(random_scene(cfg, rng))
        tid = f"{i:0{width}d}"
        rel = Path("triplets") / tid
        (out / rel).mkdir(parents=True, exist_ok=True)
        entry = {"id": tid, "source": source}
        for name, img in zip(FRAMES, frames):
            write_image(img, out / rel / f"{name}.ppm")
            entry[name] = (rel / f"{name}.ppm").as_posix()
        entries.append(entry)
    manifest = DatasetManifest(root=".", entries=entries, gen_config=cfg.to_dict())
    manifest.save(out / "manifest.json")
    manifest.root = str(out.resolve())
    return manifest


def few_shot_sample(manifest: DatasetManifest, n: int, seed: int = 0) -> DatasetManifest:
    """Prefix of one seeded permutation, so equal seeds give nested subsets."""
    if n < 0 or n > len(manifest):
        raise ValueError(f"cannot sample {n} triplets from a dataset of {len(manifest)}")
    perm = np.random.default_rng(seed).permutation(len(manifest))
    return manifest.with_entries([manifest.entries[i] for i in perm[:n]])


def split_holdout(manifest: DatasetManifest, n_holdout: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Split off the last ``n_holdout`` entries (in id order) as a held-out set."""
    if not 0 <= n_holdout < len(manifest):
        raise ValueError(f"holdout {n_holdout} must be in [0, {len(manifest)})")
    entries = sorted(manifest.entries, key=lambda e: e["id"])
    cut = len(entries) - n_holdout
    return manifest.with_entries(entries[:cut]), manifest.with_entries(entries[cut:])


def _proportional_quotas(sizes: list[int], n: int) -> list[int]:
    total = sum(sizes)
    raw = [n * s / total for s in sizes]
    quotas = [min(int(math.floor(r)), s) for r, s in zip(raw, sizes)]
    # largest remainder first, ties to the earlier source, capped at each source's size
    order = sorted(range(len(sizes)), key=lambda i: (-(raw[i] - math.floor(raw[i])), i))
    while sum(quotas) < n:
        for i in order:
            if sum(quotas) == n:
                break
            if quotas[i] < sizes[i]:
                quotas[i] += 1
    return quotas


def mix_manifests(manifests: list[DatasetManifest], n: int, seed: int = 0) -> DatasetManifest:
    """Draw ``n`` triplets across sources in proportion to their sizes, then shuffle."""
    if not manifests:
        raise ValueError("no source manifests given")
    if len(manifests) == 1:
        return few_shot_sample(manifests[0], n, seed)
    sizes = [len(m) for m in manifests]
    if sum(sizes) < n:
        raise ValueError(f"insufficient data: requested {n} triplets but sources hold {sum(sizes)}")
    quotas = _proportional_quotas(sizes, n)
    entries, counts = [], {}
    for k, (m, q) in enumerate(zip(manifests, quotas)):
        sub = few_shot_sample(m, q, seed)
        for e in sub.entries:
            src = e.get("source") or f"source{k}"
            e = dict(e, source=src, root=m.root)
            if not e["id"].startswith(src + "/"):
                e["id"] = f"{src}/{e['id']}"
            entries.append(e)
        label = sub.entries[0].get("source", f"source{k}") if sub.entries else f"source{k}"
        counts[label] = counts.get(label, 0) + q
    perm = np.random.default_rng([seed, 1]).permutation(len(entries))
    return DatasetManifest(
        root=manifests[0].root, entries=[entries[i] for i in perm], gen_config=None, source_counts=counts
    )
