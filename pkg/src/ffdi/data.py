"""Synthetic multi-domain shape benchmark plus lossless image file I/O.

Five shape classes (circle, square, triangle, star, cross) are rendered with
signed-distance coverage over four domain styles.  Styles are designed so that
what varies between domains (backgrounds, fills, color casts) is predominantly
low-frequency, while the class signal (the shape outline) is shared; the
"sketch" domain draws only dark outlines on white, the hard distribution shift.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

SHAPE_NAMES = ("circle", "square", "triangle", "star", "cross")
DOMAIN_ORDER = ("flat", "gradient", "texture", "sketch")
IMAGE_SIZE = 32


class DataError(Exception):
    """Malformed or unreadable data file."""


# ---------------------------------------------------------------------------
# Signed-distance shapes
# ---------------------------------------------------------------------------


def _rotate(verts: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return verts @ np.array([[c, s], [-s, c]])


def _shape_vertices(shape: str, scale: float, rotation: float) -> np.ndarray:
    if shape == "square":
        ang = np.pi / 4 + np.arange(4) * (np.pi / 2)
        verts = scale * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    elif shape == "triangle":
        ang = np.pi / 2 + np.arange(3) * (2 * np.pi / 3)
        verts = scale * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    elif shape == "star":
        ang = np.pi / 2 + np.arange(10) * (np.pi / 5)
        rad = np.where(np.arange(10) % 2 == 0, scale, 0.45 * scale)
        verts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    elif shape == "cross":
        a, w = scale, 0.34 * scale
        verts = np.array(
            [(w, w), (w, a), (-w, a), (-w, w), (-a, w), (-a, -w),
             (-w, -w), (-w, -a), (w, -a), (w, -w), (a, -w), (a, w)]
        )
    else:
        raise ValueError(f"unknown polygon shape {shape!r}")
    return _rotate(verts, rotation)


def _polygon_sdf(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Exact signed distance to a closed polygon; negative inside."""
    vx, vy = verts[:, 0], verts[:, 1]
    d = np.full(px.shape, np.inf)
    sign = np.ones(px.shape)
    nv = len(verts)
    j = nv - 1
    for i in range(nv):
        ex, ey = vx[j] - vx[i], vy[j] - vy[i]
        wx, wy = px - vx[i], py - vy[i]
        t = np.clip((wx * ex + wy * ey) / (ex * ex + ey * ey), 0.0, 1.0)
        bx, by = wx - ex * t, wy - ey * t
        d = np.minimum(d, bx * bx + by * by)
        c1 = py >= vy[i]
        c2 = py < vy[j]
        c3 = ex * wy > ey * wx
        flip = (c1 & c2 & c3) | (~c1 & ~c2 & ~c3)
        sign = np.where(flip, -sign, sign)
    return sign * np.sqrt(d)


def shape_sdf(shape: str, pose, grid_hw: tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE)) -> np.ndarray:
    """Signed distance of every pixel center to the posed shape boundary."""
    cx, cy, scale, rotation = pose
    h, w = grid_hw
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = px - cx, py - cy
    if shape == "circle":
        return np.hypot(px, py) - scale
    return _polygon_sdf(px, py, _shape_vertices(shape, scale, rotation))


def _coverage(sdf: np.ndarray, aa: float = 1.0) -> np.ndarray:
    return np.clip(0.5 - sdf / aa, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Domain styles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainSpec:
    """Rendering style of one domain; varies low-frequency content by design."""

    name: str
    background: str = "flat"  # flat | vgradient | rgradient | texture
    bg_color: tuple = (0.5, 0.5, 0.5)
    bg_color2: tuple = (0.5, 0.5, 0.5)
    texture_amp: float = 0.0
    texture_cells: int = 5
    fill: str = "solid"  # solid | hatched | none
    fill_color: tuple = (0.7, 0.7, 0.7)
    hatch_period: float = 5.3
    blur_sigma: float = 0.0
    color_shift: tuple = (0.0, 0.0, 0.0)
    edge_thickness: float = 1.2
    edge_color: tuple = (0.10, 0.09, 0.12)


PRESET_DOMAINS = {
    "flat": DomainSpec(
        name="flat", background="flat", bg_color=(0.30, 0.44, 0.62),
        fill="solid", fill_color=(0.82, 0.58, 0.34),
    ),
    "gradient": DomainSpec(
        name="gradient", background="vgradient", bg_color=(0.70, 0.64, 0.40),
        bg_color2=(0.42, 0.26, 0.34), fill="solid", fill_color=(0.40, 0.66, 0.46),
        color_shift=(0.03, 0.0, -0.03),
    ),
    "texture": DomainSpec(
        name="texture", background="texture", bg_color=(0.40, 0.56, 0.38),
        texture_amp=0.14, fill="hatched", fill_color=(0.58, 0.42, 0.72),
        blur_sigma=0.5,
    ),
    "sketch": DomainSpec(
        name="sketch", background="flat", bg_color=(1.0, 1.0, 1.0),
        fill="none", edge_thickness=1.5, edge_color=(0.10, 0.09, 0.12),
    ),
}


def _bilinear_upsample(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    """(C, ch, cw) -> (C, h, w) separable bilinear resample."""
    _, ch, cw = coarse.shape
    ys = np.linspace(0, ch - 1, h)
    xs = np.linspace(0, cw - 1, w)
    y0 = np.minimum(ys.astype(int), ch - 2)
    x0 = np.minimum(xs.astype(int), cw - 2)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    c00 = coarse[:, y0][:, :, x0]
    c01 = coarse[:, y0][:, :, x0 + 1]
    c10 = coarse[:, y0 + 1][:, :, x0]
    c11 = coarse[:, y0 + 1][:, :, x0 + 1]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    rad = max(1, int(np.ceil(3 * sigma)))
    t = np.arange(-rad, rad + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    for axis in (1, 2):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (rad, rad)
        padded = np.pad(img, pad, mode="edge")
        out = np.zeros_like(img)
        sl = [slice(None)] * img.ndim
        for i, kv in enumerate(k):
            sl[axis] = slice(i, i + img.shape[axis])
            out += kv * padded[tuple(sl)]
        img = out
    return img


def _render_background(spec: DomainSpec, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    base = np.asarray(spec.bg_color, dtype=np.float64) + rng.uniform(-0.04, 0.04, 3)
    if spec.background == "flat":
        bg = np.broadcast_to(base[:, None, None], (3, h, w)).copy()
    elif spec.background == "vgradient":
        other = np.asarray(spec.bg_color2) + rng.uniform(-0.04, 0.04, 3)
        ramp = np.linspace(0.0, 1.0, h)[None, :, None]
        bg = base[:, None, None] * (1 - ramp) + other[:, None, None] * ramp
    elif spec.background == "rgradient":
        other = np.asarray(spec.bg_color2) + rng.uniform(-0.04, 0.04, 3)
        py, px = np.mgrid[0:h, 0:w]
        rad = np.hypot(py - (h - 1) / 2, px - (w - 1) / 2)
        ramp = (rad / rad.max())[None]
        bg = base[:, None, None] * (1 - ramp) + other[:, None, None] * ramp
    elif spec.background == "texture":
        coarse = rng.uniform(-1.0, 1.0, size=(3, spec.texture_cells, spec.texture_cells))
        bg = base[:, None, None] + spec.texture_amp * _bilinear_upsample(coarse, h, w)
    else:
        raise ValueError(f"unknown background mode {spec.background!r}")
    return bg


def render_sample(shape, domain: DomainSpec, pose, rng: np.random.Generator) -> np.ndarray:
    """Render one 3 x 32 x 32 sample of ``shape`` in ``domain`` style.

    ``shape`` is a class index or name; ``pose`` is (cx, cy, scale, rotation)
    in pixel coordinates.  The pose must keep the whole shape (including its
    outline) on the canvas.  Deterministic given (shape, domain, pose, rng
    state).
    """
    if isinstance(shape, (int, np.integer)):
        shape = SHAPE_NAMES[int(shape)]
    if shape not in SHAPE_NAMES:
        raise ValueError(f"unknown shape {shape!r}")
    h = w = IMAGE_SIZE
    cx, cy, scale, _ = pose
    margin = scale + domain.edge_thickness / 2 + 1.0
    if min(cx + 0.5, cy + 0.5, (w - 0.5) - cx, (h - 0.5) - cy) < margin:
        raise ValueError(f"pose {pose} puts the shape (reach {margin:.2f}px) outside the 32x32 canvas")

    img = _render_background(domain, h, w, rng)
    sdf = shape_sdf(shape, pose)

    if domain.fill != "none":
        fill = np.asarray(domain.fill_color, dtype=np.float64) + rng.uniform(-0.04, 0.04, 3)
        fill_plane = np.broadcast_to(fill[:, None, None], (3, h, w)).copy()
        if domain.fill == "hatched":
            phase = rng.uniform(0, 2 * np.pi)
            angle = rng.uniform(0, np.pi)
            py, px = np.mgrid[0:h, 0:w]
            stripe = np.sin(2 * np.pi * (px * np.cos(angle) + py * np.sin(angle)) / domain.hatch_period + phase)
            fill_plane = fill_plane * (0.78 + 0.22 * stripe)[None]
        cov = _coverage(sdf)[None]
        img = img * (1 - cov) + fill_plane * cov

    edge = np.asarray(domain.edge_color, dtype=np.float64) + rng.uniform(-0.02, 0.02, 3)
    edge_cov = _coverage(np.abs(sdf) - domain.edge_thickness / 2)[None]
    img = img * (1 - edge_cov) + edge[:, None, None] * edge_cov

    img = _gaussian_blur(img, domain.blur_sigma)
    img = img + np.asarray(domain.color_shift)[:, None, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class DomainData:
    spec: DomainSpec | None
    images: np.ndarray  # (n, 3, 32, 32) float32
    labels: np.ndarray  # (n,) int64
    train_idx: np.ndarray
    test_idx: np.ndarray


@dataclass
class DomainDataset:
    domains: dict[str, DomainData]
    num_classes: int
    seed: int = 0

    @property
    def domain_names(self) -> tuple[str, ...]:
        return tuple(self.domains)


def sample_pose(rng: np.random.Generator) -> tuple[float, float, float, float]:
    return (
        float(rng.uniform(13.0, 18.5)),
        float(rng.uniform(13.0, 18.5)),
        float(rng.uniform(6.5, 10.0)),
        float(rng.uniform(0.0, 2 * np.pi)),
    )


def build_dataset(num_domains: int = 4, classes: int = 5, per_class_per_domain: int = 120,
                  seed: int = 0) -> DomainDataset:
    """Deterministic benchmark: preset domains, class-balanced, 4:1 splits."""
    if not 2 <= num_domains <= len(DOMAIN_ORDER):
        raise ValueError(f"num_domains must be in [2, {len(DOMAIN_ORDER)}]")
    if not 2 <= classes <= len(SHAPE_NAMES):
        raise ValueError(f"classes must be in [2, {len(SHAPE_NAMES)}]")
    domains: dict[str, DomainData] = {}
    n_train = round(per_class_per_domain * 4 / 5)
    for di, dname in enumerate(DOMAIN_ORDER[:num_domains]):
        spec = PRESET_DOMAINS[dname]
        images, labels, train_idx, test_idx = [], [], [], []
        for c in range(classes):
            for i in range(per_class_per_domain):
                rng = np.random.default_rng([seed, di, c, i])
                images.append(render_sample(c, spec, sample_pose(rng), rng))
                labels.append(c)
                (train_idx if i < n_train else test_idx).append(len(images) - 1)
        domains[dname] = DomainData(
            spec=spec,
            images=np.stack(images),
            labels=np.asarray(labels, dtype=np.int64),
            train_idx=np.asarray(train_idx, dtype=np.int64),
            test_idx=np.asarray(test_idx, dtype=np.int64),
        )
    return DomainDataset(domains=domains, num_classes=classes, seed=seed)


def augment_standard(image: np.ndarray, rng: np.random.Generator,
                     flip: bool | None = None, factors: np.ndarray | None = None) -> np.ndarray:
    """Horizontal flip (p = 0.5) plus per-channel brightness factors in [0.9, 1.1].

    ``flip`` and ``factors`` override the random draws (for tests).
    """
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if factors is None:
        factors = rng.uniform(0.9, 1.1, size=3)
    out = image[:, :, ::-1] if flip else image
    out = out * np.asarray(factors, dtype=image.dtype)[:, None, None]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Image file I/O
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """Write a binary P6 PPM; values are clipped to [0,1] and scaled by 255."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm expects a 3xHxW image, got {image.shape}")
    _, h, w = image.shape
    u8 = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.transpose(1, 2, 0).tobytes())


class _PpmScanner:
    """Header tokenizer that tracks byte offsets for error reporting."""

    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def fail(self, why: str):
        raise DataError(f"{self.path}: {why} at byte {self.pos}")

    def token(self) -> bytes:
        buf, n = self.buf, len(self.buf)
        while self.pos < n:
            ch = buf[self.pos : self.pos + 1]
            if ch == b"#":
                while self.pos < n and buf[self.pos : self.pos + 1] not in (b"\n", b"\r"):
                    self.pos += 1
            elif ch.isspace():
                self.pos += 1
            else:
                break
        if self.pos >= n:
            self.fail("unexpected end of header")
        start = self.pos
        while self.pos < n and not buf[self.pos : self.pos + 1].isspace():
            self.pos += 1
        return buf[start : self.pos]

    def int_token(self, what: str) -> int:
        tok = self.token()
        try:
            return int(tok)
        except ValueError:
            self.pos -= len(tok)
            self.fail(f"expected integer {what}, got {tok!r}")


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM into a 3xHxW float32 image in [0, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    sc = _PpmScanner(buf, path)
    if sc.token() != b"P6":
        sc.pos = 0
        sc.fail("not a binary PPM (missing P6 magic)")
    w = sc.int_token("width")
    h = sc.int_token("height")
    maxval = sc.int_token("maxval")
    if maxval != 255:
        sc.fail(f"unsupported maxval {maxval} (only 255)")
    if w <= 0 or h <= 0:
        sc.fail(f"invalid dimensions {w}x{h}")
    sc.pos += 1  # single whitespace after maxval
    need = w * h * 3
    raw = buf[sc.pos : sc.pos + need]
    if len(raw) < need:
        raise DataError(f"{path}: truncated pixel data at byte {sc.pos + len(raw)} (need {need} bytes)")
    px = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return (px.transpose(2, 0, 1).astype(np.float32)) / 255.0


def write_png(path, image: np.ndarray) -> None:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise DataError("PNG support requires pillow (pip install ffdi[png])") from exc
    u8 = np.round(np.clip(np.asarray(image), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise DataError("PNG support requires pillow (pip install ffdi[png])") from exc
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise DataError(f"{path}: {exc}") from exc
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def write_image(path, image: np.ndarray) -> None:
    if str(path).lower().endswith(".png"):
        write_png(path, image)
    else:
        write_ppm(path, image)


def read_image(path) -> np.ndarray:
    if str(path).lower().endswith(".png"):
        return read_png(path)
    return read_ppm(path)


# ---------------------------------------------------------------------------
# Dataset directory layout
# ---------------------------------------------------------------------------


def save_dataset(dataset: DomainDataset, root) -> None:
    """Write ``<root>/<domain>/<class>/<index>.ppm`` plus ``manifest.csv``."""
    os.makedirs(root, exist_ok=True)
    rows = []
    for dname, dom in dataset.domains.items():
        train = set(dom.train_idx.tolist())
        for idx, (img, label) in enumerate(zip(dom.images, dom.labels)):
            cls = SHAPE_NAMES[int(label)]
            rel = os.path.join(dname, cls, f"{idx:05d}.ppm")
            full = os.path.join(root, rel)
            os.makedirs(os.path.dirname(full), exist_ok=True)
            write_ppm(full, img)
            rows.append((rel, dname, cls, "train" if idx in train else "test", dataset.seed))
    tmp = os.path.join(root, "manifest.csv.tmp")
    with open(tmp, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["path", "domain", "class", "split", "seed"])
        wr.writerows(rows)
    os.replace(tmp, os.path.join(root, "manifest.csv"))


def load_dataset(root) -> DomainDataset:
    """Rebuild a DomainDataset from a ``save_dataset`` directory."""
    manifest = os.path.join(root, "manifest.csv")
    if not os.path.exists(manifest):
        raise DataError(f"{manifest}: manifest not found")
    per_domain: dict[str, list] = {}
    seed = 0
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f)
        required = {"path", "domain", "class", "split", "seed"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{manifest}: header must contain {sorted(required)}")
        for row in reader:
            if row["class"] not in SHAPE_NAMES:
                raise DataError(f"{manifest}: unknown class {row['class']!r}")
            per_domain.setdefault(row["domain"], []).append(row)
            seed = int(row["seed"])
    domains = {}
    classes = 0
    for dname, rows in per_domain.items():
        images, labels, train_idx, test_idx = [], [], [], []
        for row in rows:
            images.append(read_image(os.path.join(root, row["path"])))
            labels.append(SHAPE_NAMES.index(row["class"]))
            (train_idx if row["split"] == "train" else test_idx).append(len(images) - 1)
        domains[dname] = DomainData(
            spec=PRESET_DOMAINS.get(dname),
            images=np.stack(images),
            labels=np.asarray(labels, dtype=np.int64),
            train_idx=np.asarray(train_idx, dtype=np.int64),
            test_idx=np.asarray(test_idx, dtype=np.int64),
        )
        classes = max(classes, int(domains[dname].labels.max()) + 1)
    return DomainDataset(domains=domains, num_classes=classes, seed=seed)
