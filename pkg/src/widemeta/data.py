"""Few-shot image data: class pools, episodes, rotation augmentation, blur.

Images are float32 arrays ``C x H x W`` with values in [0, 1].  Glyph-style
data uses ink = 1 on background = 0.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class CapacityError(ValueError):
    """A pool cannot serve the requested episode."""


class DatasetIntegrityError(ValueError):
    pass


@dataclass
class ClassPool:
    classes: dict[str, np.ndarray]
    split: str = "meta_train"
    channels: int = 1
    image_size: int = 28

    def __len__(self):
        return len(self.classes)

    @property
    def class_ids(self) -> list[str]:
        return sorted(self.classes)

    def subset(self, ids, split: str | None = None) -> "ClassPool":
        return replace(self, classes={i: self.classes[i] for i in ids}, split=split or self.split)


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    k_shot: int
    q_queries: int
    class_ids: tuple[str, ...] = ()

    @property
    def support(self):
        return self.support_x, self.support_y

    @property
    def query(self):
        return self.query_x, self.query_y


def split_pool(pool: ClassPool, n_train: int, rng: np.random.Generator) -> tuple[ClassPool, ClassPool]:
    """Disjoint meta-train / meta-test pools by class."""
    ids = pool.class_ids
    if not 0 < n_train < len(ids):
        raise CapacityError(f"cannot split {len(ids)} classes with {n_train} for training")
    order = rng.permutation(len(ids))
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return pool.subset(train, "meta_train"), pool.subset(test, "meta_test")


def sample_episode(pool: ClassPool, n_way: int, k_shot: int, q_queries: int,
                   rng: np.random.Generator) -> Episode:
    """Draw ``n_way`` classes, then ``k_shot + q_queries`` distinct images per class.

    Labels follow class draw order; the first ``k_shot`` images go to support.
    """
    ids = pool.class_ids
    if len(ids) < n_way:
        raise CapacityError(f"pool has {len(ids)} classes, episode needs {n_way}")
    need = k_shot + q_queries
    chosen = [ids[i] for i in rng.choice(len(ids), size=n_way, replace=False)]
    sx, sy, qx, qy = [], [], [], []
    for label, cid in enumerate(chosen):
        imgs = pool.classes[cid]
        if len(imgs) < need:
            raise CapacityError(f"class {cid!r} has {len(imgs)} images, episode needs {need}")
        pick = rng.choice(len(imgs), size=need, replace=False)
        sx.append(imgs[pick[:k_shot]])
        qx.append(imgs[pick[k_shot:]])
        sy += [label] * k_shot
        qy += [label] * q_queries
    return Episode(np.concatenate(sx).astype(np.float32), np.array(sy, dtype=np.int64),
                   np.concatenate(qx).astype(np.float32), np.array(qy, dtype=np.int64),
                   n_way, k_shot, q_queries, tuple(chosen))


def rotate_augment(pool: ClassPool) -> ClassPool:
    """Each class becomes four classes rotated by 0, 90, 180 and 270 degrees."""
    out = {}
    for cid, imgs in pool.classes.items():
        if imgs.shape[-1] != imgs.shape[-2]:
            raise ValueError(f"class {cid!r}: rotation needs square images, got {imgs.shape[-2:]}")
        for quarter in range(4):
            out[f"{cid}@rot{90 * quarter}"] = np.ascontiguousarray(np.rot90(imgs, quarter, axes=(-2, -1)))
    return replace(pool, classes=out)


# ---------------------------------------------------------------------------
# gaussian blur
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlurConfig:
    kernel_choices: tuple[int, ...] = (5, 7, 9)
    sigma_range: tuple[float, float] = (0.1, 5.0)
    apply: str = "meta_test_only"
    blur_draw: str = "per_image"
    blur_target: str = "both"

    def __post_init__(self):
        if any(k < 3 or k % 2 == 0 for k in self.kernel_choices):
            raise ValueError(f"blur kernels must be odd and >= 3: {self.kernel_choices}")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid sigma range {self.sigma_range}")
        if self.apply not in ("meta_test_only", "none"):
            raise ValueError(f"apply must be meta_test_only or none, got {self.apply!r}")
        if self.blur_draw not in ("per_image", "per_task"):
            raise ValueError(f"blur_draw must be per_image or per_task, got {self.blur_draw!r}")
        if self.blur_target not in ("both", "support", "query"):
            raise ValueError(f"blur_target must be both, support or query, got {self.blur_target!r}")


def gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = np.arange(size, dtype=np.float64) - size // 2
    k = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized isotropic 2D Gaussian, ``size x size``."""
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    d = np.arange(size, dtype=np.float64) - size // 2
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def blur_with(image: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect borders, clamped to [0, 1]."""
    k = gaussian_kernel_1d(size, sigma)
    r = size // 2
    img = np.asarray(image, dtype=np.float64)
    pad = [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)]
    p = np.pad(img, pad, mode="reflect")
    H, W = img.shape[-2:]
    rows = sum(k[i] * p[..., i:i + H, :] for i in range(size))
    out = sum(k[j] * rows[..., :, j:j + W] for j in range(size))
    return np.clip(out, 0.0, 1.0).astype(np.asarray(image).dtype)


def draw_blur(cfg: BlurConfig, rng: np.random.Generator) -> tuple[int, float]:
    size = int(cfg.kernel_choices[rng.integers(len(cfg.kernel_choices))])
    sigma = float(rng.uniform(*cfg.sigma_range))
    return size, sigma


def gaussian_blur(image: np.ndarray, cfg: BlurConfig, rng: np.random.Generator) -> np.ndarray:
    """Blur one image with a randomly drawn kernel size and sigma."""
    return blur_with(image, *draw_blur(cfg, rng))


def blur_episode(ep: Episode, cfg: BlurConfig, rng: np.random.Generator) -> Episode:
    if cfg.apply == "none":
        return ep
    shared = draw_blur(cfg, rng) if cfg.blur_draw == "per_task" else None

    def run(xs):
        return np.stack([blur_with(x, *(shared or draw_blur(cfg, rng))) for x in xs])

    sx = run(ep.support_x) if cfg.blur_target in ("both", "support") else ep.support_x
    qx = run(ep.query_x) if cfg.blur_target in ("both", "query") else ep.query_x
    return replace(ep, support_x=sx, query_x=qx)


# ---------------------------------------------------------------------------
# synthetic glyphs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthGlyphConfig:
    n_classes: int = 300
    strokes_per_glyph: int = 3
    jitter_std: float = 0.06
    image_size: int = 28
    images_per_class: int = 20
    stroke_width: float = 1.0
    seed: int = 0


def _rasterize(segments: np.ndarray, size: int, width: float) -> np.ndarray:
    # segments: S x 2 x 2 in pixel coordinates (x, y); antialiased by distance
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    pts = np.stack([xs, ys], axis=-1)[None]  # 1 x H x W x 2
    a = segments[:, 0][:, None, None, :]
    b = segments[:, 1][:, None, None, :]
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    t = np.clip(((pts - a) * ab).sum(-1) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    d = np.sqrt(((pts - proj) ** 2).sum(-1)).min(axis=0)
    return np.clip(width + 0.5 - d, 0.0, 1.0)


def _glyph_template(rng: np.random.Generator, strokes: int) -> list[np.ndarray]:
    # control points in unit square, kept away from the border
    out = []
    for _ in range(strokes):
        n_pts = int(rng.integers(2, 5))
        out.append(rng.uniform(0.18, 0.82, size=(n_pts, 2)))
    return out


def _instance_segments(template, rng, jitter: float, size: int) -> np.ndarray:
    angle = rng.normal(0.0, jitter * 2.0) if jitter else 0.0
    shift = rng.normal(0.0, jitter, size=2) if jitter else np.zeros(2)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    segs = []
    for stroke in template:
        pts = stroke
        if jitter:
            pts = pts + rng.normal(0.0, jitter * 0.5, size=pts.shape)
        pts = (pts - 0.5) @ rot.T + 0.5 + shift
        pts = pts * size
        segs.extend(np.stack([pts[:-1], pts[1:]], axis=1))
    return np.array(segs)


def synth_glyph_pool(cfg: SynthGlyphConfig) -> ClassPool:
    """Random multi-stroke glyph classes with per-instance jitter."""
    if cfg.n_classes < 1 or cfg.images_per_class < 1:
        raise ValueError(f"invalid glyph config {cfg}")
    rng = np.random.default_rng(cfg.seed)
    classes = {}
    for c in range(cfg.n_classes):
        template = _glyph_template(rng, cfg.strokes_per_glyph)
        imgs = [_rasterize(_instance_segments(template, rng, cfg.jitter_std, cfg.image_size),
                           cfg.image_size, cfg.stroke_width)
                for _ in range(cfg.images_per_class)]
        classes[f"glyph{c:05d}"] = np.stack(imgs)[:, None].astype(np.float32)
    return ClassPool(classes, "meta_train", 1, cfg.image_size)


# ---------------------------------------------------------------------------
# image trees on disk
# ---------------------------------------------------------------------------

def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Plain bilinear resampling of ``C x H x W`` (half-pixel centers, no prefilter)."""
    C, H, W = img.shape
    if (H, W) == (size, size):
        return img.copy()

    def axis(n_in):
        pos = (np.arange(size) + 0.5) * (n_in / size) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(H)
    x0, x1, fx = axis(W)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def load_image(path: Path, image_size: int, channels: int, invert: str = "auto") -> np.ndarray:
    from PIL import Image, UnidentifiedImageError
    try:
        with Image.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    arr = arr[None] if channels == 1 else arr.transpose(2, 0, 1)
    if channels == 1 and (invert == "always" or (invert == "auto" and arr.mean() > 0.5)):
        arr = 1.0 - arr  # white-background source: make ink = 1
    return np.clip(resize_bilinear(arr, image_size), 0.0, 1.0).astype(np.float32)


def _image_files(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def discover_classes(root: Path) -> list[str]:
    """Class directories relative to ``root``: ``alphabet/character`` or flat ``class``."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    out = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if any(c.is_dir() for c in sub.iterdir()):
            out += [f"{sub.name}/{c.name}" for c in sorted(sub.iterdir()) if c.is_dir()]
        else:
            out.append(sub.name)
    return out


def load_image_tree(root, image_size: int, channels: int = 1, class_paths: list[str] | None = None,
                    invert: str = "auto", split: str = "meta_train") -> ClassPool:
    root = Path(root)
    ids = class_paths if class_paths is not None else discover_classes(root)
    classes = {}
    for cid in ids:
        d = root / cid
        if not d.is_dir():
            raise FileNotFoundError(f"class directory {d} does not exist")
        files = _image_files(d)
        if not files:
            raise DatasetIntegrityError(f"class {cid!r} at {d} has no images")
        classes[cid] = np.stack([load_image(f, image_size, channels, invert) for f in files])
    return ClassPool(classes, split, channels, image_size)


def read_split_file(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]


def load_split_tree(root, image_size: int, channels: int = 1, invert: str = "auto") -> tuple[ClassPool, ClassPool]:
    """Load ``train.split`` / ``test.split`` (beside ``root``) as disjoint pools."""
    root = Path(root)
    parent = root.parent
    train_ids = read_split_file(parent / "train.split")
    test_ids = read_split_file(parent / "test.split")
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise DatasetIntegrityError(f"split files share {len(overlap)} classes, e.g. {sorted(overlap)[0]!r}")
    return (load_image_tree(root, image_size, channels, train_ids, invert, "meta_train"),
            load_image_tree(root, image_size, channels, test_ids, invert, "meta_test"))


def data_root(configured: str | os.PathLike | None) -> str | None:
    return os.environ.get("WIDEMETA_DATA") or (str(configured) if configured else None)

