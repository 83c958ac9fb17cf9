"""Pixel metrics, dataset handling, the synthetic scene generator, and the
benchmark harness.

Accuracy follows the shadow-detection convention: shadow accuracy is
recall on shadow pixels (TP / all shadow pixels), non-shadow accuracy is
recall on non-shadow pixels, total accuracy is overall pixel accuracy.
Metrics are computed per image and then averaged; a metric whose
denominator is zero is reported as absent and excluded from aggregates.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import DetectorConfig, detect
from .imageio import decode_image, encode_image

log = logging.getLogger("umbra")

_IMAGE_SUFFIXES = (".png", ".ppm")

_LAYOUTS = {
    "images-masks": ("Images", "Masks"),
    "sbu": ("ShadowImages", "ShadowMasks"),
}


@dataclass
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class ImageMetrics:
    shadow_accuracy: float  # None when the image has no shadow pixels
    nonshadow_accuracy: float  # None when the image has no non-shadow pixels
    total_accuracy: float
    image: str = None
    seconds: float = None
    cnn_invocations: int = None
    stage_seconds: dict = None


@dataclass
class MetricReport:
    per_image: list
    aggregates: dict  # metric -> {"mean", "std", "n"}
    seconds_mean: float = None
    seconds_std: float = None
    mean_cnn_invocations: float = None


@dataclass
class DatasetIndex:
    pairs: list  # (image path, mask path or None)
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Per-pixel tally with shadow as the positive class."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    tn = int(np.count_nonzero(~p & ~g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def metrics(c: ConfusionCounts) -> ImageMetrics:
    if c.total <= 0:
        raise ValueError("metrics require at least one evaluated pixel")
    shadow = c.tp / (c.tp + c.fn) if (c.tp + c.fn) > 0 else None
    nonshadow = c.tn / (c.tn + c.fp) if (c.tn + c.fp) > 0 else None
    total = (c.tp + c.tn) / c.total
    return ImageMetrics(
        shadow_accuracy=shadow, nonshadow_accuracy=nonshadow, total_accuracy=total
    )


def aggregate(per_image: list) -> MetricReport:
    """Mean/std (population) of each defined per-image metric."""
    aggs = {}
    for name in ("total_accuracy", "shadow_accuracy", "nonshadow_accuracy"):
        values = [getattr(m, name) for m in per_image if getattr(m, name) is not None]
        if values:
            arr = np.array(values, dtype=np.float64)
            aggs[name] = {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(values)}
    report = MetricReport(per_image=list(per_image), aggregates=aggs)
    secs = [m.seconds for m in per_image if m.seconds is not None]
    if secs:
        arr = np.array(secs)
        report.seconds_mean = float(arr.mean())
        report.seconds_std = float(arr.std())
    invs = [m.cnn_invocations for m in per_image if m.cnn_invocations is not None]
    if invs:
        report.mean_cnn_invocations = float(np.mean(invs))
    return report


def load_mask(path) -> np.ndarray:
    """Binary ground truth from an 8-bit file, thresholded at 128."""
    arr = decode_image(Path(path).read_bytes())
    return arr[:, :, 0] >= 128


def load_dataset(root, layout: str = "images-masks") -> DatasetIndex:
    """Pair image files with masks by shared stem under the named layout.

    Layouts: "images-masks" (Images/ + Masks/), "sbu" (ShadowImages/ +
    ShadowMasks/), "flat" (images directly under root, no masks; timing
    runs only). Unmatched files are reported as warnings, not errors.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"dataset root {root} does not exist")
    warnings = []
    if layout == "flat":
        pairs = [
            (p, None)
            for p in sorted(root.iterdir())
            if p.suffix.lower() in _IMAGE_SUFFIXES
        ]
    elif layout in _LAYOUTS:
        img_dir = root / _LAYOUTS[layout][0]
        mask_dir = root / _LAYOUTS[layout][1]
        if not img_dir.is_dir() or not mask_dir.is_dir():
            raise ValueError(
                f"layout {layout!r} expects {img_dir.name}/ and {mask_dir.name}/ under {root}"
            )
        masks = {
            p.stem: p
            for p in sorted(mask_dir.iterdir())
            if p.suffix.lower() in _IMAGE_SUFFIXES
        }
        pairs = []
        used = set()
        for img_path in sorted(img_dir.iterdir()):
            if img_path.suffix.lower() not in _IMAGE_SUFFIXES:
                continue
            mask_path = masks.get(img_path.stem)
            if mask_path is None:
                warnings.append(f"no mask for image {img_path.name}")
                continue
            used.add(img_path.stem)
            pairs.append((img_path, mask_path))
        for stem, p in masks.items():
            if stem not in used:
                warnings.append(f"no image for mask {p.name}")
    else:
        raise ValueError(f"unknown dataset layout {layout!r}")
    if not pairs:
        raise ValueError(f"no image pairs found under {root} (layout {layout!r})")
    for w in warnings:
        log.warning("%s", w)
    return DatasetIndex(pairs=pairs, warnings=warnings)


def split_index(index: DatasetIndex, test_fraction: float, seed: int):
    """Disjoint (train, test) indices via a seeded permutation."""
    n = len(index.pairs)
    n_test = int(round(n * test_fraction))
    perm = np.random.default_rng(seed).permutation(n)
    test_ids = set(map(int, perm[:n_test]))
    train = [p for i, p in enumerate(index.pairs) if i not in test_ids]
    test = [p for i, p in enumerate(index.pairs) if i in test_ids]
    return DatasetIndex(pairs=train), DatasetIndex(pairs=test)


def _fill_polygon(vertices, size) -> np.ndarray:
    """Exact even-odd scanline rasterization sampled at pixel centers."""
    mask = np.zeros((size, size), dtype=bool)
    vx = vertices[:, 0]
    vy = vertices[:, 1]
    k = len(vertices)
    for row in range(size):
        yc = row + 0.5
        xs = []
        for i in range(k):
            x0, y0 = vx[i], vy[i]
            x1, y1 = vx[(i + 1) % k], vy[(i + 1) % k]
            if (y0 <= yc < y1) or (y1 <= yc < y0):
                xs.append(x0 + (yc - y0) * (x1 - x0) / (y1 - y0))
        xs.sort()
        for a, b in zip(xs[0::2], xs[1::2]):
            lo = int(np.ceil(a - 0.5))
            hi = int(np.floor(b - 0.5))
            if hi >= lo:
                mask[row, max(lo, 0) : min(hi, size - 1) + 1] = True
    return mask


def _convex_polygon(rng, size):
    from scipy.spatial import ConvexHull

    k = int(rng.integers(5, 10))
    cx, cy = rng.uniform(0.3, 0.7, size=2) * size
    radius = rng.uniform(0.16, 0.40) * size
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=k))
    radii = radius * rng.uniform(0.65, 1.0, size=k)
    pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
    pts = np.clip(pts, 1.0, size - 2.0)
    hull = ConvexHull(pts)
    return pts[hull.vertices]


def _synth_scene(size: int, rng) -> tuple:
    """One textured scene and its exact polygon shadow mask."""
    img = np.zeros((size, size, 3), dtype=np.float64)
    n_fields = int(rng.integers(2, 4))
    cuts = np.sort(rng.integers(size // 4, 3 * size // 4, size=n_fields - 1))
    bounds = [0, *map(int, cuts), size]
    vertical = bool(rng.integers(2))
    for f in range(n_fields):
        lo, hi = bounds[f], bounds[f + 1]
        # backgrounds stay bright enough that a 0.3-0.6x darkened pixel
        # cannot pass for an unshaded field (daylight-scene contrast)
        base = rng.integers(150, 226, size=3).astype(np.float64)
        kind = ("flat", "noise", "checker")[int(rng.integers(3))]
        shape = (size, hi - lo) if vertical else (hi - lo, size)
        if kind == "noise":
            block = base + rng.uniform(-5.0, 5.0, size=shape + (3,))
        elif kind == "checker":
            # scalar luminance contrast, mild enough that the texture does
            # not shatter mean-shift segmentation (as natural textures
            # would not)
            cell = int(rng.choice([4, 8]))
            other = base + float(rng.integers(4, 9)) * float(rng.choice([-1, 1]))
            yy, xx = np.indices(shape)
            checker = ((yy // cell) + (xx // cell)) % 2
            block = np.where(checker[:, :, None] == 0, base, other)
        else:
            block = np.broadcast_to(base, shape + (3,)).copy()
        if vertical:
            img[:, lo:hi] = block
        else:
            img[lo:hi, :] = block

    while True:
        mask = _fill_polygon(_convex_polygon(rng, size), size)
        frac = mask.mean()
        if 0.05 <= frac <= 0.6:
            break

    factor = rng.uniform(0.3, 0.6)
    shaded = img.copy()
    shaded[mask, 0] *= factor
    shaded[mask, 1] *= factor
    shaded[mask, 2] *= min(1.0, factor * 1.25)  # mild blue shift
    return np.clip(np.rint(shaded), 0, 255).astype(np.uint8), mask


def generate_synthetic(n: int, size: int, seed: int, out_dir) -> DatasetIndex:
    """Write n deterministic synthetic image/mask pairs (Images/ + Masks/).

    Shadows are convex polygons rendered by darkening (factor in
    [0.3, 0.6]) with a mild blue shift; masks are the exact polygon
    pixels and their shadow fraction lies in [0.05, 0.6] by construction.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < 32:
        raise ValueError("size must be >= 32")
    out_dir = Path(out_dir)
    (out_dir / "Images").mkdir(parents=True, exist_ok=True)
    (out_dir / "Masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        img, mask = _synth_scene(size, rng)
        img_path = out_dir / "Images" / f"synth_{i:04d}.png"
        mask_path = out_dir / "Masks" / f"synth_{i:04d}.png"
        img_path.write_bytes(encode_image(img))
        mask_path.write_bytes(encode_image((mask * np.uint8(255))))
        pairs.append((img_path, mask_path))
    return DatasetIndex(pairs=pairs)


def evaluate_image(img_path, mask_path, detect_fn) -> ImageMetrics:
    img = decode_image(Path(img_path).read_bytes())
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    result = detect_fn(img)
    entry_kwargs = dict(
        image=str(img_path),
        seconds=result.timing.get("total"),
        cnn_invocations=result.cnn_invocations,
        stage_seconds=dict(result.timing),
    )
    if mask_path is None:
        return ImageMetrics(
            shadow_accuracy=None, nonshadow_accuracy=None, total_accuracy=None,
            **entry_kwargs,
        )
    gt = load_mask(mask_path)
    if gt.shape != result.mask.shape:
        raise ValueError(
            f"{mask_path}: mask shape {gt.shape} does not match image {result.mask.shape}"
        )
    m = metrics(confusion(result.mask, gt))
    for k, v in entry_kwargs.items():
        setattr(m, k, v)
    return m


def benchmark(index: DatasetIndex, svm_model=None, cnn_model=None,
              config: DetectorConfig = DetectorConfig(), detect_fn=None,
              jobs: int = 1) -> MetricReport:
    """Run detection over an index and aggregate accuracy and timing.

    Wall clock covers the detection stages only (model loading excluded).
    With jobs > 1 images are processed concurrently and per-image timings
    may include contention; use jobs=1 for timing-grade numbers.
    """
    if len(index.pairs) == 0:
        raise ValueError("benchmark: empty dataset index")
    if detect_fn is None:
        if svm_model is None or cnn_model is None:
            raise ValueError("benchmark needs models or an explicit detect_fn")

        def detect_fn(img):
            return detect(img, svm_model, cnn_model, config)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_image = list(
                pool.map(lambda p: evaluate_image(p[0], p[1], detect_fn), index.pairs)
            )
    else:
        per_image = [evaluate_image(i, m, detect_fn) for i, m in index.pairs]
    return aggregate(per_image)
