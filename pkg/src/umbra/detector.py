"""End-to-end shadow detection.

Pipeline: mean-shift segmentation, SVM shadow prior, one CNN forward per
region at its centroid (region map), selection of high-scoring regions,
CNN re-evaluation at their boundary pixels with 9-pixel neighborhood
averaging, and final thresholding. The CNN runs on batches; refinement
results are committed in row-major order so outputs are deterministic.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .cnn import CnnModel, cast_model, conv_flat, fc_probs, fc_probs_columns
from .imageio import PATCH_SIZE, patch_origin, rgb_to_lab
from .prior import SvmModel, shadow_prior
from .segmentation import MeanShiftParams, Segmentation, mean_shift_segment


@dataclass(frozen=True)
class DetectorConfig:
    alpha: float = 0.2
    binarize_threshold: float = 0.5
    mean_shift: MeanShiftParams = MeanShiftParams()
    inference_dtype: str = "float32"  # "float32" or "float64"

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValueError("binarize_threshold must be in (0, 1)")
        if self.inference_dtype not in ("float32", "float64"):
            raise ValueError("inference_dtype must be float32 or float64")


@dataclass
class DetectionResult:
    prior: np.ndarray  # (H, W) float64 in [0, 1]
    region_map: np.ndarray  # (H, W) float64, constant per region
    refined_map: np.ndarray  # (H, W) float64
    mask: np.ndarray  # (H, W) uint8 in {0, 255}
    timing: dict  # stage name -> seconds
    cnn_invocations: int
    region_scores: np.ndarray = field(default=None, repr=False)
    selected_regions: np.ndarray = field(default=None, repr=False)
    segmentation: Segmentation = field(default=None, repr=False)


def _gather_patches(img_unit, prior, centers, dtype):
    """Stack clamped 32x32 RGBP windows for the given (x, y) centers."""
    height, width = prior.shape
    n = len(centers)
    out = np.empty((n, PATCH_SIZE, PATCH_SIZE, 4), dtype=dtype)
    origins = np.empty((n, 2), dtype=np.int64)
    for k, (x, y) in enumerate(centers):
        ox, oy = patch_origin(width, height, (x, y))
        origins[k] = ox, oy
        out[k, :, :, :3] = img_unit[oy : oy + PATCH_SIZE, ox : ox + PATCH_SIZE]
        out[k, :, :, 3] = prior[oy : oy + PATCH_SIZE, ox : ox + PATCH_SIZE]
    return out, origins


def region_predict(img: np.ndarray, prior: np.ndarray, seg: Segmentation,
                   model: CnnModel, dtype=np.float32):
    """One CNN forward per region at its centroid.

    Each region score is the mean over the 1024 patch outputs; the region
    map writes that score to all pixels of the region. Exactly m CNN
    invocations.
    """
    height, width = prior.shape
    if height < PATCH_SIZE or width < PATCH_SIZE:
        raise ValueError(f"image smaller than the {PATCH_SIZE}x{PATCH_SIZE} patch")
    img_unit = np.ascontiguousarray(img[:, :, :3], dtype=dtype) / dtype(255.0)
    prior_t = prior.astype(dtype, copy=False)
    patches, _ = _gather_patches(img_unit, prior_t, seg.centroids, dtype)
    scores = fc_probs(model, conv_flat(model, patches)).mean(axis=1)
    return scores, scores[seg.labels]


def filter_regions(scores: np.ndarray, alpha: float) -> np.ndarray:
    """Region ids with score >= alpha * max score (ascending order)."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("filter_regions requires at least one region")
    return np.flatnonzero(scores >= alpha * scores.max())


def refine_edges(img: np.ndarray, prior: np.ndarray, seg: Segmentation,
                 selected: np.ndarray, model: CnnModel, region_map: np.ndarray,
                 dtype=np.float32):
    """Re-run the CNN at boundary pixels of the selected regions.

    For each boundary pixel, in row-major order, the average of the fresh
    patch prediction at the pixel and its 8 neighbors (patch-local, edge
    cells clamped) replaces those 9 positions in the refined map. Returns
    (refined map, number of boundary pixels processed).
    """
    refined = region_map.astype(np.float64).copy()
    if len(selected) == 0:
        return refined, 0
    flat_idx = np.sort(np.concatenate([seg.boundary_pixels[i] for i in selected]))
    if flat_idx.size == 0:
        return refined, 0
    height, width = prior.shape
    xs = flat_idx % width
    ys = flat_idx // width
    img_unit = np.ascontiguousarray(img[:, :, :3], dtype=dtype) / dtype(255.0)
    prior_t = prior.astype(dtype, copy=False)
    patches, origins = _gather_patches(img_unit, prior_t, np.stack([xs, ys], axis=1), dtype)
    flats = conv_flat(model, patches)

    # only the 9 patch-local cells around each pixel are read, so evaluate
    # just those FC columns; pixels sharing local coordinates (the interior
    # majority at (16,16)) share one column set
    lx = xs - origins[:, 0]
    ly = ys - origins[:, 1]
    averages = np.empty(len(flat_idx))
    offsets = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    for key in np.unique(ly * PATCH_SIZE + lx):
        rows = np.flatnonzero(ly * PATCH_SIZE + lx == key)
        cy0, cx0 = divmod(int(key), PATCH_SIZE)
        columns = np.array(
            [
                min(max(cy0 + dy, 0), PATCH_SIZE - 1) * PATCH_SIZE
                + min(max(cx0 + dx, 0), PATCH_SIZE - 1)
                for dy, dx in offsets
            ]
        )
        probs = fc_probs_columns(model, flats[rows], columns)
        averages[rows] = probs.mean(axis=1)

    for k in range(len(flat_idx)):
        x, y, value = int(xs[k]), int(ys[k]), averages[k]
        for dy in (-1, 0, 1):
            ny = y + dy
            if not 0 <= ny < height:
                continue
            for dx in (-1, 0, 1):
                nx = x + dx
                if 0 <= nx < width:
                    refined[ny, nx] = value
    return refined, int(len(flat_idx))


def binarize(prob_map: np.ndarray, threshold: float) -> np.ndarray:
    """Binary mask, shadow (255) iff value >= threshold."""
    return np.where(prob_map >= threshold, 255, 0).astype(np.uint8)


def detect(img: np.ndarray, svm_model: SvmModel, cnn_model: CnnModel,
           config: DetectorConfig = DetectorConfig()) -> DetectionResult:
    """Run the full detection pipeline on an RGB image.

    Deterministic for fixed inputs, models, and config; records wall-clock
    per stage and the exact CNN invocation count (m + refined pixels).
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("detect expects a (H, W, 3) uint8 RGB image")
    if img.shape[0] < PATCH_SIZE or img.shape[1] < PATCH_SIZE:
        raise ValueError(f"image smaller than the {PATCH_SIZE}x{PATCH_SIZE} patch")
    dtype = np.float32 if config.inference_dtype == "float32" else np.float64
    model = cast_model(cnn_model, dtype) if dtype != np.float64 else cnn_model

    timing = {}
    t0 = time.perf_counter()
    lab = rgb_to_lab(img)
    seg = mean_shift_segment(lab, config.mean_shift)
    t1 = time.perf_counter()
    timing["segmentation"] = t1 - t0

    prior_map = shadow_prior(svm_model, img, seg, lab=lab)
    t2 = time.perf_counter()
    timing["prior"] = t2 - t1

    scores, region_map = region_predict(img, prior_map, seg, model, dtype)
    t3 = time.perf_counter()
    timing["region_prediction"] = t3 - t2

    selected = filter_regions(scores, config.alpha)
    refined, n_refined = refine_edges(
        img, prior_map, seg, selected, model, region_map, dtype
    )
    t4 = time.perf_counter()
    timing["edge_refinement"] = t4 - t3

    mask = binarize(refined, config.binarize_threshold)
    t5 = time.perf_counter()
    timing["binarize"] = t5 - t4
    timing["total"] = t5 - t0

    return DetectionResult(
        prior=prior_map,
        region_map=region_map.astype(np.float64),
        refined_map=refined,
        mask=mask,
        timing=timing,
        cnn_invocations=seg.region_count + n_refined,
        region_scores=np.asarray(scores, dtype=np.float64),
        selected_regions=selected,
        segmentation=seg,
    )
