"""Region descriptors for the shadow prior: color histograms, texton
histograms, and the chi-squared kernel.

Color is a 63-bin Lab histogram (21 bins per channel over fixed ranges).
Texture is a histogram over a learned texton dictionary: pixels are
assigned to the nearest center of a k-means clustering of 12 filter-bank
responses. The combined region feature concatenates both histograms with
each half rescaled to sum 0.5.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

COLOR_BINS = 21
_CHANNEL_RANGES = ((0.0, 100.0), (-128.0, 127.0), (-128.0, 127.0))

FILTER_BANK_VERSION = "gauss(L,a,b)x2+log(L)x2+dxdy(L)x2/sigma1,2/nearest/v1"
FILTER_COUNT = 12
_SIGMAS = (1.0, 2.0)


def color_bin_indices(lab: np.ndarray) -> np.ndarray:
    """Per-pixel bin index in [0, 21) for each Lab channel, shape (H*W, 3)."""
    flat = lab.reshape(-1, 3)
    out = np.empty(flat.shape, dtype=np.int64)
    for c, (lo, hi) in enumerate(_CHANNEL_RANGES):
        idx = np.floor((flat[:, c] - lo) / (hi - lo) * COLOR_BINS).astype(np.int64)
        out[:, c] = np.clip(idx, 0, COLOR_BINS - 1)
    return out


def color_histogram(lab: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """L1-normalized 63-bin Lab histogram over the given flat pixel indices."""
    pixels = np.asarray(pixels)
    if pixels.size == 0:
        raise ValueError("color_histogram: empty region")
    bins = color_bin_indices(lab)[pixels]
    hist = np.zeros(3 * COLOR_BINS)
    for c in range(3):
        hist[c * COLOR_BINS : (c + 1) * COLOR_BINS] = np.bincount(
            bins[:, c], minlength=COLOR_BINS
        )
    return hist / hist.sum()


def filter_responses(lab: np.ndarray) -> np.ndarray:
    """12 filter-bank responses per pixel, shape (H, W, 12).

    Order: Gaussian sigma=1 on L,a,b; Gaussian sigma=2 on L,a,b;
    LoG sigma=1,2 on L; d/dx and d/dy of Gaussian at sigma=1,2 on L.
    Border handling is nearest-edge replication.
    """
    lab = np.asarray(lab, dtype=np.float64)
    out = np.empty(lab.shape[:2] + (FILTER_COUNT,))
    k = 0
    opts = dict(mode="nearest", truncate=3.0)
    for sigma in _SIGMAS:
        for c in range(3):
            out[:, :, k] = ndimage.gaussian_filter(lab[:, :, c], sigma, **opts)
            k += 1
    lum = lab[:, :, 0]
    for sigma in _SIGMAS:
        out[:, :, k] = ndimage.gaussian_filter(
            lum, sigma, order=(2, 0), **opts
        ) + ndimage.gaussian_filter(lum, sigma, order=(0, 2), **opts)
        k += 1
    for sigma in _SIGMAS:
        out[:, :, k] = ndimage.gaussian_filter(lum, sigma, order=(0, 1), **opts)
        out[:, :, k + 1] = ndimage.gaussian_filter(lum, sigma, order=(1, 0), **opts)
        k += 2
    return out


@dataclass(frozen=True)
class TextonDictionary:
    centers: np.ndarray  # (K, 12)
    filter_bank_version: str = FILTER_BANK_VERSION

    @property
    def size(self):
        return self.centers.shape[0]


def nearest_center(vectors: np.ndarray, centers: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Index of the nearest center (squared Euclidean, ties to lowest index).

    Distances use the expansion |x|^2 - 2 x.c + |c|^2 with a matrix
    multiply; |x|^2 is constant per row and dropped.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    c_norms = (c * c).sum(axis=1)
    n = vectors.shape[0]
    out = np.empty(n, dtype=np.int32)
    for s in range(0, n, chunk):
        block = vectors[s : s + chunk]
        d2 = c_norms[None, :] - 2.0 * (block @ c.T)
        out[s : s + chunk] = np.argmin(d2, axis=1)
    return out


def _kmeans_pp_init(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            raise ValueError(
                f"fewer than {k} distinct response vectors; cannot seed k-means"
            )
        centers[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    return centers


def _kmeans(x, k, seed, max_iter=100):
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, k, rng)
    assign = nearest_center(x, centers)
    for _ in range(max_iter):
        for i in range(k):
            members = x[assign == i]
            if len(members):
                centers[i] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-served point
                far = np.argmax(((x - centers[assign]) ** 2).sum(axis=1))
                centers[i] = x[far]
        new_assign = nearest_center(x, centers)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centers


def build_texton_dictionary(images, k: int, seed: int) -> TextonDictionary:
    """Cluster filter responses of the training images into K textons.

    Deterministic for a fixed seed (k-means++ init, at most 100 Lloyd
    iterations). Raises if the corpus has fewer than K distinct response
    vectors.
    """
    if k < 2:
        raise ValueError("texton count K must be >= 2")
    if not images:
        raise ValueError("need at least one training image")
    responses = [filter_responses(lab).reshape(-1, FILTER_COUNT) for lab in images]
    x = np.concatenate(responses, axis=0)
    centers = _kmeans(x, k, seed)
    return TextonDictionary(centers=centers)


def assign_textons(responses: np.ndarray, dictionary: TextonDictionary) -> np.ndarray:
    """Nearest-texton index per pixel, shape (H, W) int32."""
    h, w = responses.shape[:2]
    flat = responses.reshape(-1, FILTER_COUNT)
    return nearest_center(flat, dictionary.centers).reshape(h, w)


def texton_histogram(
    responses: np.ndarray, dictionary: TextonDictionary, pixels: np.ndarray
) -> np.ndarray:
    """L1-normalized K-bin texton histogram over the given flat pixel indices."""
    pixels = np.asarray(pixels)
    if pixels.size == 0:
        raise ValueError("texton_histogram: empty region")
    flat = responses.reshape(-1, FILTER_COUNT)[pixels]
    assign = nearest_center(flat, dictionary.centers)
    hist = np.bincount(assign, minlength=dictionary.size).astype(np.float64)
    return hist / hist.sum()


def combined_feature(color: np.ndarray, texture: np.ndarray) -> np.ndarray:
    """Concatenate color and texture histograms, each half rescaled to sum 0.5."""
    return np.concatenate([0.5 * color, 0.5 * texture])


def region_feature_matrix(lab, responses, dictionary, seg) -> np.ndarray:
    """Combined features for every region of a segmentation, shape (m, 63+K).

    Single pass over the image; equal to stacking the per-region
    color_histogram / texton_histogram operations.
    """
    m = seg.region_count
    flat_labels = seg.labels.ravel()
    sizes = np.bincount(flat_labels, minlength=m).astype(np.float64)

    bins = color_bin_indices(lab)
    color = np.zeros(m * 3 * COLOR_BINS)
    for c in range(3):
        key = flat_labels * (3 * COLOR_BINS) + c * COLOR_BINS + bins[:, c]
        color += np.bincount(key, minlength=m * 3 * COLOR_BINS)
    color = color.reshape(m, 3 * COLOR_BINS) / (3.0 * sizes[:, None])

    assign = assign_textons(responses, dictionary).ravel().astype(np.int64)
    key = flat_labels * dictionary.size + assign
    texture = np.bincount(key, minlength=m * dictionary.size).astype(np.float64)
    texture = texture.reshape(m, dictionary.size) / sizes[:, None]

    return np.concatenate([0.5 * color, 0.5 * texture], axis=1)


def chi2_distance_matrix(x: np.ndarray, y: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Pairwise chi-squared distances 0.5 * sum (x-y)^2 / (x+y), zero terms skipped."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.empty((x.shape[0], y.shape[0]))
    for s in range(0, x.shape[0], chunk):
        xb = x[s : s + chunk, None, :]
        diff = xb - y[None, :, :]
        denom = xb + y[None, :, :]
        terms = np.divide(
            diff * diff, denom, out=np.zeros_like(denom), where=denom > 0
        )
        out[s : s + chunk] = 0.5 * terms.sum(axis=2)
    return out


def chi2_kernel(x: np.ndarray, y: np.ndarray, gamma: float) -> float:
    """exp(-gamma * chi2(x, y)) for non-negative vectors; result in (0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if (x < 0).any() or (y < 0).any():
        raise ValueError("chi2_kernel requires non-negative components")
    diff = x - y
    denom = x + y
    terms = np.divide(diff * diff, denom, out=np.zeros_like(denom), where=denom > 0)
    return float(np.exp(-gamma * 0.5 * terms.sum()))


def chi2_kernel_matrix(x: np.ndarray, y: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * chi2_distance_matrix(x, y))
