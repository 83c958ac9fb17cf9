"""Mean-shift superpixel segmentation and region geometry.

Segmentation runs on CIELAB images: joint spatial-range mean-shift
filtering assigns every pixel a converged mode, 4-connected pixels whose
modes agree are clustered into regions, and undersized regions are merged
into their closest-colored neighbor. Pixel lists are row-major flat
indices (idx = y * width + x).
"""

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange


@dataclass(frozen=True)
class MeanShiftParams:
    spatial_bandwidth: float = 8.0
    range_bandwidth: float = 8.0
    min_region_size: int = 50
    max_iterations: int = 50
    tolerance: float = 0.1

    def __post_init__(self):
        if self.spatial_bandwidth <= 0 or self.range_bandwidth <= 0:
            raise ValueError("bandwidths must be strictly positive")
        if self.min_region_size <= 0:
            raise ValueError("min_region_size must be strictly positive")


@dataclass
class Segmentation:
    """Per-pixel region labels plus derived per-region geometry."""

    labels: np.ndarray  # (H, W) int32, values in [0, m)
    region_count: int
    regions: list = field(repr=False)  # per-region sorted flat pixel indices
    centroids: np.ndarray = field(repr=False)  # (m, 2) int, (x, y)
    boundary_pixels: list = field(repr=False)  # per-region sorted flat indices

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def height(self):
        return self.labels.shape[0]

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "Segmentation":
        labels = np.ascontiguousarray(labels, dtype=np.int32)
        m = int(labels.max()) + 1
        regions = _group_by_label(labels.ravel(), m)
        if any(len(r) == 0 for r in regions):
            raise ValueError("label ids must be contiguous in [0, m)")
        centroids = np.array(
            [_centroid_of(regions[i], labels) for i in range(m)], dtype=np.int64
        )
        boundary = compute_boundary_pixels_from_labels(labels, m)
        return cls(labels, m, regions, centroids, boundary)


def _group_by_label(flat_labels, m):
    order = np.argsort(flat_labels, kind="stable")
    sorted_labels = flat_labels[order]
    starts = np.searchsorted(sorted_labels, np.arange(m), side="left")
    ends = np.searchsorted(sorted_labels, np.arange(m), side="right")
    return [order[s:e] for s, e in zip(starts, ends)]


def _centroid_of(pixel_indices, labels):
    """Round-half-down rounded coordinate mean, with nearest-interior fallback."""
    width = labels.shape[1]
    xs = pixel_indices % width
    ys = pixel_indices // width
    mx = xs.mean()
    my = ys.mean()
    rx = int(np.ceil(mx - 0.5))
    ry = int(np.ceil(my - 0.5))
    label = labels[ys[0], xs[0]]
    if labels[ry, rx] == label:
        return rx, ry
    d2 = (xs - mx) ** 2 + (ys - my) ** 2
    k = int(np.argmin(d2))  # first minimum = lowest flat index
    return int(xs[k]), int(ys[k])


def region_centroid(seg: Segmentation, i: int) -> tuple:
    if not 0 <= i < seg.region_count:
        raise ValueError(f"region id {i} out of range [0, {seg.region_count})")
    return _centroid_of(seg.regions[i], seg.labels)


def compute_boundary_pixels_from_labels(labels: np.ndarray, m: int) -> list:
    """Per-region flat indices of pixels with a 4-neighbor in another region.

    Image-border pixels are not boundary merely for bordering the outside.
    """
    diff = np.zeros(labels.shape, dtype=bool)
    horiz = labels[:, :-1] != labels[:, 1:]
    diff[:, :-1] |= horiz
    diff[:, 1:] |= horiz
    vert = labels[:-1, :] != labels[1:, :]
    diff[:-1, :] |= vert
    diff[1:, :] |= vert
    flat = labels.ravel()
    idx = np.flatnonzero(diff.ravel())
    groups = [[] for _ in range(m)]
    sub = flat[idx]
    order = np.argsort(sub, kind="stable")
    sorted_sub = sub[order]
    starts = np.searchsorted(sorted_sub, np.arange(m), side="left")
    ends = np.searchsorted(sorted_sub, np.arange(m), side="right")
    for i in range(m):
        groups[i] = idx[order[starts[i] : ends[i]]]
    return groups


def compute_boundary_pixels(seg: Segmentation) -> list:
    return compute_boundary_pixels_from_labels(seg.labels, seg.region_count)


@njit(cache=True, parallel=True)
def _mean_shift_filter(lab, h_s, h_r, radius, max_iter, tol):
    height, width = lab.shape[:2]
    modes = np.empty((height, width, 5))
    hs2 = h_s * h_s
    hr2 = h_r * h_r
    tol2 = tol * tol
    for p in prange(height * width):
        y0 = p // width
        x0 = p % width
        cx = float(x0)
        cy = float(y0)
        c0 = lab[y0, x0, 0]
        c1 = lab[y0, x0, 1]
        c2 = lab[y0, x0, 2]
        for _ in range(max_iter):
            sx = 0.0
            sy = 0.0
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            n = 0
            ylo = int(cy) - radius
            if ylo < 0:
                ylo = 0
            yhi = int(cy) + radius
            if yhi > height - 1:
                yhi = height - 1
            xlo = int(cx) - radius
            if xlo < 0:
                xlo = 0
            xhi = int(cx) + radius
            if xhi > width - 1:
                xhi = width - 1
            for yy in range(ylo, yhi + 1):
                dy = yy - cy
                for xx in range(xlo, xhi + 1):
                    dx = xx - cx
                    if dx * dx + dy * dy > hs2:
                        continue
                    d0 = lab[yy, xx, 0] - c0
                    d1 = lab[yy, xx, 1] - c1
                    d2 = lab[yy, xx, 2] - c2
                    if d0 * d0 + d1 * d1 + d2 * d2 > hr2:
                        continue
                    sx += xx
                    sy += yy
                    s0 += lab[yy, xx, 0]
                    s1 += lab[yy, xx, 1]
                    s2 += lab[yy, xx, 2]
                    n += 1
            if n == 0:
                break
            nx = sx / n
            ny = sy / n
            n0 = s0 / n
            n1 = s1 / n
            n2 = s2 / n
            disp2 = (
                (nx - cx) ** 2
                + (ny - cy) ** 2
                + (n0 - c0) ** 2
                + (n1 - c1) ** 2
                + (n2 - c2) ** 2
            )
            cx = nx
            cy = ny
            c0 = n0
            c1 = n1
            c2 = n2
            if disp2 < tol2:
                break
        modes[y0, x0, 0] = cx
        modes[y0, x0, 1] = cy
        modes[y0, x0, 2] = c0
        modes[y0, x0, 3] = c1
        modes[y0, x0, 4] = c2
    return modes


@njit(cache=True)
def _find_root(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit(cache=True)
def _cluster_modes(modes, h_s, h_r):
    """4-connected components of pixels whose modes agree within both windows."""
    height, width = modes.shape[:2]
    n = height * width
    parent = np.arange(n, dtype=np.int64)
    hs2 = h_s * h_s
    hr2 = h_r * h_r
    for y in range(height):
        for x in range(width):
            p = y * width + x
            for k in range(2):
                if k == 0:
                    if x + 1 >= width:
                        continue
                    y2, x2 = y, x + 1
                else:
                    if y + 1 >= height:
                        continue
                    y2, x2 = y + 1, x
                dx = modes[y, x, 0] - modes[y2, x2, 0]
                dy = modes[y, x, 1] - modes[y2, x2, 1]
                if dx * dx + dy * dy >= hs2:
                    continue
                d0 = modes[y, x, 2] - modes[y2, x2, 2]
                d1 = modes[y, x, 3] - modes[y2, x2, 3]
                d2 = modes[y, x, 4] - modes[y2, x2, 4]
                if d0 * d0 + d1 * d1 + d2 * d2 >= hr2:
                    continue
                ra = _find_root(parent, p)
                rb = _find_root(parent, y2 * width + x2)
                if ra != rb:
                    parent[rb] = ra
    labels = np.empty((height, width), dtype=np.int32)
    root_label = np.full(n, -1, dtype=np.int64)
    next_label = 0
    for y in range(height):
        for x in range(width):
            r = _find_root(parent, y * width + x)
            if root_label[r] < 0:
                root_label[r] = next_label
                next_label += 1
            labels[y, x] = root_label[r]
    return labels, next_label


def _merge_small_regions(labels, m, lab_img, min_size):
    """Fold regions below min_size into the adjacent region of nearest mean Lab.

    Smallest region first, ties to the lowest id; repeats until every
    surviving region meets min_size or one region remains.
    """
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=m).astype(np.int64)
    sums = np.zeros((m, 3))
    for c in range(3):
        sums[:, c] = np.bincount(flat, weights=lab_img[:, :, c].ravel(), minlength=m)

    adj = [set() for _ in range(m)]
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        pairs = np.stack([a.ravel(), b.ravel()], axis=1)
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        for i, j in np.unique(pairs, axis=0):
            adj[i].add(int(j))
            adj[j].add(int(i))

    parent = np.arange(m, dtype=np.int64)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return int(i)

    alive = set(range(m))
    while len(alive) > 1:
        candidates = [r for r in alive if sizes[r] < min_size]
        if not candidates:
            break
        r = min(candidates, key=lambda i: (sizes[i], i))
        if not adj[r]:
            break
        mean_r = sums[r] / sizes[r]
        target = min(
            adj[r],
            key=lambda t: (float(np.sum((sums[t] / sizes[t] - mean_r) ** 2)), t),
        )
        parent[r] = target
        sizes[target] += sizes[r]
        sums[target] += sums[r]
        alive.discard(r)
        for q in adj[r]:
            adj[q].discard(r)
            if q != target:
                adj[q].add(target)
                adj[target].add(q)
        adj[target].discard(target)
        adj[r] = set()

    root_of = np.array([find(i) for i in range(m)], dtype=np.int64)
    merged = root_of[flat]
    uniq, first = np.unique(merged, return_index=True)
    remap = np.empty(m, dtype=np.int64)
    remap[uniq[np.argsort(first)]] = np.arange(len(uniq))
    return remap[merged].reshape(labels.shape).astype(np.int32), len(uniq)


def mean_shift_segment(lab: np.ndarray, params: MeanShiftParams = MeanShiftParams()) -> Segmentation:
    """Segment a CIELAB image into superpixels.

    Deterministic for fixed inputs: filtering is per-pixel independent and
    clustering, merging, and label assignment use fixed scan order.
    """
    lab = np.ascontiguousarray(lab, dtype=np.float64)
    if lab.ndim != 3 or lab.shape[2] != 3:
        raise ValueError("mean_shift_segment expects a (H, W, 3) Lab raster")
    radius = int(np.ceil(params.spatial_bandwidth))
    modes = _mean_shift_filter(
        lab,
        params.spatial_bandwidth,
        params.range_bandwidth,
        radius,
        params.max_iterations,
        params.tolerance,
    )
    labels, m = _cluster_modes(
        modes, params.spatial_bandwidth, params.range_bandwidth
    )
    labels, m = _merge_small_regions(labels, m, lab, params.min_region_size)
    return Segmentation.from_labels(labels)
