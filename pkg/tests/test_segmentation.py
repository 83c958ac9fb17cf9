import numpy as np
import pytest

from umbra.segmentation import (
    MeanShiftParams,
    Segmentation,
    compute_boundary_pixels,
    compute_boundary_pixels_from_labels,
    mean_shift_segment,
    region_centroid,
)

PARAMS = MeanShiftParams()


def lab_image(l_map):
    lab = np.zeros(l_map.shape + (3,))
    lab[:, :, 0] = l_map
    return lab


def brute_force_boundary(labels):
    """Independent per-pixel 4-neighbor scan (test oracle)."""
    h, w = labels.shape
    out = [set() for _ in range(labels.max() + 1)]
    for y in range(h):
        for x in range(w):
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] != labels[y, x]:
                    out[labels[y, x]].add(y * w + x)
                    break
    return out


class TestMeanShift:
    def test_uniform_image_single_region(self):
        seg = mean_shift_segment(lab_image(np.full((64, 64), 50.0)), PARAMS)
        assert seg.region_count == 1
        assert len(seg.boundary_pixels[0]) == 0

    def test_two_halves_split(self):
        l_map = np.full((64, 64), 20.0)
        l_map[:, 32:] = 80.0
        seg = mean_shift_segment(lab_image(l_map), PARAMS)
        assert seg.region_count == 2
        boundary = np.zeros((64, 64), dtype=bool)
        for pixels in seg.boundary_pixels:
            boundary[np.unravel_index(pixels, (64, 64))] = True
        expected = np.zeros((64, 64), dtype=bool)
        expected[:, 31:33] = True
        assert np.array_equal(boundary, expected)

    def test_four_quadrants_against_flood_fill(self):
        l_map = np.zeros((64, 64))
        for q, (ys, xs, value) in enumerate(
            [
                (slice(0, 32), slice(0, 32), 10.0),
                (slice(0, 32), slice(32, 64), 40.0),
                (slice(32, 64), slice(0, 32), 70.0),
                (slice(32, 64), slice(32, 64), 100.0),
            ]
        ):
            l_map[ys, xs] = value
        seg = mean_shift_segment(lab_image(l_map), PARAMS)
        assert seg.region_count == 4
        assert sorted(len(r) for r in seg.regions) == [1024] * 4

        # oracle: flood fill on the quantized ground-truth quadrants
        gt_labels = np.zeros((64, 64), dtype=int)
        gt_labels[:32, 32:] = 1
        gt_labels[32:, :32] = 2
        gt_labels[32:, 32:] = 3
        oracle_parts = {
            frozenset(np.flatnonzero(gt_labels.ravel() == i)) for i in range(4)
        }
        seg_parts = {frozenset(map(int, r)) for r in seg.regions}
        assert seg_parts == oracle_parts

    def test_determinism(self):
        rng = np.random.default_rng(11)
        lab = lab_image(rng.uniform(0, 100, (48, 40)))
        a = mean_shift_segment(lab, PARAMS)
        b = mean_shift_segment(lab, PARAMS)
        assert np.array_equal(a.labels, b.labels)

    def test_partition_and_min_size(self):
        rng = np.random.default_rng(5)
        l_map = np.full((60, 60), 30.0)
        l_map[20:40, 20:40] = 80.0
        l_map += rng.normal(0, 2.0, l_map.shape)
        seg = mean_shift_segment(lab_image(l_map), PARAMS)
        assert sum(len(r) for r in seg.regions) == 3600
        assert np.array_equal(np.sort(np.concatenate(seg.regions)), np.arange(3600))
        counts = np.bincount(seg.labels.ravel(), minlength=seg.region_count)
        for i, pixels in enumerate(seg.regions):
            assert counts[i] == len(pixels)
            assert (seg.labels.ravel()[pixels] == i).all()
        if seg.region_count > 1:
            assert min(len(r) for r in seg.regions) >= PARAMS.min_region_size

    def test_params_validation(self):
        with pytest.raises(ValueError):
            MeanShiftParams(spatial_bandwidth=0.0)
        with pytest.raises(ValueError):
            MeanShiftParams(min_region_size=0)


class TestBoundary:
    def test_single_region_empty(self):
        seg = Segmentation.from_labels(np.zeros((8, 8), dtype=np.int32))
        assert all(len(b) == 0 for b in compute_boundary_pixels(seg))

    def test_vertical_split_count(self):
        labels = np.zeros((10, 16), dtype=np.int32)
        labels[:, 7:] = 1
        sets = compute_boundary_pixels_from_labels(labels, 2)
        assert len(sets[0]) + len(sets[1]) == 2 * 10
        xs = np.concatenate(sets) % 16
        assert set(xs.tolist()) == {6, 7}

    def test_random_labeling_matches_brute_force(self):
        rng = np.random.default_rng(9)
        raw = rng.integers(0, 5, (16, 16)).astype(np.int32)
        # compact ids so from_labels accepts them
        uniq, first = np.unique(raw.ravel(), return_index=True)
        remap = np.empty(raw.max() + 1, dtype=np.int32)
        remap[uniq[np.argsort(first)]] = np.arange(len(uniq))
        labels = remap[raw]
        m = labels.max() + 1
        sets = compute_boundary_pixels_from_labels(labels, m)
        oracle = brute_force_boundary(labels)
        for i in range(m):
            assert set(map(int, sets[i])) == oracle[i]

    def test_involution_stable(self):
        rng = np.random.default_rng(10)
        labels = (rng.random((12, 12)) > 0.5).astype(np.int32)
        if labels.max() == 0:
            labels[0, 0] = 1
        seg = Segmentation.from_labels(labels)
        first = compute_boundary_pixels(seg)
        second = compute_boundary_pixels(seg)
        for a, b in zip(first, second):
            assert np.array_equal(a, b)


class TestCentroid:
    def test_rectangle_round_half_down(self):
        labels = np.ones((12, 12), dtype=np.int32)
        labels[0:10, 0:10] = 0
        seg = Segmentation.from_labels(labels)
        assert region_centroid(seg, 0) == (4, 4)

    def test_single_pixel_region(self):
        labels = np.zeros((10, 10), dtype=np.int32)
        labels[7, 3] = 1
        seg = Segmentation.from_labels(labels)
        assert region_centroid(seg, 1) == (3, 7)

    def test_c_shape_falls_back_to_nearest(self):
        labels = np.zeros((9, 9), dtype=np.int32)
        labels[2:7, 2:7] = 1  # 5x5 block
        labels[3:6, 3:7] = 0  # hollow it, opening to the right
        seg = Segmentation.from_labels(labels)
        cx, cy = region_centroid(seg, 1)
        assert labels[cy, cx] == 1

        # oracle: brute-force nearest region pixel to the real-valued mean
        ys, xs = np.nonzero(labels == 1)
        mx, my = xs.mean(), ys.mean()
        assert labels[int(np.ceil(my - 0.5)), int(np.ceil(mx - 0.5))] != 1
        d2 = (xs - mx) ** 2 + (ys - my) ** 2
        best = np.argmin(d2)
        assert (cx, cy) == (xs[best], ys[best])

    def test_invalid_region_id(self):
        seg = Segmentation.from_labels(np.zeros((4, 4), dtype=np.int32))
        with pytest.raises(ValueError):
            region_centroid(seg, 1)

    def test_centroid_always_interior(self):
        rng = np.random.default_rng(21)
        l_map = rng.uniform(0, 100, (40, 40))
        seg = mean_shift_segment(lab_image(l_map), PARAMS)
        for i in range(seg.region_count):
            cx, cy = region_centroid(seg, i)
            assert seg.labels[cy, cx] == i
