import numpy as np
import pytest

from umbra.features import TextonDictionary, chi2_kernel_matrix
from umbra.prior import (
    dual_objective,
    fit_platt,
    label_regions,
    load_svm_model,
    platt_probability,
    save_svm_model,
    shadow_prior,
    solve_smo,
    svm_decision,
    train_svm,
)
from umbra.segmentation import MeanShiftParams, Segmentation, mean_shift_segment

C = 1.0
KKT_TOL = 1e-3


def random_histograms(rng, n, d=20):
    x = rng.random((n, d))
    return x / x.sum(axis=1, keepdims=True)


def _project_box_hyperplane(v, y, c):
    """Exact projection onto {0 <= a <= C, y.a = 0} by bisection."""

    def resid(lam):
        return float(np.clip(v - lam * y, 0.0, c) @ y)

    lo, hi = -1e4, 1e4
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if resid(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return np.clip(v - 0.5 * (lo + hi) * y, 0.0, c)


def projected_gradient_qp(kernel, y, c, iters=8000):
    """Brute-force projected-gradient solver for the SVM dual (test oracle)."""
    q = (y[:, None] * y[None, :]) * kernel
    step = 1.0 / (np.linalg.eigvalsh(q).max() + 1e-9)
    a = _project_box_hyperplane(np.zeros(len(y)), y, c)
    for _ in range(iters):
        a = _project_box_hyperplane(a - step * (q @ a - 1.0), y, c)
    return a


class TestLabelRegions:
    def make_seg(self):
        labels = np.zeros((8, 8), dtype=np.int32)
        labels[:, 4:] = 1
        return Segmentation.from_labels(labels)

    def test_full_shadow_region(self):
        seg = self.make_seg()
        gt = np.zeros((8, 8), dtype=bool)
        gt[:, 4:] = True
        out = label_regions(seg, gt)
        assert out[1].shadow_fraction == 1.0 and out[1].is_shadow
        assert out[0].shadow_fraction == 0.0 and not out[0].is_shadow

    def test_exact_half_is_nonshadow(self):
        seg = self.make_seg()
        gt = np.zeros((8, 8), dtype=bool)
        gt[:4, :] = True  # half of each region
        out = label_regions(seg, gt)
        assert out[0].shadow_fraction == 0.5 and not out[0].is_shadow

    def test_random_fractions_match_counting(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 3, (10, 10)).astype(np.int32)
        uniq, first = np.unique(labels.ravel(), return_index=True)
        remap = np.zeros(labels.max() + 1, dtype=np.int32)
        remap[uniq[np.argsort(first)]] = np.arange(len(uniq))
        seg = Segmentation.from_labels(remap[labels])
        gt = rng.random((10, 10)) > 0.5
        out = label_regions(seg, gt)
        for entry in out:
            count = 0
            for y in range(10):
                for x in range(10):
                    if seg.labels[y, x] == entry.region_id and gt[y, x]:
                        count += 1
            assert entry.shadow_fraction == pytest.approx(
                count / len(seg.regions[entry.region_id])
            )

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            label_regions(self.make_seg(), np.zeros((4, 4), dtype=bool))


class TestSmo:
    def test_two_point_symmetry(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        y = np.array([1.0, -1.0])
        kernel = chi2_kernel_matrix(x, x, gamma=1.0)
        alpha, bias, _ = solve_smo(kernel, y, C)
        assert alpha[0] == pytest.approx(alpha[1], abs=1e-9)
        assert alpha.min() > 0.0
        dec = (alpha * y) @ kernel + bias
        assert dec[0] > 0.0 > dec[1]
        assert dec[0] == pytest.approx(-dec[1], abs=1e-6)

    def test_dual_objective_matches_projected_gradient(self):
        rng = np.random.default_rng(17)
        for trial in range(3):
            x = random_histograms(rng, 20)
            y = np.where(rng.random(20) > 0.5, 1.0, -1.0)
            if len(np.unique(y)) < 2:
                y[0] = -y[0]
            kernel = chi2_kernel_matrix(x, x, gamma=1.0)
            alpha, _, _ = solve_smo(kernel, y, C)
            ref = projected_gradient_qp(kernel, y, C)
            ours = dual_objective(kernel, y, alpha)
            oracle = dual_objective(kernel, y, ref)
            assert ours == pytest.approx(oracle, rel=1e-3, abs=1e-6)

    def test_kkt_conditions_hold(self):
        rng = np.random.default_rng(23)
        x = random_histograms(rng, 30)
        y = np.where(x[:, 0] > np.median(x[:, 0]), 1.0, -1.0)
        kernel = chi2_kernel_matrix(x, x, gamma=1.0)
        alpha, bias, _ = solve_smo(kernel, y, C)
        dec = (alpha * y) @ kernel + bias
        margin = y * dec
        for i in range(30):
            if alpha[i] <= 1e-8:
                assert margin[i] >= 1.0 - KKT_TOL
            elif alpha[i] >= C - 1e-8:
                assert margin[i] <= 1.0 + KKT_TOL
            else:
                assert margin[i] == pytest.approx(1.0, abs=KKT_TOL)

    def test_alpha_constraints(self):
        rng = np.random.default_rng(29)
        x = random_histograms(rng, 24)
        y = np.where(rng.random(24) > 0.4, 1.0, -1.0)
        kernel = chi2_kernel_matrix(x, x, gamma=1.5)
        alpha, _, _ = solve_smo(kernel, y, C)
        assert alpha.min() >= 0.0 and alpha.max() <= C
        assert abs(alpha @ y) < 1e-6


class TestTrainSvm:
    def separable_data(self, rng, n=24, d=12):
        x = random_histograms(rng, n, d)
        y = np.where(np.arange(n) % 2 == 0, 1, -1)
        x[y > 0, 0] += 0.8  # concentrate mass in bin 0 for positives
        x = x / x.sum(axis=1, keepdims=True)
        return x, y

    def test_single_class_rejected(self):
        rng = np.random.default_rng(1)
        x = random_histograms(rng, 8)
        with pytest.raises(ValueError):
            train_svm(x, np.ones(8, dtype=int))

    def test_decision_matches_naive_summation(self):
        rng = np.random.default_rng(2)
        x, y = self.separable_data(rng)
        model = train_svm(x, y, seed=0)
        f = random_histograms(rng, 1, x.shape[1])[0]
        naive = model.bias
        for sv, coeff in zip(model.support_vectors, model.coeffs):
            dist = 0.0
            for a, b in zip(sv, f):
                if a + b > 0:
                    dist += (a - b) ** 2 / (a + b)
            naive += coeff * np.exp(-model.gamma * 0.5 * dist)
        assert svm_decision(model, f) == pytest.approx(naive, abs=1e-12)

    def test_nonbound_sv_on_margin(self):
        rng = np.random.default_rng(3)
        x, y = self.separable_data(rng)
        model = train_svm(x, y, seed=0)
        free = (np.abs(model.coeffs) > 1e-8) & (np.abs(model.coeffs) < C - 1e-8)
        assert free.any()
        dec = np.atleast_1d(svm_decision(model, model.support_vectors[free]))
        assert np.allclose(np.abs(dec), 1.0, atol=KKT_TOL + 1e-6)

    def test_duplicated_dataset_same_sign_pattern(self):
        rng = np.random.default_rng(4)
        x, y = self.separable_data(rng)
        grid = random_histograms(rng, 15, x.shape[1])
        m1 = train_svm(x, y, seed=0)
        m2 = train_svm(np.concatenate([x, x]), np.concatenate([y, y]), seed=0,
                       gamma=m1.gamma)
        s1 = np.sign(svm_decision(m1, grid))
        s2 = np.sign(svm_decision(m2, grid))
        assert np.array_equal(s1, s2)

    def test_decision_dimension_mismatch(self):
        rng = np.random.default_rng(5)
        x, y = self.separable_data(rng)
        model = train_svm(x, y)
        with pytest.raises(ValueError):
            svm_decision(model, np.zeros(5))

    def test_sv_order_invariance(self):
        rng = np.random.default_rng(6)
        x, y = self.separable_data(rng)
        model = train_svm(x, y)
        f = random_histograms(rng, 1, x.shape[1])[0]
        base = svm_decision(model, f)
        perm = rng.permutation(len(model.coeffs))
        model.support_vectors = model.support_vectors[perm]
        model.coeffs = model.coeffs[perm]
        assert abs(svm_decision(model, f) - base) < 1e-12


class TestPlatt:
    def test_monotone_and_bounded(self):
        rng = np.random.default_rng(7)
        dec = np.concatenate([rng.normal(1.2, 0.4, 30), rng.normal(-1.2, 0.4, 30)])
        labels = np.concatenate([np.ones(30), -np.ones(30)])
        a, b = fit_platt(dec, labels)
        grid = np.linspace(-4, 4, 41)
        probs = platt_probability(a, b, grid)
        assert (np.diff(probs) > 0).all()
        assert probs.min() > 0.0 and probs.max() < 1.0
        assert probs[-1] > 0.8 and probs[0] < 0.2


class TestShadowPrior:
    def build_pipeline(self, rng):
        """Tiny separable world: dark textured half = shadow."""
        from umbra.features import build_texton_dictionary, filter_responses, region_feature_matrix
        from umbra.imageio import rgb_to_lab
        from umbra.prior import RegionLabel

        params = MeanShiftParams(min_region_size=20)
        images, gts = [], []
        for _ in range(4):
            img = np.empty((48, 48, 3), dtype=np.uint8)
            bright = rng.integers(150, 200)
            dark = rng.integers(20, 60)
            img[:, :24] = dark
            img[:, 24:] = bright
            img = (img.astype(np.int64) + rng.integers(-6, 7, img.shape)).clip(0, 255)
            images.append(img.astype(np.uint8))
            gt = np.zeros((48, 48), dtype=bool)
            gt[:, :24] = True
            gts.append(gt)
        labs = [rgb_to_lab(i) for i in images]
        segs = [mean_shift_segment(lab, params) for lab in labs]
        dictionary = build_texton_dictionary(labs, k=4, seed=0)
        feats, labels = [], []
        for lab, seg, gt in zip(labs, segs, gts):
            feats.append(region_feature_matrix(lab, filter_responses(lab), dictionary, seg))
            labels.extend(label_regions(seg, gt))
        model = train_svm(np.concatenate(feats), labels, seed=0, dictionary=dictionary)
        return model, images, params

    def test_prior_properties_and_ordering(self):
        rng = np.random.default_rng(31)
        model, images, params = self.build_pipeline(rng)
        from umbra.imageio import rgb_to_lab

        img = images[0]
        seg = mean_shift_segment(rgb_to_lab(img), params)
        prior = shadow_prior(model, img, seg)
        assert prior.shape == img.shape[:2]
        assert prior.min() >= 0.0 and prior.max() <= 1.0
        # piecewise constant per region
        for i, pixels in enumerate(seg.regions):
            vals = prior.ravel()[pixels]
            assert np.all(vals == vals[0])
        # dark (left) region probability above bright (right) region
        left = prior[24, 4]
        right = prior[24, 44]
        assert left > right

    def test_one_region_image_constant_map(self):
        rng = np.random.default_rng(32)
        model, images, params = self.build_pipeline(rng)
        img = np.full((48, 48, 3), 180, dtype=np.uint8)
        from umbra.imageio import rgb_to_lab

        seg = mean_shift_segment(rgb_to_lab(img), params)
        assert seg.region_count == 1
        prior = shadow_prior(model, img, seg)
        assert np.all(prior == prior[0, 0])


class TestModelIo:
    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        x = random_histograms(rng, 16)
        y = np.where(np.arange(16) % 2 == 0, 1, -1)
        x[y > 0, 0] += 0.5
        x = x / x.sum(axis=1, keepdims=True)
        dictionary = TextonDictionary(centers=rng.normal(0, 1, (4, 12)))
        model = train_svm(x, y, seed=3, dictionary=dictionary)
        path = tmp_path / "model.svm"
        save_svm_model(model, path)
        loaded = load_svm_model(path)
        assert np.array_equal(loaded.support_vectors, model.support_vectors)
        assert np.array_equal(loaded.coeffs, model.coeffs)
        assert loaded.bias == model.bias
        assert loaded.gamma == model.gamma
        assert loaded.platt_a == model.platt_a
        assert loaded.platt_b == model.platt_b
        assert np.array_equal(loaded.dictionary.centers, dictionary.centers)
        f = random_histograms(rng, 1, x.shape[1])[0]
        assert svm_decision(loaded, f) == svm_decision(model, f)
