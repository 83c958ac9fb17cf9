"""Region-level shadow classifier and the per-pixel shadow prior map.

A binary soft-margin SVM with the exponentiated chi-squared kernel is
trained by SMO on combined color+texture region features. Decision values
are calibrated to probabilities by Platt scaling fitted on out-of-fold
decisions (3-fold). The prior map writes each region's probability to all
of its pixels.
"""

from dataclasses import dataclass

import numpy as np

from . import modelfile
from .errors import ConvergenceError
from .features import (
    FILTER_BANK_VERSION,
    TextonDictionary,
    chi2_distance_matrix,
    chi2_kernel_matrix,
    filter_responses,
    region_feature_matrix,
)
from .imageio import rgb_to_lab

KKT_TOL = 1e-3
MAX_PAIR_UPDATES = 10**6


@dataclass
class RegionLabel:
    region_id: int
    shadow_fraction: float
    is_shadow: bool


@dataclass
class SvmModel:
    support_vectors: np.ndarray  # (n_sv, d)
    coeffs: np.ndarray  # (n_sv,) alpha_i * y_i
    bias: float
    gamma: float
    platt_a: float
    platt_b: float
    dictionary: TextonDictionary
    meta: dict


def label_regions(seg, gt_mask: np.ndarray) -> list:
    """Majority-vote region labels from a binary ground-truth mask.

    shadow iff shadow_fraction > 0.5; an exact 0.5 tie is non-shadow.
    """
    if gt_mask.shape != seg.labels.shape:
        raise ValueError(
            f"mask shape {gt_mask.shape} does not match labels {seg.labels.shape}"
        )
    flat = np.asarray(gt_mask, dtype=bool).ravel()
    out = []
    for i, pixels in enumerate(seg.regions):
        frac = float(flat[pixels].sum()) / len(pixels)
        out.append(RegionLabel(i, frac, frac > 0.5))
    return out


def solve_smo(kernel: np.ndarray, y: np.ndarray, c: float, tol: float = KKT_TOL,
              max_updates: int = MAX_PAIR_UPDATES):
    """SMO on the dual: min 1/2 a'Qa - e'a, 0 <= a <= C, y'a = 0.

    Working pair is the maximal violating pair; deterministic (argmax and
    argmin break ties at the lowest index). Returns (alpha, bias, updates).
    """
    n = len(y)
    y = np.asarray(y, dtype=np.float64)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of the dual objective at alpha = 0

    for update in range(max_updates + 1):
        neg_yg = -y * grad
        up = ((y > 0) & (alpha < c)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < c))
        up_vals = np.where(up, neg_yg, -np.inf)
        low_vals = np.where(low, neg_yg, np.inf)
        i = int(np.argmax(up_vals))
        j = int(np.argmin(low_vals))
        violation = up_vals[i] - low_vals[j]
        if violation <= tol:
            break
        if update == max_updates:
            raise ConvergenceError(
                f"SMO did not converge after {max_updates} pair updates; "
                f"remaining KKT violation {violation:.3e}",
                residual=float(violation),
            )
        quad = kernel[i, i] + kernel[j, j] - 2.0 * kernel[i, j]
        if quad <= 1e-12:
            quad = 1e-12
        step = violation / quad
        # feasible interval for t, where a_i += t*y_i and a_j -= t*y_j
        lo_i, hi_i = ((-alpha[i], c - alpha[i]) if y[i] > 0 else (alpha[i] - c, alpha[i]))
        lo_j, hi_j = ((alpha[j] - c, alpha[j]) if y[j] > 0 else (-alpha[j], c - alpha[j]))
        t = min(max(step, max(lo_i, lo_j)), min(hi_i, hi_j))
        if t == 0.0:
            break
        alpha[i] += t * y[i]
        alpha[j] -= t * y[j]
        grad += t * y * (kernel[:, i] - kernel[:, j])

    neg_yg = -y * grad
    free = (alpha > 1e-8) & (alpha < c - 1e-8)
    if free.any():
        bias = float(neg_yg[free].mean())
    else:
        up = ((y > 0) & (alpha < c)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < c))
        hi = neg_yg[up].max() if up.any() else 0.0
        lo = neg_yg[low].min() if low.any() else 0.0
        bias = float((hi + lo) / 2.0)
    return alpha, bias, update


def dual_objective(kernel, y, alpha) -> float:
    q = (y[:, None] * y[None, :]) * kernel
    return float(alpha.sum() - 0.5 * alpha @ q @ alpha)


def fit_platt(decisions: np.ndarray, labels: np.ndarray, max_iter: int = 100) -> tuple:
    """Platt's sigmoid fit A, B minimizing NLL of 1/(1+exp(A*d+B)).

    Newton iterations with backtracking; targets use the standard
    (N+1)/(N+2) smoothing.
    """
    d = np.asarray(decisions, dtype=np.float64)
    pos = np.asarray(labels) > 0
    prior1 = float(pos.sum())
    prior0 = float(len(d) - prior1)
    t = np.where(pos, (prior1 + 1.0) / (prior1 + 2.0), 1.0 / (prior0 + 2.0))
    a, b = 0.0, float(np.log((prior0 + 1.0) / (prior1 + 1.0)))

    def nll(a_, b_):
        f = a_ * d + b_
        # log(1 + exp(f)) computed stably; target t against p = 1/(1+exp(f))
        return float(np.sum(np.where(f >= 0, t * f + np.log1p(np.exp(-f)),
                                     (t - 1.0) * f + np.log1p(np.exp(f)))))

    best = nll(a, b)
    sigma = 1e-12
    for _ in range(max_iter):
        f = a * d + b
        p = np.where(f >= 0, np.exp(-f) / (1.0 + np.exp(-f)), 1.0 / (1.0 + np.exp(f)))
        w = p * (1.0 - p)
        g1 = float(np.sum(d * (t - p)))
        g2 = float(np.sum(t - p))
        if abs(g1) < 1e-10 and abs(g2) < 1e-10:
            break
        h11 = float(np.sum(d * d * w)) + sigma
        h22 = float(np.sum(w)) + sigma
        h12 = float(np.sum(d * w))
        det = h11 * h22 - h12 * h12
        da = -(h22 * g1 - h12 * g2) / det
        db = -(-h12 * g1 + h11 * g2) / det
        step = 1.0
        while step >= 1e-10:
            cand = nll(a + step * da, b + step * db)
            if cand < best + 1e-12:
                a += step * da
                b += step * db
                best = cand
                break
            step /= 2.0
        else:
            break
    return float(a), float(b)


def platt_probability(a: float, b: float, decision) -> np.ndarray:
    f = a * np.asarray(decision, dtype=np.float64) + b
    return np.where(f >= 0, np.exp(-f) / (1.0 + np.exp(-f)), 1.0 / (1.0 + np.exp(f)))


def train_svm(features: np.ndarray, labels, c: float = 1.0, seed: int = 0,
              dictionary: TextonDictionary = None, gamma: float = None,
              meta: dict = None) -> SvmModel:
    """Train the shadow SVM on region features.

    labels may be RegionLabel objects or +-1 integers. gamma defaults to
    1 / (mean chi-squared distance over distinct training pairs).
    """
    x = np.asarray(features, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")
    y = np.array(
        [1.0 if (l.is_shadow if isinstance(l, RegionLabel) else l > 0) else -1.0
         for l in labels]
    )
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain both classes")
    n = len(y)

    dist = chi2_distance_matrix(x, x)
    if gamma is None:
        off_sum = float(dist.sum())  # diagonal is zero
        gamma = float(n * (n - 1)) / off_sum if off_sum > 0 else 1.0
    kernel = np.exp(-gamma * dist)

    # out-of-fold decision values for Platt calibration
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    fold_dec, fold_lab = [], []
    for f in range(3):
        test_idx = perm[f::3]
        train_idx = np.setdiff1d(perm, test_idx)
        if len(np.unique(y[train_idx])) < 2 or len(test_idx) == 0:
            continue
        sub_k = kernel[np.ix_(train_idx, train_idx)]
        alpha_f, bias_f, _ = solve_smo(sub_k, y[train_idx], c)
        cross = kernel[np.ix_(train_idx, test_idx)]
        fold_dec.append((alpha_f * y[train_idx]) @ cross + bias_f)
        fold_lab.append(y[test_idx])

    alpha, bias, _ = solve_smo(kernel, y, c)
    if fold_dec:
        platt_a, platt_b = fit_platt(np.concatenate(fold_dec), np.concatenate(fold_lab))
    else:
        # degenerate tiny datasets: calibrate in-sample
        dec = (alpha * y) @ kernel + bias
        platt_a, platt_b = fit_platt(dec, y)

    sv = alpha > 1e-8
    model_meta = {"C": c, "seed": seed, "kkt_tol": KKT_TOL, "n_train": n}
    if meta:
        model_meta.update(meta)
    return SvmModel(
        support_vectors=x[sv].copy(),
        coeffs=(alpha * y)[sv].copy(),
        bias=float(bias),
        gamma=float(gamma),
        platt_a=platt_a,
        platt_b=platt_b,
        dictionary=dictionary,
        meta=model_meta,
    )


def svm_decision(model: SvmModel, f: np.ndarray):
    """Raw decision value(s): sum_i coeff_i k(sv_i, f) + bias."""
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    if f.shape[1] != model.support_vectors.shape[1]:
        raise ValueError(
            f"feature length {f.shape[1]} != support vector length "
            f"{model.support_vectors.shape[1]}"
        )
    k = chi2_kernel_matrix(f, model.support_vectors, model.gamma)
    dec = k @ model.coeffs + model.bias
    return float(dec[0]) if dec.shape[0] == 1 else dec


def shadow_prior(model: SvmModel, img: np.ndarray, seg, lab: np.ndarray = None) -> np.ndarray:
    """Per-pixel shadow prior map P in [0, 1], constant within each region.

    lab may be passed to reuse an existing CIELAB conversion.
    """
    if lab is None:
        lab = rgb_to_lab(img)
    responses = filter_responses(lab)
    feats = region_feature_matrix(lab, responses, model.dictionary, seg)
    dec = np.atleast_1d(svm_decision(model, feats))
    probs = platt_probability(model.platt_a, model.platt_b, dec)
    return probs[seg.labels]


def save_svm_model(model: SvmModel, path) -> None:
    meta = dict(model.meta)
    meta.update(
        bias=model.bias, gamma=model.gamma,
        platt_a=model.platt_a, platt_b=model.platt_b,
    )
    modelfile.write_sections(
        path,
        {
            "svm": (meta, {"support_vectors": model.support_vectors,
                           "coeffs": model.coeffs}),
            "textons": (
                {"filter_bank_version": model.dictionary.filter_bank_version},
                {"centers": model.dictionary.centers},
            ),
        },
    )


def load_svm_model(path) -> SvmModel:
    sections = modelfile.read_sections(path)
    if "svm" not in sections or "textons" not in sections:
        raise ValueError(f"{path}: missing svm/textons sections")
    meta, arrays = sections["svm"]
    tmeta, tarrays = sections["textons"]
    if tmeta["filter_bank_version"] != FILTER_BANK_VERSION:
        raise ValueError(
            f"{path}: texton dictionary built with filter bank "
            f"{tmeta['filter_bank_version']!r}, this build uses "
            f"{FILTER_BANK_VERSION!r}"
        )
    return SvmModel(
        support_vectors=arrays["support_vectors"],
        coeffs=arrays["coeffs"],
        bias=meta["bias"],
        gamma=meta["gamma"],
        platt_a=meta["platt_a"],
        platt_b=meta["platt_b"],
        dictionary=TextonDictionary(centers=tarrays["centers"]),
        meta={k: v for k, v in meta.items()
              if k not in ("bias", "gamma", "platt_a", "platt_b")},
    )
