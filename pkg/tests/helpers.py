"""Shared test fixtures: stub networks, oracles, and a minimal prior model."""

import numpy as np

from umbra.cnn import Architecture, init_model
from umbra.features import TextonDictionary
from umbra.prior import SvmModel

TINY_ARCH = Architecture(conv_channels=(2, 2, 3, 3, 4, 4))


def naive_forward(model, patch):
    """Direct-summation reference: explicit loops, no im2col (test oracle)."""
    a = np.asarray(patch, dtype=np.float64)
    for i in range(6):
        w = model.params[f"conv{i}_w"]
        b = model.params[f"conv{i}_b"]
        h, wd, cin = a.shape
        cout = w.shape[3]
        padded = np.pad(a, ((1, 1), (1, 1), (0, 0)))
        out = np.empty((h, wd, cout))
        for y in range(h):
            for x in range(wd):
                window = padded[y : y + 3, x : x + 3, :]
                for co in range(cout):
                    out[y, x, co] = b[co] + float(np.sum(window * w[:, :, :, co]))
        a = np.maximum(out, 0.0)
        if i in (1, 3):
            h2, w2 = a.shape[0] // 2, a.shape[1] // 2
            pooled = np.empty((h2, w2, a.shape[2]))
            for y in range(h2):
                for x in range(w2):
                    for c in range(a.shape[2]):
                        pooled[y, x, c] = a[2 * y : 2 * y + 2, 2 * x : 2 * x + 2, c].max()
            a = pooled
    flat = a.reshape(-1)
    logits = flat @ model.params["fc_w"] + model.params["fc_b"]
    probs = 1.0 / (1.0 + np.exp(-logits))
    return probs.reshape(model.arch.patch_size, model.arch.patch_size)


def zeroed_model(arch=TINY_ARCH):
    model = init_model(arch, seed=0)
    for k in model.params:
        model.params[k] = np.zeros_like(model.params[k])
    return model


def constant_output_model(value, arch=TINY_ARCH):
    """Zero weights, FC bias at logit(value): every output equals value."""
    model = zeroed_model(arch)
    model.params["fc_b"][:] = np.log(value / (1.0 - value))
    return model


def ramp_output_model(pattern, arch=TINY_ARCH):
    """Zero weights, FC bias at logit(pattern): output is the fixed 32x32 map."""
    model = zeroed_model(arch)
    model.params["fc_b"][:] = np.log(pattern / (1.0 - pattern)).ravel()
    return model


def constant_prior_svm(prob=0.5, texton_k=4):
    """SvmModel whose prior map is the constant prob for any image."""
    rng = np.random.default_rng(0)
    dim = 63 + texton_k
    sv = rng.random((1, dim))
    sv /= sv.sum()
    decision_bias = np.log((1.0 - prob) / prob)  # platt(a=1, b=0) inverts this
    return SvmModel(
        support_vectors=sv,
        coeffs=np.zeros(1),
        bias=float(decision_bias),
        gamma=1.0,
        platt_a=1.0,
        platt_b=0.0,
        dictionary=TextonDictionary(centers=rng.normal(0, 1, (texton_k, 12))),
        meta={},
    )
