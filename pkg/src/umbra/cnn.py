"""Patch-level shadow network: 6 conv layers, 2 max-pools, 1 FC layer.

Maps a 32x32x4 RGBP patch to 1024 per-pixel shadow probabilities
(logistic outputs reshaped to 32x32). Convolutions are 3x3 with same
padding and ReLU; pooling is 2x2/2. Implemented with im2col matrix
multiplies; training runs in float64 for oracle comparability, inference
may run in float32.
"""

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import modelfile
from .errors import ConvergenceError
from .imageio import PATCH_SIZE, patch_origin

LOSS_EPS = 1e-7
_PROB_EPS = 1e-12

PATCH_CLASSES = ("shadow", "non-shadow", "shadow-edge")


@dataclass(frozen=True)
class Architecture:
    conv_channels: tuple = (32, 32, 64, 64, 128, 128)
    in_channels: int = 4
    patch_size: int = PATCH_SIZE

    @property
    def fc_in(self):
        return (self.patch_size // 4) ** 2 * self.conv_channels[5]

    @property
    def out_units(self):
        return self.patch_size * self.patch_size

    def fingerprint(self) -> str:
        c = self.conv_channels
        return (
            f"in{self.patch_size}x{self.patch_size}x{self.in_channels}"
            f"|conv3x3x{c[0]}|conv3x3x{c[1]}|pool2"
            f"|conv3x3x{c[2]}|conv3x3x{c[3]}|pool2"
            f"|conv3x3x{c[4]}|conv3x3x{c[5]}"
            f"|fc{self.fc_in}x{self.out_units}|sigmoid"
        )


@dataclass
class CnnModel:
    arch: Architecture
    params: dict  # name -> float64 ndarray
    meta: dict = field(default_factory=dict)

    def param_names(self):
        return list(self.params.keys())


@dataclass
class TrainingPatch:
    patch: np.ndarray  # (32, 32, 4) float64 in [0, 1]
    target: np.ndarray  # (32, 32) float64 binary
    label: str  # one of PATCH_CLASSES


@dataclass(frozen=True)
class TrainingSchedule:
    epochs: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64


def init_model(arch: Architecture = Architecture(), seed: int = 0) -> CnnModel:
    """He-style fan-in scaled normal init with a seeded generator."""
    rng = np.random.default_rng(seed)
    params = {}
    cin = arch.in_channels
    for i, cout in enumerate(arch.conv_channels):
        fan_in = 9 * cin
        params[f"conv{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (3, 3, cin, cout))
        params[f"conv{i}_b"] = np.zeros(cout)
        cin = cout
    params["fc_w"] = rng.normal(0.0, np.sqrt(2.0 / arch.fc_in), (arch.fc_in, arch.out_units))
    params["fc_b"] = np.zeros(arch.out_units)
    return CnnModel(arch=arch, params=params, meta={"seed": seed})


@njit(cache=True)
def _im2col(xp, cols, h, wd, c):
    """Window gather in (kh, kw, channel) order; beats the equivalent numpy
    strided transpose-copy by >2x on one core."""
    n = xp.shape[0]
    for i in range(n):
        for y in range(h):
            for x in range(wd):
                row = (i * h + y) * wd + x
                k = 0
                for kh in range(3):
                    for kw in range(3):
                        base = k * c
                        for ch in range(c):
                            cols[row, base + ch] = xp[i, y + kh, x + kw, ch]
                        k += 1


def _conv_same(x, w, b):
    n, h, wd, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n * h * wd, 9 * cin), dtype=x.dtype)
    _im2col(xp, cols, h, wd, cin)
    out = cols @ w.reshape(9 * cin, -1)
    return out.reshape(n, h, wd, -1) + b, cols


def _conv_backward(cols, w, x_shape, dy):
    n, h, wd, cin = x_shape
    cout = dy.shape[-1]
    dy_mat = dy.reshape(n * h * wd, cout)
    dw = (cols.T @ dy_mat).reshape(3, 3, cin, cout)
    db = dy_mat.sum(axis=0)
    dcols = (dy_mat @ w.reshape(9 * cin, cout).T).reshape(n, h, wd, 3, 3, cin)
    dxp = np.zeros((n, h + 2, wd + 2, cin), dtype=dy.dtype)
    for kh in range(3):
        for kw in range(3):
            dxp[:, kh : kh + h, kw : kw + wd, :] += dcols[:, :, :, kh, kw, :]
    return dxp[:, 1 : h + 1, 1 : wd + 1, :], dw, db


def _pool2(x):
    n, h, wd, c = x.shape
    r = x.reshape(n, h // 2, 2, wd // 2, 2, c)
    flat = r.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, wd // 2, c, 4)
    idx = flat.argmax(axis=4)  # ties go to the first cell
    out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]
    return out, idx


def _pool2_backward(idx, x_shape, dy):
    n, h, wd, c = x_shape
    dflat = np.zeros((n, h // 2, wd // 2, c, 4), dtype=dy.dtype)
    np.put_along_axis(dflat, idx[..., None], dy[..., None], axis=4)
    dr = dflat.reshape(n, h // 2, wd // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dr.reshape(n, h, wd, c)


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))


def _forward_pass(model, x, keep_cache):
    p = model.params
    cache = {"x_shapes": [], "cols": [], "acts": [], "pool_idx": []}
    a = x
    for i in range(6):
        z, cols = _conv_same(
            a,
            p[f"conv{i}_w"].astype(a.dtype, copy=False),
            p[f"conv{i}_b"].astype(a.dtype, copy=False),
        )
        a = np.maximum(z, 0.0)
        if keep_cache:
            cache["x_shapes"].append((a.shape[0],) + z.shape[1:3] + (p[f"conv{i}_w"].shape[2],))
            cache["cols"].append(cols)
            cache["acts"].append(a)
        if i in (1, 3):
            a, idx = _pool2(a)
            if keep_cache:
                cache["pool_idx"].append((idx, (a.shape[0], a.shape[1] * 2, a.shape[2] * 2, a.shape[3])))
    flat = a.reshape(a.shape[0], -1)
    logits = flat @ p["fc_w"].astype(a.dtype, copy=False) + p["fc_b"].astype(a.dtype, copy=False)
    if keep_cache:
        cache["flat"] = flat
        cache["pre_flat_shape"] = a.shape
    probs = _sigmoid(logits.astype(np.float64))
    probs = np.clip(probs, _PROB_EPS, 1.0 - _PROB_EPS)
    n = x.shape[0]
    ps = model.arch.patch_size
    return probs.reshape(n, ps, ps), cache


def cast_model(model: CnnModel, dtype) -> CnnModel:
    """Model copy with parameters cast to dtype (float32 for fast inference)."""
    return CnnModel(
        arch=model.arch,
        params={k: v.astype(dtype) for k, v in model.params.items()},
        meta=dict(model.meta),
    )


def conv_flat(model: CnnModel, patches: np.ndarray, chunk: int = 48) -> np.ndarray:
    """Flattened conv-stack features for a batch, before the FC layer.

    Chunked with per-layer buffers reused across chunks (fresh large
    allocations per chunk dominate single-core runtime otherwise); bias,
    ReLU, and pooling run in place. The FC layer is applied separately
    (fc_probs / fc_probs_columns) so large batches share one multiply.
    """
    p = model.params
    dtype = patches.dtype
    n = patches.shape[0]
    ps = model.arch.patch_size
    widths = model.arch.conv_channels
    out = np.empty((n, model.arch.fc_in), dtype=dtype)

    weights = [p[f"conv{i}_w"].astype(dtype, copy=False).reshape(-1, widths[i])
               for i in range(6)]
    biases = [p[f"conv{i}_b"].astype(dtype, copy=False) for i in range(6)]
    sizes = [ps, ps, ps // 2, ps // 2, ps // 4, ps // 4]
    chans_in = [model.arch.in_channels] + list(widths[:5])
    padded = [np.zeros((chunk, h + 2, h + 2, c), dtype=dtype)
              for h, c in zip(sizes, chans_in)]
    cols = [np.empty((chunk * h * h, 9 * c), dtype=dtype)
            for h, c in zip(sizes, chans_in)]
    acts = [np.empty((chunk * h * h, w), dtype=dtype)
            for h, w in zip(sizes, widths)]
    pools = [np.empty((chunk, h // 2, h // 2, w), dtype=dtype)
             for h, w in ((sizes[1], widths[1]), (sizes[3], widths[3]))]

    for s in range(0, n, chunk):
        a = patches[s : s + chunk]
        k = a.shape[0]
        pool_i = 0
        for i in range(6):
            h = sizes[i]
            xp = padded[i][:k]
            xp[:, 1 : h + 1, 1 : h + 1, :] = a
            col = cols[i][: k * h * h]
            _im2col(xp, col, h, h, chans_in[i])
            z = acts[i][: k * h * h]
            np.matmul(col, weights[i], out=z)
            z += biases[i]
            np.maximum(z, 0.0, out=z)
            a = z.reshape(k, h, h, widths[i])
            if i in (1, 3):
                view = a.reshape(k, h // 2, 2, h // 2, 2, widths[i])
                target = pools[pool_i][:k]
                np.max(view, axis=(2, 4), out=target)
                a = target
                pool_i += 1
        out[s : s + k] = a.reshape(k, -1)
    return out


def fc_probs(model: CnnModel, flat: np.ndarray) -> np.ndarray:
    """All 1024 output probabilities per row, float64 strictly inside (0,1)."""
    p = model.params
    logits = flat @ p["fc_w"].astype(flat.dtype, copy=False) + p["fc_b"].astype(
        flat.dtype, copy=False
    )
    probs = _sigmoid(logits.astype(np.float64))
    return np.clip(probs, _PROB_EPS, 1.0 - _PROB_EPS)


def fc_probs_columns(model: CnnModel, flat: np.ndarray, columns: np.ndarray) -> np.ndarray:
    """Probabilities at selected output positions only (one FC column each)."""
    p = model.params
    w = np.ascontiguousarray(p["fc_w"][:, columns]).astype(flat.dtype, copy=False)
    logits = flat @ w + p["fc_b"][columns].astype(flat.dtype, copy=False)
    probs = _sigmoid(logits.astype(np.float64))
    return np.clip(probs, _PROB_EPS, 1.0 - _PROB_EPS)


def forward(model: CnnModel, patch: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Shadow probability map(s) for one (32,32,4) patch or a (N,32,32,4) batch.

    Deterministic; probabilities are float64 strictly inside (0, 1).
    """
    x = np.asarray(patch)
    single = x.ndim == 3
    if single:
        x = x[None]
    ps, cin = model.arch.patch_size, model.arch.in_channels
    if x.shape[1:] != (ps, ps, cin):
        raise ValueError(f"expected patches of shape ({ps},{ps},{cin}), got {x.shape[1:]}")
    probs, _ = _forward_pass(model, np.ascontiguousarray(x, dtype=dtype), keep_cache=False)
    return probs[0] if single else probs


def loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean per-pixel negative log-likelihood with q clamped to [eps, 1-eps]."""
    q = np.clip(np.asarray(pred, dtype=np.float64), LOSS_EPS, 1.0 - LOSS_EPS)
    t = np.asarray(target, dtype=np.float64)
    if q.shape != t.shape:
        raise ValueError(f"shape mismatch: {q.shape} vs {t.shape}")
    return float(-np.mean(t * np.log(q) + (1.0 - t) * np.log(1.0 - q)))


def backward(model: CnnModel, patches: np.ndarray, targets: np.ndarray):
    """Loss and analytic parameter gradients for a batch (mean-loss scaling)."""
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    t = np.asarray(targets, dtype=np.float64).reshape(x.shape[0], -1)
    probs, cache = _forward_pass(model, x, keep_cache=True)
    q = probs.reshape(x.shape[0], -1)
    value = loss(q, t)
    # clamped pixels contribute zero gradient
    inside = (q > LOSS_EPS) & (q < 1.0 - LOSS_EPS)
    dlogits = np.where(inside, q - t, 0.0) / q.size

    grads = {}
    flat = cache["flat"]
    grads["fc_w"] = flat.T @ dlogits
    grads["fc_b"] = dlogits.sum(axis=0)
    da = (dlogits @ model.params["fc_w"].T).reshape(cache["pre_flat_shape"])
    pool_stack = list(cache["pool_idx"])
    for i in range(5, -1, -1):
        if i in (1, 3):
            idx, unpooled_shape = pool_stack.pop()
            da = _pool2_backward(idx, unpooled_shape, da)
        act = cache["acts"][i]
        dz = da * (act > 0.0)
        x_shape = cache["x_shapes"][i]
        da, dw, db = _conv_backward(cache["cols"][i], model.params[f"conv{i}_w"], x_shape, dz)
        grads[f"conv{i}_w"] = dw
        grads[f"conv{i}_b"] = db
    return value, grads


def train_cnn(data, schedule: TrainingSchedule = TrainingSchedule(),
              seed: int = 0, arch: Architecture = Architecture()) -> CnnModel:
    """Mini-batch SGD with momentum; bitwise-reproducible for a fixed seed.

    data is an iterable of TrainingPatch. Raises ConvergenceError if the
    loss turns non-finite.
    """
    items = list(data)
    if not items:
        raise ValueError("train_cnn: empty training data")
    patches = np.stack([np.asarray(it.patch, dtype=np.float64) for it in items])
    targets = np.stack([np.asarray(it.target, dtype=np.float64) for it in items])

    model = init_model(arch, seed)
    shuffle_rng = np.random.default_rng([seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    n = len(items)
    epoch_loss = float("nan")
    for epoch in range(schedule.epochs):
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for start in range(0, n, schedule.batch_size):
            sel = order[start : start + schedule.batch_size]
            value, grads = backward(model, patches[sel], targets[sel])
            if not np.isfinite(value):
                raise ConvergenceError(
                    f"training diverged (loss {value}) at epoch {epoch}, "
                    f"batch {start // schedule.batch_size}",
                    residual=value,
                )
            batch_losses.append(value)
            for k in model.params:
                velocity[k] = schedule.momentum * velocity[k] - schedule.learning_rate * grads[k]
                model.params[k] = model.params[k] + velocity[k]
        epoch_loss = float(np.mean(batch_losses))
    model.meta.update(
        seed=seed,
        epochs=schedule.epochs,
        learning_rate=schedule.learning_rate,
        momentum=schedule.momentum,
        batch_size=schedule.batch_size,
        final_loss=epoch_loss,
        n_patches=n,
    )
    return model


def _loss_and_relu_signature(model, x, t):
    """Loss plus a fingerprint of the ReLU activation pattern."""
    p = model.params
    a = x
    sig_parts = []
    for i in range(6):
        z, _ = _conv_same(a, p[f"conv{i}_w"], p[f"conv{i}_b"])
        sig_parts.append(np.packbits(z.ravel() > 0.0).tobytes())
        a = np.maximum(z, 0.0)
        if i in (1, 3):
            a, _ = _pool2(a)
    flat = a.reshape(a.shape[0], -1)
    logits = flat @ p["fc_w"] + p["fc_b"]
    probs = np.clip(_sigmoid(logits), _PROB_EPS, 1.0 - _PROB_EPS)
    return loss(probs.reshape(t.shape), t), b"".join(sig_parts)


def gradient_check(model: CnnModel, patch: np.ndarray, target: np.ndarray,
                   num_params: int = 200, step: float = 1e-3, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples num_params parameters spread across all tensors and perturbs
    each by +-step in float64. A sample whose perturbation interval
    crosses a ReLU boundary is resampled: the loss is only piecewise
    smooth and a finite difference across the kink does not estimate the
    derivative. Relative error uses max(|analytic|, |numeric|, 1e-8) as
    the denominator.
    """
    x = np.asarray(patch, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    t = np.asarray(target, dtype=np.float64).reshape(x.shape[0], -1)
    _, grads = backward(model, x, t)
    names = model.param_names()
    sizes = np.array([model.params[k].size for k in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)

    state = {"worst": 0.0, "checked": 0}

    def try_sample(name, local):
        param = model.params[name].ravel()
        orig = param[local]
        param[local] = orig + step
        up, sig_up = _loss_and_relu_signature(model, x, t)
        param[local] = orig - step
        down, sig_down = _loss_and_relu_signature(model, x, t)
        param[local] = orig
        if sig_up != sig_down:
            return False  # kink inside the interval: quotient invalid
        numeric = (up - down) / (2.0 * step)
        analytic = grads[name].ravel()[local]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        state["worst"] = max(state["worst"], abs(analytic - numeric) / denom)
        state["checked"] += 1
        return True

    # every layer type contributes at least two valid samples; early conv
    # tensors often have no kink-free interval, later ones of the same
    # type do
    by_type = {}
    for name in names:
        kind = ("conv_w" if name.startswith("conv") and name.endswith("_w") else
                "conv_b" if name.startswith("conv") else
                "fc_w" if name == "fc_w" else "fc_b")
        by_type.setdefault(kind, []).append(name)
    for kind, members in by_type.items():
        collected = 0
        for _ in range(200):
            name = members[int(rng.integers(len(members)))]
            if try_sample(name, int(rng.integers(model.params[name].size))):
                collected += 1
                if collected >= 2:
                    break
        else:
            raise ConvergenceError(
                f"no kink-free perturbation found for layer type {kind}",
                residual=state["worst"],
            )

    target_count = min(num_params, total)
    bounds = np.cumsum(sizes)
    attempts = 0
    while state["checked"] < target_count and attempts < 50 * target_count:
        attempts += 1
        flat_idx = int(rng.integers(total))
        t_idx = int(np.searchsorted(bounds, flat_idx, side="right"))
        local = flat_idx - (0 if t_idx == 0 else int(bounds[t_idx - 1]))
        try_sample(names[t_idx], local)
    if state["checked"] < target_count:
        raise ConvergenceError(
            f"could not collect {target_count} kink-free samples "
            f"({state['checked']} found)", residual=state["worst"],
        )
    return state["worst"]


def sample_patches(img: np.ndarray, prior: np.ndarray, gt: np.ndarray,
                   per_class: int, seed: int) -> list:
    """Draw balanced shadow / non-shadow / shadow-edge training patches.

    shadow: center in GT shadow and window shadow fraction >= 0.70;
    non-shadow: window fraction <= 0.01; shadow-edge: center within 2 px
    (Euclidean) of a GT transition. Non-empty classes are trimmed to a
    common count; images without shadow simply yield no shadow/edge
    patches.
    """
    from scipy.ndimage import distance_transform_edt

    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    gt = np.asarray(gt, dtype=bool)
    height, width = gt.shape
    if img.shape[:2] != gt.shape or prior.shape != gt.shape:
        raise ValueError("image, prior, and ground truth dimensions must match")
    if height < PATCH_SIZE or width < PATCH_SIZE:
        raise ValueError(f"image smaller than {PATCH_SIZE}x{PATCH_SIZE}")

    # window shadow fraction at the clamped origin of every center
    integral = np.zeros((height + 1, width + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(gt, axis=0), axis=1)
    ox = np.clip(np.arange(width) - PATCH_SIZE // 2, 0, width - PATCH_SIZE)
    oy = np.clip(np.arange(height) - PATCH_SIZE // 2, 0, height - PATCH_SIZE)
    oyg, oxg = np.meshgrid(oy, ox, indexing="ij")
    window_sum = (
        integral[oyg + PATCH_SIZE, oxg + PATCH_SIZE]
        - integral[oyg, oxg + PATCH_SIZE]
        - integral[oyg + PATCH_SIZE, oxg]
        + integral[oyg, oxg]
    )
    frac = window_sum / float(PATCH_SIZE * PATCH_SIZE)

    transition = np.zeros_like(gt)
    horiz = gt[:, :-1] != gt[:, 1:]
    transition[:, :-1] |= horiz
    transition[:, 1:] |= horiz
    vert = gt[:-1, :] != gt[1:, :]
    transition[:-1, :] |= vert
    transition[1:, :] |= vert
    if transition.any():
        dist = distance_transform_edt(~transition)
    else:
        dist = np.full(gt.shape, np.inf)

    masks = {
        "shadow": gt & (frac >= 0.70),
        "non-shadow": frac <= 0.01,
        "shadow-edge": dist <= 2.0,
    }
    rng = np.random.default_rng(seed)
    picks = {}
    for name in PATCH_CLASSES:
        candidates = np.flatnonzero(masks[name].ravel())
        if candidates.size == 0:
            picks[name] = candidates
        else:
            k = min(per_class, candidates.size)
            picks[name] = rng.choice(candidates, size=k, replace=False)
    counts = [len(p) for p in picks.values() if len(p) > 0]
    if not counts:
        return []
    keep = min(counts)

    img_f = np.asarray(img, dtype=np.float64) / 255.0
    out = []
    for name in PATCH_CLASSES:
        for flat in picks[name][:keep]:
            y, x = divmod(int(flat), width)
            px, py = patch_origin(width, height, (x, y))
            patch = np.empty((PATCH_SIZE, PATCH_SIZE, 4))
            patch[:, :, :3] = img_f[py : py + PATCH_SIZE, px : px + PATCH_SIZE, :3]
            patch[:, :, 3] = prior[py : py + PATCH_SIZE, px : px + PATCH_SIZE]
            target = gt[py : py + PATCH_SIZE, px : px + PATCH_SIZE].astype(np.float64)
            out.append(TrainingPatch(patch=patch, target=target, label=name))
    return out


def save_cnn_model(model: CnnModel, path) -> None:
    meta = dict(model.meta)
    meta["fingerprint"] = model.arch.fingerprint()
    meta["conv_channels"] = list(model.arch.conv_channels)
    meta["in_channels"] = model.arch.in_channels
    meta["patch_size"] = model.arch.patch_size
    modelfile.write_sections(path, {"cnn": (meta, dict(model.params))})


def load_cnn_model(path) -> CnnModel:
    sections = modelfile.read_sections(path)
    if "cnn" not in sections:
        raise ValueError(f"{path}: missing cnn section")
    meta, arrays = sections["cnn"]
    arch = Architecture(
        conv_channels=tuple(meta["conv_channels"]),
        in_channels=meta["in_channels"],
        patch_size=meta["patch_size"],
    )
    if meta.get("fingerprint") != arch.fingerprint():
        raise ValueError(
            f"{path}: architecture fingerprint {meta.get('fingerprint')!r} does "
            f"not match this build ({arch.fingerprint()!r})"
        )
    expected = init_model(arch, seed=0).params
    for name, ref in expected.items():
        if name not in arrays or arrays[name].shape != ref.shape:
            raise ValueError(f"{path}: tensor {name} missing or wrong shape")
    rest = {k: v for k, v in meta.items()
            if k not in ("fingerprint", "conv_channels", "in_channels", "patch_size")}
    return CnnModel(arch=arch, params={k: arrays[k] for k in expected}, meta=rest)
