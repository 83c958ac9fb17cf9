"""Dataset-level training orchestration for the SVM prior and the CNN."""

import hashlib
import logging
from pathlib import Path

import numpy as np

from .cnn import (
    Architecture,
    PATCH_CLASSES,
    TrainingSchedule,
    sample_patches,
    train_cnn,
)
from .evaluation import DatasetIndex, load_mask
from .features import (
    build_texton_dictionary,
    filter_responses,
    region_feature_matrix,
)
from .imageio import decode_image, rgb_to_lab
from .prior import SvmModel, label_regions, shadow_prior, train_svm
from .segmentation import MeanShiftParams, mean_shift_segment

log = logging.getLogger("umbra")

TEXTON_COUNT = 64


def dataset_fingerprint(index: DatasetIndex) -> str:
    h = hashlib.sha256()
    for img_path, mask_path in index.pairs:
        for p in (img_path, mask_path):
            if p is not None:
                p = Path(p)
                h.update(f"{p.name}:{p.stat().st_size};".encode())
    return h.hexdigest()[:16]


def _load_pair(img_path, mask_path):
    img = decode_image(Path(img_path).read_bytes())
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    gt = load_mask(mask_path)
    if gt.shape != img.shape[:2]:
        raise ValueError(f"{mask_path}: mask does not match image dimensions")
    return img, gt


def train_svm_from_dataset(index: DatasetIndex, params: MeanShiftParams = MeanShiftParams(),
                           texton_k: int = TEXTON_COUNT, c: float = 1.0,
                           seed: int = 0) -> SvmModel:
    """Segment every training image, build the texton dictionary, and fit
    the region SVM on combined color+texture features."""
    labs, segs, gts = [], [], []
    for img_path, mask_path in index.pairs:
        img, gt = _load_pair(img_path, mask_path)
        lab = rgb_to_lab(img)
        labs.append(lab)
        segs.append(mean_shift_segment(lab, params))
        gts.append(gt)
    log.info("segmented %d training images", len(labs))

    dictionary = build_texton_dictionary(labs, texton_k, seed)
    log.info("texton dictionary ready (K=%d)", texton_k)

    feats, labels = [], []
    for lab, seg, gt in zip(labs, segs, gts):
        responses = filter_responses(lab)
        feats.append(region_feature_matrix(lab, responses, dictionary, seg))
        labels.extend(label_regions(seg, gt))
    features = np.concatenate(feats, axis=0)
    log.info("training SVM on %d regions", len(labels))
    return train_svm(
        features, labels, c=c, seed=seed, dictionary=dictionary,
        meta={"dataset_fingerprint": dataset_fingerprint(index),
              "texton_k": texton_k},
    )


def collect_training_patches(index: DatasetIndex, svm_model: SvmModel,
                             params: MeanShiftParams = MeanShiftParams(),
                             per_class: int = 50, seed: int = 0) -> list:
    """Sample patches from every image and balance classes dataset-wide."""
    all_patches = []
    for i, (img_path, mask_path) in enumerate(index.pairs):
        img, gt = _load_pair(img_path, mask_path)
        lab = rgb_to_lab(img)
        seg = mean_shift_segment(lab, params)
        prior = shadow_prior(svm_model, img, seg, lab=lab)
        all_patches.extend(sample_patches(img, prior, gt, per_class, seed + 7919 * i))

    by_class = {name: [p for p in all_patches if p.label == name] for name in PATCH_CLASSES}
    counts = [len(v) for v in by_class.values() if v]
    if not counts:
        raise ValueError("no training patches could be sampled from the dataset")
    keep = min(counts)
    rng = np.random.default_rng([seed, 2])
    balanced = []
    for name in PATCH_CLASSES:
        group = by_class[name]
        if not group:
            continue
        order = rng.permutation(len(group))[:keep]
        balanced.extend(group[j] for j in order)
    log.info("balanced patch set: %d per class, %d total", keep, len(balanced))
    return balanced


def train_cnn_from_dataset(index: DatasetIndex, svm_model: SvmModel,
                           params: MeanShiftParams = MeanShiftParams(),
                           per_class: int = 50, seed: int = 0,
                           schedule: TrainingSchedule = TrainingSchedule(),
                           arch: Architecture = Architecture()):
    patches = collect_training_patches(index, svm_model, params, per_class, seed)
    model = train_cnn(patches, schedule, seed=seed, arch=arch)
    model.meta["dataset_fingerprint"] = dataset_fingerprint(index)
    return model
