"""Fast two-stage shadow detection.

A region-level SVM on color and texture histograms produces a shadow
prior map; a 32x32 RGBP patch CNN is then evaluated only at superpixel
centroids and at the boundary pixels of high-scoring regions, cutting CNN
invocations by orders of magnitude against per-pixel sliding windows.
"""

from .cnn import (
    Architecture,
    CnnModel,
    TrainingSchedule,
    forward,
    gradient_check,
    load_cnn_model,
    sample_patches,
    save_cnn_model,
    train_cnn,
)
from .detector import (
    DetectionResult,
    DetectorConfig,
    binarize,
    detect,
    filter_regions,
    refine_edges,
    region_predict,
)
from .errors import ConvergenceError, DecodeError, UmbraError
from .evaluation import (
    ConfusionCounts,
    DatasetIndex,
    MetricReport,
    benchmark,
    confusion,
    generate_synthetic,
    load_dataset,
    metrics,
    split_index,
)
from .features import (
    TextonDictionary,
    build_texton_dictionary,
    chi2_kernel,
    color_histogram,
    texton_histogram,
)
from .imageio import (
    decode_image,
    encode_image,
    extract_patch,
    load_image,
    rgb_to_lab,
    save_image,
)
from .prior import (
    SvmModel,
    label_regions,
    load_svm_model,
    save_svm_model,
    shadow_prior,
    svm_decision,
    train_svm,
)
from .segmentation import (
    MeanShiftParams,
    Segmentation,
    compute_boundary_pixels,
    mean_shift_segment,
    region_centroid,
)
from .training import train_cnn_from_dataset, train_svm_from_dataset

__version__ = "0.1.0"
