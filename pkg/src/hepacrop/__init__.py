"""CT liver-lesion cropping, dataset construction, and scoring toolkit."""

from .volume_io import (
    AnnotationMask,
    RescaleParams,
    Volume,
    apply_rescale,
    parse_dicom_series,
    parse_nifti,
    write_nifti,
)
from .extract import (
    LesionComponent,
    LesionCrop,
    PreprocessConfig,
    connected_components_26,
    expand_bbox,
    open_slice,
    preprocess_patient,
    slice_included,
    square_crop_resample,
    window_hu,
)
from .dataset import (
    CLASSES_3,
    CLASSES_5,
    BalancedSample,
    CropRecord,
    MutationLabels,
    SplitPlan,
    balance_train,
    class_distribution,
    group_labels_3,
    label_correlation,
    make_split,
    validate_study,
)
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    PredictionSet,
    aggregate_ci,
    auc_binary,
    auc_ovr_weighted,
    binarize,
    f1_per_class,
    hamming,
    score_predictions,
    spec_sens,
)
from .synth import SynthConfig, synth_generate

__version__ = "0.1.0"
