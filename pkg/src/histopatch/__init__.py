"""Whole-slide-image toolkit: tissue-aware patch selection, rotation
multi-crop augmentation, a compact ViT encoder, and retrieval evaluation."""

from .augment import (
    CropSet,
    CropSpec,
    RotationPolicy,
    inscribed_side,
    make_crop_set,
    rotate_continuous,
    rotate_exact,
)
from .errors import (
    ClassTooSmall,
    CorruptImage,
    DegenerateBandwidth,
    DegenerateOutput,
    EmptyDensity,
    EmptyImage,
    EmptySet,
    HistopatchError,
    ImageTooSmall,
    InsufficientNeighbors,
    InsufficientSlides,
    LengthMismatch,
    ManifestMismatch,
    NoCandidates,
    NonFiniteOutput,
    NoTissue,
    OutOfBounds,
    ShapeMismatch,
    TruncatedBlob,
    UnsupportedFormat,
    ZeroArea,
)
from .model import (
    ForwardTrace,
    ModelConfig,
    WeightContainer,
    adapt_input_size,
    count_parameters,
    estimate_flops,
    forward,
    load_weights,
    random_weights,
    save_weights,
)
from .retrieval import (
    EmbeddingStore,
    ProbeResult,
    RetrievalResult,
    knn_leave_one_out,
    linear_probe_cv,
    load_store,
    macro_f1,
    save_store,
    wsi_distance,
    wsi_leave_one_out,
)
from .sampling import (
    CandidateSet,
    DensityModel,
    FpsConfig,
    PatchPlan,
    build_candidates,
    estimate_density,
    load_plan_records,
    run_fps,
    sample_plan,
    save_plan,
)
from .slide import (
    RegionRequest,
    SlideSource,
    map_to_slide,
    mask_scale,
    open_slide,
    parse_patch_filename,
    patch_filename,
    read_region,
)
from .tissue import (
    ContourSet,
    TissueMask,
    find_contours,
    luma,
    make_mask,
    otsu_threshold,
    save_contours_jsonl,
    save_pbm,
    tissue_ratio,
)

__version__ = "0.1.0"

__all__ = [
    "CandidateSet",
    "ClassTooSmall",
    "ContourSet",
    "CorruptImage",
    "CropSet",
    "CropSpec",
    "DegenerateBandwidth",
    "DegenerateOutput",
    "DensityModel",
    "EmbeddingStore",
    "EmptyDensity",
    "EmptyImage",
    "EmptySet",
    "ForwardTrace",
    "FpsConfig",
    "HistopatchError",
    "ImageTooSmall",
    "InsufficientNeighbors",
    "InsufficientSlides",
    "LengthMismatch",
    "ManifestMismatch",
    "ModelConfig",
    "NoCandidates",
    "NoTissue",
    "NonFiniteOutput",
    "OutOfBounds",
    "PatchPlan",
    "ProbeResult",
    "RegionRequest",
    "RetrievalResult",
    "RotationPolicy",
    "ShapeMismatch",
    "SlideSource",
    "TissueMask",
    "TruncatedBlob",
    "UnsupportedFormat",
    "WeightContainer",
    "ZeroArea",
    "adapt_input_size",
    "build_candidates",
    "count_parameters",
    "estimate_density",
    "estimate_flops",
    "find_contours",
    "forward",
    "inscribed_side",
    "knn_leave_one_out",
    "linear_probe_cv",
    "load_plan_records",
    "load_store",
    "load_weights",
    "luma",
    "macro_f1",
    "make_crop_set",
    "make_mask",
    "map_to_slide",
    "mask_scale",
    "open_slide",
    "otsu_threshold",
    "parse_patch_filename",
    "patch_filename",
    "random_weights",
    "read_region",
    "rotate_continuous",
    "rotate_exact",
    "run_fps",
    "sample_plan",
    "save_contours_jsonl",
    "save_pbm",
    "save_plan",
    "save_store",
    "save_weights",
    "tissue_ratio",
    "wsi_distance",
    "wsi_leave_one_out",
]
