"""demreg: DEM-to-DEM registration with landmark graphs and fractal storage."""

from .dem_io import (
    DemGrid,
    SynthSpec,
    GaussianPeak,
    GaussianPit,
    Plane,
    Ripple,
    generate_synthetic,
    add_noise,
    parse_ascii_grid,
    write_ascii_grid,
    content_digest,
)
from .graph_match import (
    LandmarkGraph,
    Matching,
    build_graph,
    match_graphs,
    pad_dummy,
    select_class,
)
from .landmarks import (
    KnowledgeBase,
    Landmark,
    LandmarkClass,
    PyramidSignature,
    Thresholds,
    classify_cell,
    contour_anchors,
    detect_landmarks,
    group_major,
    pyramid_signature,
)
from .metrics import (
    DEFAULT_BINS,
    MetricsReport,
    cc,
    kld,
    mutual_information,
    psnr,
    robustness_eval,
)
from .register import (
    RegisterConfig,
    RegistrationResult,
    SimilarityTransform,
    estimate_transform,
    overlap_mask,
    register,
    resample,
)
from .fractal_codec import (
    BlockCode,
    CodecReport,
    DecodeResult,
    FractalCode,
    codec_report,
    decode,
    decode_details,
    deserialize,
    encode,
    serialize,
)

__all__ = [
    "DemGrid",
    "SynthSpec",
    "GaussianPeak",
    "GaussianPit",
    "Plane",
    "Ripple",
    "generate_synthetic",
    "add_noise",
    "parse_ascii_grid",
    "write_ascii_grid",
    "content_digest",
    "KnowledgeBase",
    "Landmark",
    "LandmarkClass",
    "PyramidSignature",
    "Thresholds",
    "classify_cell",
    "contour_anchors",
    "detect_landmarks",
    "group_major",
    "pyramid_signature",
    "LandmarkGraph",
    "Matching",
    "build_graph",
    "match_graphs",
    "pad_dummy",
    "select_class",
    "DEFAULT_BINS",
    "MetricsReport",
    "cc",
    "kld",
    "mutual_information",
    "psnr",
    "robustness_eval",
    "RegisterConfig",
    "RegistrationResult",
    "SimilarityTransform",
    "estimate_transform",
    "overlap_mask",
    "register",
    "resample",
    "BlockCode",
    "CodecReport",
    "DecodeResult",
    "FractalCode",
    "codec_report",
    "decode",
    "decode_details",
    "deserialize",
    "encode",
    "serialize",
]

__version__ = "0.1.0"
