"""Python bindings for the cqtnet cover-song identification toolkit.

Model configs are passed around as the same JSON strings the CLI reads.
"""

from ._cqtnet import (
    CQT_BINS,
    SAMPLE_RATE,
    Error,
    Model,
    ablation_config,
    compute_cqt,
    cosine_similarity,
    default_config,
    evaluate,
    extract_features,
    generate_corpus,
    gradient_suite,
    load_index,
    min_input_length,
    narrow_config,
    peak_bin,
    query,
    read_wav,
    receptive_field,
    resample,
    synth_melody,
    tempo_stretch,
    total_vertical_stride,
    write_wav,
)

__all__ = [
    "CQT_BINS",
    "SAMPLE_RATE",
    "Error",
    "Model",
    "ablation_config",
    "compute_cqt",
    "cosine_similarity",
    "default_config",
    "evaluate",
    "extract_features",
    "generate_corpus",
    "gradient_suite",
    "load_index",
    "min_input_length",
    "narrow_config",
    "peak_bin",
    "query",
    "read_wav",
    "receptive_field",
    "resample",
    "synth_melody",
    "tempo_stretch",
    "total_vertical_stride",
    "write_wav",
]
