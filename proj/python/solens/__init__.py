"""Python bindings for the solens core library."""

from ._solens import (
    FORMAT_TAG,
    FORMAT_VERSION,
    Error,
    IoError,
    Model,
    ModelSpec,
    NumericalError,
    ValidationError,
    average_precision,
    cli,
    fit_direction,
    omp,
    read_container,
    segmentation_metrics,
    upsample_bilinear,
    write_container,
)

__all__ = [
    "FORMAT_TAG",
    "FORMAT_VERSION",
    "Error",
    "IoError",
    "Model",
    "ModelSpec",
    "NumericalError",
    "ValidationError",
    "average_precision",
    "cli",
    "fit_direction",
    "omp",
    "read_container",
    "segmentation_metrics",
    "upsample_bilinear",
    "write_container",
]
