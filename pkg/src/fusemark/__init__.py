"""Function-coupled backdoor watermarking for image classifiers.

Triggers are fused from in-distribution images, embedded with random weight
masking during training, and verified through label-only queries.
"""

from fusemark.triggers import (
    LabeledImage,
    TriggerSpec,
    WatermarkKey,
    build_watermark_key,
    fuse_direct,
    fuse_invisible,
    load_key,
    save_key,
)
from fusemark.verify import authenticate, false_positive_bound

__version__ = "0.1.0"

__all__ = [
    "LabeledImage",
    "TriggerSpec",
    "WatermarkKey",
    "authenticate",
    "build_watermark_key",
    "false_positive_bound",
    "fuse_direct",
    "fuse_invisible",
    "load_key",
    "save_key",
]
