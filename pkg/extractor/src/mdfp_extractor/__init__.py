"""PyTorch bridge: MDFP pack export and detector-dump conversion."""

from .convert import convert_detections, convert_record
from .export import (
    ConfigError,
    ConversionError,
    ExtractorConfig,
    ExtractorError,
    export_masked_cls,
    export_pack,
    export_packs,
    load_model,
    masked_input,
    preprocess,
    processed_image,
)
from .vit import VisionTransformer, build_model, load_checkpoint

__version__ = "0.1.0"
