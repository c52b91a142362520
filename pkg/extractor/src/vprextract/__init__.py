"""Patch-token export from frozen vision backbones into VPRT token files."""

from .backbones import BUILDERS, Backbone, build_backbone
from .extract import Extractor, ExtractorConfig, extract_manifest
from .tokenfile import SOURCE_CLIP, SOURCE_DINO, write_token_file

__version__ = "0.1.0"
