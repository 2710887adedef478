"""Responsibility-allocation pipeline for traffic accident videos, with its evaluation suite."""

from .model import (
    BBox,
    Entity,
    ResponsibilityVerdict,
    TaskKind,
    Variant,
    VideoSample,
    load_manifest,
    map_fault_ratio,
    save_manifest,
)

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "Entity",
    "ResponsibilityVerdict",
    "TaskKind",
    "Variant",
    "VideoSample",
    "load_manifest",
    "map_fault_ratio",
    "save_manifest",
]
