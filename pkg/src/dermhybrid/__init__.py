"""Hybrid handcrafted-feature / CNN classifier for dermoscopy images."""

from dermhybrid.dataset import ClassLabel, SampleRecord, SplitManifest, load_manifest, stratified_split

__version__ = "0.1.0"

__all__ = [
    "ClassLabel",
    "SampleRecord",
    "SplitManifest",
    "load_manifest",
    "stratified_split",
]
