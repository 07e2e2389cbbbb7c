"""Error-correcting 2D-3D cascaded segmentation for LGE CMR volumes."""

from .data import ClassScheme, DatasetManifest, FoldSplit, LabelMask, Volume

__version__ = "0.1.0"

__all__ = ["ClassScheme", "DatasetManifest", "FoldSplit", "LabelMask", "Volume",
           "__version__"]
