"""Time-equivariant contrastive video representation learning at desk scale."""

from . import clipops, encoder, evalkit, objectives, synthvid, trainloop

__all__ = ["clipops", "encoder", "evalkit", "objectives", "synthvid", "trainloop"]
__version__ = "0.1.0"
