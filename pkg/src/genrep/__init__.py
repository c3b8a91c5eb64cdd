"""Generator representations for segmentation: semantic projection, distillation, LayerMatch."""

__version__ = "0.1.0"
