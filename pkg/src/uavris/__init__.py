"""Desk-scale referring image segmentation for UAV imagery.

Library layout:

- :mod:`uavris.tensor`    float64 autodiff core and finite-difference oracle
- :mod:`uavris.vlcam`     vision-language cross-attention fusion
- :mod:`uavris.ramsf`     rotation-aware multi-scale fusion decoder
- :mod:`uavris.model`     end-to-end toy model, optimizer, smoke trainer
- :mod:`uavris.metrics`   mIoU / oIoU / Pr@X / class-wise IoU reporting
- :mod:`uavris.datagen`   automatic dataset pipeline (crop/filter/caption)
- :mod:`uavris.refcoco`   RefCOCO-aligned annotation export with RLE masks
- :mod:`uavris.cli`       operator command line
"""

from .tensor import Tape, Tensor, backward, finite_diff_grad

__all__ = ["Tape", "Tensor", "backward", "finite_diff_grad"]
__version__ = "0.1.0"
