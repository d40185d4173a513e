"""lesionforge: longitudinal lesion segmentation toolkit.

Grid types and NIfTI I/O live in ``volume``, dataset description in
``manifest``, input assembly in ``assembly``, the constraint losses in
``losses``, lesion-level augmentation in ``lesionmix``, evaluation in
``metrics``, synthetic data in ``phantom`` and the desk-scale trainable
segmenter in ``toytrain``.
"""

__version__ = "0.1.0"

from .volume import Mask, Volume, load_mask, load_nifti, save_nifti  # noqa: F401
