"""Single-stage multi-person pose estimation with visibility maps, at desk scale.

Modules: ``autodiff`` (reverse-mode engine), ``grid_head`` (decode/encode),
``distribution`` (keypoint Gaussian maps), ``targets``, ``losses``,
``postprocess``, ``evalkit`` (OKS, AP/AR, synthetic scenes), ``trainer`` and
``cli``.
"""

__version__ = "0.1.0"
