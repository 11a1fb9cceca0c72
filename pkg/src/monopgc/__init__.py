"""Desk-scale monocular 3D object detection with pixel geometry contexts.

A numpy-backed library covering the full pipeline: a small autodiff tensor
substrate (`numerics`), camera geometry and depth discretization
(`geometry`), depth-aware multi-scale feature fusion (`dcpm`), the
coordinate-to-feature transformer with depth-gradient positional encoding
(`dsat`), a center-based detection head (`head`), KITTI-format ingestion
and a synthetic scene oracle (`data`), rotated-IoU / AP40 metrics
(`evaluation`), and a `monopgc` command line (`cli`).
"""

__version__ = "0.1.0"
