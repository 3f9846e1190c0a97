"""Multi-camera rig pose and intrinsic refinement under box constraints.

Submodules: ``lie`` (SE(3) algebra), ``camera`` (pinhole model),
``rig`` (rig decomposition and file formats), ``constraints`` (log
barrier), ``geometry`` (epipolar and reprojection losses), ``optimizer``,
``synthetic`` (benchmark generator and metrics), ``exposure`` and ``cli``.
The optimizer is imported lazily because it initialises jax.
"""

__version__ = "0.1.0"
