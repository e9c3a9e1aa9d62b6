"""Event-camera simulation and probabilistic EM contour tracking for
articulated, skinned meshes."""

__version__ = "0.1.0"
