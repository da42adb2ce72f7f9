"""Metric-scale depth and trajectory recovery for monocular endoscopy.

The pipeline couples relative depth maps from a monocular stream with
robot kinematics: frame-to-frame poses come from direct image+depth
alignment, per-frame scale samples from the ratio of kinematic to visual
translation norms, and a sliding-window geometric-mean filter turns the
noisy samples into a stable metric scale.  Scaled depth feeds surfel
fusion, a distillation training-set exporter, and a full evaluation
metric suite, with a synthetic-scene renderer as the built-in oracle.
"""

__version__ = "0.1.0"
