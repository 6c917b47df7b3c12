"""Multi-agent collaborative perception calibration toolkit.

Subpackages by stage of the pipeline:

- geometry: SE(2) poses, rigid transforms, oriented boxes, rotated IoU
- scenario: synthetic scenes, pose/delay noise, collaboration messages
- matching: star-graph similarity and optimal cross-agent association
- posegraph: agent-object graph construction and the LM solver
- diffusion: latent codec, schedules, DDPM/DDIM samplers, losses
- evaluation: metrics, single trials, and noise/delay sweeps
- cli: the `cocalib` command (generate / calibrate / sweep / report)
"""

from .geometry import DetectedBox, Pose2, rotated_iou, wrap_angle

__all__ = ["DetectedBox", "Pose2", "rotated_iou", "wrap_angle"]
__version__ = "0.1.0"
