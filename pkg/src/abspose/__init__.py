"""Single-step absolute multi-person 3D pose estimation from 2D detections and depth readouts,
with the two-step weak-perspective baseline for comparison."""

__version__ = "0.1.0"
