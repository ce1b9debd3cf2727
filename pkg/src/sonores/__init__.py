"""Binary classification of grayscale ultrasound views with a residual CNN.

Self-contained pipeline: numpy-backed autodiff core, residual network
with stage freezing, BMP ingestion with patient-grouped splitting,
Adam/BCE training with early stopping, threshold and ROC metrics, and
gradient-weighted activation heatmaps.
"""

from sonores.tensor import Tensor, Tape, backward, grad_check

__all__ = ["Tensor", "Tape", "backward", "grad_check"]
__version__ = "0.1.0"
