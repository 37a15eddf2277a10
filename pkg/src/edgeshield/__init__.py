"""edgeshield: a desk-scale adversarial robustness laboratory.

Trains small convolutional classifiers with a self-contained reverse-mode
autodiff engine, attacks them with FGSM, preprocesses images with a full
Canny edge pipeline, and runs the train / attack / retrain protocol over both
raw and edge representations.
"""

__version__ = "0.1.0"

from edgeshield.tensor import Tensor, Tape, no_grad  # noqa: F401
