"""Saliency-guided adversarial training for small 2D/3D CNN classifiers.

Subpackages: autodiff (tensor engine), model (the CNN), gradcam (class
activation maps), attack (L-inf PGD), trainer (losses + training regimes),
data (synthetic scanner-shift datasets), metrics and crossval (evaluation),
cli (command-line entry points).
"""

__version__ = "0.1.0"
