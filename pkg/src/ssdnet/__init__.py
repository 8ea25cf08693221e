"""Zero-shot anomaly localization on a single image.

Fits a small convolutional encoder-decoder to overlapping patches of the test
image itself, scores per-pixel reconstruction/perceptual deviations into a
heatmap, and ships classical texture baselines plus a full evaluation harness.
"""

__version__ = "0.1.0"
