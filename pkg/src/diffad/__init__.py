"""Diffusion-model anomaly detection with classical baselines and an AUC-ROC harness."""

__version__ = "0.1.0"
