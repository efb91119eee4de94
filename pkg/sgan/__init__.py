"""Saliency-guided weakly supervised segmentation pipeline."""
