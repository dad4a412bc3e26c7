"""Pulmonary artery/vein segmentation analysis: volumes, vesselness,
skeletons, metrics, a staged segmentation cascade, phantoms and cohort
statistics."""

__version__ = "0.1.0"
