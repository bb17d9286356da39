"""Desk-scale lab for self-calibrated prompt tuning and OOD detection.

Frozen toy encoders stand in for a vision-language backbone; the modulated
training objectives, surrogate-OOD region extraction, the post-hoc detector
battery, and the evaluation metrics are implemented from scratch and verified
against brute-force oracles and finite differences.
"""

__version__ = "0.1.0"

from . import encoders, extraction, metrics, numerics, scoring, synthdata, tuning

__all__ = [
    "encoders",
    "extraction",
    "metrics",
    "numerics",
    "scoring",
    "synthdata",
    "tuning",
]
