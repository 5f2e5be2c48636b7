"""Desk-scale laboratory for semi-supervised dense object detection.

A tiny anchor-free detector trained with teacher-student pseudo-labeling
on synthetic shape scenes, with joint confidence scoring, confidence-based
label assignment, and ambiguity diagnostics.
"""

__version__ = "0.1.0"
