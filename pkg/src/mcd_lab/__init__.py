"""Desk-scale lab for misalignment-aware contrastive image-text training.

A numpy implementation of a unified-space contrastive objective paired
with element-wise log-ratio distillation from a momentum teacher, plus a
procedural image-caption generator whose augmentations come with an
exact misalignment oracle.  All gradients are hand-written and verified
against finite differences.
"""

__version__ = "0.1.0"
