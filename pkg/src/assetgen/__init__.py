"""Desk-scale 3D-asset-referenced image generation.

Renders multi-view RGB / point-map conditions from a mesh, trains a small
flow-matching transformer with dual-branch conditioning (shared positional
embeddings, domain switcher, dual LoRA routing, text-agnostic attention),
and samples pixel-aligned RGB + point-map pairs.
"""

__version__ = "0.1.0"
