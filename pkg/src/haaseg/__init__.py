"""Gated hybrid axial-attention segmentation at desk scale.

A self-contained float64 stack: autodiff tensors, the seven position
encoding strategies, gated axial attention blocks, an encoder-decoder
segmentation network, Adam training, nine evaluation indicators, and a
deterministic synthetic lesion dataset, all wired to one CLI.
"""

__version__ = "0.1.0"
