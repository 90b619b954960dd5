"""Blob-scene counterfactual explanations with region-restricted latent edits."""

import torch

torch.set_default_dtype(torch.float64)

__version__ = "0.1.0"
