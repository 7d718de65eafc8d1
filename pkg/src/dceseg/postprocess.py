"""Turning probability volumes into final segmentations.

The chain is: threshold at 0.5, fill enclosed 3D holes (lesions predicted as
background inside the liver), keep the largest connected component. Hole
connectivity is 6 (faces), foreground connectivity is 26 (faces, edges,
corners) - the standard complementary pairing.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volumes import BinaryMask3D

PROBABILITY_THRESHOLD = 0.5

_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)   # 6-connectivity
_FULL_STRUCTURE = ndimage.generate_binary_structure(3, 3)   # 26-connectivity


def threshold(probabilities: np.ndarray, spacing_mm,
              theta: float = PROBABILITY_THRESHOLD) -> BinaryMask3D:
    """Voxels with probability >= theta become foreground."""
    probs = np.asarray(probabilities)
    if probs.ndim != 3:
        raise ValueError(f"expected a [Z,Y,X] probability volume, got {probs.shape}")
    if probs.min() < 0 or probs.max() > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    return BinaryMask3D((probs >= theta).astype(np.uint8), spacing_mm)


def fill_holes_3d(mask: BinaryMask3D) -> BinaryMask3D:
    """Background regions not 6-connected to the volume border become foreground."""
    filled = ndimage.binary_fill_holes(mask.data.astype(bool), structure=_FACE_STRUCTURE)
    return BinaryMask3D(filled.astype(np.uint8), mask.spacing_mm)


def largest_component(mask: BinaryMask3D) -> BinaryMask3D:
    """Keep only the largest 26-connected foreground component.

    Ties are broken toward the component containing the smallest linear voxel
    index. Raises on an empty mask (no component to keep).
    """
    labels, count = ndimage.label(mask.data, structure=_FULL_STRUCTURE)
    if count == 0:
        raise ValueError("largest_component: mask has no foreground voxels")
    sizes = np.bincount(labels.ravel())[1:]
    largest = sizes.max()
    candidates = np.flatnonzero(sizes == largest) + 1
    if len(candidates) > 1:
        flat = labels.ravel()
        keep = min(candidates, key=lambda lab: int(np.argmax(flat == lab)))
    else:
        keep = candidates[0]
    return BinaryMask3D((labels == keep).astype(np.uint8), mask.spacing_mm)


def postprocess_probabilities(probabilities: np.ndarray, spacing_mm,
                              theta: float = PROBABILITY_THRESHOLD) -> BinaryMask3D:
    """Full chain: threshold, 3D hole filling, largest connected component."""
    mask = threshold(probabilities, spacing_mm, theta)
    if mask.num_foreground == 0:
        return mask
    return largest_component(fill_holes_3d(mask))
