"""Majority-vote fusion of binary lesion masks."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from flairnorm.errors import DimsMismatchError, TooFewMasksError
from flairnorm.volume import Mask


def majority_vote(masks: Sequence[Mask]) -> Mask:
    """Voxel is set iff strictly more than half of the inputs set it.

    With an even number of inputs an exact tie gives 0.
    """
    if len(masks) < 2:
        raise TooFewMasksError(f"majority vote needs at least 2 masks, got {len(masks)}")
    dims = masks[0].dims
    for m in masks[1:]:
        if m.dims != dims:
            raise DimsMismatchError(f"mask dims differ: {dims} vs {m.dims}")
    votes = np.zeros(dims, dtype=np.int32)
    for m in masks:
        votes += m.data
    return Mask(2 * votes > len(masks), kind=masks[0].kind, spacing=masks[0].spacing)
