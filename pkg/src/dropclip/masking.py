"""Input corruption: video patch dropping and text token masking.

Dropped patches are removed outright; no placeholder tokens are inserted and
nothing downstream reconstructs them. Text masking substitutes the mask token
at every chosen position (no random-word or keep-original variants).

Both samplers take an explicit numpy Generator. Training derives one
generator per (stream, step, sample index) from its named streams, so any
step of a run can be replayed in isolation and two runs with the same seed
corrupt identically regardless of batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import RngStreams, stream_rng  # re-exported: masks draw from these streams
from .synthdata import MASK_ID

__all__ = ["DropMask", "MaskedText", "RngStreams", "stream_rng", "keep_count",
           "sample_drop_mask", "apply_drop", "mask_count", "mask_text", "full_mask"]

SPECIAL_ID_LIMIT = 4  # ids below this are pad/bos/eos/mask, never maskable


@dataclass(frozen=True)
class DropMask:
    """A keep-subset of patch indices 0..n-1 drawn at drop ratio ``ratio``."""
    n: int
    ratio: float
    kept: np.ndarray   # int64, strictly increasing

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=np.int64)
        object.__setattr__(self, "kept", kept)
        if kept.ndim != 1 or len(kept) != keep_count(self.n, self.ratio):
            raise ValueError(f"kept size {kept.shape} does not match "
                             f"floor((1-{self.ratio})*{self.n}) with min 1")
        if len(kept) and (kept[0] < 0 or kept[-1] >= self.n):
            raise ValueError(f"kept indices out of range for n={self.n}")
        if (np.diff(kept) <= 0).any():
            raise ValueError("kept indices must be strictly increasing")

    @property
    def dropped(self) -> np.ndarray:
        out = np.ones(self.n, dtype=bool)
        out[self.kept] = False
        return np.flatnonzero(out).astype(np.int64)


@dataclass(frozen=True)
class MaskedText:
    """A token row with mask substitutions applied.

    ``positions`` and ``targets`` together map each masked position to the
    original id found there; all other positions are unchanged.
    """
    ids: np.ndarray
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


_FLOOR_EPS = 1e-9  # absorbs binary round-off so e.g. (1-0.8)*10 floors to 2, not 1


def keep_count(n_patches: int, drop_ratio: float) -> int:
    if not 0.0 <= drop_ratio < 1.0:
        raise ValueError(f"drop ratio must be in [0, 1), got {drop_ratio}")
    if n_patches < 1:
        raise ValueError("need at least one patch")
    return max(1, int(np.floor((1.0 - drop_ratio) * n_patches + _FLOOR_EPS)))


def sample_drop_mask(n_patches: int, drop_ratio: float,
                     rng: np.random.Generator) -> DropMask:
    """Uniform without-replacement keep set of size max(1, floor((1-rho)N))."""
    m = keep_count(n_patches, drop_ratio)
    kept = np.sort(rng.choice(n_patches, size=m, replace=False))
    return DropMask(n=n_patches, ratio=drop_ratio, kept=kept)


def full_mask(n_patches: int) -> DropMask:
    """The keep-everything mask used by evaluation forwards."""
    return DropMask(n=n_patches, ratio=0.0, kept=np.arange(n_patches, dtype=np.int64))


def apply_drop(patches: np.ndarray, mask: DropMask) -> tuple[np.ndarray, np.ndarray]:
    """Select kept rows of (n, ...) patches; returns (rows, index records)."""
    if patches.shape[0] != mask.n:
        raise ValueError(
            f"patch count {patches.shape[0]} does not match mask over {mask.n}")
    return patches[mask.kept], mask.kept.copy()


def mask_count(n_maskable: int, mask_ratio: float) -> int:
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {mask_ratio}")
    if mask_ratio == 0.0:
        return 0
    return max(1, int(np.floor(mask_ratio * n_maskable + _FLOOR_EPS)))


def mask_text(ids: np.ndarray, mask_ratio: float,
              rng: np.random.Generator) -> MaskedText:
    """Mask a fixed fraction of the word tokens in one padded id row.

    Specials (pad, bos, eos, mask) are never chosen. A ratio of zero returns
    the row unchanged with no targets.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError(f"expected one row of ids, got shape {ids.shape}")
    if mask_ratio == 0.0:
        mask_count(1, mask_ratio)  # still validates the ratio range
        return MaskedText(ids=ids.copy())
    maskable = np.flatnonzero(ids >= SPECIAL_ID_LIMIT)
    if len(maskable) == 0:
        raise ValueError("row has no maskable tokens")
    m = mask_count(len(maskable), mask_ratio)
    positions = np.sort(rng.choice(maskable, size=m, replace=False)).astype(np.int64)
    out = ids.copy()
    targets = out[positions].copy()
    out[positions] = MASK_ID
    return MaskedText(ids=out, positions=positions, targets=targets)
