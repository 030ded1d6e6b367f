"""Weight-space ensembling of checkpoints along a training run.

The online variant keeps the series of saved checkpoints theta_0..theta_n
(theta_0 is the pre-post-pretraining weights) and, every k-th checkpoint,
replaces theta_n by the uniform average of l checkpoints at evenly spaced
positions over [0, n]. Positions are rounded half up with exact integer
arithmetic, so index selection never depends on float rounding. The stored
series keeps the averaged value and training continues from it.

With a single firing at the very end and l = 2 this equals the classic
two-point interpolation at alpha = 0.5, which is also provided directly.

Averaging accumulates weighted terms in float64, index-ascending, then casts
back to the entry dtype; the fixed order keeps results bitwise reproducible.
Checkpoints may be given as ParamTree or as plain name->array dicts; results
are dicts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamTree


@dataclass(frozen=True)
class WiseFtSchedule:
    k: int   # ensemble every k epochs/checkpoints
    l: int   # number of checkpoints averaged each time

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.l < 2:
            raise ValueError(f"l must be >= 2, got {self.l}; the index formula "
                             "divides by l - 1")

    def due(self, n: int) -> bool:
        return n > 0 and n % self.k == 0


def _as_arrays(ckpt) -> dict[str, np.ndarray]:
    return ckpt.arrays() if isinstance(ckpt, ParamTree) else ckpt


class CheckpointSeries:
    """Checkpoints theta_0..theta_n as dicts of named arrays, in order."""

    def __init__(self):
        self._items: list[dict[str, np.ndarray]] = []

    def append(self, ckpt) -> int:
        arrays = _as_arrays(ckpt)
        self._items.append({k: np.array(v, copy=True) for k, v in arrays.items()})
        return len(self._items) - 1

    def replace(self, i: int, ckpt) -> None:
        arrays = _as_arrays(ckpt)
        self._items[i] = {k: np.array(v, copy=True) for k, v in arrays.items()}

    def get(self, i: int) -> dict[str, np.ndarray]:
        return self._items[i]

    def last(self) -> dict[str, np.ndarray]:
        return self._items[-1]

    def __len__(self) -> int:
        return len(self._items)


def alg1_indices(n: int, l: int) -> list[int]:
    """Positions of the l averaged checkpoints over the series 0..n.

    index_i = round_half_up(i * n / (l - 1)); duplicates are kept, they
    simply weight that checkpoint more.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if l < 2:
        raise ValueError(f"l must be >= 2, got {l}")
    return [(2 * i * n + (l - 1)) // (2 * (l - 1)) for i in range(l)]


def _check_same_keys(dicts: list[dict[str, np.ndarray]]) -> None:
    keys = set(dicts[0])
    for d in dicts[1:]:
        if set(d) != keys:
            diff = sorted(keys.symmetric_difference(set(d)))
            raise ValueError(f"checkpoints disagree on entries, first difference: "
                             f"{diff[0]!r}")


def ensemble(checkpoints: list, weights: list[float]) -> dict[str, np.ndarray]:
    """Weighted entry-wise average; weights must sum to 1 within 1e-9."""
    if not checkpoints:
        raise ValueError("nothing to ensemble")
    if len(weights) != len(checkpoints):
        raise ValueError(f"{len(checkpoints)} checkpoints but {len(weights)} weights")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {sum(weights)!r}, expected 1")
    dicts = [_as_arrays(c) for c in checkpoints]
    _check_same_keys(dicts)
    out = {}
    for name in dicts[0]:
        first = dicts[0][name]
        if not np.issubdtype(first.dtype, np.floating):
            raise ValueError(f"{name}: cannot average non-float entry of dtype "
                             f"{first.dtype}")
        acc = np.zeros(first.shape, dtype=np.float64)
        for w, d in zip(weights, dicts):
            a = d[name]
            if a.shape != first.shape:
                raise ValueError(f"{name}: shape {a.shape} != {first.shape}")
            acc += w * a.astype(np.float64)
        out[name] = acc.astype(first.dtype)
    return out


def wise_ft_online(series: CheckpointSeries, schedule: WiseFtSchedule,
                   n: int) -> dict[str, np.ndarray]:
    """Resolve checkpoint n: average and overwrite it in the series when due.

    ``series`` must already contain checkpoints 0..n, where entry n holds the
    just-trained weights. Returns the (possibly replaced) theta_n; training
    continues from the returned value either way.
    """
    if len(series) != n + 1:
        raise ValueError(f"series has {len(series)} checkpoints, expected {n + 1}")
    if schedule.due(n):
        picks = alg1_indices(n, schedule.l)
        averaged = ensemble([series.get(i) for i in picks],
                            [1.0 / schedule.l] * schedule.l)
        series.replace(n, averaged)
    return series.get(n)


def classic_wise_ft(pre, ft, alpha: float) -> dict[str, np.ndarray]:
    """(1 - alpha) * pre + alpha * ft, entry-wise."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return ensemble([pre, ft], [1.0 - alpha, alpha])
