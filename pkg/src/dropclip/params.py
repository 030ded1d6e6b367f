"""Named parameter collections and binary checkpoint files.

A ParamTree maps dotted names to Tensors. Checkpoints serialize the arrays
in lexicographic name order with raw little-endian payloads, so identical
parameters always produce byte-identical files and a round trip is bitwise
exact. Optimizer state reuses the same container with its own entries.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor

CKPT_HEADER = b"DROPCLIP-CKPT v1\n"

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
}
_DTYPE_NAMES = {np.dtype(np.float32): "float32",
                np.dtype(np.float64): "float64",
                np.dtype(np.int64): "int64"}


class CkptError(ValueError):
    """Malformed or mismatched checkpoint file."""


class ParamTree:
    """Ordered mapping of dotted parameter names to Tensors."""

    def __init__(self, frozen_prefixes: tuple[str, ...] = ()):
        self._params: dict[str, Tensor] = {}
        self.frozen_prefixes = tuple(frozen_prefixes)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if " " in name or "\n" in name or not name:
            raise ValueError(f"invalid parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def is_frozen(self, name: str) -> bool:
        return any(name == p or name.startswith(p + ".") for p in self.frozen_prefixes)

    def trainable_items(self):
        for name, t in self.items():
            if not self.is_frozen(name):
                yield name, t

    def n_scalars(self, trainable_only: bool = False) -> int:
        it = self.trainable_items() if trainable_only else self.items()
        return sum(t.data.size for _, t in it)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], subset: bool = False) -> None:
        """Copy values in; name sets, dtypes and shapes must match exactly.

        With ``subset`` the arrays may cover only part of the tree (uncovered
        entries keep their current values); unknown names are still an error.
        """
        mine, theirs = set(self._params), set(arrays)
        if theirs - mine or (not subset and mine - theirs):
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise CkptError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, a in arrays.items():
            t = self._params[name]
            if a.shape != t.data.shape or a.dtype != t.data.dtype:
                raise CkptError(
                    f"{name}: stored {a.dtype}{a.shape}, expected {t.data.dtype}{t.data.shape}")
            t.data = a.copy()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None


def _shape_field(shape: tuple) -> str:
    return ",".join(str(d) for d in shape) if shape else "-"


def _parse_shape(field: str) -> tuple:
    if field == "-":
        return ()
    return tuple(int(d) for d in field.split(","))


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write a checkpoint file; entries sorted by name for canonical bytes."""
    with open(path, "wb") as fh:
        fh.write(CKPT_HEADER)
        fh.write(f"n={len(arrays)}\n".encode())
        for name in sorted(arrays):
            a = np.asarray(arrays[name])   # tobytes() is C-order for any layout
            if a.dtype not in _DTYPE_NAMES:
                raise CkptError(f"{name}: unsupported dtype {a.dtype}")
            dtype_name = _DTYPE_NAMES[a.dtype]
            fh.write(f"{name} {dtype_name} {_shape_field(a.shape)}\n".encode())
            fh.write(a.astype(_DTYPES[dtype_name], copy=False).tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        header = fh.readline()
        if header != CKPT_HEADER:
            raise CkptError(f"{path}: bad header {header!r}, expected {CKPT_HEADER!r}")
        count_line = fh.readline().decode()
        if not count_line.startswith("n=") :
            raise CkptError(f"{path}: missing entry count line")
        count = int(count_line[2:])
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            meta = fh.readline().decode()
            if not meta:
                raise CkptError(f"{path}: truncated after {len(out)} of {count} entries")
            parts = meta.split()
            if len(parts) != 3:
                raise CkptError(f"{path}: malformed entry line {meta!r}")
            name, dtype_name, shape_field = parts
            if dtype_name not in _DTYPES:
                raise CkptError(f"{path}: unknown dtype {dtype_name!r} for {name}")
            if name in out:
                raise CkptError(f"{path}: duplicate entry {name!r}")
            dtype = _DTYPES[dtype_name]
            shape = _parse_shape(shape_field)
            nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise CkptError(f"{path}: payload of {name} truncated")
            out[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
        if fh.read(1):
            raise CkptError(f"{path}: trailing bytes after {count} entries")
    return out


def save_checkpoint(tree: ParamTree, path) -> None:
    save_arrays(path, tree.arrays())


def load_checkpoint(tree: ParamTree, path) -> None:
    tree.load_arrays(load_arrays(path))


def arrays_digest(arrays: dict[str, np.ndarray]) -> str:
    """Stable blake2s hex digest of named arrays (order independent)."""
    h = hashlib.blake2s()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(_shape_field(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def tree_digest(tree: ParamTree) -> str:
    return arrays_digest(tree.arrays())
