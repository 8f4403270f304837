"""Parameter containers: tape binding, traversal, deterministic init.

Parameter structures are plain dataclasses whose leaves are numpy arrays.
``bind`` mirrors a structure with Tensors (tape leaves when a tape is given),
``iter_arrays`` walks leaves with stable dotted names, and ``pair_leaves``
zips an array structure with its bound twin for in-place updates.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import nd


def map_arrays(obj, fn):
    """Rebuild a parameter structure, applying ``fn`` to every ndarray leaf."""
    if isinstance(obj, np.ndarray):
        return fn(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        kwargs = {f.name: map_arrays(getattr(obj, f.name), fn) for f in dataclasses.fields(obj)}
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [map_arrays(v, fn) for v in obj]
    if isinstance(obj, tuple):
        return tuple(map_arrays(v, fn) for v in obj)
    if isinstance(obj, dict):
        return {k: map_arrays(v, fn) for k, v in obj.items()}
    return obj


def bind(obj, tape=None):
    """Return a parallel structure with ndarray leaves wrapped as Tensors."""
    if tape is not None:
        return map_arrays(obj, tape.leaf)
    return map_arrays(obj, nd.Tensor)


def astype(obj, dtype):
    """Copy of a parameter structure with every leaf cast to ``dtype``."""
    return map_arrays(obj, lambda a: a.astype(dtype))


def iter_arrays(obj, prefix=""):
    """Yield (dotted_name, ndarray) pairs in a stable traversal order."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from iter_arrays(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from iter_arrays(v, f"{prefix}[{i}]")
    elif isinstance(obj, dict):
        for k in sorted(obj):
            yield from iter_arrays(obj[k], f"{prefix}.{k}" if prefix else str(k))


def pair_leaves(orig, bound):
    """Zip ndarray leaves of a structure with the Tensors of its bound twin."""
    if isinstance(orig, np.ndarray):
        yield orig, bound
    elif dataclasses.is_dataclass(orig) and not isinstance(orig, type):
        for f in dataclasses.fields(orig):
            yield from pair_leaves(getattr(orig, f.name), getattr(bound, f.name))
    elif isinstance(orig, (list, tuple)):
        for o, b in zip(orig, bound):
            yield from pair_leaves(o, b)
    elif isinstance(orig, dict):
        for k in sorted(orig):
            yield from pair_leaves(orig[k], bound[k])


def count_arrays(obj) -> int:
    return sum(int(a.size) for _, a in iter_arrays(obj))


class Initializer:
    """Deterministic per-parameter random streams from one 64-bit seed.

    Each parameter draws from its own counter-based generator (Philox keyed
    by seed and parameter ordinal), so values do not depend on how other
    parameters were sized, only on creation order.
    """

    def __init__(self, seed: int, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._counter = 0

    def _rng(self):
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self._counter,))
        self._counter += 1
        return np.random.Generator(np.random.Philox(ss))

    def trunc_normal(self, shape, std=0.02):
        """Normal(0, std) truncated to two standard deviations by resampling."""
        rng = self._rng()
        out = rng.standard_normal(shape) * std
        lim = 2.0 * std
        bad = np.abs(out) > lim
        while bad.any():
            out[bad] = rng.standard_normal(int(bad.sum())) * std
            bad = np.abs(out) > lim
        return out.astype(self.dtype)

    def zeros(self, shape):
        self._counter += 1  # keep ordinals stable across init kinds
        return np.zeros(shape, dtype=self.dtype)

    def ones(self, shape):
        self._counter += 1
        return np.ones(shape, dtype=self.dtype)

    def constant(self, values):
        self._counter += 1
        return np.asarray(values, dtype=self.dtype)
