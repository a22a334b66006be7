"""Loader for SMPL model pickles without their original dependencies.

SMPL assets are Python 2 pickles whose arrays are wrapped in ``chumpy``
auto-diff objects and scipy sparse matrices.  Installing chumpy just to
read static arrays is unnecessary: a stub class absorbs any ``chumpy.*``
instance during unpickling and exposes the wrapped ndarray, and scipy
handles its own sparse types.
"""

from __future__ import annotations

import pickle

import numpy as np


class ChumpyStub:
    """Stands in for any chumpy class; keeps the pickled state dict."""

    def __init__(self, *args, **kwargs):
        pass

    def __setstate__(self, state):
        if isinstance(state, dict):
            self.__dict__.update(state)
        else:
            self.__dict__["x"] = state


class _StubUnpickler(pickle.Unpickler):
    def find_class(self, module, name):
        if module.split(".")[0] == "chumpy":
            return ChumpyStub
        return super().find_class(module, name)


def load_smpl_pickle(path: str) -> dict:
    """Unpickle an SMPL asset file into a plain dict.

    Args:
        path: pickle file path.

    Returns:
        dict as stored; values may still be stubs or sparse matrices
        (resolve them with as_array).

    Raises:
        ValueError: the file does not unpickle to a dict.
    """
    with open(path, "rb") as fh:
        data = _StubUnpickler(fh, encoding="latin1").load()
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a pickled dict, got {type(data).__name__}")
    return data


def as_array(value) -> np.ndarray:
    """Extract a dense float/int ndarray from an SMPL dict entry.

    Handles plain ndarrays, scipy sparse matrices (``.toarray()``), chumpy
    stubs (the wrapped ``x`` array), and nested combinations thereof.
    """
    if isinstance(value, ChumpyStub):
        if "x" not in value.__dict__:
            raise ValueError("chumpy object carries no array payload")
        return as_array(value.__dict__["x"])
    if hasattr(value, "toarray"):          # scipy sparse
        return np.asarray(value.toarray())
    return np.asarray(value)


def require(data: dict, key: str, path: str):
    """Fetch a required key or raise naming the absent field."""
    if key not in data:
        raise ValueError(f"{path}: SMPL asset is missing field {key!r}")
    return data[key]
