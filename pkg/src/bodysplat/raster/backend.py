"""Rasterizer kernel backend selection.

Two interchangeable kernel sets exist: a pure-numpy reference
(`_numpy_kernels`) and a numba-compiled twin (`_numba_kernels`).  The
environment variable ``BODYSPLAT_BACKEND`` picks one:

    auto   (default) compiled kernels when numba imports, numpy otherwise
    numba  require the compiled kernels, error if unavailable
    numpy  force the pure-numpy reference

Both produce the same images and gradients; the compiled path is just
faster.
"""

import os

from . import _numpy_kernels

try:
    from . import _numba_kernels
except ImportError:  # pragma: no cover - depends on environment
    _numba_kernels = None

ENV_VAR = "BODYSPLAT_BACKEND"
_VALID = ("auto", "numba", "numpy")


def available_backends():
    """Names of the kernel backends importable in this environment."""
    names = ["numpy"]
    if _numba_kernels is not None:
        names.insert(0, "numba")
    return names


def active_backend(name=None):
    """Resolve a backend name, honoring ``BODYSPLAT_BACKEND``.

    Args:
        name: explicit override ("numba" | "numpy" | "auto" | None).

    Returns:
        "numba" or "numpy".

    Raises:
        ValueError: unknown backend name.
        RuntimeError: numba requested but not importable.
    """
    if name is None:
        name = os.environ.get(ENV_VAR, "auto").strip().lower() or "auto"
    if name not in _VALID:
        raise ValueError(
            "unknown backend %r; expected one of %s" % (name, _VALID))
    if name == "auto":
        return "numba" if _numba_kernels is not None else "numpy"
    if name == "numba" and _numba_kernels is None:
        raise RuntimeError(
            "backend 'numba' requested via %s but numba is not importable"
            % ENV_VAR)
    return name


def get_kernels(name=None):
    """Return the kernel module for ``name`` (resolved via active_backend)."""
    resolved = active_backend(name)
    if resolved == "numba":
        return _numba_kernels
    return _numpy_kernels
