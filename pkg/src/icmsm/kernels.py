"""E-step kernel selection.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``ICMSM_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy implementation is used. Both return identical results up
to floating point summation order.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _estep_py

log = logging.getLogger(__name__)

try:
    from . import _estep_ext
except ImportError:  # pragma: no cover - depends on the build
    _estep_ext = None

_force_py = os.environ.get("ICMSM_PURE_PYTHON", "") not in ("", "0")
BACKEND = "cython" if (_estep_ext is not None and not _force_py) else "python"

# fixed so that the reduction order never depends on the worker count
SUBJECTS_PER_CHUNK = 64


def available_backends():
    return ("cython", "python") if _estep_ext is not None else ("python",)


def _impl(backend):
    backend = backend or BACKEND
    if backend == "cython":
        if _estep_ext is None:
            raise RuntimeError("compiled E-step extension is not built")
        return _estep_ext.estep
    if backend == "python":
        return _estep_py.estep
    raise ValueError(f"unknown backend {backend!r}")


def default_threads():
    env = os.environ.get("ICMSM_THREADS")
    if env:
        return max(1, int(env))
    if hasattr(os, "sched_getaffinity"):
        return max(1, len(os.sched_getaffinity(0)))
    return os.cpu_count() or 1


def sweep(alpha, stay, iv, want_counts=True, backend=None, threads=1):
    """Forward/backward pass over all intervals.

    Returns ``(d, y, loglik, bad)`` where ``bad`` is the index (into ``iv``) of
    the first interval whose probability fell below the floor, or -1.
    """
    fn = _impl(backend)
    alpha = np.ascontiguousarray(alpha, dtype=np.float64)
    stay = np.ascontiguousarray(stay, dtype=np.float64)
    chunks = getattr(iv, "_chunks", None)
    if chunks is None:
        chunks = iv.chunks(SUBJECTS_PER_CHUNK)
        iv._chunks = chunks
    if len(chunks) == 1:
        return fn(alpha, stay, iv, want_counts)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: fn(alpha, stay, c, want_counts), chunks))
    else:
        parts = [fn(alpha, stay, c, want_counts) for c in chunks]
    K, H, _ = alpha.shape
    d = np.zeros((K, H, H))
    y = np.zeros((K, H))
    loglik = 0.0
    offset = 0
    for chunk, (dc, yc, llc, badc) in zip(chunks, parts):
        if badc >= 0:
            return d, y, loglik, offset + badc
        d += dc
        y += yc
        loglik += llc
        offset += len(chunk)
    return d, y, loglik, -1
