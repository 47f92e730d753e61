"""Record which smooth piece the piecewise operations landed on.

relu, max-pool, ``clamp_min`` and the bilinear sampler are only piecewise
smooth.  Inside :func:`record_branches` each of them logs a digest of the
branch it took (sign mask, selected window element, pixel cell).  Two
evaluations with equal logs lie on the same smooth piece, which is what a
central finite difference needs to be a valid gradient oracle.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Callable, List

import numpy as np

_stack: List[List[bytes]] = []


@contextlib.contextmanager
def record_branches():
    """Collect branch digests of every piecewise op evaluated in the block."""
    log: List[bytes] = []
    _stack.append(log)
    try:
        yield log
    finally:
        _stack.pop()


def note_branch(make: Callable[[], tuple]) -> None:
    """Log the arrays returned by ``make``; ``make`` only runs while recording."""
    if not _stack:
        return
    h = hashlib.sha256()
    for a in make():
        h.update(np.ascontiguousarray(a).tobytes())
    _stack[-1].append(h.digest())
