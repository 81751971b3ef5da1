"""Hot kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from ``PRUNELAB_KERNELS``:
``numba`` (default when numba imports) or ``numpy``. Both modules expose the
same functions; :func:`get_backend` returns either explicitly, which is what
the tests and the benchmark use to compare them.
"""

import os
from types import ModuleType

from . import _numpy

try:
    from . import _numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    NUMBA_AVAILABLE = False

_KERNELS = ("quantize_blocks", "block_minmax", "dequantize_blocks", "pack_nibbles",
            "unpack_nibbles", "quant_matmul", "bessel_variance", "causal_softmax")


def get_backend(name: str | None = None) -> ModuleType:
    name = (name or os.environ.get("PRUNELAB_KERNELS", "numba")).lower()
    if name == "numpy":
        return _numpy
    if name == "numba":
        return _numba if NUMBA_AVAILABLE else _numpy
    raise ValueError(f"unknown kernel backend {name!r} (expected 'numba' or 'numpy')")


backend = get_backend()
BACKEND_NAME = "numba" if backend is _numba else "numpy"

quantize_blocks = backend.quantize_blocks
block_minmax = backend.block_minmax
dequantize_blocks = backend.dequantize_blocks
pack_nibbles = backend.pack_nibbles
unpack_nibbles = backend.unpack_nibbles
quant_matmul = backend.quant_matmul
bessel_variance = backend.bessel_variance
causal_softmax = backend.causal_softmax

__all__ = ["get_backend", "BACKEND_NAME", "NUMBA_AVAILABLE", *_KERNELS]
