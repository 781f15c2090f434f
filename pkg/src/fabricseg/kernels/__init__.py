"""Kernel backend selection.

The hot inner loops (conv3d, max-pool, trilinear resize) exist twice: a
compiled Cython extension (`_fast`) and a numpy fallback (`reference`).  The
compiled module is preferred when importable; set FABRICSEG_KERNELS to
`reference` or `compiled` to force one side (`compiled` raises if the
extension was not built).  `benchmarks/bench_kernels.py` compares the two.
"""

import os

from . import reference

try:
    from . import _fast as compiled
except ImportError:
    compiled = None

_requested = os.environ.get("FABRICSEG_KERNELS", "auto")
if _requested == "reference":
    active = reference
elif _requested == "compiled":
    if compiled is None:
        raise ImportError(
            "FABRICSEG_KERNELS=compiled but the fabricseg.kernels._fast extension "
            "is not built (run `pip install -e .` or `python setup.py build_ext --inplace`)"
        )
    active = compiled
elif _requested == "auto":
    active = compiled if compiled is not None else reference
else:
    raise ValueError(f"FABRICSEG_KERNELS must be auto|reference|compiled, got {_requested!r}")

backend_name = active.name

conv3d_forward = active.conv3d_forward
conv3d_backward_data = active.conv3d_backward_data
conv3d_backward_weights = active.conv3d_backward_weights
maxpool_forward = active.maxpool_forward
maxpool_backward = active.maxpool_backward
resize_trilinear_forward = active.resize_trilinear_forward
resize_trilinear_backward = active.resize_trilinear_backward
