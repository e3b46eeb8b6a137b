"""Backend selection for the batched reduced-solve kernels.

The compiled extension is used when it was built; otherwise the numpy
implementation is loaded.  Set ``PDEDNN_KERNELS=python`` to force the
fallback, or ``PDEDNN_KERNELS=compiled`` to fail loudly when the extension is
missing.
"""

import os

_choice = os.environ.get("PDEDNN_KERNELS", "auto").lower()

if _choice == "python":
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        if _choice == "compiled":
            raise
        from . import _kernels_py as _impl

BACKEND = _impl.BACKEND
factor_solve = _impl.factor_solve
solve_transpose = _impl.solve_transpose


def available_backends():
    out = {"python": __import__(f"{__package__}._kernels_py", fromlist=["x"])}
    try:
        from . import _kernels

        out["compiled"] = _kernels
    except ImportError:
        pass
    return out
