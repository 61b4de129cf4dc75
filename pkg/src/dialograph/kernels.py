"""Backend selection for the attention kernels.

The compiled extension is used when importable; set
``DIALOGRAPH_PURE_PYTHON=1`` to force the numpy implementation.
"""

import os

from . import _attention_py

if os.environ.get("DIALOGRAPH_PURE_PYTHON", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from . import _attention as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _attention_py
BACKEND = "compiled" if _compiled is not None else "python"

attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward

python_attention_forward = _attention_py.attention_forward
python_attention_backward = _attention_py.attention_backward
