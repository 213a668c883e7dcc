"""Kernel backend selection.

The compiled extension is used when it imported successfully; otherwise
the numpy fallback takes over transparently. Setting the environment
variable ``CLKOOP_NO_EXTENSION=1`` before import forces the fallback,
which is mainly useful for the backend benchmark and for debugging.
"""

import os

from . import fallback as _fallback

_impl = _fallback
if os.environ.get("CLKOOP_NO_EXTENSION", "") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled

BACKEND_NAME = _impl.BACKEND_NAME
linear_rollout = _impl.linear_rollout
linear_rollout_batch = _impl.linear_rollout_batch
furuta_rk4_step = _impl.furuta_rk4_step
furuta_episode_loop = _impl.furuta_episode_loop
furuta_derivatives = _fallback.furuta_derivatives
