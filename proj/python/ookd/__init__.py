"""Offline-to-online knowledge distillation for video instance segmentation.

Thin wrapper over the compiled extension; everything public lives in
``ookd._ookd``.
"""

from ._ookd import *  # noqa: F401,F403
from ._ookd import __version__  # noqa: F401
