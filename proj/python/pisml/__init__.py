"""Python bindings for the pisml C++ core."""

from ._pisml import *  # noqa: F401,F403
from ._pisml import __doc__  # noqa: F401
