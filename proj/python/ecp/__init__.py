"""Split conformal prediction with entropy bounds, conformal training and side information."""

from ._ecp import *  # noqa: F401,F403
from ._ecp import __doc__  # noqa: F401
