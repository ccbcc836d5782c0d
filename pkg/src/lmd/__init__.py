"""Multiplicative-dynamics training toolkit.

Log-normal multiplicative optimizer, reference baselines, a bit-exact
Microscaling (MXFP6/MXFP4) forward-pass emulator, a minimal autodiff core and
a desk-scale experiment harness.
"""

from .lmd import LMD, LmdHyper
from .lognormal import LogNormalSpec, RngStream

__all__ = ["LMD", "LmdHyper", "LogNormalSpec", "RngStream"]
__version__ = "0.1.0"
