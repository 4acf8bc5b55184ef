"""Shared finite-difference comparison for the gradient tests."""

import numpy as np


def rel_err(analytic, numeric, floor=1e-8):
    """Max absolute deviation scaled by the largest numeric component."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / scale
