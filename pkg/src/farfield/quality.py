"""Signal-quality oracles used to evaluate enhancement against known clean parts."""
from __future__ import annotations

import numpy as np


def si_sdr(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Scale-invariant SDR in dB of a 1-D estimate against a 1-D reference."""
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    n = min(len(estimate), len(reference))
    estimate, reference = estimate[:n], reference[:n]
    scale = np.dot(estimate, reference) / max(np.dot(reference, reference), 1e-20)
    target = scale * reference
    residual = estimate - target
    return float(10 * np.log10(max(np.dot(target, target), 1e-20) / max(np.dot(residual, residual), 1e-20)))


def direct_to_late_ratio(observed: np.ndarray, early: np.ndarray) -> float:
    """Energy ratio in dB between the part of ``observed`` explained by the
    early (direct + first 50 ms) image and everything else, pooled over channels.

    Each channel's early image is least-squares scaled onto the observation
    first, so the figure is insensitive to the overall gain of a filter.
    """
    observed = np.atleast_2d(observed)
    early = np.atleast_2d(early)
    scale = np.sum(observed * early, axis=1, keepdims=True) / np.maximum(
        np.sum(early * early, axis=1, keepdims=True), 1e-20
    )
    target = scale * early
    return float(10 * np.log10(np.sum(target**2) / max(np.sum((observed - target) ** 2), 1e-20)))


def snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    return float(10 * np.log10(np.sum(np.square(signal)) / max(np.sum(np.square(noise)), 1e-20)))
