"""Matching camera detections to the user ids the BS already serves.

Each detection's estimated angles define a beamforming vector; correlating
those beams against the per-user channel estimates gives a rectangular
score matrix, and a minimum-cost one-to-one assignment on inverse
correlations resolves the ids.  Users missing from the image fall back to
the strongest codeword of a beam codebook for coarse geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .channel import ArrayGeometry, array_response

CORRELATION_EPS = 1e-12


def correlation_matrix(beams: np.ndarray, estimates: np.ndarray) -> np.ndarray:
    """R[i, k] = |h_k^H f_i| for detection beams f_i and user estimates h_k.

    ``beams`` is (K', N_T), ``estimates`` is (K, N_T).
    """
    beams = np.atleast_2d(beams)
    estimates = np.atleast_2d(estimates)
    return np.abs(np.conj(estimates) @ beams.T).T


@dataclass
class MatchResult:
    assignment: dict[int, int]   # detection index -> user index
    unidentified: list[int]      # detections absorbed by dummy columns
    total_cost: float


def hungarian_match(corr: np.ndarray, eps: float = CORRELATION_EPS) -> MatchResult:
    """Minimum-cost assignment of detections to users, cost = 1/(R + eps).

    Dummy columns (cost 10x the largest cost arising from a nonzero
    correlation) absorb detections that correlate with nobody, so an
    all-zero row comes back flagged unidentified instead of being forced
    onto an arbitrary user.
    """
    corr = np.atleast_2d(np.asarray(corr, dtype=float))
    if not np.isfinite(corr).all():
        raise ValueError("correlation matrix must be finite")
    n_det, n_user = corr.shape
    cost = 1.0 / (corr + eps)
    positive = cost[corr > 0.0]
    dummy_cost = 10.0 * float(positive.max()) if positive.size else 1.0
    padded = np.hstack([cost, np.full((n_det, n_det), dummy_cost)])
    rows, cols = linear_sum_assignment(padded)
    assignment: dict[int, int] = {}
    unidentified: list[int] = []
    total = 0.0
    for i, j in zip(rows, cols):
        total += padded[i, j]
        if j < n_user:
            assignment[int(i)] = int(j)
        else:
            unidentified.append(int(i))
    return MatchResult(assignment, unidentified, total)


@dataclass
class BeamCodebook:
    codewords: np.ndarray  # (N, N_T), unit-norm rows
    azimuths: np.ndarray
    elevations: np.ndarray
    distances: np.ndarray  # nominal distance bin per codeword
    u_step: float          # grid pitch in the sin-azimuth domain
    v_step: float          # grid pitch in the sin-elevation domain


def build_codebook(
    geom: ArrayGeometry,
    n_az: int,
    n_el: int,
    az_span: tuple[float, float],
    el_span: tuple[float, float],
    nominal_distance: float = 10.0,
) -> BeamCodebook:
    """DFT-style codebook on a uniform grid in (sin az * cos el, sin el).

    Gridding in the u-v domain makes the correlation peak land on the
    nearest codeword, so the fallback angular error is bounded by half the
    grid step.
    """
    u_lo, u_hi = math.sin(az_span[0]), math.sin(az_span[1])
    v_lo, v_hi = math.sin(el_span[0]), math.sin(el_span[1])
    us = np.linspace(u_lo, u_hi, n_az)
    vs = np.linspace(v_lo, v_hi, n_el)
    codewords, azs, els = [], [], []
    for v in vs:
        el = math.asin(v)
        for u in us:
            arg = min(max(u / math.cos(el), -1.0), 1.0)
            az = math.asin(arg)
            a = array_response(geom, az, el)
            codewords.append(a / np.linalg.norm(a))
            azs.append(az)
            els.append(el)
    return BeamCodebook(
        np.array(codewords),
        np.array(azs),
        np.array(els),
        np.full(n_az * n_el, nominal_distance),
        us[1] - us[0] if n_az > 1 else 0.0,
        vs[1] - vs[0] if n_el > 1 else 0.0,
    )


def codebook_fallback(codebook: BeamCodebook, y: np.ndarray) -> tuple[float, float, float]:
    """Coarse (azimuth, elevation, distance) of the codeword maximizing
    |c^H y|^2; exact ties resolve to the lowest codeword index."""
    if codebook.codewords.size == 0:
        raise ValueError("codebook must be non-empty")
    power = np.abs(codebook.codewords.conj() @ y) ** 2
    idx = int(np.argmax(power))
    return (
        float(codebook.azimuths[idx]),
        float(codebook.elevations[idx]),
        float(codebook.distances[idx]),
    )
