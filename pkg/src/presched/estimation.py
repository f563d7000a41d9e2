"""Pilot reception, channel estimation, LoS/NLoS decomposition, the SNR->SER
map, and MCS table machinery.

The channel estimator is a Wiener-shrunk scaled least squares: plain LS
de-pilot followed by the scalar factor gamma/(1+gamma) built from the prior
per-antenna SNR (infinite prior recovers plain LS).  The LoS gain estimator
inverts the steering vector by pseudo-inverse and de-rotates the measured
propagation phase, so the reconstructed LoS component is phase-consistent
with the raw estimate regardless of the absolute distance reference.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.special import erfc

from .channel import ArrayGeometry, array_response, phase_term

_BITS_RANGES = {2: range(0, 5), 4: range(5, 11), 6: range(11, 20), 8: range(20, 28)}


@dataclass
class PilotObservation:
    y: np.ndarray
    s: complex
    noise_power: float


@dataclass
class ChannelEstimate:
    h: np.ndarray
    h_los: np.ndarray
    h_nlos: np.ndarray
    alpha_los: complex | None  # None for users absent from the image


@dataclass
class McsTable:
    bits: np.ndarray                 # modulation bits per index
    spectral_efficiency: np.ndarray  # bits per resource element

    def __post_init__(self):
        if len(self.bits) != len(self.spectral_efficiency):
            raise ValueError("bits and spectral_efficiency must have equal length")
        if np.any(np.diff(self.spectral_efficiency) < 0):
            raise ValueError("spectral efficiency must be non-decreasing in m")
        for b, rng_m in _BITS_RANGES.items():
            for m in rng_m:
                if m < len(self.bits) and self.bits[m] != b:
                    raise ValueError(f"index {m} must map to {b} bits, got {self.bits[m]}")

    @property
    def m_max(self) -> int:
        return len(self.bits) - 1


def load_mcs_table(path: str | None = None) -> McsTable:
    """Load an MCS table CSV (columns m, bits, spectral_efficiency); the
    packaged 256QAM table is used when no path is given."""
    if path:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    else:
        ref = resources.files("presched").joinpath("data/mcs_table_256qam.csv")
        with ref.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["m"]))
    if [int(r["m"]) for r in rows] != list(range(len(rows))):
        raise ValueError("MCS indices must be contiguous starting at 0")
    bits = np.array([int(r["bits"]) for r in rows])
    se = np.array([float(r["spectral_efficiency"]) for r in rows])
    return McsTable(bits, se)


def receive_pilot(
    h: np.ndarray, s: complex, noise_power: float, rng: np.random.Generator
) -> PilotObservation:
    """y = h s + n with n ~ CN(0, noise_power I)."""
    if noise_power < 0:
        raise ValueError("noise_power must be non-negative")
    n = np.zeros(len(h), dtype=complex)
    if noise_power > 0:
        scale = math.sqrt(noise_power / 2.0)
        n = rng.normal(0.0, scale, len(h)) + 1j * rng.normal(0.0, scale, len(h))
    return PilotObservation(h * s + n, s, noise_power)


def estimate_channel(obs: PilotObservation, prior_snr: float) -> np.ndarray:
    """Wiener-shrunk scaled LS; prior_snr = inf gives plain LS, 0 gives zero."""
    ls = obs.y * np.conj(obs.s) / abs(obs.s) ** 2
    if math.isinf(prior_snr):
        return ls
    return (prior_snr / (1.0 + prior_snr)) * ls


def ls_los_gain(
    obs: PilotObservation,
    r_hat: float,
    azimuth: float,
    elevation: float,
    geom: ArrayGeometry,
) -> complex:
    """LS estimate of the LoS complex gain given geometry estimates.

    Pseudo-inverse of the steering vector applied to the de-piloted
    observation, de-rotated by the propagation phase of the measured
    distance.
    """
    a = array_response(geom, azimuth, elevation)
    depilot = obs.y * np.conj(obs.s) / abs(obs.s) ** 2
    raw = np.vdot(a, depilot) / geom.n_t     # a^H y s* / (N_T |s|^2)
    return raw / phase_term(geom.f_c, r_hat)  # e^{+j 2 pi f r / c} * raw


def decompose(
    obs: PilotObservation,
    h_hat: np.ndarray,
    los_geometry: tuple[float, float, float] | None,
    geom: ArrayGeometry,
) -> ChannelEstimate:
    """Split an estimate into LoS and NLoS parts.

    ``los_geometry`` is (distance, azimuth, elevation) for users present in
    the image; absent users get a zero LoS component and keep the whole
    estimate as NLoS.  The sum identity h = h_los + h_nlos holds exactly by
    construction.
    """
    if los_geometry is None:
        zero = np.zeros_like(h_hat)
        return ChannelEstimate(h_hat, zero, h_hat.copy(), None)
    r_hat, azimuth, elevation = los_geometry
    alpha = ls_los_gain(obs, r_hat, azimuth, elevation, geom)
    h_los = alpha * phase_term(geom.f_c, r_hat) * array_response(geom, azimuth, elevation)
    return ChannelEstimate(h_hat, h_los, h_hat - h_los, alpha)


def q_function(x):
    """Gaussian tail probability."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


def ser_from_snr(snr: float, bits: int) -> float:
    """Symbol error rate of the modulation with ``bits`` bits per symbol.

    QPSK uses the exact two-branch expression in per-branch SNR; higher
    orders use the square-QAM expression with constellation size 2**bits.
    """
    if snr < 0:
        raise ValueError("snr must be non-negative")
    if bits == 2:
        p = q_function(math.sqrt(2.0 * snr))
        return float(1.0 - (1.0 - p) ** 2)
    if bits in (4, 6, 8):
        m_c = 2 ** bits
        factor = 2.0 * (math.sqrt(m_c) - 1.0) / math.sqrt(m_c)
        p = factor * q_function(math.sqrt(3.0 * snr / (m_c - 1.0)))
        return float(1.0 - (1.0 - p) ** 2)
    raise ValueError("bits must be one of 2, 4, 6, 8")


def min_rb_count(
    r_min: float, m: int, table: McsTable, n_re: int = 168, n_sdm: int = 1
) -> float:
    """Minimum RB count meeting a per-slot bit requirement at MCS ``m``.

    Returns math.inf as the infeasible marker when the table entry carries
    zero spectral efficiency.
    """
    f_m = float(table.spectral_efficiency[m])
    if f_m <= 0.0:
        return math.inf
    if r_min <= 0.0:
        return 0
    return int(math.ceil(r_min / (f_m * n_re * n_sdm)))
