"""Ground-truth channel synthesis: UPA steering vectors, 3GPP-style large
scale fading, and a persistent virtual-scatterer field for NLoS paths.

Channels are narrowband block-fading: one complex vector per user per slot,
shared by every resource block in the slot.  Scatterer geometry persists
across slots (survival probability ``p_keep``) while per-path small-scale
gains are redrawn each slot; the LoS small-scale factor is drawn once per
user by the caller so the LoS component evolves smoothly with geometry.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .scene import SceneState, Vec3, direction_to_angles

SPEED_OF_LIGHT = 299_792_458.0


@dataclass
class ArrayGeometry:
    n_x: int
    n_y: int
    f_c: float
    spacing: float = 0.5  # element pitch in carrier wavelengths

    @property
    def n_t(self) -> int:
        return self.n_x * self.n_y


@dataclass
class PathParams:
    gain: complex
    distance: float
    azimuth: float
    elevation: float


@dataclass
class ChannelParams:
    user_id: int
    los: int                      # LoS availability flag, 0 or 1
    los_path: PathParams | None   # present iff los == 1
    nlos_paths: list[PathParams] = field(default_factory=list)


def array_response(geom: ArrayGeometry, azimuth: float, elevation: float) -> np.ndarray:
    """UPA steering vector, unit-modulus entries, flattened row-major with
    the x-index p outer:  entry(p, q) = exp(j 2 pi s (p sin(az) cos(el) + q sin(el)))."""
    u = math.sin(azimuth) * math.cos(elevation)
    v = math.sin(elevation)
    p = np.arange(geom.n_x)[:, None]
    q = np.arange(geom.n_y)[None, :]
    phase = 2.0 * math.pi * geom.spacing * (p * u + q * v)
    return np.exp(1j * phase).reshape(-1)


def large_scale_gain(r: float, f_c: float, z_shadow: float, sigma_sh: float = 4.0) -> float:
    """Linear amplitude sqrt(beta_L) from the indoor path-loss model
    31.84 + 21.5 log10(r) + 19 log10(f_GHz) with log-normal shadowing.

    ``f_c`` enters in GHz per the 3GPP convention; ``z_shadow`` is the unit
    normal shadowing draw (held fixed per user by callers).
    """
    if r <= 0:
        raise ValueError("distance must be positive")
    f_ghz = f_c / 1e9
    pl_db = -(31.84 + 21.5 * math.log10(r) + 19.0 * math.log10(f_ghz))
    beta = 10.0 ** ((pl_db + z_shadow * sigma_sh) / 10.0)
    return math.sqrt(beta)


def phase_term(f_c: float, distance: float) -> complex:
    """Propagation phase e^{-j 2 pi f_c r / c} of a path of length r."""
    return complex(np.exp(-1j * 2.0 * math.pi * f_c * distance / SPEED_OF_LIGHT))


def compose_channel(params: ChannelParams, geom: ArrayGeometry) -> np.ndarray:
    """Superpose LoS (gated by the flag) and NLoS components."""
    h = np.zeros(geom.n_t, dtype=complex)
    if params.los and params.los_path is not None:
        p = params.los_path
        h += p.gain * phase_term(geom.f_c, p.distance) * array_response(geom, p.azimuth, p.elevation)
    for p in params.nlos_paths:
        h += p.gain * phase_term(geom.f_c, p.distance) * array_response(geom, p.azimuth, p.elevation)
    return h


@dataclass
class _Scatterer:
    point: Vec3
    sid: int


class NlosScattererField:
    """Per-user virtual scatterer population.

    Each slot every scatterer survives with probability ``p_keep``, a new
    one is born with probability ``p_birth`` while below ``l_max``, and the
    population is floored at one path.  Path angles follow the BS->scatterer
    direction; the path length is BS->scatterer->user; gains combine path
    loss over the full length, a fixed reflection loss, and a fresh complex
    normal small-scale factor every slot.
    """

    def __init__(
        self,
        bounds: np.ndarray,
        l_max: int,
        p_keep: float = 0.9,
        p_birth: float = 0.3,
        reflection_loss_db: float = 10.0,
        height_range: tuple[float, float] = (0.5, 3.0),
    ):
        if l_max < 1:
            raise ValueError("l_max must be at least 1")
        self.bounds = bounds
        self.l_max = l_max
        self.p_keep = p_keep
        self.p_birth = p_birth
        self.reflection_amp = 10.0 ** (-reflection_loss_db / 20.0)
        self.height_range = height_range
        self._scatterers: list[_Scatterer] = []
        self._next_id = 0

    def _spawn(self, rng: np.random.Generator) -> _Scatterer:
        x = rng.uniform(self.bounds[0, 0], self.bounds[0, 1])
        y = rng.uniform(self.bounds[1, 0], self.bounds[1, 1])
        z = rng.uniform(*self.height_range)
        s = _Scatterer(np.array([x, y, z]), self._next_id)
        self._next_id += 1
        return s

    def advance(
        self,
        bs_position: Vec3,
        user_position: Vec3,
        f_c: float,
        z_shadow: float,
        rng: np.random.Generator,
    ) -> list[PathParams]:
        """Evolve the population one slot and emit this slot's path list."""
        survivors = [s for s in self._scatterers if rng.uniform() < self.p_keep]
        if len(survivors) < self.l_max and rng.uniform() < self.p_birth:
            survivors.append(self._spawn(rng))
        if not survivors:
            survivors.append(self._spawn(rng))
        self._scatterers = survivors

        paths = []
        for s in survivors:
            d_bs = float(np.linalg.norm(s.point - bs_position))
            d_user = float(np.linalg.norm(user_position - s.point))
            total = d_bs + d_user
            az, el = direction_to_angles(bs_position, s.point)
            beta_small = (rng.normal() + 1j * rng.normal()) / math.sqrt(2.0)
            amp = large_scale_gain(total, f_c, z_shadow) * self.reflection_amp
            paths.append(PathParams(amp * beta_small, total, az, el))
        return paths


def spawn_nlos_paths(
    field_state: NlosScattererField,
    scene: SceneState,
    user_index: int,
    f_c: float,
    z_shadow: float,
    rng: np.random.Generator,
) -> list[PathParams]:
    """Convenience wrapper advancing one user's scatterer field from a scene."""
    bs = scene.camera.position
    user = scene.users[user_index]
    return field_state.advance(bs, user.position, f_c, z_shadow, rng)


def dump_channel_csv(rows: list[tuple[int, int, ChannelParams]], path: str) -> None:
    """Ground-truth parameter dump (slot, user, flag, then one line per path)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "user", "los", "path", "gain_re", "gain_im",
                         "distance", "azimuth", "elevation"])
        for slot, user, params in rows:
            paths = []
            if params.los and params.los_path is not None:
                paths.append(("los", params.los_path))
            paths.extend((f"nlos{i}", p) for i, p in enumerate(params.nlos_paths))
            for name, p in paths:
                writer.writerow([
                    slot, user, params.los, name,
                    f"{p.gain.real:.12g}", f"{p.gain.imag:.12g}",
                    f"{p.distance:.12g}", f"{p.azimuth:.12g}", f"{p.elevation:.12g}",
                ])
