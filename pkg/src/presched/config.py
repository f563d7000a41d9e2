"""Scenario configuration: defaults, the line-oriented config file format,
and validation.

Files are INI-style sections of ``key = value`` lines; every key is
optional and falls back to the defaults below, unknown keys are rejected
by name.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, fields, replace


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    # [system]
    f_c: float = 28e9                  # carrier frequency, Hz
    n_x: int = 8                       # UPA columns (N_T = n_x * n_y)
    n_y: int = 8
    tau_s: float = 0.1                 # slot length, s
    bandwidth: float = 100e6
    n_s: int = 14                      # symbols per RB
    n_re: int = 168                    # resource elements per RB (12 subcarriers x n_s)
    n_sdm: int = 1
    n_slots: int = 11                  # total slots per scenario
    n_rb: int = 70
    # [scene]
    n_users: int = 10
    area_x: float = 20.0
    area_y: float = 20.0
    h_min: float = 0.5
    h_max: float = 2.0
    v_max_kmh: float = 25.0
    obstacle_density: float = 0.2
    bs_x: float = 0.0
    bs_y: float = 0.0
    bs_z: float = 4.0
    # [camera]
    cam_width_px: int = 1920
    cam_height_px: int = 1440
    cam_f_px: float = 960.0
    cam_boresight_az_deg: float = 45.0
    cam_boresight_el_deg: float = -20.0
    cam_offset_x: float = 0.0          # camera minus BS position
    cam_offset_y: float = 0.0
    cam_offset_z: float = 0.0
    p_miss: float = 0.045
    sigma_px: float = 1.0
    sigma_depth: float = 0.0
    # [channel]
    l_max: int = 3
    p_keep: float = 0.9
    p_birth: float = 0.3
    reflection_loss_db: float = 10.0
    shadow_sigma_db: float = 4.0
    tx_power: float = 1.0              # per-RB transmit power budget
    noise_power: float = 1e-9
    # [prediction]
    window: int = 3                    # trajectory / estimate history length
    predictor: str = "kalman"          # kalman | linear | external | last | zero | oracle
    ar_order: int = 2
    score_threshold_db: float = -20.0
    lambda_reg: float = 1.0
    endpoint_url: str = ""
    endpoint_deadline_s: float = 0.05
    kalman_q_px: float = 100.0
    kalman_q_r: float = 1.0
    # [scheduler]
    policy: str = "preemptive"         # preemptive | pf_reactive | round_robin | max_snr
    g_max: int = 4
    ser_max: float = 0.1
    r_min: float = 1000.0              # per-user rate requirement, bits per slot
    alpha_pf: float = 0.1
    rbar_floor: float = 1.0
    mcs_table_path: str = ""
    # [run]
    seed: int = 1234

    @property
    def n_t(self) -> int:
        return self.n_x * self.n_y

    @property
    def v_max_mps(self) -> float:
        return self.v_max_kmh / 3.6

    def validate(self) -> None:
        positive = ["f_c", "tau_s", "bandwidth", "n_s", "n_re", "n_sdm", "n_slots",
                    "n_rb", "n_users", "area_x", "area_y", "h_max", "l_max",
                    "cam_f_px", "cam_width_px", "cam_height_px", "tx_power",
                    "noise_power", "window", "g_max"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_x < 1 or self.n_y < 1:
            raise ConfigError("array dimensions must be at least 1")
        if not 0.0 <= self.p_miss < 1.0:
            raise ConfigError(f"p_miss must be in [0, 1), got {self.p_miss}")
        if not 0.0 < self.ser_max < 1.0:
            raise ConfigError(f"ser_max must be in (0, 1), got {self.ser_max}")
        if not 0.0 <= self.obstacle_density < 0.9:
            raise ConfigError(f"obstacle_density must be in [0, 0.9), got {self.obstacle_density}")
        if self.h_min < 0 or self.h_min > self.h_max:
            raise ConfigError("need 0 <= h_min <= h_max")
        if self.v_max_kmh < 0:
            raise ConfigError("v_max_kmh must be non-negative")
        if not 0.0 <= self.p_keep <= 1.0 or not 0.0 <= self.p_birth <= 1.0:
            raise ConfigError("p_keep and p_birth must be probabilities")
        if self.predictor not in ("kalman", "linear", "external", "last", "zero", "oracle"):
            raise ConfigError(f"unknown predictor: {self.predictor}")
        if self.policy not in ("preemptive", "pf_reactive", "round_robin", "max_snr"):
            raise ConfigError(f"unknown policy: {self.policy}")
        if self.r_min < 0:
            raise ConfigError("r_min must be non-negative")
        if self.predictor == "external" and not self.endpoint_url:
            raise ConfigError("external predictor requires endpoint_url")


_SECTIONS = {
    "system": ["f_c", "n_x", "n_y", "tau_s", "bandwidth", "n_s", "n_re", "n_sdm",
               "n_slots", "n_rb"],
    "scene": ["n_users", "area_x", "area_y", "h_min", "h_max", "v_max_kmh",
              "obstacle_density", "bs_x", "bs_y", "bs_z"],
    "camera": ["cam_width_px", "cam_height_px", "cam_f_px", "cam_boresight_az_deg",
               "cam_boresight_el_deg", "cam_offset_x", "cam_offset_y", "cam_offset_z",
               "p_miss", "sigma_px", "sigma_depth"],
    "channel": ["l_max", "p_keep", "p_birth", "reflection_loss_db", "shadow_sigma_db",
                "tx_power", "noise_power"],
    "prediction": ["window", "predictor", "ar_order", "score_threshold_db",
                   "lambda_reg", "endpoint_url", "endpoint_deadline_s",
                   "kalman_q_px", "kalman_q_r"],
    "scheduler": ["policy", "g_max", "ser_max", "r_min", "alpha_pf", "rbar_floor",
                  "mcs_table_path"],
    "run": ["seed"],
}

_FIELD_TYPES = {f.name: f.type for f in fields(ScenarioConfig)}
_KEY_TO_SECTION = {key: sec for sec, keys in _SECTIONS.items() for key in keys}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def load_config(path: str) -> ScenarioConfig:
    """Parse and validate a config file; missing keys take defaults."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    cfg = ScenarioConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            setattr(cfg, key, _coerce(key, raw))
    cfg.validate()
    return cfg


def dumps_config(cfg: ScenarioConfig) -> str:
    parser = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        parser[section] = {key: repr(getattr(cfg, key)).strip("'") for key in keys}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: ScenarioConfig, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_config(cfg))


def with_overrides(cfg: ScenarioConfig, **overrides) -> ScenarioConfig:
    out = replace(cfg, **overrides)
    out.validate()
    return out
