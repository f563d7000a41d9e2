"""Next-slot prediction: pixel/distance trajectories, blockage status, and
channel parameters, plus the text-prompt protocol for an optional external
inference endpoint.

Three trajectory methods share one interface: last-difference linear
extrapolation, an adaptive-noise constant-velocity Kalman filter replayed
over the history window, and an external endpoint speaking the canonical
prompt format.  Every method degrades to hold-last-value rather than fail,
and reports which path actually produced the value.
"""

from __future__ import annotations

import json
import math
import re
import urllib.error
import urllib.request
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .channel import (
    ArrayGeometry,
    ChannelParams,
    PathParams,
    array_response,
    compose_channel,
    phase_term,
)


class ParseError(ValueError):
    """Raised when a predictor response contains nothing parseable."""


@dataclass
class TrajectoryPoint:
    slot: int
    pixel: np.ndarray | None
    distance: float | None
    visible: bool


class Trajectory:
    """Ring buffer of the last ``window`` slots of one user's observations."""

    def __init__(self, window: int):
        self.window = window
        self._points: deque[TrajectoryPoint] = deque(maxlen=window)

    def append(self, point: TrajectoryPoint) -> None:
        if self._points and point.slot <= self._points[-1].slot:
            raise ValueError("slot indices must be strictly increasing")
        self._points.append(point)

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> list[TrajectoryPoint]:
        return list(self._points)

    def visible_points(self) -> list[TrajectoryPoint]:
        return [p for p in self._points if p.visible]


@dataclass
class PromptRecord:
    text: str
    kind: str  # "angles" or "distance"
    user_id: int
    slot: int


def build_prompt(traj_values, kind: str, user_id: int = 0, slot: int = 0) -> PromptRecord:
    """Render the canonical prediction prompt, numbers at one decimal place.

    ``traj_values`` is a sequence of (x, y) pairs for the "angles" kind or
    of scalars for the "distance" kind.  The text is a pure function of the
    inputs; identical histories produce byte-identical prompts.
    """
    values = list(traj_values)
    if not values:
        raise ValueError("history must be non-empty")
    n = len(values)
    if kind == "angles":
        clauses = ", ".join(
            f"(x_{i+1}, y_{i+1}) = ({float(p[0]):.1f}, {float(p[1]):.1f})"
            for i, p in enumerate(values)
        )
        text = (
            "Using the sequence of past x-y coordinate pairs: "
            f"{clauses}, predict the next pair (x_{n+1}, y_{n+1})"
        )
    elif kind == "distance":
        clauses = ", ".join(f"r_{i+1} = {float(v):.1f}" for i, v in enumerate(values))
        text = (
            "Using the sequence of past distance values: "
            f"{clauses}, predict the next distance value r_{n+1}"
        )
    else:
        raise ValueError(f"unknown prompt kind: {kind}")
    return PromptRecord(text, kind, user_id, slot)


def build_retry_prompt(traj_values, kind: str, user_id: int = 0, slot: int = 0) -> PromptRecord:
    """Longer-sequence re-prompt issued after a physically implausible reply."""
    base = build_prompt(traj_values, kind, user_id, slot)
    n = len(list(traj_values))
    if kind == "angles":
        head = f"If the predicted pair is physically implausible, predict the next pair (x_{n+1}, y_{n+1}) from the longer sequence: "
        body = base.text.split(": ", 1)[1].rsplit(", predict the next pair", 1)[0]
    else:
        head = f"If the predicted value is physically implausible, predict the next distance value r_{n+1} from the longer sequence: "
        body = base.text.split(": ", 1)[1].rsplit(", predict the next distance value", 1)[0]
    return PromptRecord(head + body, kind, user_id, slot)


_PAIR_RE = re.compile(r"\(\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\)")
_NUMBER_RE = re.compile(r"(?<![\w_.])(-?\d+(?:\.\d+)?)")


def parse_prediction_response(text: str, kind: str):
    """Extract the first (x, y) pair or first standalone number from free
    text; raises ParseError when nothing matches."""
    if not text:
        raise ParseError("empty response")
    if kind == "angles":
        m = _PAIR_RE.search(text)
        if not m:
            raise ParseError(f"no coordinate pair in response: {text!r}")
        return np.array([float(m.group(1)), float(m.group(2))])
    if kind == "distance":
        m = _NUMBER_RE.search(text)
        if not m:
            raise ParseError(f"no number in response: {text!r}")
        return float(m.group(1))
    raise ValueError(f"unknown prompt kind: {kind}")


# ---------------------------------------------------------------------------
# adaptive constant-velocity filter


class SageHusaCv1d:
    """Scalar constant-velocity Kalman filter with Sage-Husa adaptation of
    the measurement noise (forgetting factor ``b``).

    State [position, velocity]; the filter is two-point initialized so a
    noiseless constant-velocity track is locked exactly from the second
    measurement on.
    """

    def __init__(self, q: float = 1.0, r0: float = 1.0, b: float = 0.98,
                 r_floor: float = 1e-12):
        self.q = q
        self.b = b
        self.r_floor = r_floor
        self.r_hat = r0
        self.x: np.ndarray | None = None
        self.p = np.eye(2)
        self._first: float | None = None
        self._updates = 0

    def update(self, z: float, dt: float) -> None:
        if self.x is None:
            if self._first is None:
                self._first = z
                return
            v = (z - self._first) / dt
            self.x = np.array([z, v])
            self.p = np.array([[self.r_hat, self.r_hat / dt],
                               [self.r_hat / dt, 2.0 * self.r_hat / dt ** 2]])
            return
        f = np.array([[1.0, dt], [0.0, 1.0]])
        qm = self.q * np.array([[dt ** 4 / 4.0, dt ** 3 / 2.0],
                                [dt ** 3 / 2.0, dt ** 2]])
        x_pred = f @ self.x
        p_pred = f @ self.p @ f.T + qm
        e = z - x_pred[0]
        self._updates += 1
        d = (1.0 - self.b) / (1.0 - self.b ** self._updates)
        self.r_hat = max((1.0 - d) * self.r_hat + d * (e * e - p_pred[0, 0]), self.r_floor)
        s = p_pred[0, 0] + self.r_hat
        k = p_pred[:, 0] / s
        self.x = x_pred + k * e
        self.p = p_pred - np.outer(k, p_pred[0, :])

    def predict_ahead(self, dt: float) -> float:
        if self.x is None:
            if self._first is None:
                raise ValueError("filter has no measurements")
            return self._first
        return float(self.x[0] + self.x[1] * dt)


@dataclass
class PredictOutcome:
    pixel: np.ndarray | None
    distance: float | None
    method_used: str  # method that actually produced the value


def _linear_next(values: list[np.ndarray] | list[float]):
    return values[-1] + (values[-1] - values[-2])


def _kalman_next(points: list[TrajectoryPoint], tau_s: float, target_slot: int,
                 q_px: float, q_r: float) -> tuple[np.ndarray, float]:
    fx = SageHusaCv1d(q=q_px)
    fy = SageHusaCv1d(q=q_px)
    fr = SageHusaCv1d(q=q_r)
    prev_slot = None
    for p in points:
        dt = tau_s if prev_slot is None else (p.slot - prev_slot) * tau_s
        fx.update(float(p.pixel[0]), dt)
        fy.update(float(p.pixel[1]), dt)
        fr.update(float(p.distance), dt)
        prev_slot = p.slot
    dt_ahead = (target_slot - prev_slot) * tau_s
    pixel = np.array([fx.predict_ahead(dt_ahead), fy.predict_ahead(dt_ahead)])
    return pixel, fr.predict_ahead(dt_ahead)


def predict_next_state(
    traj: Trajectory,
    method: str,
    tau_s: float,
    target_slot: int | None = None,
    external: "ExternalPredictor | None" = None,
    q_px: float = 100.0,
    q_r: float = 1.0,
) -> PredictOutcome:
    """Predict the next (pixel, distance) for one user.

    Falls back to hold-last-value when the history is too short, and to
    linear extrapolation when the external endpoint times out or returns
    garbage; the outcome carries the method that actually ran.
    """
    points = traj.visible_points()
    if not points:
        raise ValueError("trajectory has no usable history")
    if target_slot is None:
        target_slot = points[-1].slot + 1
    if len(points) == 1:
        return PredictOutcome(points[-1].pixel.copy(), points[-1].distance, "hold")

    if method == "linear":
        pixel = _linear_next([p.pixel for p in points[-2:]])
        dist = _linear_next([p.distance for p in points[-2:]])
        return PredictOutcome(pixel, dist, "linear")
    if method == "kalman":
        pixel, dist = _kalman_next(points, tau_s, target_slot, q_px, q_r)
        return PredictOutcome(pixel, dist, "kalman")
    if method == "external":
        if external is None:
            raise ValueError("external method requires a configured endpoint")
        return external.predict(points)
    raise ValueError(f"unknown prediction method: {method}")


class ExternalPredictor:
    """HTTP client for an external next-value predictor.

    Wire protocol: POST {"kind": ..., "prompt": ...}; reply {"text": ...}
    parsed by parse_prediction_response.  A physically implausible pixel
    jump triggers one longer-sequence retry; any failure after that falls
    back to linear extrapolation.  Every prompt/response is appended to the
    JSON-lines audit log when one is configured.
    """

    def __init__(
        self,
        url: str,
        deadline_s: float = 0.05,
        v_max: float = 7.0,
        tau_s: float = 0.1,
        f_px: float = 960.0,
        short_window: int = 3,
        audit_path: str | None = None,
    ):
        self.url = url
        self.deadline_s = deadline_s
        self.v_max = v_max
        self.tau_s = tau_s
        self.f_px = f_px
        self.short_window = short_window
        self.audit_path = audit_path

    def _post(self, record: PromptRecord) -> str:
        body = json.dumps({"kind": record.kind, "prompt": record.text}).encode()
        req = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(req, timeout=self.deadline_s) as resp:
            reply = json.loads(resp.read().decode())
        text = reply["text"]
        self._audit(record, text)
        return text

    def _audit(self, record: PromptRecord, response: str | None) -> None:
        if not self.audit_path:
            return
        with open(self.audit_path, "a") as fh:
            fh.write(json.dumps({
                "kind": record.kind,
                "user": record.user_id,
                "slot": record.slot,
                "prompt": record.text,
                "response": response,
            }, sort_keys=True) + "\n")

    def _plausible(self, pixel: np.ndarray, last: TrajectoryPoint) -> bool:
        gate_px = 3.0 * self.v_max * self.tau_s * self.f_px / max(last.distance, 1e-6)
        return bool(np.linalg.norm(pixel - last.pixel) <= gate_px)

    def predict(self, points: list[TrajectoryPoint]) -> PredictOutcome:
        short = points[-self.short_window:]
        try:
            pixel, dist = self._query(short)
            if self._plausible(pixel, points[-1]):
                return PredictOutcome(pixel, dist, "external")
            pixel, dist = self._query(points, retry=True)
            if self._plausible(pixel, points[-1]):
                return PredictOutcome(pixel, dist, "external_retry")
        except (urllib.error.URLError, ParseError, KeyError, TimeoutError,
                json.JSONDecodeError, OSError):
            pass
        if len(points) >= 2:
            pixel = _linear_next([p.pixel for p in points[-2:]])
            dist = _linear_next([p.distance for p in points[-2:]])
            return PredictOutcome(pixel, dist, "linear_fallback")
        return PredictOutcome(points[-1].pixel.copy(), points[-1].distance, "hold")

    def _query(self, points: list[TrajectoryPoint], retry: bool = False):
        builder = build_retry_prompt if retry else build_prompt
        uid, slot = 0, points[-1].slot
        angle_prompt = builder([p.pixel for p in points], "angles", uid, slot)
        dist_prompt = builder([p.distance for p in points], "distance", uid, slot)
        pixel = parse_prediction_response(self._post(angle_prompt), "angles")
        dist = parse_prediction_response(self._post(dist_prompt), "distance")
        return pixel, float(dist)


# ---------------------------------------------------------------------------
# blockage rule


@dataclass
class ObstacleBox:
    oid: int
    center_px: np.ndarray
    wh: np.ndarray
    depth: float


def predict_blockage(
    pred_pixels: dict[int, np.ndarray],
    pred_distances: dict[int, float],
    obstacles: list[ObstacleBox],
) -> tuple[dict[int, int], list[tuple[int, int]]]:
    """Future LoS flag per user from predicted image location and distance.

    A user overlapping an obstacle's bounding box is blocked when its
    predicted distance is not shorter than that obstacle's distance; users
    overlapping nothing stay LoS.
    """
    delta_hat: dict[int, int] = {}
    overlaps: list[tuple[int, int]] = []
    for uid, pixel in pred_pixels.items():
        flag = 1
        for box in obstacles:
            if (abs(pixel[0] - box.center_px[0]) <= box.wh[0] / 2.0
                    and abs(pixel[1] - box.center_px[1]) <= box.wh[1] / 2.0):
                overlaps.append((uid, box.oid))
                if pred_distances[uid] >= box.depth:
                    flag = 0
        delta_hat[uid] = flag
    return delta_hat, overlaps


# ---------------------------------------------------------------------------
# channel parameter prediction (autoregressive stand-in)


@dataclass
class ParamSnapshot:
    """Per-slot decomposition summary fed to the parameter predictor."""
    alpha_los: complex | None
    nlos_paths: list[PathParams] = field(default_factory=list)


@dataclass
class PredictionRecord:
    user_id: int
    pixel: np.ndarray | None
    azimuth: float
    elevation: float
    distance: float
    los: int
    alpha_los: complex
    nlos_paths: list[PathParams]
    nlos_scores: list[float]
    method: str


def fit_ar_predict(seq: list[complex], order: int) -> complex:
    """One-step-ahead prediction by least-squares AR on a short window.

    The effective order shrinks with the history so the fit keeps at least
    two equations where possible.  Short windows overfit badly on
    unpredictable series, so the output magnitude blends the AR value with
    the window's RMS envelope, weighted by the lag-1 correlation of the
    window: a deterministic first-order recursion (correlation exactly 1)
    passes through untouched, while a white sequence degrades to an
    envelope-faithful value whose power matches the history.
    """
    seq = [complex(v) for v in seq]
    n = len(seq)
    if n == 0:
        return 0.0 + 0.0j
    if n == 1:
        return seq[-1]
    p = min(order, max(1, (n - 1) // 2)) if n >= 3 else 1
    rows = [[seq[t - i - 1] for i in range(p)] for t in range(p, n)]
    target = [seq[t] for t in range(p, n)]
    coeffs, *_ = np.linalg.lstsq(np.array(rows), np.array(target), rcond=None)
    pred = complex(np.dot(coeffs, [seq[-1 - i] for i in range(p)]))
    heads = np.array(seq[1:])
    tails = np.array(seq[:-1])
    denom = math.sqrt(float(np.sum(np.abs(heads) ** 2) * np.sum(np.abs(tails) ** 2)))
    rho = abs(complex(np.vdot(tails, heads))) / denom if denom > 0 else 0.0
    cap = max(abs(v) for v in seq)
    mag = min(abs(pred), cap)
    rms = math.sqrt(sum(abs(v) ** 2 for v in seq) / n)
    blended = rho * mag + (1.0 - rho) * rms
    phase = pred / abs(pred) if abs(pred) > 0 else seq[-1] / max(abs(seq[-1]), 1e-30)
    return blended * phase


def _angular_distance(a: PathParams, b: PathParams) -> float:
    return math.hypot(a.azimuth - b.azimuth, a.elevation - b.elevation)


def _associate_tracks(history: list[ParamSnapshot], gate_rad: float) -> list[list[PathParams]]:
    """Greedy nearest-angle association of NLoS paths across slots; paths
    with no match inside the gate start fresh tracks."""
    tracks: list[list[PathParams]] = []
    alive: list[int] = []
    for snap in history:
        candidates = [(idx, p) for idx, p in enumerate(snap.nlos_paths)]
        pairs = []
        for t_idx in alive:
            last = tracks[t_idx][-1]
            for c_idx, p in candidates:
                d = _angular_distance(last, p)
                if d <= gate_rad:
                    pairs.append((d, t_idx, c_idx))
        pairs.sort(key=lambda x: (x[0], x[1], x[2]))
        used_tracks, used_paths = set(), set()
        next_alive = []
        for d, t_idx, c_idx in pairs:
            if t_idx in used_tracks or c_idx in used_paths:
                continue
            tracks[t_idx].append(snap.nlos_paths[c_idx])
            used_tracks.add(t_idx)
            used_paths.add(c_idx)
            next_alive.append(t_idx)
        for c_idx, p in candidates:
            if c_idx not in used_paths:
                tracks.append([p])
                next_alive.append(len(tracks) - 1)
        alive = next_alive
    return [tracks[i] for i in alive]


def predict_params(
    history: list[ParamSnapshot],
    order: int = 2,
    l_max: int = 3,
    score_threshold_db: float = -20.0,
    gate_deg: float = 5.0,
) -> tuple[complex, list[PathParams], list[float]]:
    """Predict next-slot LoS gain and NLoS path parameters.

    The LoS gain is autoregressed over its complex history; each surviving
    NLoS track autoregresses its gain and linearly extrapolates geometry.
    Per-path scores are powers relative to the strongest predicted path;
    paths below the threshold are dropped.
    """
    if not history:
        return 0.0 + 0.0j, [], []
    alpha_hist = [s.alpha_los for s in history if s.alpha_los is not None]
    alpha_pred = fit_ar_predict(alpha_hist, order) if alpha_hist else 0.0 + 0.0j

    tracks = _associate_tracks(history, math.radians(gate_deg))
    predicted: list[PathParams] = []
    for track in tracks:
        gain = fit_ar_predict([p.gain for p in track], order)
        if len(track) >= 2:
            az = track[-1].azimuth + (track[-1].azimuth - track[-2].azimuth)
            el = track[-1].elevation + (track[-1].elevation - track[-2].elevation)
            r = track[-1].distance + (track[-1].distance - track[-2].distance)
        else:
            az, el, r = track[-1].azimuth, track[-1].elevation, track[-1].distance
        predicted.append(PathParams(gain, max(r, 1e-3), az, el))

    if not predicted:
        return alpha_pred, [], []
    powers = np.array([abs(p.gain) ** 2 for p in predicted])
    strongest = powers.max()
    if strongest <= 0:
        return alpha_pred, [], []
    scores = powers / strongest
    threshold = 10.0 ** (score_threshold_db / 10.0)
    keep = [i for i in np.argsort(-powers, kind="stable") if scores[i] >= threshold][:l_max]
    keep.sort()
    return alpha_pred, [predicted[i] for i in keep], [float(scores[i]) for i in keep]


def extract_nlos_paths(
    h_nlos: np.ndarray,
    geom: ArrayGeometry,
    dictionary: tuple[np.ndarray, np.ndarray, np.ndarray],
    l_max: int,
    distance_hint: float = 10.0,
    power_floor: float = 1e-4,
) -> list[PathParams]:
    """Matching-pursuit extraction of up to ``l_max`` paths from an NLoS
    residual vector using a steering dictionary (atoms, azimuths,
    elevations).

    The unobservable per-path distance is replaced by the hint; the phase
    difference folds into the complex gain so recomposition is exact for a
    single-atom component.
    """
    atoms, azs, els = dictionary
    residual = h_nlos.astype(complex).copy()
    total = float(np.vdot(h_nlos, h_nlos).real)
    paths: list[PathParams] = []
    if total <= 0:
        return paths
    for _ in range(l_max):
        scores = np.abs(atoms.conj() @ residual)
        idx = int(np.argmax(scores))
        atom = atoms[idx]
        coeff = complex(np.vdot(atom, residual) / geom.n_t)
        if abs(coeff) ** 2 * geom.n_t < power_floor * total:
            break
        residual = residual - coeff * atom
        gain = coeff / phase_term(geom.f_c, distance_hint)
        paths.append(PathParams(gain, distance_hint, float(azs[idx]), float(els[idx])))
    return paths


def make_steering_dictionary(
    geom: ArrayGeometry,
    n_az: int = 48,
    n_el: int = 12,
    az_span: tuple[float, float] = (-math.pi / 2.2, math.pi / 2.2),
    el_span: tuple[float, float] = (-math.pi / 3, math.pi / 3),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    azs = np.linspace(az_span[0], az_span[1], n_az)
    els = np.linspace(el_span[0], el_span[1], n_el)
    grid_az, grid_el = np.meshgrid(azs, els)
    grid_az, grid_el = grid_az.ravel(), grid_el.ravel()
    atoms = np.array([array_response(geom, a, e) for a, e in zip(grid_az, grid_el)])
    return atoms, grid_az, grid_el


def reconstruct_channel(pred: PredictionRecord, geom: ArrayGeometry) -> np.ndarray:
    """Compose the predicted channel from predicted parameters."""
    los_path = None
    if pred.los:
        los_path = PathParams(pred.alpha_los, pred.distance, pred.azimuth, pred.elevation)
    return compose_channel(
        ChannelParams(pred.user_id, pred.los, los_path, pred.nlos_paths), geom
    )


# ---------------------------------------------------------------------------
# scoring metrics


def flatten_paths(paths: list[PathParams], l_max: int) -> np.ndarray:
    """(Re gain, Im gain, azimuth, elevation, distance) per path, zero-padded
    to ``l_max`` rows."""
    out = np.zeros((l_max, 5))
    for i, p in enumerate(paths[:l_max]):
        out[i] = [p.gain.real, p.gain.imag, p.azimuth, p.elevation, p.distance]
    return out


def prediction_losses(
    true_gains: np.ndarray,
    pred_gains: np.ndarray,
    true_paths: np.ndarray,
    pred_paths: np.ndarray,
    lam: float,
) -> tuple[float, float]:
    """Squared-L2 plus lam * L1 of the gain-vector error and of the NLoS
    parameter-matrix error (complex gains counted as two real entries)."""
    true_gains = np.asarray(true_gains)
    pred_gains = np.asarray(pred_gains)
    if true_gains.shape != pred_gains.shape:
        raise ValueError("gain shapes differ")
    if np.asarray(true_paths).shape != np.asarray(pred_paths).shape:
        raise ValueError("path matrix shapes differ")
    d_gain = true_gains - pred_gains
    gain_real = np.concatenate([np.real(d_gain).ravel(), np.imag(d_gain).ravel()]) \
        if np.iscomplexobj(d_gain) else np.asarray(d_gain, dtype=float).ravel()
    d_path = (np.asarray(true_paths, dtype=float) - np.asarray(pred_paths, dtype=float)).ravel()
    loss_gain = float(np.sum(gain_real ** 2) + lam * np.sum(np.abs(gain_real)))
    loss_path = float(np.sum(d_path ** 2) + lam * np.sum(np.abs(d_path)))
    return loss_gain, loss_path


def nmse_db(h_true: np.ndarray, h_pred: np.ndarray) -> float:
    """10 log10(||h - h_hat||^2 / ||h||^2); -inf for a perfect prediction,
    NaN marker when the reference has zero energy."""
    ref = float(np.vdot(h_true, h_true).real)
    if ref == 0.0:
        return math.nan
    err = h_true - h_pred
    num = float(np.vdot(err, err).real)
    if num == 0.0:
        return -math.inf
    return 10.0 * math.log10(num / ref)
