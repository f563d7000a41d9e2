"""End-to-end slot loop and experiment sweeps.

A scenario run has two phases.  Phase A draws the whole world first:
mobility, per-user shadowing and LoS small-scale factors, the scatterer
field, pilot noise, and camera detections for every slot.  Phase B replays
the base-station pipeline over that frozen world: estimate, identify,
decompose, predict the next slot, schedule one slot ahead, then score the
executed decision against ground truth.  All randomness lives in phase A,
so runs with equal (config, seed) are bit-identical and different policies
can be compared on paired worlds.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import channel as ch
from . import estimation as est
from . import identify as idf
from . import predict as prd
from . import scene as scn
from . import scheduler as sch
from .config import ScenarioConfig, with_overrides

SWEEP_AXES = {
    "SER_max": "ser_max",
    "K": "n_users",
    "velocity": "v_max_kmh",
    "obstacle_density": "obstacle_density",
}

SWEEP_COLUMNS = ["axis_value", "policy", "predictor", "seed", "R_total",
                 "mean_NMSE_dB", "blockage_accuracy", "violation_count"]


@dataclass
class GroundTruth:
    scenes: list[scn.SceneState]
    params: list[list[ch.ChannelParams]]     # [slot][user]
    h: np.ndarray                            # (T, K, N_T)
    delta: np.ndarray                        # (T, K)
    detections: list[list[scn.Detection]]
    pilots: list[list[est.PilotObservation]]


@dataclass
class RunResult:
    config: ScenarioConfig
    rows: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    decision_violations: list[str] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def write_csv(self, path: str) -> None:
        cols = ["slot", "user", "nmse_db", "err_energy", "ch_energy",
                "delta_hat", "delta_true", "rb_count", "mcs", "bits",
                "ser_violation"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.rows:
                writer.writerow([_fmt(row[c]) for c in cols])

    def write_events(self, path: str) -> None:
        with open(path, "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _camera_from_config(cfg: ScenarioConfig) -> scn.CameraModel:
    pos = scn.vec3(cfg.bs_x + cfg.cam_offset_x, cfg.bs_y + cfg.cam_offset_y,
                   cfg.bs_z + cfg.cam_offset_z)
    return scn.CameraModel(
        position=pos,
        boresight_az=math.radians(cfg.cam_boresight_az_deg),
        boresight_el=math.radians(cfg.cam_boresight_el_deg),
        f_px=cfg.cam_f_px,
        cx=cfg.cam_width_px / 2.0,
        cy=cfg.cam_height_px / 2.0,
        width_px=cfg.cam_width_px,
        height_px=cfg.cam_height_px,
    )


def build_ground_truth(cfg: ScenarioConfig, seed: int) -> GroundTruth:
    """Phase A: draw the full world for all slots."""
    ss = np.random.SeedSequence(seed)
    rng_scene, rng_mob, rng_chan, rng_pilot, rng_cam = (
        np.random.default_rng(s) for s in ss.spawn(5)
    )
    bounds = np.array([[0.0, cfg.area_x], [0.0, cfg.area_y]])
    bs = scn.vec3(cfg.bs_x, cfg.bs_y, cfg.bs_z)
    camera = _camera_from_config(cfg)
    obstacles = scn.generate_obstacles(bounds, cfg.obstacle_density, rng_scene, keepout=bs)
    users = scn.random_users(cfg.n_users, bounds, (cfg.h_min, cfg.h_max),
                             cfg.v_max_mps, rng_scene)
    state = scn.SceneState(0, users, obstacles, camera, bounds)
    geom = ch.ArrayGeometry(cfg.n_x, cfg.n_y, cfg.f_c)

    z_shadow = rng_chan.normal(size=cfg.n_users)
    beta_los = (rng_chan.normal(size=cfg.n_users)
                + 1j * rng_chan.normal(size=cfg.n_users)) / math.sqrt(2.0)
    fields = [
        ch.NlosScattererField(bounds, cfg.l_max, cfg.p_keep, cfg.p_birth,
                              cfg.reflection_loss_db)
        for _ in range(cfg.n_users)
    ]

    scenes, all_params, all_dets, all_pilots = [], [], [], []
    h = np.zeros((cfg.n_slots, cfg.n_users, geom.n_t), dtype=complex)
    delta = np.zeros((cfg.n_slots, cfg.n_users), dtype=int)
    for t in range(cfg.n_slots):
        if t > 0:
            state = scn.step_mobility(state, cfg.tau_s, rng_mob)
        scenes.append(state)
        slot_params, slot_pilots = [], []
        for k, user in enumerate(state.users):
            d = scn.los_visible(bs, user.position, obstacles)
            r = float(np.linalg.norm(user.position - bs))
            az, el = scn.direction_to_angles(bs, user.position)
            los_path = None
            if d:
                amp = ch.large_scale_gain(r, cfg.f_c, z_shadow[k], cfg.shadow_sigma_db)
                los_path = ch.PathParams(amp * beta_los[k], r, az, el)
            nlos = fields[k].advance(bs, user.position, cfg.f_c, z_shadow[k], rng_chan)
            params = ch.ChannelParams(k, d, los_path, nlos)
            slot_params.append(params)
            h[t, k] = ch.compose_channel(params, geom)
            delta[t, k] = d
            slot_pilots.append(est.receive_pilot(h[t, k], 1.0 + 0.0j,
                                                 cfg.noise_power, rng_pilot))
        all_params.append(slot_params)
        all_pilots.append(slot_pilots)
        all_dets.append(scn.project_and_detect(state, cfg.p_miss, cfg.sigma_px,
                                               rng_cam, cfg.sigma_depth))
    return GroundTruth(scenes, all_params, h, delta, all_dets, all_pilots)


def run_scenario(
    cfg: ScenarioConfig,
    seed: int | None = None,
    policy: str | None = None,
    predictor: str | None = None,
    truth: GroundTruth | None = None,
    external: prd.ExternalPredictor | None = None,
) -> RunResult:
    """Phase B: replay the BS pipeline over a (possibly shared) world."""
    policy = policy or cfg.policy
    predictor = predictor or cfg.predictor
    seed = cfg.seed if seed is None else seed
    if truth is None:
        truth = build_ground_truth(cfg, seed)
    geom = ch.ArrayGeometry(cfg.n_x, cfg.n_y, cfg.f_c)
    camera = truth.scenes[0].camera
    table = est.load_mcs_table(cfg.mcs_table_path or None)
    sched_cfg = sch.SchedulerConfig(
        n_rb=cfg.n_rb, g_max=cfg.g_max, n_t=geom.n_t, tx_power=cfg.tx_power,
        noise_power=cfg.noise_power, ser_max=cfg.ser_max, table=table,
        r_min=np.full(cfg.n_users, cfg.r_min), n_re=cfg.n_re, n_s=cfg.n_s,
        n_sdm=cfg.n_sdm,
    )
    codebook = idf.build_codebook(
        geom, n_az=16, n_el=8,
        az_span=(camera.boresight_az - math.pi / 4, camera.boresight_az + math.pi / 4),
        el_span=(camera.boresight_el - math.pi / 6, camera.boresight_el + math.pi / 6),
        nominal_distance=(cfg.area_x + cfg.area_y) / 4.0,
    )
    dictionary = prd.make_steering_dictionary(geom)
    if predictor == "external" and external is None:
        if not cfg.endpoint_url:
            raise ValueError("external predictor requires endpoint_url")
        external = prd.ExternalPredictor(
            cfg.endpoint_url, cfg.endpoint_deadline_s, cfg.v_max_mps,
            cfg.tau_s, cfg.cam_f_px,
        )

    result = RunResult(config=cfg)
    trajs = [prd.Trajectory(cfg.window) for _ in range(cfg.n_users)]
    histories: list[list[prd.ParamSnapshot]] = [[] for _ in range(cfg.n_users)]
    last_seen_r = [codebook.distances[0]] * cfg.n_users
    last_visible = [False] * cfg.n_users
    gamma_prior = [math.inf] * cfg.n_users
    rbar = np.full(cfg.n_users, cfg.rbar_floor)
    pending: dict[int, sch.ScheduleDecision] = {}
    pred_meta: dict[int, dict] = {}

    for t in range(cfg.n_slots):
        # score the decision made for this slot at t-1
        report = None
        if t in pending:
            decision = pending.pop(t)
            report = sch.realized_throughput(decision, truth.h[t], sched_cfg)
            rbar = sch.update_average_rate(rbar, report.bits, cfg.alpha_pf,
                                           cfg.rbar_floor)
            meta = pred_meta.pop(t)
            counts = decision.rb_counts()
            for k in range(cfg.n_users):
                result.rows.append({
                    "slot": t, "user": k,
                    "nmse_db": meta["nmse"][k],
                    "err_energy": meta["err_energy"][k],
                    "ch_energy": meta["ch_energy"][k],
                    "delta_hat": meta["delta_hat"][k],
                    "delta_true": int(truth.delta[t, k]),
                    "rb_count": int(counts[k]),
                    "mcs": int(decision.mcs[k]),
                    "bits": float(report.bits[k]),
                    "ser_violation": int(report.ser_violation[k]),
                })
            result.events.append({"slot": t, "event": "realized",
                                  **report.to_json_dict()})

        # observation pipeline for slot t
        estimates: list[est.ChannelEstimate] = []
        h_hat = np.zeros((cfg.n_users, geom.n_t), dtype=complex)
        for k in range(cfg.n_users):
            pilot = truth.pilots[t][k]
            h_hat[k] = est.estimate_channel(pilot, gamma_prior[k])
            # next slot's Wiener prior from the raw pilot energy (the shrunk
            # estimate would feed back on itself and collapse weak users)
            raw_power = float(np.linalg.norm(pilot.y / pilot.s) ** 2) / geom.n_t
            gamma_prior[k] = max(raw_power - cfg.noise_power, 1e-3 * cfg.noise_power) \
                / cfg.noise_power
        user_dets = [d for d in truth.detections[t]
                     if d.kind == "user" and d.visible]
        obstacle_boxes = [
            prd.ObstacleBox(d.obj_id, d.pixel, d.bbox_wh, d.depth)
            for d in truth.detections[t] if d.kind == "obstacle"
        ]
        assigned: dict[int, scn.Detection] = {}
        if user_dets:
            beams = np.array([
                ch.array_response(geom, *scn.pixel_to_angle(camera, d.pixel))
                for d in user_dets
            ])
            match = idf.hungarian_match(idf.correlation_matrix(beams, h_hat))
            for det_idx, user_idx in match.assignment.items():
                det = user_dets[det_idx]
                # plausibility gate against the user's own recent track: an
                # angle-adjacent identity swap shows up as a depth jump no
                # real movement could produce, and is safer rejected
                points = trajs[user_idx].visible_points()
                if points:
                    gap = t - points[-1].slot
                    depth_gate = 3.0 * cfg.v_max_mps * cfg.tau_s * gap + 0.5
                    if abs(det.depth - points[-1].distance) > depth_gate:
                        continue
                assigned[user_idx] = det
        for k in range(cfg.n_users):
            if k in assigned:
                det = assigned[k]
                az, el = scn.pixel_to_angle(camera, det.pixel)
                estimate = est.decompose(truth.pilots[t][k], h_hat[k],
                                         (det.depth, az, el), geom)
                trajs[k].append(prd.TrajectoryPoint(t, det.pixel.copy(),
                                                    det.depth, True))
                last_seen_r[k] = det.depth
                last_visible[k] = True
            else:
                fb_az, fb_el, fb_r = idf.codebook_fallback(codebook,
                                                           truth.pilots[t][k].y)
                estimate = est.decompose(truth.pilots[t][k], h_hat[k], None, geom)
                trajs[k].append(prd.TrajectoryPoint(t, None, None, False))
                last_seen_r[k] = fb_r if not last_visible[k] else last_seen_r[k]
                last_visible[k] = False
            estimates.append(estimate)
            histories[k].append(prd.ParamSnapshot(
                estimate.alpha_los,
                prd.extract_nlos_paths(estimate.h_nlos, geom, dictionary,
                                       cfg.l_max, last_seen_r[k]),
            ))
            if len(histories[k]) > cfg.window:
                histories[k].pop(0)

        # predict slot t+1 and schedule for it
        if t >= cfg.window - 1 and t < cfg.n_slots - 1:
            if t == cfg.window - 1:
                # warm-start the PF average at each user's first measured
                # rate so a floor-level average cannot dominate the metric
                rbar = np.maximum(sch.per_rb_rate_proxy(h_hat, sched_cfg),
                                  cfg.rbar_floor)
            h_pred, meta = _predict_slot(
                cfg, geom, camera, predictor, trajs, histories, estimates,
                obstacle_boxes, last_visible, last_seen_r, truth, t, external,
            )
            decision_channels = h_pred if policy == "preemptive" else h_hat
            decision = sch.schedule(decision_channels, policy, rbar, sched_cfg)
            violations = sch.validate_decision(decision, sched_cfg)
            result.decision_violations.extend(
                f"slot {t + 1}: {v}" for v in violations
            )
            pending[t + 1] = decision
            pred_meta[t + 1] = meta
            result.events.append({"slot": t + 1, "event": "decision",
                                  **decision.to_json_dict()})

    _aggregate(result)
    return result


def _predict_slot(cfg, geom, camera, predictor, trajs, histories, estimates,
                  obstacle_boxes, last_visible, last_seen_r, truth, t, external):
    """Per-user next-slot channel prediction plus bookkeeping metadata."""
    k_users = cfg.n_users
    h_pred = np.zeros((k_users, geom.n_t), dtype=complex)
    delta_hat = np.zeros(k_users, dtype=int)
    pixels: dict[int, np.ndarray] = {}
    dists: dict[int, float] = {}

    if predictor == "oracle":
        for k in range(k_users):
            params = truth.params[t + 1][k]
            los = params.los_path
            record = prd.PredictionRecord(
                k, None,
                los.azimuth if los else 0.0, los.elevation if los else 0.0,
                los.distance if los else last_seen_r[k],
                params.los, los.gain if los else 0.0 + 0.0j,
                params.nlos_paths, [1.0] * len(params.nlos_paths), "oracle",
            )
            h_pred[k] = prd.reconstruct_channel(record, geom)
            delta_hat[k] = params.los
    elif predictor == "zero":
        delta_hat[:] = [1 if v else 0 for v in last_visible]
    elif predictor == "last":
        for k in range(k_users):
            h_pred[k] = estimates[k].h
            delta_hat[k] = 1 if last_visible[k] else 0
    else:  # geometric stack: linear / kalman / external
        for k in range(k_users):
            points = trajs[k].visible_points()
            if len(points) >= 2 or (len(points) == 1 and points[-1].slot == t):
                outcome = prd.predict_next_state(
                    trajs[k], predictor, cfg.tau_s, target_slot=t + 1,
                    external=external, q_px=cfg.kalman_q_px, q_r=cfg.kalman_q_r,
                )
                pixels[k] = outcome.pixel
                dists[k] = float(outcome.distance)
        flags, _overlaps = prd.predict_blockage(pixels, dists, obstacle_boxes)
        for k in range(k_users):
            if k in flags:
                delta_hat[k] = flags[k]
            else:
                delta_hat[k] = 0  # absent from the image: assume blocked
            alpha, nlos, scores = prd.predict_params(
                histories[k], cfg.ar_order, cfg.l_max, cfg.score_threshold_db,
            )
            if k in pixels:
                az, el = scn.pixel_to_angle(camera, pixels[k])
                r_hat = max(dists[k], 0.5)
            else:
                az, el, r_hat = 0.0, 0.0, last_seen_r[k]
            if delta_hat[k] and alpha == 0:
                # LoS expected but no gain history: path-loss magnitude proxy
                alpha = complex(ch.large_scale_gain(r_hat, cfg.f_c, 0.0,
                                                    cfg.shadow_sigma_db))
            record = prd.PredictionRecord(
                k, pixels.get(k), az, el, r_hat, int(delta_hat[k]), alpha,
                nlos, scores, predictor,
            )
            h_pred[k] = prd.reconstruct_channel(record, geom)
            # implausibility guard: when no visibility change is predicted,
            # a reconstruction pointing away from the current estimate (a
            # mis-identification artifact) or blowing up in power degrades
            # to holding the estimate, mirroring the trajectory fallback
            if delta_hat[k] == (1 if last_visible[k] else 0):
                est_h = estimates[k].h
                e_est = float(np.vdot(est_h, est_h).real)
                e_pred = float(np.vdot(h_pred[k], h_pred[k]).real)
                if e_est > 0 and e_pred > 0:
                    cos = abs(np.vdot(h_pred[k], est_h)) / math.sqrt(e_pred * e_est)
                    if cos < 0.4 or e_pred > 9.0 * e_est:
                        h_pred[k] = est_h.copy()

    nmse = np.zeros(k_users)
    err_energy = np.zeros(k_users)
    ch_energy = np.zeros(k_users)
    for k in range(k_users):
        h_true = truth.h[t + 1, k]
        nmse[k] = prd.nmse_db(h_true, h_pred[k])
        err = h_true - h_pred[k]
        err_energy[k] = float(np.vdot(err, err).real)
        ch_energy[k] = float(np.vdot(h_true, h_true).real)
    meta = {"nmse": nmse, "err_energy": err_energy, "ch_energy": ch_energy,
            "delta_hat": delta_hat}
    return h_pred, meta


def _aggregate(result: RunResult) -> None:
    rows = result.rows
    if not rows:
        result.aggregates = {"R_total": 0.0, "mean_NMSE_dB": math.nan,
                             "blockage_accuracy": math.nan, "violation_count": 0,
                             "decision_violation_count": len(result.decision_violations)}
        return
    err = sum(r["err_energy"] for r in rows)
    ref = sum(r["ch_energy"] for r in rows)
    mean_nmse = -math.inf if err == 0 else (
        math.nan if ref == 0 else 10.0 * math.log10(err / ref))
    hits = sum(1 for r in rows if r["delta_hat"] == r["delta_true"])
    result.aggregates = {
        "R_total": float(sum(r["bits"] for r in rows)),
        "mean_NMSE_dB": mean_nmse,
        "blockage_accuracy": hits / len(rows),
        "violation_count": int(sum(r["ser_violation"] for r in rows)),
        "decision_violation_count": len(result.decision_violations),
    }


# ---------------------------------------------------------------------------
# sweeps


def scenario_seed(master_seed: int, value_index: int, rep: int) -> int:
    ss = np.random.SeedSequence((master_seed, value_index, rep))
    return int(ss.generate_state(1)[0])


def sweep_and_emit(
    cfg: ScenarioConfig,
    axis: str,
    values: list[float],
    reps: int,
    out_dir: str,
    policies: tuple[str, ...] = sch.ALL_POLICIES,
) -> dict[str, str]:
    """Run reps x values scenarios per policy on paired worlds and emit the
    raw and aggregate CSVs for the axis."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis: {axis} (choose from {sorted(SWEEP_AXES)})")
    if not values:
        raise ValueError("values must be non-empty")
    os.makedirs(out_dir, exist_ok=True)
    field_name = SWEEP_AXES[axis]
    raw_rows: list[dict] = []
    errors: list[dict] = []
    for vi, value in enumerate(values):
        setting = int(value) if field_name == "n_users" else value
        run_cfg = with_overrides(cfg, **{field_name: setting})
        for rep in range(reps):
            seed = scenario_seed(cfg.seed, vi, rep)
            truth = build_ground_truth(run_cfg, seed)
            for policy in policies:
                row = {"axis_value": value, "policy": policy,
                       "predictor": run_cfg.predictor, "seed": seed}
                try:
                    res = run_scenario(run_cfg, seed=seed, policy=policy, truth=truth)
                    row.update({
                        "R_total": res.aggregates["R_total"],
                        "mean_NMSE_dB": res.aggregates["mean_NMSE_dB"],
                        "blockage_accuracy": res.aggregates["blockage_accuracy"],
                        "violation_count": res.aggregates["violation_count"],
                    })
                except Exception as exc:  # record the failure, keep sweeping
                    row.update({"R_total": math.nan, "mean_NMSE_dB": math.nan,
                                "blockage_accuracy": math.nan,
                                "violation_count": -1})
                    errors.append({"axis_value": value, "policy": policy,
                                   "seed": seed, "error": repr(exc)})
                raw_rows.append(row)

    raw_path = os.path.join(out_dir, f"sweep_{axis}.csv")
    with open(raw_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in raw_rows:
            writer.writerow([_fmt(row[c]) for c in SWEEP_COLUMNS])

    agg_path = os.path.join(out_dir, f"sweep_{axis}_aggregate.csv")
    groups: dict[tuple, list[dict]] = {}
    for row in raw_rows:
        groups.setdefault((row["axis_value"], row["policy"], row["predictor"]),
                          []).append(row)
    with open(agg_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis_value", "policy", "predictor", "n",
                         "R_total_mean", "R_total_std",
                         "mean_NMSE_dB_mean", "blockage_accuracy_mean",
                         "violation_count_mean"])
        for key in sorted(groups, key=lambda k: (k[0], k[1], k[2])):
            rows = groups[key]
            r_tot = np.array([r["R_total"] for r in rows], dtype=float)
            writer.writerow([
                _fmt(key[0]), key[1], key[2], len(rows),
                _fmt(float(np.nanmean(r_tot))), _fmt(float(np.nanstd(r_tot))),
                _fmt(float(np.nanmean([r["mean_NMSE_dB"] for r in rows]))),
                _fmt(float(np.nanmean([r["blockage_accuracy"] for r in rows]))),
                _fmt(float(np.mean([r["violation_count"] for r in rows]))),
            ])
    if errors:
        with open(os.path.join(out_dir, "sweep_errors.jsonl"), "w") as fh:
            for e in errors:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
    return {"raw": raw_path, "aggregate": agg_path}
