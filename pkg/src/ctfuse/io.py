"""Scenario and measurement-log serialization.

A scenario directory holds a structured key-value config plus one CSV per
stream, all schema-stable:

    scenario.ini        sections: scenario, imu, lidar<k>, camera, true_spline
    planes.csv          id, pi_x, pi_y, pi_z
    landmarks.csv       id, x, y, z
    true_rot_ctrl.csv   i, qw, qx, qy, qz
    true_pos_ctrl.csv   i, x, y, z
    imu.csv             t, wx, wy, wz, ax, ay, az
    lidar<k>.csv        t, px, py, pz, plane_id, scan_id
    camera.csv          t, landmark_id, u, v
    groundtruth.csv     t, px, py, pz, qw, qx, qy, qz
    manifest.json       seed, format version, sha256 per file
"""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

import numpy as np

from .factors import Extrinsics
from .lie import quat_from_rot, rot_from_quat
from .sim import (
    CameraSpec,
    FrameObs,
    GroundTruthScenario,
    ImuSpec,
    ImuStream,
    LidarSpec,
    LidarStream,
    MeasurementLog,
)
from .splines import KnotGrid, R3Spline, So3Spline

FORMAT_VERSION = 1


def _vec(v) -> str:
    return " ".join(f"{x:.17g}" for x in np.atleast_1d(v))


def _parse_vec(s: str) -> np.ndarray:
    return np.array([float(x) for x in s.split()])


def _ext_to_cfg(section, ext: Extrinsics) -> None:
    section["ext_quat"] = _vec(quat_from_rot(ext.r))
    section["ext_p"] = _vec(ext.p)


def _ext_from_cfg(section) -> Extrinsics:
    return Extrinsics(rot_from_quat(_parse_vec(section["ext_quat"])), _parse_vec(section["ext_p"]))


def _save_csv(path: Path, header: str, data: np.ndarray, fmt: str = "%.17g") -> None:
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)


def _load_csv(path: Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def save_scenario(out_dir, sc: GroundTruthScenario, log: MeasurementLog) -> dict:
    """Write scenario + logs; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    cfg = configparser.ConfigParser()
    cfg["scenario"] = {
        "seed": str(sc.seed),
        "t0": f"{sc.t0:.17g}",
        "duration": f"{sc.duration:.17g}",
        "plane_extent": f"{sc.plane_extent:.17g}",
        "gravity": _vec(sc.gravity),
        "n_lidars": str(len(sc.lidars)),
        "has_camera": str(sc.camera is not None),
    }
    cfg["imu"] = {
        "rate": f"{sc.imu.rate:.17g}",
        "sig_g": f"{sc.imu.sig_g:.17g}",
        "sig_a": f"{sc.imu.sig_a:.17g}",
        "sig_bg_rw": f"{sc.imu.sig_bg_rw:.17g}",
        "sig_ba_rw": f"{sc.imu.sig_ba_rw:.17g}",
        "bg0": _vec(sc.imu.bg0),
        "ba0": _vec(sc.imu.ba0),
        "t_offset": f"{sc.imu.t_offset:.17g}",
    }
    for i, spec in enumerate(sc.lidars):
        sec = f"lidar{i}"
        cfg[sec] = {
            "rate": f"{spec.rate:.17g}",
            "points_per_scan": str(spec.points_per_scan),
            "scan_duration": f"{spec.scan_duration:.17g}",
            "sigma": f"{spec.sigma:.17g}",
        }
        _ext_to_cfg(cfg[sec], spec.ext)
    if sc.camera is not None:
        cfg["camera"] = {
            "rate": f"{sc.camera.rate:.17g}",
            "sigma_px": f"{sc.camera.sigma_px:.17g}",
            "t_offset": f"{sc.camera.t_offset:.17g}",
            "fov_tan": f"{sc.camera.fov_tan:.17g}",
            "depth_min": f"{sc.camera.depth_min:.17g}",
            "depth_max": f"{sc.camera.depth_max:.17g}",
        }
        _ext_to_cfg(cfg["camera"], sc.camera.ext)
    cfg["true_spline"] = {
        "t0": f"{sc.rot.grid.t0:.17g}",
        "dt": f"{sc.rot.grid.dt:.17g}",
        "num_knots": str(sc.rot.grid.num_knots),
    }
    with open(out / "scenario.ini", "w") as f:
        cfg.write(f)

    n_pl = sc.planes.shape[0]
    _save_csv(out / "planes.csv", "id,pi_x,pi_y,pi_z",
              np.column_stack([np.arange(n_pl), sc.planes]))
    n_lm = sc.landmarks.shape[0]
    _save_csv(out / "landmarks.csv", "id,x,y,z",
              np.column_stack([np.arange(n_lm), sc.landmarks]))
    n_k = sc.rot.grid.num_knots
    _save_csv(out / "true_rot_ctrl.csv", "i,qw,qx,qy,qz",
              np.column_stack([np.arange(n_k), quat_from_rot(sc.rot.ctrl)]))
    _save_csv(out / "true_pos_ctrl.csv", "i,x,y,z",
              np.column_stack([np.arange(n_k), sc.pos.ctrl]))

    _save_csv(out / "imu.csv", "t,wx,wy,wz,ax,ay,az",
              np.column_stack([log.imu.t, log.imu.w, log.imu.a]))
    for i, ls in enumerate(log.lidars):
        _save_csv(out / f"lidar{i}.csv", "t,px,py,pz,plane_id,scan_id",
                  np.column_stack([ls.t, ls.pts, ls.plane_id, ls.scan_id]))
    rows = []
    for fr in log.frames:
        for k, lm_id in enumerate(fr.ids):
            rows.append((fr.t, float(lm_id), fr.uv[k, 0], fr.uv[k, 1]))
    cam = np.array(rows) if rows else np.zeros((0, 4))
    _save_csv(out / "camera.csv", "t,landmark_id,u,v", cam)
    _save_csv(out / "groundtruth.csv", "t,px,py,pz,qw,qx,qy,qz",
              np.column_stack([log.gt_t, log.gt_pos, log.gt_quat]))

    manifest = {"format_version": FORMAT_VERSION, "seed": sc.seed, "files": {}}
    for p in sorted(out.glob("*.csv")) + [out / "scenario.ini"]:
        manifest["files"][p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_scenario(data_dir) -> tuple[GroundTruthScenario, MeasurementLog]:
    src = Path(data_dir)
    cfg = configparser.ConfigParser()
    if not (src / "scenario.ini").exists():
        raise FileNotFoundError(f"no scenario.ini under {src}")
    cfg.read(src / "scenario.ini")

    s = cfg["scenario"]
    grid_sec = cfg["true_spline"]
    n_k = int(grid_sec["num_knots"])
    rot_q = _load_csv(src / "true_rot_ctrl.csv")[:, 1:]
    pos_c = _load_csv(src / "true_pos_ctrl.csv")[:, 1:]
    grid_args = (float(grid_sec["t0"]), float(grid_sec["dt"]), n_k)
    rot = So3Spline(KnotGrid(*grid_args), rot_from_quat(rot_q))
    pos = R3Spline(KnotGrid(*grid_args), pos_c)

    imu_sec = cfg["imu"]
    imu = ImuSpec(
        rate=float(imu_sec["rate"]),
        sig_g=float(imu_sec["sig_g"]),
        sig_a=float(imu_sec["sig_a"]),
        sig_bg_rw=float(imu_sec["sig_bg_rw"]),
        sig_ba_rw=float(imu_sec["sig_ba_rw"]),
        bg0=_parse_vec(imu_sec["bg0"]),
        ba0=_parse_vec(imu_sec["ba0"]),
        t_offset=float(imu_sec["t_offset"]),
    )
    lidars = []
    for i in range(int(s["n_lidars"])):
        sec = cfg[f"lidar{i}"]
        lidars.append(
            LidarSpec(
                rate=float(sec["rate"]),
                points_per_scan=int(sec["points_per_scan"]),
                scan_duration=float(sec["scan_duration"]),
                sigma=float(sec["sigma"]),
                ext=_ext_from_cfg(sec),
            )
        )
    camera = None
    if s.getboolean("has_camera"):
        sec = cfg["camera"]
        camera = CameraSpec(
            rate=float(sec["rate"]),
            sigma_px=float(sec["sigma_px"]),
            t_offset=float(sec["t_offset"]),
            fov_tan=float(sec["fov_tan"]),
            depth_min=float(sec["depth_min"]),
            depth_max=float(sec["depth_max"]),
            ext=_ext_from_cfg(sec),
        )
    planes = _load_csv(src / "planes.csv")[:, 1:]
    landmarks = _load_csv(src / "landmarks.csv")[:, 1:]
    sc = GroundTruthScenario(
        rot=rot, pos=pos, planes=planes,
        plane_extent=float(s["plane_extent"]),
        landmarks=landmarks, imu=imu, lidars=lidars, camera=camera,
        t0=float(s["t0"]), duration=float(s["duration"]), seed=int(s["seed"]),
        gravity=_parse_vec(s["gravity"]),
    )

    imu_data = _load_csv(src / "imu.csv")
    imu_stream = ImuStream(t=imu_data[:, 0], w=imu_data[:, 1:4], a=imu_data[:, 4:7])
    lidar_streams = []
    for i in range(len(lidars)):
        d = _load_csv(src / f"lidar{i}.csv")
        lidar_streams.append(
            LidarStream(
                t=d[:, 0], pts=d[:, 1:4],
                plane_id=d[:, 4].astype(int), scan_id=d[:, 5].astype(int),
            )
        )
    cam_rows = _load_csv(src / "camera.csv")
    frames = []
    if cam_rows.size:
        for t in np.unique(cam_rows[:, 0]):
            sel = cam_rows[:, 0] == t
            frames.append(
                FrameObs(t=float(t), ids=cam_rows[sel, 1].astype(int), uv=cam_rows[sel, 2:4])
            )
        frames.sort(key=lambda fr: fr.t)
    gt = _load_csv(src / "groundtruth.csv")
    log = MeasurementLog(
        imu=imu_stream, lidars=lidar_streams, frames=frames,
        gt_t=gt[:, 0], gt_pos=gt[:, 1:4], gt_quat=gt[:, 4:8],
    )
    return sc, log


def save_run_outputs(out_dir, result, metrics: dict) -> None:
    """Trajectory CSV, per-window diagnostics CSV, metrics JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _save_csv(
        out / "trajectory.csv", "t,px,py,pz,qw,qx,qy,qz",
        np.column_stack([result.est_t, result.est_pos, result.est_quat]),
    )
    fields = [
        "kappa", "t_start", "t_end", "cost_initial", "cost_final", "iterations",
        "accepted", "n_imu", "n_lidar", "n_visual", "n_keyframes", "n_landmarks",
        "skipped_range", "unassociated", "rejected_depth", "marginalized_blocks",
        "offset_ti", "offset_tc", "time_assoc", "time_solve", "time_marg",
        "unconstrained", "h_eig_ratio",
    ]
    rows = [[getattr(d, f) for f in fields] for d in result.diagnostics]
    _save_csv(out / "diagnostics.csv", ",".join(fields), np.array(rows, dtype=float), fmt="%.10g")
    with open(out / "metrics.json", "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
