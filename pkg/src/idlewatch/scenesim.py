"""Deterministic drop-off-zone simulator.

Produces per-frame ground-truth boxes and status labels for scripted
vehicles, plus a configurable noisy detector stream standing in for the
video model. Everything is a pure function of (spec, frame_index); the
random streams are keyed on (seed, frame, vehicle) so frames and
vehicles can be evaluated in any order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError
from .fusion import Box, Detection, MicPixelMap, MOVING, STATIONARY
from .rng import generator

SCENARIO_SCHEMA = "idlewatch.scenario@1"

STATUS_MOVING = "moving"
STATUS_OFF = "off"
STATUS_IDLING = "idling"
STATUSES = (STATUS_MOVING, STATUS_OFF, STATUS_IDLING)

COMBUSTION = "combustion"
ELECTRIC = "electric"

# ground-speed threshold separating moving from stationary, m/s
V_STOP = 0.1


@dataclass(frozen=True)
class EngineSoundParams:
    """Harmonic-stack engine model: fundamental plus rolled-off overtones."""

    f0: float = 30.0  # firing frequency at idle, Hz
    n_harmonics: int = 12
    harmonic_rolloff: float = 6.0  # dB per octave
    amplitude: float = 0.15  # RMS at 1 m
    am_depth: float = 0.15
    am_rate: float = 2.0  # Hz

    def __post_init__(self):
        if self.f0 <= 0:
            raise ConfigError(f"f0 must be > 0, got {self.f0}")
        if self.n_harmonics < 1:
            raise ConfigError("n_harmonics must be >= 1")
        if not 0.0 <= self.am_depth < 1.0:
            raise ConfigError("am_depth must be in [0, 1)")
        if self.amplitude < 0 or self.am_rate < 0:
            raise ConfigError("amplitude and am_rate must be >= 0")


@dataclass(frozen=True)
class MicPose:
    mic_id: int
    pos: tuple[float, float]  # world meters, x along the roadside
    directivity: str = "omni"  # "omni" | "cardioid"
    facing: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.directivity not in ("omni", "cardioid"):
            raise ConfigError(f"unknown directivity {self.directivity!r}")
        if math.hypot(*self.facing) < 1e-9:
            raise ConfigError("facing vector must be nonzero")


@dataclass(frozen=True)
class CameraModel:
    """Planar world-to-pixel homography over the (flat) roadway."""

    homography: tuple[tuple[float, float, float], ...]
    image_width: int = 1280
    image_height: int = 720

    def __post_init__(self):
        h = np.asarray(self.homography, dtype=np.float64)
        if h.shape != (3, 3):
            raise ConfigError(f"homography must be 3x3, got {h.shape}")
        if abs(np.linalg.det(h)) < 1e-12:
            raise ConfigError("homography is not invertible")
        if self.image_width < 1 or self.image_height < 1:
            raise ConfigError("image size must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.homography, dtype=np.float64)

    def project(self, points) -> np.ndarray:
        """World (N, 2) -> pixel (N, 2). Raises GeometryError at the horizon."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not np.isfinite(pts).all():
            raise GeometryError("non-finite world point")
        homog = np.column_stack([pts, np.ones(len(pts))]) @ self.matrix.T
        w = homog[:, 2]
        if np.any(np.abs(w) < 1e-12):
            raise GeometryError("point projects to the line at infinity")
        return homog[:, :2] / w[:, None]


def fit_homography(src_points, dst_points) -> tuple[tuple[float, ...], ...]:
    """Exact homography through four (x, y) -> (u, v) correspondences."""
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ConfigError("need exactly four point correspondences")
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rhs.append(u)
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.append(v)
    h = np.linalg.solve(np.asarray(rows), np.asarray(rhs))
    m = np.append(h, 1.0).reshape(3, 3)
    return tuple(tuple(float(v) for v in row) for row in m)


@dataclass(frozen=True)
class VehicleTrack:
    """Scripted vehicle: piecewise-linear path plus an engine switch timeline."""

    vehicle_id: str
    path: tuple[tuple[float, float, float], ...]  # (t, x, y) waypoints
    powertrain: str = COMBUSTION
    footprint: tuple[float, float] = (4.5, 1.8)  # length, width in meters
    engine_timeline: tuple[tuple[float, bool], ...] = ()  # switch events; off before first
    engine_params: EngineSoundParams | None = None

    def __post_init__(self):
        if not self.path:
            raise ConfigError(f"{self.vehicle_id}: empty path")
        times = [p[0] for p in self.path]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError(f"{self.vehicle_id}: path times must strictly increase")
        ev_times = [t for t, _ in self.engine_timeline]
        if any(b <= a for a, b in zip(ev_times, ev_times[1:])):
            raise ConfigError(f"{self.vehicle_id}: engine timeline must strictly increase")
        if self.powertrain not in (COMBUSTION, ELECTRIC):
            raise ConfigError(f"{self.vehicle_id}: unknown powertrain {self.powertrain!r}")
        if self.powertrain == ELECTRIC and any(on for _, on in self.engine_timeline):
            raise ConfigError(f"{self.vehicle_id}: electric vehicles never switch an engine on")
        if self.powertrain == COMBUSTION and self.engine_timeline and self.engine_params is None:
            raise ConfigError(f"{self.vehicle_id}: combustion vehicle needs engine_params")
        if min(self.footprint) <= 0:
            raise ConfigError(f"{self.vehicle_id}: footprint must be positive")

    def _arrays(self):
        p = np.asarray(self.path, dtype=np.float64)
        return p[:, 0], p[:, 1], p[:, 2]

    def position_at(self, t: float) -> tuple[float, float]:
        ts, xs, ys = self._arrays()
        return float(np.interp(t, ts, xs)), float(np.interp(t, ts, ys))

    def positions_at(self, times: np.ndarray) -> np.ndarray:
        ts, xs, ys = self._arrays()
        return np.column_stack([np.interp(times, ts, xs), np.interp(times, ts, ys)])

    def speed_at(self, t: float) -> float:
        """Ground speed of the active segment (right-continuous at waypoints)."""
        ts, xs, ys = self._arrays()
        if t < ts[0] or t >= ts[-1]:
            return 0.0
        i = int(np.searchsorted(ts, t, side="right")) - 1
        dt = ts[i + 1] - ts[i]
        return float(math.hypot(xs[i + 1] - xs[i], ys[i + 1] - ys[i]) / dt)

    def heading_at(self, t: float) -> tuple[float, float]:
        """Unit direction of travel; parked vehicles keep their last heading."""
        ts, xs, ys = self._arrays()
        n_segs = len(ts) - 1
        if n_segs == 0:
            return 1.0, 0.0
        i = min(max(int(np.searchsorted(ts, t, side="right")) - 1, 0), n_segs - 1)
        order = list(range(i, -1, -1)) + list(range(i + 1, n_segs))
        for j in order:
            dx, dy = xs[j + 1] - xs[j], ys[j + 1] - ys[j]
            n = math.hypot(dx, dy)
            if n > 1e-9:
                return dx / n, dy / n
        return 1.0, 0.0

    def engine_on_at(self, t: float) -> bool:
        on = False
        for ev_t, ev_on in self.engine_timeline:
            if ev_t <= t:
                on = ev_on
            else:
                break
        return on

    def engine_gate(self, times: np.ndarray) -> np.ndarray:
        """Vectorized engine state, right-continuous at switch times."""
        if not self.engine_timeline:
            return np.zeros(len(times), dtype=bool)
        ev_t = np.asarray([t for t, _ in self.engine_timeline])
        states = np.asarray([False] + [on for _, on in self.engine_timeline])
        return states[np.searchsorted(ev_t, times, side="right")]

    def footprint_corners(self, t: float) -> np.ndarray:
        cx, cy = self.position_at(t)
        ux, uy = self.heading_at(t)
        nx, ny = -uy, ux
        hl, hw = self.footprint[0] / 2.0, self.footprint[1] / 2.0
        return np.array([
            (cx + sl * hl * ux + sw * hw * nx, cy + sl * hl * uy + sw * hw * ny)
            for sl in (-1, 1) for sw in (-1, 1)
        ])

    def status_at(self, t: float) -> str:
        if self.speed_at(t) > V_STOP:
            return STATUS_MOVING
        return STATUS_IDLING if self.engine_on_at(t) else STATUS_OFF


def default_mics(n: int = 6, spacing: float = 2.6, x0: float = 0.0, y: float = 0.0,
                 directivity: str = "omni") -> tuple[MicPose, ...]:
    """Roadside row of microphones, evenly spaced along x."""
    return tuple(MicPose(k, (x0 + k * spacing, y), directivity) for k in range(n))


@dataclass(frozen=True)
class ScenarioSpec:
    duration: float
    vehicles: tuple[VehicleTrack, ...]
    mics: tuple[MicPose, ...]
    camera: CameraModel
    lane_geometry: tuple[float, float, float, float]  # world rect x0, y0, x1, y1
    fps: float = 25.0
    seed: int = 0
    scenario_id: str = "scenario"

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError(f"duration must be > 0, got {self.duration}")
        if self.fps <= 0:
            raise ConfigError(f"fps must be > 0, got {self.fps}")
        if not self.mics:
            raise ConfigError("need at least one microphone")
        xs = [m.pos[0] for m in self.mics]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ConfigError("mic positions must strictly increase along the roadside")
        ids = [m.mic_id for m in self.mics]
        if len(set(ids)) != len(ids):
            raise ConfigError("mic ids must be unique")
        x0, y0, x1, y1 = self.lane_geometry
        if not (x0 < x1 and y0 < y1):
            raise ConfigError(f"degenerate lane geometry {self.lane_geometry}")
        vids = [v.vehicle_id for v in self.vehicles]
        if len(set(vids)) != len(vids):
            raise ConfigError("vehicle ids must be unique")
        for v in self.vehicles:
            for t, x, y in v.path:
                if not (0.0 <= t <= self.duration):
                    raise ConfigError(f"{v.vehicle_id}: waypoint time {t} outside scenario")
                if not (x0 <= x <= x1 and y0 <= y <= y1):
                    raise ConfigError(f"{v.vehicle_id}: waypoint ({x}, {y}) leaves the lane")
            for t, _ in v.engine_timeline:
                if not (0.0 <= t <= self.duration):
                    raise ConfigError(f"{v.vehicle_id}: engine event at {t} outside scenario")
        corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
        px = self.camera.project(corners)
        w, h = self.camera.image_width, self.camera.image_height
        if np.any(px[:, 0] < 0) or np.any(px[:, 0] >= w) or np.any(px[:, 1] < 0) or np.any(px[:, 1] >= h):
            raise ConfigError("lane corners must project inside the image")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.fps))


@dataclass(frozen=True)
class GroundTruthBox:
    vehicle_id: str
    box: Box
    status: str


@dataclass(frozen=True)
class GroundTruthFrame:
    frame_index: int
    boxes: tuple[GroundTruthBox, ...]


@dataclass(frozen=True)
class DetectorNoiseModel:
    """Stand-in failure model for the video detector."""

    box_jitter_sigma: float = 2.0  # pixels, per corner coordinate
    miss_prob: float = 0.02
    false_positive_rate: float = 0.02  # expected spurious boxes per frame
    motion_flip_prob: float = 0.01
    conf_dither: float = 0.1  # Uniform(0, dither) subtracted from true-box confidence
    conf_floor: float = 0.05
    fp_conf_range: tuple[float, float] = (0.05, 0.5)

    def __post_init__(self):
        for name in ("miss_prob", "motion_flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.box_jitter_sigma < 0 or self.false_positive_rate < 0 or self.conf_dither < 0:
            raise ConfigError("noise magnitudes must be >= 0")


NO_NOISE = DetectorNoiseModel(box_jitter_sigma=0.0, miss_prob=0.0, false_positive_rate=0.0,
                              motion_flip_prob=0.0, conf_dither=0.0)


def project_box(camera: CameraModel, corners) -> Box:
    """Axis-aligned pixel bounding box of projected world corners, image-clipped."""
    px = camera.project(corners)
    w, h = float(camera.image_width), float(camera.image_height)
    x0 = min(max(float(px[:, 0].min()), 0.0), w)
    x1 = min(max(float(px[:, 0].max()), 0.0), w)
    y0 = min(max(float(px[:, 1].min()), 0.0), h)
    y1 = min(max(float(px[:, 1].max()), 0.0), h)
    return (x0, y0, x1, y1)


def ground_truth_at(spec: ScenarioSpec, frame_index: int) -> GroundTruthFrame:
    """Boxes and {moving, off, idling} labels for every visible vehicle."""
    if not 0 <= frame_index < spec.n_frames:
        raise IndexError(f"frame {frame_index} outside [0, {spec.n_frames})")
    t = frame_index / spec.fps
    boxes = []
    for v in spec.vehicles:
        bb = project_box(spec.camera, v.footprint_corners(t))
        if bb[0] < bb[2] and bb[1] < bb[3]:
            boxes.append(GroundTruthBox(v.vehicle_id, bb, v.status_at(t)))
    return GroundTruthFrame(frame_index, tuple(boxes))


def simulate_detections(spec: ScenarioSpec, noise: DetectorNoiseModel,
                        frame_index: int) -> list[Detection]:
    """Noisy detector output for one frame; deterministic in (seed, frame)."""
    gt = ground_truth_at(spec, frame_index)
    w, h = float(spec.camera.image_width), float(spec.camera.image_height)
    out: list[Detection] = []
    for entry in gt.boxes:
        rng = generator(spec.seed, "detector", frame_index, entry.vehicle_id)
        if rng.random() < noise.miss_prob:
            continue
        jitter = rng.normal(0.0, noise.box_jitter_sigma, 4) if noise.box_jitter_sigma > 0 else np.zeros(4)
        x0, y0, x1, y1 = (c + j for c, j in zip(entry.box, jitter))
        x0, x1 = sorted((min(max(x0, 0.0), w), min(max(x1, 0.0), w)))
        y0, y1 = sorted((min(max(y0, 0.0), h), min(max(y1, 0.0), h)))
        if x0 >= x1 or y0 >= y1:
            continue
        motion = MOVING if entry.status == STATUS_MOVING else STATIONARY
        if rng.random() < noise.motion_flip_prob:
            motion = STATIONARY if motion == MOVING else MOVING
        diag = math.hypot(entry.box[2] - entry.box[0], entry.box[3] - entry.box[1])
        dither = rng.uniform(0.0, noise.conf_dither) if noise.conf_dither > 0 else 0.0
        conf = min(max(1.0 - np.linalg.norm(jitter) / diag - dither, noise.conf_floor), 1.0)
        out.append(Detection((x0, y0, x1, y1), motion, float(conf), source_id=entry.vehicle_id))
    rng_fp = generator(spec.seed, "detector-fp", frame_index)
    for _ in range(rng_fp.poisson(noise.false_positive_rate)):
        bw = rng_fp.uniform(0.04, 0.25) * w
        bh = rng_fp.uniform(0.04, 0.25) * h
        x0 = rng_fp.uniform(0.0, w - bw)
        y0 = rng_fp.uniform(0.0, h - bh)
        motion = MOVING if rng_fp.random() < 0.5 else STATIONARY
        conf = rng_fp.uniform(*noise.fp_conf_range)
        out.append(Detection((x0, y0, x0 + bw, y0 + bh), motion, float(conf)))
    return out


def oracle_detector(spec: ScenarioSpec):
    """Detector source emitting exact ground-truth boxes with confidence 1."""

    def source(frame_index: int) -> list[Detection]:
        gt = ground_truth_at(spec, frame_index)
        return [
            Detection(b.box, MOVING if b.status == STATUS_MOVING else STATIONARY,
                      1.0, source_id=b.vehicle_id)
            for b in gt.boxes
        ]

    return source


def noisy_detector(spec: ScenarioSpec, noise: DetectorNoiseModel):
    def source(frame_index: int) -> list[Detection]:
        return simulate_detections(spec, noise, frame_index)

    return source


def mic_pixel_map(spec: ScenarioSpec) -> MicPixelMap:
    """Project microphone world positions into the camera frame."""
    px = spec.camera.project([m.pos for m in spec.mics])
    w, h = spec.camera.image_width, spec.camera.image_height
    entries = []
    for m, (u, v) in zip(spec.mics, px):
        if not (0 <= u < w and 0 <= v < h):
            raise ConfigError(f"mic {m.mic_id} projects outside the image at ({u:.1f}, {v:.1f})")
        entries.append((m.mic_id, (float(u), float(v))))
    return MicPixelMap(tuple(entries))


# ---------------------------------------------------------------------------
# JSON serialization


def gt_frame_to_json(frame: GroundTruthFrame) -> str:
    boxes = [
        {"id": b.vehicle_id, "x0": round(b.box[0], 4), "y0": round(b.box[1], 4),
         "x1": round(b.box[2], 4), "y1": round(b.box[3], 4), "label": b.status, "conf": 1.0}
        for b in frame.boxes
    ]
    return json.dumps({"frame": frame.frame_index, "boxes": boxes}, sort_keys=True)


def gt_frame_from_json(line: str) -> GroundTruthFrame:
    rec = json.loads(line)
    boxes = tuple(
        GroundTruthBox(e["id"], (e["x0"], e["y0"], e["x1"], e["y1"]), e["label"])
        for e in rec["boxes"]
    )
    return GroundTruthFrame(rec["frame"], boxes)


def detections_to_json(frame_index: int, detections: list[Detection]) -> str:
    boxes = [
        {"id": d.source_id, "x0": round(d.box[0], 4), "y0": round(d.box[1], 4),
         "x1": round(d.box[2], 4), "y1": round(d.box[3], 4), "label": d.motion,
         "conf": round(d.confidence, 6)}
        for d in detections
    ]
    return json.dumps({"frame": frame_index, "boxes": boxes}, sort_keys=True)


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    return {
        "schema": SCENARIO_SCHEMA,
        "scenario_id": spec.scenario_id,
        "duration": spec.duration,
        "fps": spec.fps,
        "seed": spec.seed,
        "lane_geometry": list(spec.lane_geometry),
        "camera": {
            "homography": [list(row) for row in spec.camera.homography],
            "image_width": spec.camera.image_width,
            "image_height": spec.camera.image_height,
        },
        "mics": [
            {"id": m.mic_id, "pos": list(m.pos), "directivity": m.directivity,
             "facing": list(m.facing)}
            for m in spec.mics
        ],
        "vehicles": [
            {
                "id": v.vehicle_id,
                "powertrain": v.powertrain,
                "footprint": list(v.footprint),
                "path": [list(p) for p in v.path],
                "engine_timeline": [[t, on] for t, on in v.engine_timeline],
                "engine": None if v.engine_params is None else {
                    "f0": v.engine_params.f0,
                    "n_harmonics": v.engine_params.n_harmonics,
                    "harmonic_rolloff": v.engine_params.harmonic_rolloff,
                    "amplitude": v.engine_params.amplitude,
                    "am_depth": v.engine_params.am_depth,
                    "am_rate": v.engine_params.am_rate,
                },
            }
            for v in spec.vehicles
        ],
    }


def scenario_from_dict(data: dict) -> ScenarioSpec:
    if data.get("schema") != SCENARIO_SCHEMA:
        raise ConfigError(f"unsupported scenario schema {data.get('schema')!r}")
    cam = data["camera"]
    camera = CameraModel(
        homography=tuple(tuple(row) for row in cam["homography"]),
        image_width=cam["image_width"],
        image_height=cam["image_height"],
    )
    mics = tuple(
        MicPose(m["id"], tuple(m["pos"]), m.get("directivity", "omni"),
                tuple(m.get("facing", (0.0, 1.0))))
        for m in data["mics"]
    )
    vehicles = []
    for v in data["vehicles"]:
        eng = v.get("engine")
        vehicles.append(VehicleTrack(
            vehicle_id=v["id"],
            path=tuple(tuple(p) for p in v["path"]),
            powertrain=v.get("powertrain", COMBUSTION),
            footprint=tuple(v.get("footprint", (4.5, 1.8))),
            engine_timeline=tuple((e[0], bool(e[1])) for e in v.get("engine_timeline", [])),
            engine_params=None if eng is None else EngineSoundParams(
                f0=eng["f0"], n_harmonics=eng["n_harmonics"],
                harmonic_rolloff=eng["harmonic_rolloff"], amplitude=eng["amplitude"],
                am_depth=eng["am_depth"], am_rate=eng["am_rate"]),
        ))
    return ScenarioSpec(
        duration=data["duration"],
        vehicles=tuple(vehicles),
        mics=mics,
        camera=camera,
        lane_geometry=tuple(data["lane_geometry"]),
        fps=data.get("fps", 25.0),
        seed=data.get("seed", 0),
        scenario_id=data.get("scenario_id", "scenario"),
    )


def scenario_to_json(spec: ScenarioSpec) -> str:
    return json.dumps(scenario_to_dict(spec), sort_keys=True, indent=2) + "\n"


def scenario_from_json(text: str) -> ScenarioSpec:
    return scenario_from_dict(json.loads(text))
