"""Per-tick audio-visual fusion.

Each tick takes the detector's boxes, keeps moving vehicles as-is,
assigns every stationary vehicle the microphone closest to its box
centroid in pixel space, classifies that microphone's audio window, and
replaces the stationary label with idling or engine-off accordingly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

from . import contrastive, dsp
from .errors import ConfigError, StreamError

MOVING = "moving"
STATIONARY = "stationary"

STATUS_MOVING = "moving"
STATUS_OFF = "off"
STATUS_IDLING = "idling"
STATUS_ERROR = "error"

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Detection:
    """One detector output box with its motion label."""

    box: Box
    motion: str  # "moving" | "stationary"
    confidence: float
    source_id: str | None = None  # simulator bookkeeping; never used for scoring

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ConfigError(f"invalid box {self.box}")
        if self.motion not in (MOVING, STATIONARY):
            raise ConfigError(f"invalid motion label {self.motion!r}")
        if not 0.0 < self.confidence <= 1.0:
            raise ConfigError(f"confidence must be in (0, 1], got {self.confidence}")


@dataclass(frozen=True)
class MicPixelMap:
    """Microphone id -> pixel location, in audio channel order."""

    entries: tuple[tuple[int, tuple[float, float]], ...]

    def __post_init__(self):
        ids = [mic_id for mic_id, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate mic ids in {ids}")

    def __len__(self) -> int:
        return len(self.entries)

    def channel_of(self, mic_id: int) -> int:
        for i, (mid, _) in enumerate(self.entries):
            if mid == mic_id:
                return i
        raise KeyError(mic_id)

    def to_json(self) -> str:
        payload = [{"mic": mid, "u": u, "v": v} for mid, (u, v) in self.entries]
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MicPixelMap":
        payload = json.loads(text)
        return cls(tuple((int(e["mic"]), (float(e["u"]), float(e["v"]))) for e in payload))


@dataclass
class PredictedBox:
    box: Box
    status: str
    confidence: float
    mic_id: int | None = None
    audio_score: float | None = None
    error: str | None = None


@dataclass
class FramePrediction:
    frame_index: int
    t: float
    boxes: list[PredictedBox] = field(default_factory=list)
    latency_ms: float | None = None
    over_budget: bool = False


@dataclass(frozen=True)
class TickConfig:
    cadence: float = 1.0
    window_length: float = 5.0
    latency_budget_ms: float = 1000.0
    audio_threshold: float = 0.5
    trailing_window: bool = False  # window ends at the tick instead of centering on it

    def __post_init__(self):
        if self.cadence <= 0:
            raise ConfigError(f"cadence must be > 0, got {self.cadence}")
        if self.window_length <= 0:
            raise ConfigError("window_length must be > 0")


@dataclass
class ModelBundle:
    encoder: contrastive.EncoderModel
    classifier: contrastive.ClassifierModel
    stft: dsp.StftConfig = field(default_factory=dsp.StftConfig)


def nearest_mic(box: Box, mic_map: MicPixelMap) -> int:
    """Mic id minimizing pixel distance from the box centroid; ties -> lowest id."""
    if len(mic_map) == 0:
        raise ConfigError("empty microphone map")
    cx = (box[0] + box[2]) / 2.0
    cy = (box[1] + box[3]) / 2.0
    best_id, best_d = None, None
    for mic_id, (u, v) in mic_map.entries:
        d = math.hypot(cx - u, cy - v)
        if best_d is None or d < best_d or (d == best_d and mic_id < best_id):
            best_id, best_d = mic_id, d
    return best_id


def fuse_tick(detections: Sequence[Detection], audio, t: float, mic_map: MicPixelMap,
              models: ModelBundle, config: TickConfig | None = None,
              frame_index: int | None = None, fps: float = 25.0) -> FramePrediction:
    """Fuse one tick's detections with the audio classifier's verdicts."""
    config = config or TickConfig()
    if frame_index is None:
        frame_index = int(round(t * fps))
    pred = FramePrediction(frame_index=frame_index, t=t)
    center = t - config.window_length / 2.0 if config.trailing_window else t
    verdicts: dict[int, tuple[str, float]] = {}  # one classification per assigned mic
    for det in detections:
        if det.motion == MOVING:
            pred.boxes.append(PredictedBox(det.box, STATUS_MOVING, det.confidence))
            continue
        mic_id = nearest_mic(det.box, mic_map)
        if mic_id not in verdicts:
            channel = mic_map.channel_of(mic_id)
            if channel >= audio.samples.shape[0]:
                pred.boxes.append(PredictedBox(
                    det.box, STATUS_ERROR, det.confidence, mic_id=mic_id,
                    error=f"no audio channel {channel} for mic {mic_id}"))
                continue
            segment = dsp.extract_window(audio, channel, center, config.window_length)
            spec = dsp.normalize(dsp.stft_magnitude(segment, models.stft))
            label, score = contrastive.classify(
                spec, models.encoder, models.classifier, config.audio_threshold)
            verdicts[mic_id] = (label, score)
        label, score = verdicts[mic_id]
        status = STATUS_IDLING if label == contrastive.FOREGROUND else STATUS_OFF
        # confidence of the *predicted class*: detector belief times audio belief
        class_conf = det.confidence * (score if status == STATUS_IDLING else 1.0 - score)
        pred.boxes.append(PredictedBox(det.box, status, class_conf,
                                       mic_id=mic_id, audio_score=score))
    return pred


DetectionSource = Callable[[int], Sequence[Detection]]


def run_stream(detections: DetectionSource | Iterable[tuple[int, Sequence[Detection]]],
               audio, duration: float, mic_map: MicPixelMap, models: ModelBundle,
               config: TickConfig | None = None, fps: float = 25.0,
               realtime: bool = False,
               sink: Callable[[FramePrediction], None] | None = None) -> Iterator[FramePrediction]:
    """One FramePrediction per cadence tick, in order, each timed.

    `detections` is either a callable mapping a video frame index to the
    detector output for that frame, or an already-recorded iterable of
    (frame_index, detections) pairs covering the ticks in order. A tick
    that exceeds the latency budget is flagged, never dropped. Realtime
    mode paces ticks against the wall clock at the configured cadence.
    """
    config = config or TickConfig()
    n_ticks = int(math.floor(duration / config.cadence + 1e-9))
    recorded = None if callable(detections) else iter(detections)
    last_frame = -1
    clock_start = time.perf_counter()
    for k in range(n_ticks):
        t = k * config.cadence
        frame_index = int(round(t * fps))
        if realtime:
            wait = clock_start + k * config.cadence - time.perf_counter()
            if wait > 0:
                time.sleep(wait)
        tick_start = time.perf_counter()
        if recorded is None:
            dets = detections(frame_index)
        else:
            try:
                rec_frame, dets = next(recorded)
            except StopIteration:
                raise StreamError(f"recorded stream ended before tick {k}") from None
            if rec_frame <= last_frame:
                raise StreamError(
                    f"clock regression: frame {rec_frame} after frame {last_frame}")
            frame_index = rec_frame
        last_frame = frame_index
        pred = fuse_tick(dets, audio, t, mic_map, models, config, frame_index, fps)
        pred.latency_ms = (time.perf_counter() - tick_start) * 1000.0
        pred.over_budget = pred.latency_ms > config.latency_budget_ms
        if sink is not None:
            sink(pred)
        yield pred


def prediction_to_json(pred: FramePrediction, include_latency: bool = False) -> str:
    """One JSON Lines record; latency is opt-in so replays stay byte-stable."""
    boxes = []
    for b in pred.boxes:
        entry = {
            "x0": round(b.box[0], 4), "y0": round(b.box[1], 4),
            "x1": round(b.box[2], 4), "y1": round(b.box[3], 4),
            "status": b.status, "conf": round(b.confidence, 6),
            "mic": b.mic_id,
            "audio_score": None if b.audio_score is None else round(b.audio_score, 6),
        }
        if b.error:
            entry["error"] = b.error
        boxes.append(entry)
    record: dict = {"frame": pred.frame_index, "t": round(pred.t, 6), "boxes": boxes}
    if include_latency and pred.latency_ms is not None:
        record["latency_ms"] = round(pred.latency_ms, 3)
    return json.dumps(record, sort_keys=True)


def prediction_from_json(line: str) -> FramePrediction:
    rec = json.loads(line)
    boxes = [
        PredictedBox(
            box=(e["x0"], e["y0"], e["x1"], e["y1"]),
            status=e["status"], confidence=e["conf"],
            mic_id=e.get("mic"), audio_score=e.get("audio_score"),
            error=e.get("error"),
        )
        for e in rec["boxes"]
    ]
    return FramePrediction(frame_index=rec["frame"], t=rec["t"], boxes=boxes,
                           latency_ms=rec.get("latency_ms"))
