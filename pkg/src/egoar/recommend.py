"""Context-aware overlay recommendation.

A deterministic rule engine maps scene context and vehicle state to
overlay labels with image-space placement boxes, mirroring the
four-question reasoning chain used to prompt an external language
model. The language-model client itself sits behind an adapter that is
disabled by default; only its structured response format is handled
here (emit + parse round-trip).

Placement is safety-constrained: every emitted box center lies in the
upper 40% of the image or in the outer 25% side bands, keeping the
central field of view clear.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

from .errors import BoxOutOfRange, SchemaError, UnknownLabel
from .geometry import BoundingBox

INTRA = "intra"
EXTRA = "extra"

DEFAULT_FUEL_THRESHOLD = 0.15

UPPER_BAND_FRACTION = 0.40
SIDE_BAND_FRACTION = 0.25


class SceneContext(enum.Enum):
    INDOOR_GARAGE = "indoor_garage"
    OUTDOOR_PARKING = "outdoor_parking"
    URBAN_STREET = "urban_street"
    INTERCITY_ROAD = "intercity_road"
    HIGHWAY = "highway"


class OverlayLabel(enum.Enum):
    DASHBOARD = "dashboard"
    LOW_FUEL_WARNING = "low_fuel_warning"
    NAVIGATION_HINT = "navigation_hint"
    SERVICE_ADVERTISEMENT = "service_advertisement"
    PARKING_INFORMATION = "parking_information"


DISPLAY_NAMES = {
    OverlayLabel.DASHBOARD: "AR Dashboard",
    OverlayLabel.LOW_FUEL_WARNING: "Low Fuel Warning",
    OverlayLabel.NAVIGATION_HINT: "Navigation Hint",
    OverlayLabel.SERVICE_ADVERTISEMENT: "Service Advertisement",
    OverlayLabel.PARKING_INFORMATION: "Parking Information",
}

_LABEL_ALIASES = {
    "ar dashboard": OverlayLabel.DASHBOARD,
    "dashboard": OverlayLabel.DASHBOARD,
    "virtual dashboard": OverlayLabel.DASHBOARD,
    "low fuel warning": OverlayLabel.LOW_FUEL_WARNING,
    "fuel alarm": OverlayLabel.LOW_FUEL_WARNING,
    "low_fuel_warning": OverlayLabel.LOW_FUEL_WARNING,
    "navigation hint": OverlayLabel.NAVIGATION_HINT,
    "navigation_hint": OverlayLabel.NAVIGATION_HINT,
    "service advertisement": OverlayLabel.SERVICE_ADVERTISEMENT,
    "service_advertisement": OverlayLabel.SERVICE_ADVERTISEMENT,
    "parking information": OverlayLabel.PARKING_INFORMATION,
    "parking_information": OverlayLabel.PARKING_INFORMATION,
}

INTRA_LABELS = frozenset({OverlayLabel.DASHBOARD, OverlayLabel.LOW_FUEL_WARNING})
EXTRA_LABELS = frozenset({
    OverlayLabel.NAVIGATION_HINT,
    OverlayLabel.SERVICE_ADVERTISEMENT,
    OverlayLabel.PARKING_INFORMATION,
})

TARGET_OF_LABEL = {label: INTRA for label in INTRA_LABELS}
TARGET_OF_LABEL.update({label: EXTRA for label in EXTRA_LABELS})


@dataclass(frozen=True)
class VehicleState:
    fuel_fraction: float
    speed_kmh: float
    driving_time_min: float
    dashboard_visible: bool

    def __post_init__(self):
        if not 0.0 <= self.fuel_fraction <= 1.0:
            raise ValueError("fuel_fraction outside [0, 1]")
        if self.speed_kmh < 0.0:
            raise ValueError("speed must be non-negative")

    def as_dict(self) -> dict:
        return {
            "fuel_fraction": self.fuel_fraction,
            "speed_kmh": self.speed_kmh,
            "driving_time_min": self.driving_time_min,
            "dashboard_visible": self.dashboard_visible,
        }


@dataclass(frozen=True)
class Recommendation:
    label: OverlayLabel
    bbox: BoundingBox
    target: str  # "intra" | "extra"

    def __post_init__(self):
        if TARGET_OF_LABEL[self.label] != self.target:
            raise ValueError(
                f"label {self.label.value} cannot target {self.target}")


# placement template: fractional (cu, cv, w, h); every center sits
# safely inside the upper or side safety bands even after rounding
_PLACEMENT = {
    OverlayLabel.DASHBOARD: (0.50, 0.20, 0.30, 0.16),
    OverlayLabel.LOW_FUEL_WARNING: (0.15, 0.16, 0.18, 0.10),
    OverlayLabel.NAVIGATION_HINT: (0.83, 0.18, 0.22, 0.12),
    OverlayLabel.SERVICE_ADVERTISEMENT: (0.13, 0.50, 0.18, 0.20),
    OverlayLabel.PARKING_INFORMATION: (0.86, 0.45, 0.18, 0.20),
}


def placement_box(label: OverlayLabel, image_size: tuple[int, int]) -> BoundingBox:
    """Template box for a label, integer pixels inside the image."""
    w, h = image_size
    cu, cv, fw, fh = _PLACEMENT[label]
    half_w, half_h = 0.5 * fw * w, 0.5 * fh * h
    u0 = max(0, int(round(cu * w - half_w)))
    v0 = max(0, int(round(cv * h - half_h)))
    u1 = min(w - 1, int(round(cu * w + half_w)))
    v1 = min(h - 1, int(round(cv * h + half_h)))
    return BoundingBox(float(u0), float(v0), float(u1), float(v1))


def in_safety_band(bbox: BoundingBox, image_size: tuple[int, int]) -> bool:
    """Center in the upper 40% or the outer 25% side bands."""
    w, h = image_size
    cu, cv = bbox.center
    return (cv < UPPER_BAND_FRACTION * h
            or cu < SIDE_BAND_FRACTION * w
            or cu > (1.0 - SIDE_BAND_FRACTION) * w)


def recommend_rule_based(
    ctx: SceneContext,
    vs: VehicleState,
    image_size: tuple[int, int],
    *,
    fuel_threshold: float = DEFAULT_FUEL_THRESHOLD,
) -> list[Recommendation]:
    """Deterministic label selection with template placement.

    Rules: a virtual dashboard whenever the physical one is hidden; a
    fuel alarm plus (outside garages) a navigation hint toward fuel when
    the level is low; parking information in parking contexts; service
    advertisements on intercity roads and highways when fuel is fine.
    """
    low_fuel = vs.fuel_fraction < fuel_threshold
    labels: list[OverlayLabel] = []
    if not vs.dashboard_visible:
        labels.append(OverlayLabel.DASHBOARD)
    if low_fuel:
        labels.append(OverlayLabel.LOW_FUEL_WARNING)
    if low_fuel and ctx is not SceneContext.INDOOR_GARAGE:
        labels.append(OverlayLabel.NAVIGATION_HINT)
    if ctx in (SceneContext.INDOOR_GARAGE, SceneContext.OUTDOOR_PARKING):
        labels.append(OverlayLabel.PARKING_INFORMATION)
    if ctx in (SceneContext.INTERCITY_ROAD, SceneContext.HIGHWAY) and not low_fuel:
        labels.append(OverlayLabel.SERVICE_ADVERTISEMENT)

    return [Recommendation(label=label,
                           bbox=placement_box(label, image_size),
                           target=TARGET_OF_LABEL[label])
            for label in labels]


# --- prompting -----------------------------------------------------------

REASONING_QUESTIONS = (
    "What type of environment is the vehicle in?",
    "What is the current status of the vehicle and driver "
    "(e.g., dashboard visibility, fuel level)?",
    "What type of AR content is relevant in the current situation?",
    "Where should the overlay be anchored in the environment?",
)

SYSTEM_PROMPT = (
    "You are an in-vehicle AR assistant. Reason step by step over the "
    "cabin view, the road view, and the vehicle state, then answer with "
    "a JSON document listing overlay recommendations. Each entry needs "
    "a label, a target (intra for the cabin, extra for the road scene), "
    "and an image-space bounding box [u_min, v_min, u_max, v_max]. "
    "Anchor every overlay in the upper or side regions of the view."
)


@dataclass(frozen=True)
class PromptRecord:
    system_prompt: str
    user_prompt: str
    questions: tuple[str, ...]
    raw_response: str = ""


def build_prompt(intra_summary: str, extra_summary: str, vs: VehicleState) -> PromptRecord:
    """Assemble the incremental reasoning prompt; byte-stable per input."""
    state_json = json.dumps(vs.as_dict(), sort_keys=True)
    lines = [
        "Cabin view: " + intra_summary,
        "Road view: " + extra_summary,
        "Vehicle state: " + state_json,
        "",
        "Answer the following, in order:",
    ]
    lines += [f"({i}) {q}" for i, q in enumerate(REASONING_QUESTIONS, start=1)]
    return PromptRecord(system_prompt=SYSTEM_PROMPT,
                        user_prompt="\n".join(lines),
                        questions=REASONING_QUESTIONS)


# --- structured response handling ----------------------------------------

def emit_recommendations(recs: list[Recommendation]) -> str:
    """Serialize recommendations into the structured response format."""
    doc = {
        "recommendations": [
            {
                "label": DISPLAY_NAMES[r.label],
                "target": r.target,
                "bbox": r.bbox.as_list(),
            }
            for r in recs
        ]
    }
    return json.dumps(doc, sort_keys=True)


def parse_llm_response(text: str, image_size: tuple[int, int]) -> list[Recommendation]:
    """Parse a structured response into validated recommendations.

    Boxes are clamped into the image; coordinates that are negative or
    beyond twice the image size flag hallucinated geometry instead.
    Entries pairing a label with the wrong target are rejected
    (dropped), since the pairing is a hard invariant of the output.
    """
    w, h = image_size
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise SchemaError(f"response is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "recommendations" not in doc:
        raise SchemaError("response missing 'recommendations' list")
    entries = doc["recommendations"]
    if not isinstance(entries, list):
        raise SchemaError("'recommendations' must be a list")

    out: list[Recommendation] = []
    for entry in entries:
        if not isinstance(entry, dict):
            raise SchemaError("recommendation entry is not an object")
        try:
            raw_label = entry["label"]
            target = entry["target"]
            bbox = entry["bbox"]
        except KeyError as exc:
            raise SchemaError(f"recommendation entry missing {exc}") from exc

        label = _LABEL_ALIASES.get(str(raw_label).strip().lower())
        if label is None:
            raise UnknownLabel(f"unknown overlay label {raw_label!r}")

        if (not isinstance(bbox, (list, tuple)) or len(bbox) != 4
                or not all(isinstance(x, (int, float)) for x in bbox)):
            raise SchemaError(f"bbox must be 4 numbers, got {bbox!r}")
        u0, v0, u1, v1 = (float(x) for x in bbox)
        if min(u0, v0, u1, v1) < 0 or max(u0, u1) > 2 * w or max(v0, v1) > 2 * h:
            raise BoxOutOfRange(f"bbox {bbox} far outside a {w}x{h} image")
        if u0 > u1 or v0 > v1:
            raise SchemaError(f"bbox corners out of order: {bbox}")
        box = BoundingBox(u0, v0, u1, v1).clamped(w, h)

        if target not in (INTRA, EXTRA) or TARGET_OF_LABEL[label] != target:
            continue  # violates the label/target pairing invariant
        out.append(Recommendation(label=label, bbox=box, target=target))
    return out


# --- triggers -------------------------------------------------------------

@dataclass(frozen=True)
class TriggerEvents:
    """Per-frame signals that can fire a recommendation pass."""

    fuel_prev: float
    fuel_now: float
    fuel_threshold: float = DEFAULT_FUEL_THRESHOLD
    branch_started: bool = False  # any branch left 'uninitialized' for 'tracking'
    context_prev: SceneContext | None = None
    context_now: SceneContext | None = None


def trigger_check(events: TriggerEvents) -> bool:
    """True when fuel crossed below threshold, tracking started, or
    the scene context changed this frame."""
    crossed = (events.fuel_prev >= events.fuel_threshold
               and events.fuel_now < events.fuel_threshold)
    changed = (events.context_prev is not None
               and events.context_now is not None
               and events.context_prev != events.context_now)
    return bool(crossed or events.branch_started or changed)


# --- optional external client ----------------------------------------------

@dataclass(frozen=True)
class LlmClientConfig:
    """External language-model endpoint settings; inert unless enabled."""

    enabled: bool = False
    endpoint: str | None = None
    model: str = "4o-mini"
    checkpoint: str = "2025-04-16"
    timeout_s: float = 30.0


class RecordedResponseClient:
    """Replays fixture response texts instead of contacting a service."""

    def __init__(self, responses: list[str]):
        self._responses = list(responses)
        self._cursor = 0

    def complete(self, prompt: PromptRecord) -> str:
        if self._cursor >= len(self._responses):
            raise SchemaError("recorded client exhausted its fixtures")
        text = self._responses[self._cursor]
        self._cursor += 1
        return text
