"""Synthetic multi-agent "micro-sport" scene generator with exact oracle labels.

Each clip shows a crowd of colored agents plus a red "carrier" that drifts
toward a target zone with a bright ball in tow.  Activity classes are scripted
motion templates:

* ``converge-left`` / ``converge-right``: the top-band agents press toward the
  named side while the bottom band backpedals the other way (net horizontal
  motion cancels), and the ball play moves into that side's zone.
* ``static-left`` / ``static-right`` / ``static``: nobody moves; only the ball
  play (carrier + ball) distinguishes the zone.

Every label the trainer consumes (per-person flows, boxes, object locations,
class) is exact by construction, and clips are pure functions of
``(config, seed, class)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

CONVERGE_LEFT = "converge-left"
CONVERGE_RIGHT = "converge-right"
STATIC_LEFT = "static-left"
STATIC_RIGHT = "static-right"
STATIC = "static"
UNKNOWN_CLASS = "unknown"

CLASS_CATALOG = (CONVERGE_LEFT, CONVERGE_RIGHT, STATIC_LEFT, STATIC_RIGHT, STATIC)

# Horizontal zone anchors as width fractions; the ball settles exactly on its
# class's anchor in the final frame, so the oracle's nearest-anchor rule is exact.
ZONE_X = {"left": 0.20, "center": 0.50, "right": 0.80}

_CLASS_ZONE = {
    CONVERGE_LEFT: "left",
    CONVERGE_RIGHT: "right",
    STATIC_LEFT: "left",
    STATIC_RIGHT: "right",
    STATIC: "center",
}

BACKGROUND = (0.42, 0.42, 0.42)
CARRIER_COLOR = (0.95, 0.15, 0.15)
BALL_COLOR = (1.0, 1.0, 0.92)
GOAL_COLOR = (0.95, 0.55, 0.10)

_AGENT_PALETTE = (
    (0.20, 0.45, 0.95),
    (0.15, 0.75, 0.40),
    (0.55, 0.35, 0.85),
    (0.10, 0.65, 0.75),
    (0.85, 0.30, 0.65),
    (0.60, 0.60, 0.20),
)

# Relative horizontal travel of a moving agent over the whole clip.
_TRAVEL_FRAC = 0.35
_TRAVEL_JITTER = 0.15
_TRAIL_ALPHA = 0.45
_TRAIL_SHIFT = 0.75
_TRAIL_SHRINK = 0.8


@dataclass(frozen=True)
class SceneConfig:
    """Geometry and population of the generated scenes."""

    width: int = 64
    height: int = 64
    frames: int = 8
    num_people: int = 6
    num_objects: int = 1
    class_set: tuple[str, ...] = CLASS_CATALOG
    agent_radius: float = 3.0
    object_radius: float = 2.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_set", tuple(self.class_set))
        for name in ("width", "height", "frames", "num_people", "num_objects"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        limit = min(self.width, self.height) / 4
        for name in ("agent_radius", "object_radius"):
            r = getattr(self, name)
            if not 0 < r < limit:
                raise ValueError(
                    f"{name} must be in (0, {limit}) for a {self.width}x{self.height} frame, got {r}"
                )
        if not self.class_set:
            raise ValueError("class_set must not be empty")
        for cls in self.class_set:
            if cls not in CLASS_CATALOG:
                raise ValueError(f"unknown class id {cls!r}; known classes: {CLASS_CATALOG}")

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "frames": self.frames,
            "num_people": self.num_people,
            "num_objects": self.num_objects,
            "class_set": list(self.class_set),
            "agent_radius": self.agent_radius,
            "object_radius": self.object_radius,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        return cls(**{**data, "class_set": tuple(data["class_set"])})


@dataclass
class Clip:
    """One generated video with its exact training labels.

    ``config`` and ``seed`` record provenance so that the clip can be
    re-rendered (e.g. with the group-relevant objects removed).
    """

    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    person_tracks: np.ndarray  # (P, T, 4) float32, [x_min, y_min, x_max, y_max]
    flows_gt: np.ndarray  # (P, T, 2) float32
    object_track: np.ndarray  # (T, 2 * num_objects) float32
    label: str
    config: SceneConfig
    seed: int


@dataclass
class _SceneState:
    agent_pos: np.ndarray  # (P, T, 2) float64 centers
    agent_colors: np.ndarray  # (P, 3)
    carrier_pos: np.ndarray  # (T, 2) float64
    object_pos: np.ndarray  # (T, N_o, 2) float64; object 0 is the ball


def designated_indices(num_people: int) -> np.ndarray:
    """Indices of the top-band ("press") agents that carry a converge
    template's scripted direction."""
    return np.arange(0, num_people, 2)


def _clip_rng(config: SceneConfig, seed: int, class_id: str) -> np.random.Generator:
    entropy = [config.rng_seed & 0xFFFFFFFFFFFFFFFF, seed & 0xFFFFFFFFFFFFFFFF,
               CLASS_CATALOG.index(class_id)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _build_scene(config: SceneConfig, seed: int, class_id: str) -> _SceneState:
    rng = _clip_rng(config, seed, class_id)
    w, h, t_n, p_n = config.width, config.height, config.frames, config.num_people
    r = config.agent_radius
    moving = class_id in (CONVERGE_LEFT, CONVERGE_RIGHT)
    if moving and t_n < 2:
        raise ValueError(f"{class_id!r} needs at least 2 frames to show motion, got {t_n}")

    top = np.zeros(p_n, dtype=bool)
    top[designated_indices(p_n)] = True

    # Vertical bands are shared by every class so layout alone carries no label.
    y0 = np.where(
        top,
        rng.uniform(0.10 * h, 0.42 * h, size=p_n),
        rng.uniform(0.58 * h, 0.90 * h, size=p_n),
    )
    travel = _TRAVEL_FRAC * w * (1.0 + _TRAVEL_JITTER * rng.uniform(-1.0, 1.0, size=p_n))
    if moving:
        # Press band heads toward the zone, the other band backpedals, so the
        # crowd's mean horizontal flow is ~zero and only the per-location flow
        # field identifies the class.
        direction = np.where(top, -1.0, 1.0)
        if class_id == CONVERGE_RIGHT:
            direction = -direction
        toward_left = direction < 0
        x0 = np.where(
            toward_left,
            rng.uniform(0.55 * w, 0.90 * w, size=p_n),
            rng.uniform(0.10 * w, 0.45 * w, size=p_n),
        )
        step = direction * travel / (t_n - 1)
    else:
        x0 = rng.uniform(0.10 * w, 0.90 * w, size=p_n)
        step = np.zeros(p_n)

    steps = np.arange(t_n, dtype=np.float64)
    agent_pos = np.empty((p_n, t_n, 2), dtype=np.float64)
    agent_pos[:, :, 0] = x0[:, None] + step[:, None] * steps[None, :]
    agent_pos[:, :, 1] = y0[:, None]
    agent_pos[:, :, 0] = np.clip(agent_pos[:, :, 0], r + 0.5, w - r - 0.5)
    agent_pos[:, :, 1] = np.clip(agent_pos[:, :, 1], r + 0.5, h - r - 0.5)

    palette = np.asarray(_AGENT_PALETTE)
    colors = palette[rng.integers(0, len(palette), size=p_n)]
    colors = np.clip(colors + rng.uniform(-0.05, 0.05, size=(p_n, 3)), 0.05, 0.95)

    # Carrier glides from a central start to the class zone; the ball orbits it
    # with a decaying offset and settles exactly on the zone anchor at t = T-1.
    zone = _CLASS_ZONE[class_id]
    start = np.array([rng.uniform(0.35 * w, 0.65 * w), rng.uniform(0.30 * h, 0.70 * h)])
    end = np.array([ZONE_X[zone] * w, rng.uniform(0.30 * h, 0.70 * h)])
    alpha = (steps + 1.0) / t_n
    carrier_pos = start[None, :] + (end - start)[None, :] * alpha[:, None]

    orbit = min(r + config.object_radius + 1.5, 0.12 * min(w, h))
    theta0 = rng.uniform(0.0, 2.0 * math.pi)
    spin = rng.choice([-1.0, 1.0]) * rng.uniform(0.45, 0.85)
    theta = theta0 + spin * steps
    offset = orbit * (1.0 - alpha)
    ball = carrier_pos + np.stack([offset * np.cos(theta), offset * np.sin(theta)], axis=1)

    object_pos = np.empty((t_n, config.num_objects, 2), dtype=np.float64)
    object_pos[:, 0, :] = ball
    for j in range(1, config.num_objects):
        # Extra group-relevant objects are static zone markers ("goals").
        gy = np.clip(0.12 * h + 0.10 * h * (j - 1), config.object_radius + 1.0,
                     h - config.object_radius - 1.0)
        object_pos[:, j, 0] = ZONE_X[zone] * w
        object_pos[:, j, 1] = gy
    object_pos[:, :, 0] = np.clip(object_pos[:, :, 0], 0.0, float(w))
    object_pos[:, :, 1] = np.clip(object_pos[:, :, 1], 0.0, float(h))

    return _SceneState(agent_pos=agent_pos, agent_colors=colors,
                       carrier_pos=carrier_pos, object_pos=object_pos)


def _draw_disc(frame: np.ndarray, cx: float, cy: float, radius: float,
               color, alpha_scale: float = 1.0, hard_interior: bool = False) -> None:
    """Alpha-composite a disc onto ``frame`` (H, W, 3), touching only its window.

    ``hard_interior`` uses coverage ``max(r - d, 0)`` so no pixel outside
    distance ``r`` is touched (used for the maskable objects); the default
    soft profile extends half a pixel past ``r``.
    """
    h, w = frame.shape[:2]
    pad = radius + 1.0
    x_lo, x_hi = max(int(math.floor(cx - pad)), 0), min(int(math.ceil(cx + pad)) + 1, w)
    y_lo, y_hi = max(int(math.floor(cy - pad)), 0), min(int(math.ceil(cy + pad)) + 1, h)
    if x_lo >= x_hi or y_lo >= y_hi:
        return
    ys = np.arange(y_lo, y_hi, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(x_lo, x_hi, dtype=np.float64)[None, :] + 0.5
    dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    shift = 0.0 if hard_interior else 0.5
    cover = np.clip(radius + shift - dist, 0.0, 1.0) * alpha_scale
    touched = cover > 0.0
    if not np.any(touched):
        return
    window = frame[y_lo:y_hi, x_lo:x_hi]
    a = cover[touched][:, None]
    window[touched] = window[touched] * (1.0 - a) + np.asarray(color)[None, :] * a


def _render(state: _SceneState, config: SceneConfig, include_objects: bool) -> np.ndarray:
    t_n, h, w = config.frames, config.height, config.width
    frames = np.empty((t_n, h, w, 3), dtype=np.float64)
    frames[:] = np.asarray(BACKGROUND)

    def fwd_step(path: np.ndarray, t: int) -> np.ndarray:
        return path[t + 1] - path[t] if t + 1 < t_n else np.zeros(2)

    for t in range(t_n):
        frame = frames[t]
        for p in range(state.agent_pos.shape[0]):
            pos = state.agent_pos[p, t]
            color = state.agent_colors[p]
            step = fwd_step(state.agent_pos[p], t)
            if np.hypot(*step) > 1e-9:
                # Motion trail: makes the forward flow readable from one frame.
                ghost = pos - _TRAIL_SHIFT * step
                _draw_disc(frame, ghost[0], ghost[1], config.agent_radius * _TRAIL_SHRINK,
                           color, alpha_scale=_TRAIL_ALPHA)
            _draw_disc(frame, pos[0], pos[1], config.agent_radius, color)
        cpos = state.carrier_pos[t]
        cstep = fwd_step(state.carrier_pos, t)
        if np.hypot(*cstep) > 1e-9:
            ghost = cpos - _TRAIL_SHIFT * cstep
            _draw_disc(frame, ghost[0], ghost[1], config.agent_radius * _TRAIL_SHRINK,
                       CARRIER_COLOR, alpha_scale=_TRAIL_ALPHA)
        _draw_disc(frame, cpos[0], cpos[1], config.agent_radius, CARRIER_COLOR)
        if include_objects:
            # Group-relevant objects are painted last so removing them leaves
            # every other pixel bit-identical.
            for j in range(1, config.num_objects):
                gx, gy = state.object_pos[t, j]
                _draw_disc(frame, gx, gy, config.object_radius, GOAL_COLOR, hard_interior=True)
            bx, by = state.object_pos[t, 0]
            _draw_disc(frame, bx, by, config.object_radius, BALL_COLOR, hard_interior=True)
    return frames.astype(np.float32)


def generate_clip(config: SceneConfig, seed: int, class_id: str) -> Clip:
    """Generate one clip; a pure function of ``(config, seed, class_id)``."""
    if class_id not in config.class_set:
        raise ValueError(
            f"unknown class id {class_id!r}; configured classes: {list(config.class_set)}"
        )
    state = _build_scene(config, seed, class_id)
    frames = _render(state, config, include_objects=True)

    r = config.agent_radius
    centers = state.agent_pos.astype(np.float32)
    boxes = np.concatenate([centers - np.float32(r), centers + np.float32(r)], axis=2)
    box_centers = (boxes[:, :, :2] + boxes[:, :, 2:]) / np.float32(2.0)
    flows = np.zeros_like(box_centers)
    flows[:, :-1] = box_centers[:, 1:] - box_centers[:, :-1]

    return Clip(
        frames=frames,
        person_tracks=boxes,
        flows_gt=flows,
        object_track=state.object_pos.reshape(config.frames, -1).astype(np.float32),
        label=class_id,
        config=config,
        seed=seed,
    )


def remove_object(clip: Clip) -> Clip:
    """Re-render the clip's scene without its group-relevant objects.

    Labels (including ``object_track``) are kept: they remain training
    targets.  Pixels outside the objects' rendered footprints are
    bit-identical to the input.
    """
    state = _build_scene(clip.config, clip.seed, clip.label)
    frames = _render(state, clip.config, include_objects=False)
    return replace(clip, frames=frames)


def mask_object(clip: Clip) -> Clip:
    """Blacken a disc of ``object_radius`` at each object location, per frame."""
    frames = clip.frames.copy()
    t_n = clip.config.frames
    r = clip.config.object_radius
    coords = clip.object_track.reshape(t_n, -1, 2)
    h, w = frames.shape[1:3]
    for t in range(t_n):
        for j in range(coords.shape[1]):
            cx, cy = float(coords[t, j, 0]), float(coords[t, j, 1])
            x_lo, x_hi = max(int(math.floor(cx - r)), 0), min(int(math.ceil(cx + r)) + 1, w)
            y_lo, y_hi = max(int(math.floor(cy - r)), 0), min(int(math.ceil(cy + r)) + 1, h)
            if x_lo >= x_hi or y_lo >= y_hi:
                continue
            ys = np.arange(y_lo, y_hi, dtype=np.float64)[:, None] + 0.5
            xs = np.arange(x_lo, x_hi, dtype=np.float64)[None, :] + 0.5
            inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
            frames[t, y_lo:y_hi, x_lo:x_hi][inside] = 0.0
    return replace(clip, frames=frames)


def class_oracle(person_tracks: np.ndarray, object_track: np.ndarray,
                 width: int, height: int) -> str:
    """Rule-based classifier over tracks alone.

    Movers are agents whose net horizontal displacement exceeds a tenth of the
    frame width; if any exist, the shared sign of the top-band movers names the
    converge direction.  Otherwise the ball's final position picks the zone.
    Returns ``"unknown"`` for track patterns no template produces.
    """
    tracks = np.asarray(person_tracks, dtype=np.float64)
    centers = (tracks[:, :, :2] + tracks[:, :, 2:]) / 2.0
    delta_x = centers[:, -1, 0] - centers[:, 0, 0]
    movers = np.abs(delta_x) > 0.10 * width
    if movers.any():
        top_movers = movers & (centers[:, 0, 1] < height / 2.0)
        if not top_movers.any():
            return UNKNOWN_CLASS
        signs = np.sign(delta_x[top_movers])
        if np.all(signs < 0):
            return CONVERGE_LEFT
        if np.all(signs > 0):
            return CONVERGE_RIGHT
        return UNKNOWN_CLASS
    ball_x = float(np.asarray(object_track, dtype=np.float64).reshape(len(object_track), -1, 2)[-1, 0, 0])
    anchors = {STATIC_LEFT: ZONE_X["left"] * width,
               STATIC: ZONE_X["center"] * width,
               STATIC_RIGHT: ZONE_X["right"] * width}
    return min(anchors, key=lambda k: abs(anchors[k] - ball_x))


def mirror_clip_labels(person_tracks: np.ndarray, object_track: np.ndarray,
                       width: int) -> tuple[np.ndarray, np.ndarray]:
    """x-mirror tracks and object coordinates (for oracle symmetry checks)."""
    tracks = np.asarray(person_tracks).copy()
    x_min = width - tracks[:, :, 2]
    x_max = width - tracks[:, :, 0]
    tracks[:, :, 0], tracks[:, :, 2] = x_min, x_max
    objects = np.asarray(object_track).copy()
    objects = objects.reshape(objects.shape[0], -1, 2)
    objects[:, :, 0] = width - objects[:, :, 0]
    return tracks, objects.reshape(objects.shape[0], -1)


def validate_clip(clip: Clip) -> None:
    """Raise if any Clip invariant is violated (used by loaders and tests)."""
    cfg = clip.config
    t_n = cfg.frames
    if clip.frames.shape != (t_n, cfg.height, cfg.width, 3):
        raise ValueError(f"bad frames shape {clip.frames.shape}")
    boxes = clip.person_tracks
    if np.any(boxes[:, :, 0] >= boxes[:, :, 2]) or np.any(boxes[:, :, 1] >= boxes[:, :, 3]):
        raise ValueError("degenerate person box")
    if np.any(boxes[:, :, [0, 1]] < 0) or np.any(boxes[:, :, 2] > cfg.width) \
            or np.any(boxes[:, :, 3] > cfg.height):
        raise ValueError("person box out of frame")
    coords = clip.object_track.reshape(t_n, -1, 2)
    if np.any(coords[:, :, 0] < 0) or np.any(coords[:, :, 0] > cfg.width) \
            or np.any(coords[:, :, 1] < 0) or np.any(coords[:, :, 1] > cfg.height):
        raise ValueError("object location out of frame")
    centers = (boxes[:, :, :2] + boxes[:, :, 2:]) / np.float32(2.0)
    expect = np.zeros_like(centers)
    expect[:, :-1] = centers[:, 1:] - centers[:, :-1]
    if not np.array_equal(clip.flows_gt, expect):
        raise ValueError("flows_gt do not match box-center displacements")


def config_digest(config: SceneConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
