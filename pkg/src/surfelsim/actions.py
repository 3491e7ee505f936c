"""External actions driving a simulation: gravity, wind fields, point forces.

Wind is force per unit mass (an acceleration), point forces are newtons
applied at an anchor surfel.  Evaluation is pure; an ActionSet is never
mutated by the solvers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SceneFormatError

DEFAULT_GRAVITY = (0.0, 0.0, -9.8)

_EPS_RADIUS = 1e-9


@dataclass(frozen=True)
class WindField:
    """Uniform stream or a swirling vortex with Gaussian falloff."""

    kind: str
    strength: float
    direction: tuple = (1.0, 0.0, 0.0)  # uniform: flow direction; vortex: axis
    center: tuple = (0.0, 0.0, 0.0)
    time_window: tuple = (0.0, math.inf)
    falloff_radius: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "vortex"):
            raise SceneFormatError(f"unknown wind kind '{self.kind}'")
        d = np.asarray(self.direction, dtype=np.float64)
        norm = float(np.linalg.norm(d))
        if not norm > 0.0:
            raise SceneFormatError("wind direction must be a nonzero vector")
        object.__setattr__(self, "direction", tuple((d / norm).tolist()))
        t0, t1 = self.time_window
        if not t0 <= t1:
            raise SceneFormatError(f"wind time window {self.time_window} is reversed")
        if self.falloff_radius <= 0.0:
            raise SceneFormatError("falloff_radius must be positive")


@dataclass(frozen=True)
class PointForce:
    """Time-varying force (N) pulling on one anchor surfel of one object.

    `profile` is a list of (t, fx, fy, fz) knots; between knots the force
    is linearly interpolated, outside the window it is zero.
    """

    object_index: int
    anchor_index: int
    profile: tuple
    time_window: tuple = (0.0, math.inf)

    def __post_init__(self):
        knots = np.asarray(self.profile, dtype=np.float64)
        if knots.ndim != 2 or knots.shape[1] != 4 or knots.shape[0] == 0:
            raise SceneFormatError("point force profile must be a nonempty list of (t, fx, fy, fz)")
        if not np.all(np.isfinite(knots)):
            raise SceneFormatError("point force profile contains non-finite values")
        if np.any(np.diff(knots[:, 0]) < 0):
            raise SceneFormatError("point force profile times must be non-decreasing")
        object.__setattr__(self, "profile", tuple(map(tuple, knots.tolist())))
        t0, t1 = self.time_window
        if not t0 <= t1:
            raise SceneFormatError(f"point force time window {self.time_window} is reversed")


@dataclass
class ActionSet:
    gravity: tuple = DEFAULT_GRAVITY
    winds: list = field(default_factory=list)
    point_forces: list = field(default_factory=list)


def eval_wind(fld: WindField, x, t: float) -> np.ndarray:
    """Wind acceleration (N/kg) at position(s) `x` and time `t`.

    Accepts a single 3-vector or an (N, 3) array and returns the same shape.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    t0, t1 = fld.time_window
    if not (t0 <= t <= t1):
        out = np.zeros_like(pts)
        return out[0] if single else out

    if fld.kind == "uniform":
        out = np.broadcast_to(np.asarray(fld.direction) * fld.strength, pts.shape).copy()
    else:
        r = pts - np.asarray(fld.center)
        dist = np.linalg.norm(r, axis=1, keepdims=True)
        swirl = np.cross(np.asarray(fld.direction), r) / np.maximum(dist, _EPS_RADIUS)
        falloff = np.exp(-((dist / fld.falloff_radius) ** 2))
        out = fld.strength * swirl * falloff
    return out[0] if single else out


def eval_point_force(pf: PointForce, t: float) -> np.ndarray:
    """Force in newtons at time `t`; zero outside the window."""
    t0, t1 = pf.time_window
    if not (t0 <= t <= t1):
        return np.zeros(3)
    knots = np.asarray(pf.profile, dtype=np.float64)
    return np.array([np.interp(t, knots[:, 0], knots[:, k]) for k in (1, 2, 3)])


def wind_acceleration(actions: ActionSet, positions: np.ndarray, t: float) -> np.ndarray:
    """Summed wind acceleration over every active field, (N, 3)."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    total = np.zeros_like(positions)
    for fld in actions.winds:
        total += eval_wind(fld, positions, t)
    return total


_WIND_KEYS = {"kind", "strength", "direction", "axis", "center", "time_window", "falloff_radius"}
_POINT_KEYS = {"object_index", "anchor_index", "profile", "time_window"}


def _wind_from_json(d: dict, index: int) -> WindField:
    for key in d:
        if key not in _WIND_KEYS:
            raise SceneFormatError(f"unknown key '{key}' in winds[{index}]")
    if "direction" in d and "axis" in d:
        raise SceneFormatError(f"winds[{index}] has both 'direction' and 'axis'")
    kwargs = {
        "kind": d.get("kind", "uniform"),
        "strength": float(d.get("strength", 0.0)),
    }
    vec = d.get("direction", d.get("axis"))
    if vec is not None:
        kwargs["direction"] = tuple(vec)
    if "center" in d:
        kwargs["center"] = tuple(d["center"])
    if "time_window" in d:
        kwargs["time_window"] = tuple(d["time_window"])
    if "falloff_radius" in d:
        kwargs["falloff_radius"] = float(d["falloff_radius"])
    return WindField(**kwargs)


def _point_force_from_json(d: dict, index: int) -> PointForce:
    for key in d:
        if key not in _POINT_KEYS:
            raise SceneFormatError(f"unknown key '{key}' in point_forces[{index}]")
    try:
        pf = PointForce(
            object_index=int(d["object_index"]),
            anchor_index=int(d["anchor_index"]),
            profile=tuple(map(tuple, d["profile"])),
        )
    except KeyError as e:
        raise SceneFormatError(f"point_forces[{index}] is missing key {e}") from e
    if "time_window" in d:
        pf = PointForce(pf.object_index, pf.anchor_index, pf.profile, tuple(d["time_window"]))
    return pf


def actions_from_json(data: dict, scene=None) -> ActionSet:
    for key in data:
        if key not in ("gravity", "winds", "point_forces"):
            raise SceneFormatError(f"unknown key '{key}' in action file")
    actions = ActionSet(
        gravity=tuple(data.get("gravity", DEFAULT_GRAVITY)),
        winds=[_wind_from_json(w, i) for i, w in enumerate(data.get("winds", []))],
        point_forces=[
            _point_force_from_json(p, i) for i, p in enumerate(data.get("point_forces", []))
        ],
    )
    if len(actions.gravity) != 3 or not np.all(np.isfinite(actions.gravity)):
        raise SceneFormatError(f"gravity must be a finite 3-vector, got {actions.gravity}")
    if scene is not None:
        for i, pf in enumerate(actions.point_forces):
            if not 0 <= pf.object_index < len(scene.objects):
                raise SceneFormatError(
                    f"point_forces[{i}] names object {pf.object_index} "
                    f"but the scene has {len(scene.objects)} objects"
                )
            n = scene.objects[pf.object_index].n_surfels
            if not 0 <= pf.anchor_index < n:
                raise SceneFormatError(
                    f"point_forces[{i}] anchors surfel {pf.anchor_index} "
                    f"but object {pf.object_index} has {n} surfels"
                )
    return actions


def load_actions(path, scene=None) -> ActionSet:
    """Read an action file; with `scene` given, also check anchor indices."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise SceneFormatError(f"{path}: not valid JSON ({e})") from e
    return actions_from_json(data, scene=scene)


def actions_to_json(actions: ActionSet) -> dict:
    return {
        "gravity": list(actions.gravity),
        "winds": [
            {
                "kind": w.kind,
                "strength": w.strength,
                "direction": list(w.direction),
                "center": list(w.center),
                "time_window": list(w.time_window),
                "falloff_radius": w.falloff_radius,
            }
            for w in actions.winds
        ],
        "point_forces": [
            {
                "object_index": p.object_index,
                "anchor_index": p.anchor_index,
                "profile": [list(k) for k in p.profile],
                "time_window": list(p.time_window),
            }
            for p in actions.point_forces
        ],
    }


def save_actions(actions: ActionSet, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(actions_to_json(actions), fh)
