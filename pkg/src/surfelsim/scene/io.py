"""Scene file serialization.

Scene files are UTF-8 JSON with top-level keys `camera`, `background`,
`objects`.  Surfels are rows of 13 floats: position (3), quaternion
(w, x, y, z), scale (2), opacity, color (3).  An object carries either
explicit `surfels` or a `procedural` primitive spec.  Unknown keys are
rejected so typos fail loudly instead of silently defaulting.
"""

from __future__ import annotations

import json
from dataclasses import replace

import numpy as np

from ..errors import SceneFormatError
from .types import MATERIAL_KINDS, Camera, Material, ObjectSurfels, Scene, SurfelCloud

__all__ = ["load_scene", "save_scene", "scene_from_json", "scene_to_json"]

_CAMERA_KEYS = {"fx", "fy", "cx", "cy", "width", "height", "world_to_camera"}
_OBJECT_KEYS = {
    "name",
    "kind",
    "material",
    "surfels",
    "procedural",
    "edges",
    "triangles",
    "velocities",
    "pinned",
    "gravity",
}
_MATERIAL_KEYS = {
    "density",
    "youngs_modulus",
    "poisson",
    "friction",
    "friction_angle_deg",
    "stretch_compliance",
    "bending_compliance",
    "viscosity",
}
_BACKGROUND_KEYS = {"surfels", "procedural"}


def _reject_unknown(d: dict, allowed: set, where: str):
    for key in d:
        if key not in allowed:
            raise SceneFormatError(f"unknown key '{key}' in {where}")


def _camera_from_json(d: dict) -> Camera:
    _reject_unknown(d, _CAMERA_KEYS, "camera")
    try:
        return Camera(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4),
        )
    except KeyError as e:
        raise SceneFormatError(f"camera is missing key {e}") from e


def _material_from_json(kind: str, params: dict, where: str) -> Material:
    _reject_unknown(params, _MATERIAL_KEYS, where)
    if kind not in MATERIAL_KINDS:
        raise SceneFormatError(f"{where.rsplit('.', 1)[0]}: unknown material kind '{kind}'")
    from .procedural import _material_from

    # Kind-appropriate defaults first, then explicit overrides on top.
    base = _material_from({"material": {"kind": kind}})
    return replace(base, **{k: float(v) for k, v in params.items()})


def _object_from_json(d: dict, index: int, particle_size: float, seed: int) -> ObjectSurfels:
    _reject_unknown(d, _OBJECT_KEYS, f"objects[{index}]")
    if "kind" not in d:
        raise SceneFormatError(f"objects[{index}] is missing 'kind'")
    material = _material_from_json(
        d["kind"], dict(d.get("material", {})), f"objects[{index}].material"
    )
    name = d.get("name", f"object{index}")

    if ("surfels" in d) == ("procedural" in d):
        raise SceneFormatError(
            f"objects[{index}] must have exactly one of 'surfels' or 'procedural'"
        )

    if "procedural" in d:
        from .procedural import _build_object

        prim = dict(d["procedural"])
        prim.setdefault("name", name)
        prim["material"] = material
        obj = _build_object(prim, particle_size, index)
    else:
        cloud = SurfelCloud.from_rows(d["surfels"])
        obj = ObjectSurfels(name=name, material=material, cloud=cloud)

    if "velocities" in d:
        obj.velocities = np.asarray(d["velocities"], dtype=np.float64).reshape(-1, 3)
    if "edges" in d:
        obj.edges = np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2)
    if "triangles" in d:
        obj.triangles = np.asarray(d["triangles"], dtype=np.int64).reshape(-1, 3)
    if "pinned" in d:
        obj.pinned = np.asarray(d["pinned"], dtype=np.int64).reshape(-1)
    obj.gravity_enabled = bool(d.get("gravity", True))
    return obj


def scene_from_json(data: dict, particle_size: float = 1e-2, seed: int = 0) -> Scene:
    _reject_unknown(data, {"camera", "background", "objects", "particle_size"}, "scene")
    for key in ("camera", "background", "objects"):
        if key not in data:
            raise SceneFormatError(f"scene is missing top-level key '{key}'")
    particle_size = float(data.get("particle_size", particle_size))

    bg = data["background"]
    if isinstance(bg, dict):
        _reject_unknown(bg, _BACKGROUND_KEYS, "background")
        if "procedural" in bg:
            from .procedural import _build_background

            background = _build_background(bg["procedural"], particle_size)
        else:
            background = SurfelCloud.from_rows(bg["surfels"])
    else:
        background = SurfelCloud.from_rows(bg)

    objects = [
        _object_from_json(o, i, particle_size, seed) for i, o in enumerate(data["objects"])
    ]
    return Scene(camera=_camera_from_json(data["camera"]), background=background, objects=objects)


def load_scene(path, particle_size: float = 1e-2) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise SceneFormatError(f"{path}: not valid JSON ({e})") from e
    return scene_from_json(data, particle_size=particle_size)


def scene_to_json(scene: Scene) -> dict:
    cam = scene.camera
    out = {
        "camera": {
            "fx": cam.fx,
            "fy": cam.fy,
            "cx": cam.cx,
            "cy": cam.cy,
            "width": cam.width,
            "height": cam.height,
            "world_to_camera": np.asarray(cam.world_to_camera).tolist(),
        },
        "background": {"surfels": scene.background.to_rows().tolist()},
        "objects": [],
    }
    for obj in scene.objects:
        entry = {
            "name": obj.name,
            "kind": obj.material.kind,
            "material": {
                "density": obj.material.density,
                "youngs_modulus": obj.material.youngs_modulus,
                "poisson": obj.material.poisson,
                "friction": obj.material.friction,
                "friction_angle_deg": obj.material.friction_angle_deg,
                "stretch_compliance": obj.material.stretch_compliance,
                "bending_compliance": obj.material.bending_compliance,
                "viscosity": obj.material.viscosity,
            },
            "surfels": obj.cloud.to_rows().tolist(),
            "velocities": obj.velocities.tolist(),
            "gravity": obj.gravity_enabled,
        }
        if obj.edges.shape[0]:
            entry["edges"] = obj.edges.tolist()
        if obj.triangles.shape[0]:
            entry["triangles"] = obj.triangles.tolist()
        if obj.pinned.shape[0]:
            entry["pinned"] = obj.pinned.tolist()
        out["objects"].append(entry)
    return out


def save_scene(scene: Scene, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_json(scene), fh)
