"""Shared test helpers."""

from surfelsim.scene.procedural import ProceduralSpec, build_procedural_scene


def ball_scene(radius=0.08, center=(0.0, 0.0, 0.5), kind="rigid", spacing=2e-2,
               background_size=1.5):
    """A one-ball-over-a-plane scene, the smallest interesting setup."""
    spec = ProceduralSpec(
        background=[{"primitive": "ground_plane", "size": background_size}],
        objects=[
            {
                "primitive": "sphere",
                "radius": radius,
                "center": center,
                "material": {"kind": kind},
            }
        ],
        particle_size=spacing,
    )
    return build_procedural_scene(spec)
