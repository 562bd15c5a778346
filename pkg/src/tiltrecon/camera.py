"""Camera poses: look-at construction, main views and the tilt interpolation trajectory.

Conventions
-----------
World up is +Z. Azimuth 0 places the camera on the +X axis ("front") and
azimuth grows counter-clockwise seen from +Z, so azimuth 90 is on +Y.
Rotations map world to camera coordinates in the OpenCV layout (x right,
y down, z forward), so a camera point is ``R @ X + T`` and the camera
center is ``-R.T @ T``.
"""

from dataclasses import dataclass, field
import json
import math

import numpy as np

from .errors import DegenerateUpError

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class ViewRole:
    """Which slot of the trajectory a view fills.

    ``kind`` is ``"main"``, ``"interp_left"`` or ``"interp_right"``. For
    interpolated views ``main_index`` is the owning main view and ``slot``
    runs from 1 to ``num_interp``.
    """

    kind: str
    main_index: int
    slot: int = 0

    def __post_init__(self):
        if self.kind not in ("main", "interp_left", "interp_right"):
            raise ValueError(f"unknown view role {self.kind!r}")
        if self.kind == "main" and self.slot != 0:
            raise ValueError("main views carry no slot")
        if self.kind != "main" and self.slot < 1:
            raise ValueError("interpolated slots start at 1")

    @property
    def is_main(self):
        return self.kind == "main"

    def __str__(self):
        if self.is_main:
            return f"main:{self.main_index}"
        return f"{self.kind}:{self.main_index}:{self.slot}"

    @classmethod
    def parse(cls, text):
        parts = text.split(":")
        if parts[0] == "main" and len(parts) == 2:
            return cls("main", int(parts[1]))
        if len(parts) == 3:
            return cls(parts[0], int(parts[1]), int(parts[2]))
        raise ValueError(f"cannot parse view role {text!r}")


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray
    azimuth_deg: float
    elevation_deg: float
    radius: float

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    @property
    def forward(self):
        return self.rotation[2]

    def to_dict(self):
        return {
            "azimuth_deg": float(self.azimuth_deg),
            "elevation_deg": float(self.elevation_deg),
            "radius": float(self.radius),
            "R": [float(v) for v in self.rotation.ravel()],
            "T": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["T"], dtype=np.float64),
            azimuth_deg=float(d["azimuth_deg"]),
            elevation_deg=float(d["elevation_deg"]),
            radius=float(d["radius"]),
        )

    def allclose(self, other, atol=1e-9):
        return (
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )


def look_at_pose(azimuth_deg, elevation_deg, radius):
    """Build a camera on the sphere of ``radius`` looking at the origin."""
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if abs(elevation_deg) >= 90.0:
        raise DegenerateUpError(f"elevation {elevation_deg} is parallel to world up")
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    center = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    forward = -center / np.linalg.norm(center)
    right = np.cross(forward, WORLD_UP)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    translation = -rotation @ center
    return CameraPose(rotation, translation, float(azimuth_deg), float(elevation_deg), float(radius))


@dataclass
class TrajectoryConfig:
    num_main_views: int = 4
    num_interp: int = 2
    radius: float = 2.5
    interp_elevation_pattern: list = field(default_factory=lambda: [30.0, -30.0])

    def __post_init__(self):
        if self.num_main_views < 2:
            raise ValueError("num_main_views must be >= 2")
        if self.num_interp < 0:
            raise ValueError("num_interp must be >= 0")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if len(self.interp_elevation_pattern) == 0:
            raise ValueError("interp_elevation_pattern must not be empty")
        for e in self.interp_elevation_pattern:
            if abs(e) >= 90:
                raise ValueError(f"elevation offset {e} out of (-90, 90)")

    @property
    def main_azimuths(self):
        step = 360.0 / self.num_main_views
        return [i * step for i in range(self.num_main_views)]


def main_view_poses(config):
    return [
        (ViewRole("main", i), look_at_pose(az, 0.0, config.radius))
        for i, az in enumerate(config.main_azimuths)
    ]


def tilt_trajectory(config):
    """Main poses plus ``num_interp`` tilted views in every gap, sorted by azimuth.

    Each gap is generated once: the view in slot ``s`` between main ``i`` and
    main ``i + 1`` is tagged as ``interp_right(i, s)``; :func:`left_alias`
    gives its name from the other side.
    """
    n = config.num_interp
    step = 360.0 / config.num_main_views
    pattern = config.interp_elevation_pattern
    out = []
    k = 0
    for i, az in enumerate(config.main_azimuths):
        out.append((ViewRole("main", i), look_at_pose(az, 0.0, config.radius)))
        for s in range(1, n + 1):
            elev = float(pattern[k % len(pattern)])
            k += 1
            out.append((ViewRole("interp_right", i, s), look_at_pose(az + s * step / (n + 1), elev, config.radius)))
    return out


def left_alias(role, config):
    """The same physical interpolated view, named from the next main view's left side."""
    if role.kind != "interp_right":
        raise ValueError("only interp_right roles have a left alias")
    n = config.num_interp
    return ViewRole("interp_left", (role.main_index + 1) % config.num_main_views, n + 1 - role.slot)


def wrap_degrees(angle):
    """Wrap to (-180, 180]."""
    a = math.fmod(angle, 360.0)
    if a > 180.0:
        a -= 360.0
    elif a <= -180.0:
        a += 360.0
    return a


def relative_pose(cond, target):
    return (
        wrap_degrees(target.azimuth_deg - cond.azimuth_deg),
        target.elevation_deg - cond.elevation_deg,
        target.radius - cond.radius,
    )


def apply_relative(cond, delta):
    d_az, d_el, d_r = delta
    return look_at_pose((cond.azimuth_deg + d_az) % 360.0, cond.elevation_deg + d_el, cond.radius + d_r)


def poses_to_json(items):
    return json.dumps([{"role": str(role), **pose.to_dict()} for role, pose in items], indent=1)


def poses_from_json(text):
    data = json.loads(text)
    if not isinstance(data, list):
        raise ValueError("pose document must be a JSON list")
    return [(ViewRole.parse(d["role"]), CameraPose.from_dict(d)) for d in data]
