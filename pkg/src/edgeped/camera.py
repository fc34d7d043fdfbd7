"""Camera mounting geometry for a traffic-light pole at a crosswalk.

The camera sits on top of the pole arm; the two distances of interest are
the straight-line range to the near kerb (below the arm) and to the far
traffic lane, both simple hypotenuses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class SiteValidationError(ValueError):
    pass


@dataclass(frozen=True)
class CameraSite:
    """Pole and crossing dimensions in meters, all strictly positive."""

    pole_height: float  # vertical pole (camera height)
    pole_arm_width: float  # horizontal arm the camera sits on
    crossing_length: float = 9.2  # full two-lane crossing
    far_lane_offset: float = 6.2  # camera foot to the opposite lane

    def __post_init__(self):
        for name in ("pole_height", "pole_arm_width", "crossing_length", "far_lane_offset"):
            value = getattr(self, name)
            if not value > 0:
                raise SiteValidationError(f"{name} must be > 0, got {value}")


def plan_camera(site: CameraSite) -> tuple[float, float]:
    """(near, far) camera-to-target distances in meters, 2-decimal rounded.

    near = hypot(pole height, arm width); far = hypot(pole height, far lane
    offset).
    """
    near = math.hypot(site.pole_height, site.pole_arm_width)
    far = math.hypot(site.pole_height, site.far_lane_offset)
    return round(near, 2), round(far, 2)
