"""Bundled scenarios."""
import json
import math
from importlib import resources

import numpy as np

from .primitives import Pose
from .workspace import ConvexPolygon, MovingObstacle, Workspace, extract_corridor, workspace_from_dict, \
    workspace_to_dict

STRIDE_PERIOD = 0.8      # seconds per stride, converts obstacle speed to m/stride
CROSSER_SPEED = 0.32     # m/s
CROSSER_RADIUS = 0.4     # m


def _rect(cx, cy, w, h, deg=0.0):
    t = math.radians(deg)
    R = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    V = np.array([[-w, -h], [w, -h], [w, h], [-w, h]]) / 2 @ R.T
    return V + [cx, cy]


def _ngon(cx, cy, r, n, phase=0.0):
    a = phase + 2 * np.pi * np.arange(n) / n
    return np.column_stack([cx + r * np.cos(a), cy + r * np.sin(a)])


def _crosser(meet, t_meet, heading_deg):
    """Circle that passes ``meet`` at stride ``t_meet`` moving along ``heading_deg``."""
    d = np.array([math.cos(math.radians(heading_deg)), math.sin(math.radians(heading_deg))])
    v = CROSSER_SPEED * d
    p0 = np.asarray(meet) - v * STRIDE_PERIOD * t_meet
    return MovingObstacle.linear(p0, v, np.eye(2) / CROSSER_RADIUS ** 2, STRIDE_PERIOD)


def moving_obstacle_scenario():
    """10 x 10 m workspace, ten static obstacles and one circular obstacle of
    radius 0.4 m crossing the route at 0.32 m/s.

    Returns (workspace, corridor, [moving obstacle]).
    """
    obstacles = [
        _rect(3.0, 0.9, 1.0, 1.8),
        _rect(0.8, 3.5, 1.6, 1.0),
        np.array([[4.4, 2.4], [5.8, 2.0], [5.2, 3.6]]),
        _rect(1.9, 6.6, 1.4, 0.8, 30.0),
        _ngon(7.6, 3.0, 0.8, 5, 0.3),
        _rect(6.6, 6.2, 1.0, 0.8),
        np.array([[3.8, 8.2], [5.0, 7.8], [5.2, 8.8], [4.2, 9.4]]),
        _rect(9.2, 5.4, 1.6, 0.8),
        _ngon(1.4, 8.8, 0.6, 6),
        np.array([[6.6, 9.0], [7.2, 8.3], [7.5, 9.5]]),
    ]
    ws = Workspace((0.0, 10.0, 0.0, 10.0), tuple(ConvexPolygon.from_vertices(V) for V in obstacles),
                   Pose(1.0, 1.0, math.pi / 4), [9.0, 9.0], meta={"name": "moving_obstacle"})
    corridor = extract_corridor(ws)
    crosser = _crosser((3.95, 4.9), 10, -45.0)
    return ws, corridor, [crosser]


def write_bundled(path):
    ws, corridor, moving = moving_obstacle_scenario()
    with open(path, "w") as fh:
        json.dump(workspace_to_dict(ws, [corridor], moving), fh, indent=1)


def load_bundled(name="moving_obstacle"):
    """(workspace, corridor, moving) from the packaged JSON file."""
    text = resources.files("gaitplan").joinpath("data", f"{name}.json").read_text()
    ws, corridors, moving = workspace_from_dict(json.loads(text))
    return ws, corridors[0], moving


def bundled_path(name="moving_obstacle"):
    return str(resources.files("gaitplan").joinpath("data", f"{name}.json"))
