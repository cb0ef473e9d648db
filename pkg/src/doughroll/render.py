"""Frame rasterizer: particles, roller, goal overlay, running score.

Frames are written as binary PPM (P6) images, one per control step, plus a
summary strip of evenly spaced frames. Pure numpy rasterization keeps pixel
placement exact and testable.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DatasetIOError
from .losses import downsample_cloud, normalized_performance

BG = (250, 248, 245)
FLOOR = (180, 175, 168)
GOAL = (247, 178, 170)
DOUGH = (120, 105, 180)
TOOL = (60, 60, 65)
TEXT = (40, 40, 45)

# 5x7 bitmap glyphs for the score overlay
_GLYPHS = {
    "0": "11111 10001 10001 10001 10001 10001 11111",
    "1": "00100 01100 00100 00100 00100 00100 01110",
    "2": "11111 00001 00001 11111 10000 10000 11111",
    "3": "11111 00001 00001 01111 00001 00001 11111",
    "4": "10001 10001 10001 11111 00001 00001 00001",
    "5": "11111 10000 10000 11111 00001 00001 11111",
    "6": "11111 10000 10000 11111 10001 10001 11111",
    "7": "11111 00001 00010 00100 01000 01000 01000",
    "8": "11111 10001 10001 11111 10001 10001 11111",
    "9": "11111 10001 10001 11111 00001 00001 11111",
    ".": "00000 00000 00000 00000 00000 01100 01100",
    "-": "00000 00000 00000 01110 00000 00000 00000",
    "+": "00000 00100 00100 11111 00100 00100 00000",
    " ": "00000 00000 00000 00000 00000 00000 00000",
}


def _blit_text(img, text, x0, y0, color, scale=2):
    h, w, _ = img.shape
    cx = x0
    for ch in text:
        rows = _GLYPHS.get(ch, _GLYPHS[" "]).split()
        for r, row in enumerate(rows):
            for c, bit in enumerate(row):
                if bit == "1":
                    ys = y0 + r * scale
                    xs = cx + c * scale
                    img[max(0, ys):min(h, ys + scale), max(0, xs):min(w, xs + scale)] = color
        cx += 6 * scale


def _disk_mask(h, w, cy, cx, radius):
    yy, xx = np.ogrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def render_frame(state, goal_bounds, config, width, height, score=None) -> np.ndarray:
    """One RGB frame (height, width, 3) of a simulation state."""
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = BG
    x0, y0, x1, y1 = config.domain
    sx = width / (x1 - x0)
    sy = height / (y1 - y0)

    def to_px(p):
        return (height - 1 - int((p[1] - y0) * sy), int((p[0] - x0) * sx))

    floor_row = height - 1 - int((config.floor_height - y0) * sy)
    img[floor_row:, :] = FLOOR

    gx0, gy0, gx1, gy1 = goal_bounds
    r0, c0 = to_px((gx0, gy1))
    r1, c1 = to_px((gx1, gy0))
    img[max(r0, 0):min(r1 + 1, height), max(c0, 0):min(c1 + 1, width)] = GOAL

    for p in np.asarray(state.particles.x):
        r, c = to_px(p)
        img[max(r - 1, 0):min(r + 1, height), max(c - 1, 0):min(c + 1, width)] = DOUGH

    center = np.asarray(state.tool.center)
    rc, cc = to_px(center)
    rad_px = state.tool.radius * sx
    ring = _disk_mask(height, width, rc, cc, rad_px + 1.5) & ~_disk_mask(
        height, width, rc, cc, rad_px - 1.5
    )
    img[ring] = TOOL
    # spin marker: a spoke from center to the surface
    spoke = center + state.tool.radius * np.array(
        [np.cos(state.tool.spin), np.sin(state.tool.spin)]
    )
    for f in np.linspace(0.0, 1.0, 32):
        r, c = to_px(center * (1 - f) + spoke * f)
        if 0 <= r < height and 0 <= c < width:
            img[r, c] = TOOL

    if score is not None:
        _blit_text(img, f"{score:+.2f}", 8, 8, TEXT)
    return img


def write_ppm(path, img) -> None:
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise DatasetIOError("not a P6 PPM file")
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8)[: w * h * 3].reshape(h, w, 3).copy()


def render_frames(states, goal, out_dir, config, exp=None, width=320, height=320) -> list:
    """One PPM per control step plus ``summary.ppm``; returns written paths.

    The overlay score is the running normalized improvement of the current
    dough cloud versus the goal.
    """
    os.makedirs(out_dir, exist_ok=True)
    goal_cloud = np.asarray(getattr(goal, "cloud", goal))
    n = min(len(goal_cloud), np.asarray(states[0].particles.x).shape[0])
    p0 = downsample_cloud(np.asarray(states[0].particles.x), n)
    gsmall = goal_cloud if len(goal_cloud) == n else downsample_cloud(goal_cloud, n)
    if hasattr(goal, "target_radius"):
        cx, base = goal.target_center
        height_m = np.ptp(goal_cloud[:, 1]) + 1e-3
        bounds = (cx - goal.target_radius, base, cx + goal.target_radius, base + height_m)
    else:
        bounds = (goal_cloud[:, 0].min(), goal_cloud[:, 1].min(),
                  goal_cloud[:, 0].max(), goal_cloud[:, 1].max())

    paths = []
    frames = []
    for t, state in enumerate(states):
        pt = downsample_cloud(np.asarray(state.particles.x), n)
        try:
            score = normalized_performance(p0, pt, gsmall)
        except Exception:
            score = 0.0
        img = render_frame(state, bounds, config, width, height, score)
        path = os.path.join(out_dir, f"frame_{t:04d}.ppm")
        write_ppm(path, img)
        paths.append(path)
        frames.append(img)

    stride = max(1, len(frames) // 8)
    strip = np.concatenate(frames[::stride], axis=1)
    strip_path = os.path.join(out_dir, "summary.ppm")
    write_ppm(strip_path, strip)
    paths.append(strip_path)
    return paths
