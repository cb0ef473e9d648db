"""Binary artifact formats and run manifests.

All multi-byte values are little-endian. Every file carries a 4-byte magic,
a u32 version, a payload, and a trailing CRC32 of everything before it:

- ``DRMT``: trajectory dump (per-step particle positions + tool pose, f32)
- ``DRMA``: action sequence (T x 4 f32), same header scheme
- ``DRMD``: one demonstration chunk (observations, actions, goal, metadata)
- ``DRMP``: policy checkpoint (architecture JSON block + f32 weight arrays)

Readers never return silently corrupted data: magic/version/length/CRC
failures raise the dedicated I/O errors.
"""

from __future__ import annotations

import io
import json
import struct
import time
import zlib

import numpy as np

from .errors import ChecksumError, DatasetIOError, TruncatedFileError, VersionMismatchError

FORMAT_VERSION = 1


def _finalize(buf: io.BytesIO) -> bytes:
    payload = buf.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def _open_checked(data: bytes, magic: bytes) -> io.BytesIO:
    if len(data) < 12:
        raise TruncatedFileError(f"file shorter than minimal {magic.decode()} frame")
    payload, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch")
    buf = io.BytesIO(payload)
    got = buf.read(4)
    if got != magic:
        raise DatasetIOError(f"bad magic {got!r}, expected {magic!r}")
    version = struct.unpack("<I", _read_exact(buf, 4))[0]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    return buf


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(data)}")
    return data


def _write_array(buf: io.BytesIO, arr: np.ndarray, dtype="<f4") -> None:
    buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_array(buf: io.BytesIO, shape, dtype="<f4") -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(buf, count * np.dtype(dtype).itemsize)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


# ---------------------------------------------------------------------------
# trajectory dumps (DRMT)
# ---------------------------------------------------------------------------


def write_trajectory_dump(path, states) -> None:
    """Per-step f32 positions and tool poses of a rollout (T+1 states)."""
    n = np.asarray(states[0].particles.x).shape[0]
    buf = io.BytesIO()
    buf.write(b"DRMT")
    buf.write(struct.pack("<IIII", FORMAT_VERSION, len(states) - 1, n, 2))
    for s in states:
        _write_array(buf, np.asarray(s.particles.x))
        pose = np.array(
            [*np.asarray(s.tool.center), s.tool.heading, s.tool.spin, s.tool.radius]
        )
        _write_array(buf, pose)
    with open(path, "wb") as fh:
        fh.write(_finalize(buf))


def read_trajectory_dump(path):
    """Returns (positions (T+1, n, 2), poses (T+1, 5)) as f32 arrays."""
    with open(path, "rb") as fh:
        buf = _open_checked(fh.read(), b"DRMT")
    horizon, n, dims = struct.unpack("<III", _read_exact(buf, 12))
    xs, poses = [], []
    for _ in range(horizon + 1):
        xs.append(_read_array(buf, (n, dims)))
        poses.append(_read_array(buf, (5,)))
    return np.stack(xs), np.stack(poses)


# ---------------------------------------------------------------------------
# action sequences (DRMA)
# ---------------------------------------------------------------------------


def write_actions(path, actions) -> None:
    actions = np.asarray(actions)
    buf = io.BytesIO()
    buf.write(b"DRMA")
    buf.write(struct.pack("<III", FORMAT_VERSION, actions.shape[0], actions.shape[1]))
    _write_array(buf, actions)
    with open(path, "wb") as fh:
        fh.write(_finalize(buf))


def read_actions(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = _open_checked(fh.read(), b"DRMA")
    horizon, dim = struct.unpack("<II", _read_exact(buf, 8))
    return _read_array(buf, (horizon, dim)).astype(np.float64)


# ---------------------------------------------------------------------------
# demonstration chunks (DRMD)
# ---------------------------------------------------------------------------


def write_demo_chunk(path, dough_obs, tool_obs, goal_cloud, actions, achieved_cloud,
                     reset_timesteps) -> None:
    """One trajectory's observation/action record.

    ``dough_obs`` (T, n_obs, 2), ``tool_obs`` (T, n_tool, 2), ``goal_cloud``
    (n_goal, 2), ``actions`` (T, 4), ``achieved_cloud`` (n_goal, 2).
    """
    T, n_obs, _ = dough_obs.shape
    n_tool = tool_obs.shape[1]
    n_goal = goal_cloud.shape[0]
    buf = io.BytesIO()
    buf.write(b"DRMD")
    buf.write(struct.pack("<IIIIII", FORMAT_VERSION, T, n_obs, n_tool, n_goal,
                          len(reset_timesteps)))
    _write_array(buf, dough_obs)
    _write_array(buf, tool_obs)
    _write_array(buf, goal_cloud)
    _write_array(buf, actions)
    _write_array(buf, achieved_cloud)
    _write_array(buf, np.asarray(reset_timesteps), dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(_finalize(buf))


def read_demo_chunk(path) -> dict:
    with open(path, "rb") as fh:
        buf = _open_checked(fh.read(), b"DRMD")
    T, n_obs, n_tool, n_goal, n_reset = struct.unpack("<IIIII", _read_exact(buf, 20))
    return dict(
        dough_obs=_read_array(buf, (T, n_obs, 2)),
        tool_obs=_read_array(buf, (T, n_tool, 2)),
        goal_cloud=_read_array(buf, (n_goal, 2)),
        actions=_read_array(buf, (T, 4)),
        achieved_cloud=_read_array(buf, (n_goal, 2)),
        reset_timesteps=tuple(int(t) for t in _read_array(buf, (n_reset,), dtype="<u4")),
    )


# ---------------------------------------------------------------------------
# policy checkpoints (DRMP)
# ---------------------------------------------------------------------------


def write_policy_checkpoint(path, params: dict, meta: dict) -> None:
    """Flat {name: array} parameter dict plus a JSON metadata block.

    Parameter names/shapes are recorded in the JSON block in sorted order so
    the weight payload is self-describing.
    """
    names = sorted(params)
    meta = dict(meta)
    meta["parameters"] = [[n, list(np.asarray(params[n]).shape)] for n in names]
    blob = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(b"DRMP")
    buf.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    for n in names:
        _write_array(buf, np.asarray(params[n]))
    with open(path, "wb") as fh:
        fh.write(_finalize(buf))


def read_policy_checkpoint(path):
    with open(path, "rb") as fh:
        buf = _open_checked(fh.read(), b"DRMP")
    (blob_len,) = struct.unpack("<I", _read_exact(buf, 4))
    meta = json.loads(_read_exact(buf, blob_len))
    params = {}
    for name, shape in meta["parameters"]:
        params[name] = _read_array(buf, tuple(shape))
    return params, meta


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------


def write_manifest(path, command: str, config_hash: str, seed, outputs, wall_time: float,
                   extra: dict | None = None) -> None:
    import jax
    import scipy

    from . import __version__

    doc = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "outputs": [str(o) for o in outputs],
        "wall_time": wall_time,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "versions": {
            "doughroll": __version__,
            "numpy": np.__version__,
            "jax": jax.__version__,
            "scipy": scipy.__version__,
        },
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
