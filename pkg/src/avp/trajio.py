"""On-disk formats: trajectory logs, calibration files, dataset shards, metrics reports.

* Trajectory logs are JSON lines. The first line is a header carrying
  ``schema_version``; every other line is one step of one episode.
* Calibration files are ``key = value`` text with a row-major 4x4 extrinsic.
* Dataset shards are little-endian binary: ``b"AVPD"``, u32 version, u64 sample
  count, packed samples, and a trailing u64 BLAKE2b-64 checksum of everything
  before it.
* Metrics reports are a single JSON document with a fixed key order.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import re
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    BadRotation,
    ChecksumMismatch,
    MalformedRecord,
    MissingField,
    NonMonotonicTime,
    SchemaMismatch,
    TruncatedFile,
)
from .geometry import CameraIntrinsics, PixelAnchor, RigidTransform
from .supervision import PrimitiveLabel, Stage
from .task import TaskSpec

LOG_SCHEMA_VERSION = 1
SHARD_MAGIC = b"AVPD"
SHARD_VERSION = 1
ROTATION_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class ProprioState:
    ee_pos: np.ndarray
    gripper_cmd: float
    gripper_meas: float

    def __eq__(self, other):
        if not isinstance(other, ProprioState):
            return NotImplemented
        return (
            np.array_equal(self.ee_pos, other.ee_pos)
            and self.gripper_cmd == other.gripper_cmd
            and self.gripper_meas == other.gripper_meas
        )

    __hash__ = None

    def problems(self) -> list[str]:
        out = []
        ee = np.asarray(self.ee_pos)
        if ee.shape != (3,) or not np.all(np.isfinite(ee)):
            out.append("ee must be 3 finite numbers")
        for name in ("gripper_cmd", "gripper_meas"):
            g = getattr(self, name)
            if not (isinstance(g, (int, float)) and 0.0 <= g <= 1.0):
                out.append(f"{name}={g!r} outside [0, 1]")
        return out

    def as_array(self) -> np.ndarray:
        return np.array([*self.ee_pos, self.gripper_cmd, self.gripper_meas], dtype=np.float64)


@dataclass(eq=False)
class Step:
    t: float
    proprio: ProprioState
    observation: Optional[np.ndarray] = None
    obs_ref: Optional[str] = None
    # action applied from this step to the next one: (dx, dy, dz, gripper)
    action: Optional[np.ndarray] = None


@dataclass(eq=False)
class Trajectory:
    episode_id: str
    camera_id: str
    task: TaskSpec
    steps: list

    def __len__(self):
        return len(self.steps)

    def ee_positions(self) -> np.ndarray:
        return np.stack([s.proprio.ee_pos for s in self.steps])

    def actions(self) -> np.ndarray:
        """Per-transition actions, shape ``(T - 1, 4)``.

        Uses logged actions when present, otherwise differences of consecutive
        end-effector positions and the next step's gripper command.
        """
        if all(s.action is not None for s in self.steps[:-1]):
            return np.stack([s.action for s in self.steps[:-1]])
        ee = self.ee_positions()
        g = np.array([s.proprio.gripper_cmd for s in self.steps[1:]])
        return np.column_stack([np.diff(ee, axis=0), g])


@dataclass(frozen=True)
class CameraModel:
    camera_id: str
    intrinsics: CameraIntrinsics
    extrinsic: RigidTransform
    image_width: int
    image_height: int

    def __post_init__(self):
        if self.image_width <= 0 or self.image_height <= 0:
            raise MalformedRecord("image dimensions must be positive")


@dataclass(eq=False)
class LabeledSample:
    """One training example.

    ``observation`` is the prompt-composed image; ``raw_observation`` is the
    unprompted render when it differs (the primitive decoder only ever sees raw
    pixels). ``history`` holds labels of earlier stages, oldest first.
    """

    observation: np.ndarray
    proprio: ProprioState
    instruction: np.ndarray
    primitive_gt: PrimitiveLabel
    action_chunk: np.ndarray
    stage_index: int
    history: tuple = ()
    raw_observation: Optional[np.ndarray] = None

    @property
    def raw(self) -> np.ndarray:
        return self.observation if self.raw_observation is None else self.raw_observation

    def __eq__(self, other):
        if not isinstance(other, LabeledSample):
            return NotImplemented
        return _pack_sample(self) == _pack_sample(other)

    __hash__ = None


# ---------------------------------------------------------------- trajectory logs


def _as_text_lines(source):
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    for raw in source:
        yield raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw


def _num(rec, key, lineno):
    v = rec.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise MalformedRecord(f"field {key!r} must be a finite number, got {v!r}", lineno)
    return float(v)


def read_trajectory_log(source, obs_loader: Optional[Callable[[str], np.ndarray]] = None) -> list:
    """Parse a JSON-lines trajectory log into trajectories.

    Records are grouped by ``episode_id`` (in order of first appearance) and
    sorted by timestamp. ``obs_loader`` resolves ``obs_ref`` strings to images;
    without it observations stay unresolved.
    """
    header = None
    episodes: dict = {}
    for lineno, line in enumerate(_as_text_lines(source), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedRecord(f"invalid JSON: {e.msg}", lineno) from None
        if not isinstance(rec, dict):
            raise MalformedRecord("record is not an object", lineno)
        if header is None:
            if "schema_version" not in rec:
                raise SchemaMismatch("first line must be a header carrying schema_version")
            if rec["schema_version"] != LOG_SCHEMA_VERSION:
                raise SchemaMismatch(f"unsupported schema_version {rec['schema_version']!r}")
            header = rec
            continue
        for key in ("episode_id", "camera_id", "t", "ee", "grip_cmd", "grip_meas", "task"):
            if key not in rec:
                raise MalformedRecord(f"missing field {key!r}", lineno)
        ee = rec["ee"]
        if not (isinstance(ee, list) and len(ee) == 3):
            raise MalformedRecord("ee must be a list of 3 numbers", lineno)
        ee = np.array([_num({"ee": x}, "ee", lineno) for x in ee])
        proprio = ProprioState(ee, _num(rec, "grip_cmd", lineno), _num(rec, "grip_meas", lineno))
        bad = proprio.problems()
        if bad:
            raise MalformedRecord("; ".join(bad), lineno)
        try:
            task = TaskSpec.from_dict(rec["task"])
        except Exception as e:
            raise MalformedRecord(f"bad task: {e}", lineno) from None
        act = rec.get("act")
        if act is not None:
            if not (isinstance(act, list) and len(act) == 4):
                raise MalformedRecord("act must be a list of 4 numbers", lineno)
            act = np.array([_num({"a": x}, "a", lineno) for x in act])
        obs_ref = rec.get("obs_ref")
        step = Step(_num(rec, "t", lineno), proprio, None, obs_ref, act)
        eid = str(rec["episode_id"])
        ep = episodes.get(eid)
        if ep is None:
            episodes[eid] = ep = {"camera_id": rec["camera_id"], "task": task, "steps": [], "line": lineno}
        elif ep["camera_id"] != rec["camera_id"]:
            raise MalformedRecord(f"episode {eid!r} mixes camera ids", lineno)
        elif ep["task"] != task:
            raise MalformedRecord(f"episode {eid!r} changes task mid-episode", lineno)
        ep["steps"].append(step)

    out = []
    for eid, ep in episodes.items():
        steps = sorted(ep["steps"], key=lambda s: s.t)
        for a, b in zip(steps, steps[1:]):
            if not b.t > a.t:
                raise NonMonotonicTime(f"episode {eid!r} repeats timestamp {b.t}", ep["line"])
        if len(steps) < 2:
            raise MalformedRecord(f"episode {eid!r} has fewer than 2 steps", ep["line"])
        if obs_loader is not None:
            for s in steps:
                if s.obs_ref is not None:
                    s.observation = obs_loader(s.obs_ref)
        out.append(Trajectory(eid, str(ep["camera_id"]), ep["task"], steps))
    return out


def _floats(a) -> list:
    return [float(x) for x in a]


def write_trajectory_log(trajectories, sink, obs_refs: Optional[Callable] = None) -> None:
    """Write trajectories as JSON lines. ``obs_refs(traj, i)`` names step images."""
    sink.write(json.dumps({"schema_version": LOG_SCHEMA_VERSION, "kind": "avp-trajectory-log"}) + "\n")
    for traj in trajectories:
        task = traj.task.to_dict()
        for i, s in enumerate(traj.steps):
            ref = obs_refs(traj, i) if obs_refs is not None else s.obs_ref
            rec = {
                "episode_id": traj.episode_id,
                "camera_id": traj.camera_id,
                "t": float(s.t),
                "ee": _floats(s.proprio.ee_pos),
                "grip_cmd": float(s.proprio.gripper_cmd),
                "grip_meas": float(s.proprio.gripper_meas),
                "obs_ref": ref,
                "task": task,
                "act": None if s.action is None else _floats(s.action),
            }
            sink.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------- calibration

_CALIB_FIELDS = ("camera_id", "fx", "fy", "cx", "cy", "image_width", "image_height", "extrinsic")


def read_calibration(source) -> CameraModel:
    fields = {}
    for lineno, line in enumerate(_as_text_lines(source), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedRecord("expected 'key = value'", lineno)
        key, value = (x.strip() for x in line.split("=", 1))
        fields[key] = (value, lineno)
    for key in _CALIB_FIELDS:
        if key not in fields:
            raise MissingField(f"calibration is missing {key!r}")

    def num(key, kind=float):
        value, lineno = fields[key]
        try:
            return kind(value)
        except ValueError:
            raise MalformedRecord(f"{key} is not a number: {value!r}", lineno) from None

    value, lineno = fields["extrinsic"]
    try:
        m = np.array([float(x) for x in value.split(",")])
    except ValueError:
        raise MalformedRecord("extrinsic must be 16 comma-separated numbers", lineno) from None
    if m.size != 16 or not np.all(np.isfinite(m)):
        raise MalformedRecord("extrinsic must be 16 finite comma-separated numbers", lineno)
    m = m.reshape(4, 4)
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise BadRotation("extrinsic bottom row must be 0 0 0 1")
    ext = RigidTransform.from_matrix(m)
    err = ext.orthonormality_error()
    if err > ROTATION_TOL:
        raise BadRotation(f"extrinsic rotation is not a proper rotation (error {err:.3g})")
    return CameraModel(
        fields["camera_id"][0],
        CameraIntrinsics(num("fx"), num("fy"), num("cx"), num("cy")),
        ext,
        num("image_width", int),
        num("image_height", int),
    )


def write_calibration(cam: CameraModel, sink) -> None:
    k = cam.intrinsics
    lines = [
        f"camera_id = {cam.camera_id}",
        f"fx = {float(k.fx)!r}",
        f"fy = {float(k.fy)!r}",
        f"cx = {float(k.cx)!r}",
        f"cy = {float(k.cy)!r}",
        f"image_width = {int(cam.image_width)}",
        f"image_height = {int(cam.image_height)}",
        "extrinsic = " + ", ".join(repr(float(x)) for x in cam.extrinsic.matrix().ravel()),
    ]
    sink.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- dataset shards


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _pack_label(lab: PrimitiveLabel) -> bytes:
    a = lab.anchor
    return struct.pack("<BIII3d", int(lab.stage), lab.cell_u, lab.cell_v, lab.cell_index, a.u, a.v, a.depth)


_LABEL = struct.Struct("<BIII3d")


def _pack_image(img) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.float32 or img.ndim != 3:
        raise ValueError("observations must be float32 arrays of shape (C, H, W)")
    return struct.pack("<3I", *img.shape) + img.astype("<f4", copy=False).tobytes()


def _pack_sample(s: LabeledSample) -> bytes:
    parts = [struct.pack("<i", s.stage_index)]
    parts.append(struct.pack("<5d", *s.proprio.as_array()))
    instr = np.asarray(s.instruction, dtype="<f8")
    parts.append(struct.pack("<I", instr.size) + instr.tobytes())
    parts.append(_pack_label(s.primitive_gt))
    parts.append(struct.pack("<I", len(s.history)))
    parts.extend(_pack_label(h) for h in s.history)
    chunk = np.asarray(s.action_chunk, dtype="<f8")
    parts.append(struct.pack("<2I", *chunk.shape) + chunk.tobytes())
    parts.append(_pack_image(s.observation))
    if s.raw_observation is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + _pack_image(s.raw_observation))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"shard ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def _read_label(r: _Reader) -> PrimitiveLabel:
    st, cu, cv, ci, u, v, d = r.unpack(_LABEL.format)
    return PrimitiveLabel(Stage(st), cu, cv, ci, PixelAnchor(u, v, d))


def _read_image(r: _Reader) -> np.ndarray:
    c, h, w = r.unpack("<3I")
    return r.array("<f4", c * h * w).astype(np.float32).reshape(c, h, w)


def _read_sample(r: _Reader) -> LabeledSample:
    (stage_index,) = r.unpack("<i")
    p = r.unpack("<5d")
    proprio = ProprioState(np.array(p[:3]), p[3], p[4])
    (n,) = r.unpack("<I")
    instr = r.array("<f8", n).astype(np.float64)
    label = _read_label(r)
    (nh,) = r.unpack("<I")
    history = tuple(_read_label(r) for _ in range(nh))
    h, d = r.unpack("<2I")
    chunk = r.array("<f8", h * d).astype(np.float64).reshape(h, d)
    obs = _read_image(r)
    (flag,) = r.unpack("<B")
    raw = _read_image(r) if flag else None
    return LabeledSample(obs, proprio, instr, label, chunk, stage_index, history, raw)


def dataset_bytes(samples) -> bytes:
    body = [SHARD_MAGIC, struct.pack("<IQ", SHARD_VERSION, len(samples))]
    body.extend(_pack_sample(s) for s in samples)
    data = b"".join(body)
    return data + struct.pack("<Q", _checksum(data))


def write_dataset(samples, sink) -> None:
    sink.write(dataset_bytes(list(samples)))


def read_dataset(source) -> list:
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    data = bytes(data)
    if len(data) < 4 + 12 + 8:
        raise TruncatedFile("shard shorter than its fixed header and trailer")
    if data[:4] != SHARD_MAGIC:
        raise SchemaMismatch("not a dataset shard (bad magic)")
    (stored,) = struct.unpack("<Q", data[-8:])
    if _checksum(data[:-8]) != stored:
        raise ChecksumMismatch("shard checksum does not match its contents")
    r = _Reader(data[:-8])
    r.take(4)
    version, count = r.unpack("<IQ")
    if version != SHARD_VERSION:
        raise SchemaMismatch(f"unsupported shard version {version}")
    samples = [_read_sample(r) for _ in range(count)]
    if r.pos != len(r.buf):
        raise ChecksumMismatch("trailing bytes after the last sample")
    return samples


# ---------------------------------------------------------------- metrics reports

METRIC_COLUMNS = ["Instr.", "Pick", "Place", "Ave."]
_RATE_KEYS = ("instr_rate", "pick_rate", "place_rate", "avg_rate")
_FIXED = re.compile(r'"@@F2@@(-?[0-9]+\.[0-9]{2})"')


def _fixed2(x: float) -> str:
    return f"@@F2@@{float(x):.2f}"


def _row_dict(row) -> dict:
    get = row.get if isinstance(row, dict) else lambda k, d=None: getattr(row, k, d)
    out = {"config_name": get("config_name")}
    for k in _RATE_KEYS:
        out[k] = _fixed2(get(k))
    seeds = []
    for s in get("seeds", None) or []:
        sget = s.get if isinstance(s, dict) else lambda k, d=None: getattr(s, k, d)
        item = {"seed": sget("seed")}
        for k in _RATE_KEYS:
            item[k] = _fixed2(sget(k))
        seeds.append(item)
    out["seeds"] = seeds
    return out


def metrics_report_text(rows, extra: Optional[dict] = None) -> str:
    doc = {"columns": METRIC_COLUMNS, "rows": [_row_dict(r) for r in rows]}
    for k, v in (extra or {}).items():
        doc[k] = v
    text = json.dumps(doc, indent=2)
    return _FIXED.sub(r"\1", text) + "\n"


def write_metrics_report(metrics, sink, extra: Optional[dict] = None) -> None:
    """Emit a metrics table as one JSON document.

    ``metrics`` is a table with a ``rows`` attribute or a plain sequence of rows;
    rows are mappings or objects exposing the rate fields. ``extra`` keys (for
    example ``supervision_drops`` or a config echo) are appended after ``rows``.
    """
    rows = getattr(metrics, "rows", metrics)
    sink.write(metrics_report_text(rows, extra))
