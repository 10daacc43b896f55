import hashlib
import io
import json
import struct

import numpy as np
import pytest

from avp.errors import BadRotation, ChecksumMismatch, MalformedRecord, MissingField, NonMonotonicTime, SchemaMismatch, TruncatedFile
from avp.geometry import PixelAnchor
from avp.supervision import PrimitiveLabel, Stage
from avp.trajio import (
    METRIC_COLUMNS,
    LabeledSample,
    ProprioState,
    dataset_bytes,
    read_calibration,
    read_dataset,
    read_trajectory_log,
    write_calibration,
    write_dataset,
    write_metrics_report,
    write_trajectory_log,
)

HEADER = json.dumps({"schema_version": 1}) + "\n"


def record(**kw):
    rec = {
        "episode_id": "e",
        "camera_id": "cam0",
        "t": 0.0,
        "ee": [0.0, 0.3, 0.05],
        "grip_cmd": 1.0,
        "grip_meas": 1.0,
        "obs_ref": None,
        "task": {"source_cell": 0, "target_cell": 1, "waypoint_mode": "direct", "via_cell": None},
    }
    rec.update(kw)
    return json.dumps(rec) + "\n"


def test_log_round_trip(two_stage_episode):
    _, task, traj = two_stage_episode
    buf = io.StringIO()
    write_trajectory_log([traj], buf, lambda tr, k: f"{tr.episode_id}#{k}")
    frames = {f"fixture#{k}": s.observation for k, s in enumerate(traj.steps)}
    (back,) = read_trajectory_log(buf.getvalue().encode(), frames.__getitem__)
    assert back.episode_id == "fixture" and back.task == task and len(back) == len(traj)
    for a, b in zip(traj.steps, back.steps):
        assert a.t == b.t and a.proprio == b.proprio
        assert np.array_equal(a.action, b.action)
        assert a.observation.tobytes() == b.observation.tobytes()


def test_log_groups_episodes_and_sorts_time():
    text = HEADER + record(t=0.2, grip_cmd=0.0) + record(episode_id="f", t=0.0) + record(t=0.0) + record(episode_id="f", t=0.1)
    a, b = read_trajectory_log(text.encode())
    assert (a.episode_id, b.episode_id) == ("e", "f")
    assert [s.t for s in a.steps] == [0.0, 0.2]
    assert a.actions().shape == (1, 4) and a.actions()[0, 3] == 0.0


@pytest.mark.parametrize(
    "body, err",
    [
        (record() + "{not json\n", MalformedRecord),
        (record() + record(t=0.1, ee=[0.0, 0.1]), MalformedRecord),
        (record() + record(t=0.1, grip_cmd=1.5), MalformedRecord),
        (record() + record(t=0.1, ee=[0.0, float("nan"), 0.0]), MalformedRecord),
        (record() + json.dumps({"episode_id": "e", "t": 0.1}) + "\n", MalformedRecord),
        (record() + record(t=0.0), NonMonotonicTime),
        (record(), MalformedRecord),
        (record() + record(t=0.1, camera_id="cam1"), MalformedRecord),
    ],
)
def test_log_rejects_bad_records(body, err):
    with pytest.raises(err):
        read_trajectory_log((HEADER + body).encode())


def test_malformed_record_reports_line():
    with pytest.raises(MalformedRecord) as e:
        read_trajectory_log((HEADER + record() + "[]\n").encode())
    assert e.value.line == 3


@pytest.mark.parametrize("header", ['{"kind": "x"}\n', '{"schema_version": 2}\n'])
def test_log_schema_header_required(header):
    with pytest.raises(SchemaMismatch):
        read_trajectory_log((header + record()).encode())


def test_calibration_round_trip_is_exact(sim_cfg):
    buf = io.StringIO()
    write_calibration(sim_cfg.camera, buf)
    assert read_calibration(buf.getvalue().encode()) == sim_cfg.camera


def calib_text(sim_cfg, **override):
    buf = io.StringIO()
    write_calibration(sim_cfg.camera, buf)
    lines = dict(line.split(" = ", 1) for line in buf.getvalue().splitlines())
    lines.update(override)
    return "\n".join(f"{k} = {v}" for k, v in lines.items() if v is not None)


def test_calibration_errors(sim_cfg):
    with pytest.raises(MissingField):
        read_calibration(calib_text(sim_cfg, fx=None).encode())
    with pytest.raises(MalformedRecord):
        read_calibration(calib_text(sim_cfg, fx="wide").encode())
    with pytest.raises(MalformedRecord):
        read_calibration(calib_text(sim_cfg, extrinsic="1, 0, 0").encode())
    skew = "2, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1"
    with pytest.raises(BadRotation):
        read_calibration(calib_text(sim_cfg, extrinsic=skew).encode())
    mirror = "-1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1"
    with pytest.raises(BadRotation):
        read_calibration(calib_text(sim_cfg, extrinsic=mirror).encode())


def label(stage=0, u=3, v=4):
    return PrimitiveLabel(Stage(stage), u, v, v * 32 + u, PixelAnchor(u * 2 + 0.3, v * 2 + 1.7, 0.52))


def sample(rng, raw=True, history=1):
    return LabeledSample(
        observation=rng.uniform(size=(3, 8, 8)).astype(np.float32),
        proprio=ProprioState(rng.standard_normal(3), 0.25, 0.75),
        instruction=rng.uniform(size=10),
        primitive_gt=label(1),
        action_chunk=rng.standard_normal((4, 4)),
        stage_index=2,
        history=tuple(label(0, k, k) for k in range(history)),
        raw_observation=rng.uniform(size=(3, 8, 8)).astype(np.float32) if raw else None,
    )


def test_shard_round_trip(rng):
    samples = [sample(rng), sample(rng, raw=False, history=0), sample(rng, history=3)]
    buf = io.BytesIO()
    write_dataset(samples, buf)
    back = read_dataset(io.BytesIO(buf.getvalue()))
    assert back == samples
    assert back[1].raw_observation is None and len(back[2].history) == 3
    assert dataset_bytes(back) == buf.getvalue()


def test_shard_layout(rng):
    data = dataset_bytes([sample(rng)])
    assert data[:4] == b"AVPD"
    assert struct.unpack("<IQ", data[4:16]) == (1, 1)
    digest = hashlib.blake2b(data[:-8], digest_size=8).digest()
    assert data[-8:] == digest


def test_empty_shard():
    assert read_dataset(dataset_bytes([])) == []


def reseal(body: bytes) -> bytes:
    return body + hashlib.blake2b(body, digest_size=8).digest()


def test_shard_corruption_detected(rng):
    data = dataset_bytes([sample(rng)])
    with pytest.raises(ChecksumMismatch):
        read_dataset(data[:40] + bytes([data[40] ^ 1]) + data[41:])
    with pytest.raises(TruncatedFile):
        read_dataset(data[:10])
    with pytest.raises(TruncatedFile):
        read_dataset(reseal(data[:-8][:-100]))
    with pytest.raises(SchemaMismatch):
        read_dataset(reseal(b"XXXX" + data[4:-8]))
    with pytest.raises(SchemaMismatch):
        read_dataset(reseal(data[:4] + struct.pack("<I", 9) + data[8:-8]))


def test_metrics_report_schema_and_rounding():
    rows = [{"config_name": "x", "instr_rate": 100.0, "pick_rate": 2 / 3 * 100, "place_rate": 0.0, "avg_rate": 55.5555,
             "seeds": [{"seed": 0, "instr_rate": 100, "pick_rate": 50, "place_rate": 12.345, "avg_rate": 1}]}]
    buf = io.StringIO()
    write_metrics_report(rows, buf, {"eval_mode": "seen"})
    text = buf.getvalue()
    doc = json.loads(text)
    assert doc["columns"] == ["Instr.", "Pick", "Place", "Ave."]
    assert list(doc) == ["columns", "rows", "eval_mode"]
    assert '"pick_rate": 66.67' in text and '"avg_rate": 55.56' in text and '"place_rate": 12.35' in text


def test_metric_columns_match_reported_table_layout():
    # [PAPER] ablation tables report Instr. / Pick / Place / Ave.
    assert METRIC_COLUMNS == ["Instr.", "Pick", "Place", "Ave."]
