import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from procdur.datamodel import (
    PROCEDURE_TYPES,
    SIGNAL_INDEX,
    SIGNALS,
    DatasetError,
    ProcedureRecord,
    RawEvent,
    SignalSpec,
    device_matrix,
    load_dataset,
    load_record,
    normalize_device,
    procedure_type,
    resample_to_1hz,
    save_dataset,
)


def test_registry_matches_device_table():
    assert len(SIGNALS) == 14
    per_device = {}
    for s in SIGNALS:
        per_device[s.source_device] = per_device.get(s.source_device, 0) + 1
    assert per_device == {"insufflator": 7, "or_lights": 3, "endoscopic_light": 1, "camera": 3}
    ranges = {s.name: (s.range_min, s.range_max) for s in SIGNALS}
    assert ranges["insufflator.current_gas_flow"] == (0, 215)
    assert ranges["insufflator.target_gas_flow"] == (10, 300)
    assert ranges["insufflator.current_gas_pressure"] == (0, 255)
    assert ranges["insufflator.target_gas_pressure"] == (9, 23)
    assert ranges["insufflator.used_gas_volume"] == (0, 9501)
    assert ranges["insufflator.gas_supply_pressure"] == (0, 760)
    assert ranges["camera.gains"] == (0, 3298)
    assert ranges["camera.exposure_index"] == (0, 834)
    binary = [s.name for s in SIGNALS if s.kind == "binary"]
    assert binary == ["insufflator.device_on", "or_lights.all_off", "camera.white_balance"]
    for s in SIGNALS:
        assert s.range_min < s.range_max


def test_signal_spec_validation():
    with pytest.raises(ValueError):
        SignalSpec("x", "binary", 0, 2, "d")
    with pytest.raises(ValueError):
        SignalSpec("x", "continuous", 5, 5, "d")


def test_procedure_types():
    assert [(p.id, p.label) for p in PROCEDURE_TYPES] == [
        (1, "Colorectal"),
        (2, "Upper Gastrointestinal and Bariatric"),
        (3, "Hepato-Pancreatico-Biliary"),
        (4, "General Laparoscopic"),
        (5, "Singular case"),
    ]
    for p in PROCEDURE_TYPES:
        v = p.one_hot()
        assert v.shape == (5,) and v.sum() == 1.0 and v[p.id - 1] == 1.0
    for bad in (0, 6, True, 2.5):
        with pytest.raises(ValueError):
            procedure_type(bad)


# -- resampling -------------------------------------------------------------

FLOW = "insufflator.current_gas_flow"


def test_resample_keeps_latest_value_within_second():
    out = resample_to_1hz([RawEvent(FLOW, 0.5, 11.0), RawEvent(FLOW, 1.0, 22.0)], horizon=1)
    assert out[FLOW][0] == 22.0


def test_resample_holds_last_value():
    out = resample_to_1hz([RawEvent(FLOW, 3.0, 7.5)], horizon=10)
    assert out[FLOW][9] == 7.5
    assert out[FLOW][2] == 7.5
    assert out[FLOW][1] == SIGNALS[SIGNAL_INDEX[FLOW]].range_min


def test_resample_fill_values():
    out = resample_to_1hz([], horizon=3)
    for s in SIGNALS:
        expected = 0.0 if s.kind == "binary" else s.range_min
        assert np.all(out[s.name] == expected)
    assert out["insufflator.target_gas_pressure"][0] == 9.0


def test_resample_rejects_unknown_signal():
    with pytest.raises(ValueError, match="bogus.signal"):
        resample_to_1hz([RawEvent("bogus.signal", 1.0, 0.0)], horizon=2)


def test_resample_rejects_unsorted_and_bad_horizon():
    with pytest.raises(ValueError):
        resample_to_1hz([RawEvent(FLOW, 2.0, 1.0), RawEvent(FLOW, 1.0, 1.0)], horizon=3)
    with pytest.raises(ValueError):
        resample_to_1hz([], horizon=0)


def _resample_oracle(events, horizon, spec):
    out = []
    for t in range(1, horizon + 1):
        value = spec.fill_value
        for e in events:  # sorted; last qualifying event wins
            if e.timestamp <= t:
                value = e.value
        out.append(value)
    return out


@settings(max_examples=60, deadline=None)
@given(
    times=st.lists(st.floats(0.0, 30.0, allow_nan=False), max_size=25),
    horizon=st.integers(1, 35),
    data=st.data(),
)
def test_resample_matches_scan_oracle(times, horizon, data):
    times = sorted(times)
    values = data.draw(st.lists(st.floats(-1e3, 1e3), min_size=len(times), max_size=len(times)))
    events = [RawEvent(FLOW, t, v) for t, v in zip(times, values)]
    out = resample_to_1hz(events, horizon)
    assert all(len(v) == horizon for v in out.values())
    assert out[FLOW].tolist() == _resample_oracle(events, horizon, SIGNALS[SIGNAL_INDEX[FLOW]])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 20), st.sampled_from([0.0, 1.0])), max_size=20), st.integers(1, 25))
def test_binary_signals_stay_binary(evs, horizon):
    evs = sorted(evs)
    events = [RawEvent("insufflator.device_on", t, v) for t, v in evs]
    raw = device_matrix(resample_to_1hz(events, horizon))
    norm = normalize_device(raw)
    for k, s in enumerate(SIGNALS):
        if s.kind == "binary":
            assert set(np.unique(norm[:, k])) <= {0.0, 1.0}


# -- normalization ----------------------------------------------------------


def test_normalize_examples():
    raw = np.array([s.range_min for s in SIGNALS])
    raw[SIGNAL_INDEX["insufflator.target_gas_pressure"]] = 16.0
    raw[SIGNAL_INDEX["insufflator.used_gas_volume"]] = 0.0
    raw[SIGNAL_INDEX["insufflator.current_gas_flow"]] = 250.0
    out = normalize_device(raw)
    assert out[SIGNAL_INDEX["insufflator.target_gas_pressure"]] == 0.5
    assert out[SIGNAL_INDEX["insufflator.used_gas_volume"]] == 0.0
    # 250 / 215 > 1, clamped
    assert out[SIGNAL_INDEX["insufflator.current_gas_flow"]] == 1.0
    assert np.all((out >= 0) & (out <= 1))


def test_normalize_rejects_non_finite():
    raw = np.zeros(14)
    raw[0] = math.nan
    with pytest.raises(ValueError):
        normalize_device(raw)
    with pytest.raises(ValueError):
        normalize_device(np.zeros(13))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=14, max_size=14))
def test_normalize_idempotent_on_unit_ranges(vals):
    unit = tuple(SignalSpec(f"s{k}", "continuous", 0.0, 1.0, "d") for k in range(14))
    once = normalize_device(np.array(vals), unit)
    assert np.array_equal(normalize_device(once, unit), once)


# -- file format ------------------------------------------------------------


def _write(path, header, frames):
    lines = [json.dumps(header)] + [json.dumps(f) for f in frames]
    path.write_text("\n".join(lines) + "\n")


def _header(n=2, **ch):
    channels = {"device": True, "tools": False, "image": False, "d_img": 0}
    channels.update(ch)
    return {"format_version": 1, "id": "p1", "ptype": 2, "n": n, "channels": channels}


def test_load_well_formed(tmp_path):
    f = tmp_path / "p1.jsonl"
    _write(f, _header(), [{"t": 1, "device": [0.0] * 14}, {"t": 2, "device": [1.0] * 14}])
    (rec,) = load_dataset(tmp_path)
    assert rec.duration_n == 2 and rec.ptype.id == 2
    assert rec.frame(2).t == 2
    assert np.all((rec.device >= 0) & (rec.device <= 1))


def test_load_rejects_wrong_dimension(tmp_path):
    f = tmp_path / "p1.jsonl"
    _write(f, _header(), [{"t": 1, "device": [0.0] * 14}, {"t": 2, "device": [0.0] * 13}])
    with pytest.raises(DatasetError) as exc:
        load_record(f)
    assert exc.value.line == 3
    assert "13" in exc.value.reason
    assert str(f) in str(exc.value)


def test_load_rejects_gap(tmp_path):
    f = tmp_path / "p1.jsonl"
    _write(f, _header(), [{"t": 1, "device": [0.0] * 14}, {"t": 3, "device": [0.0] * 14}])
    with pytest.raises(DatasetError, match="non-consecutive") as exc:
        load_record(f)
    assert exc.value.line == 3


def test_roundtrip_single_frame(tmp_path):
    rec = ProcedureRecord(
        "one", 5,
        device_raw=np.array([[0.1 * k for k in range(14)]]),
        tools=np.full((1, 12), 0.3),
        image=np.array([[1e-300, -2.5, 3.141592653589793]]),
    )
    save_dataset([rec], tmp_path / "ds")
    (back,) = load_dataset(tmp_path / "ds")
    assert back == rec
    assert np.array_equal(back.device, rec.device)


def test_roundtrip_empty(tmp_path):
    save_dataset([], tmp_path / "empty")
    assert (tmp_path / "empty").is_dir()
    assert load_dataset(tmp_path / "empty") == []


def test_roundtrip_synthetic(tmp_path, synth120):
    records, _ = synth120
    save_dataset(records, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert len(back) == 120
    by_id = {r.id: r for r in back}
    for r in records:
        b = by_id[r.id]
        assert b == r
        assert b.channels == r.channels and b.d_img == r.d_img


def test_record_invariants():
    with pytest.raises(ValueError):
        ProcedureRecord("x", 1, device_raw=np.zeros((3, 14)), tools=np.zeros((4, 12)))
    with pytest.raises(ValueError):
        ProcedureRecord("x", 1, tools=np.full((2, 12), 1.5))
    with pytest.raises(ValueError):
        ProcedureRecord("bad id", 1, n=3)
    rec = ProcedureRecord("meta", 3, n=42)
    assert rec.duration_n == 42 and rec.channels == {"device": False, "tools": False, "image": False}
    with pytest.raises(AttributeError):
        rec.id = "other"
    r2 = ProcedureRecord("ro", 1, device_raw=np.zeros((2, 14)))
    with pytest.raises(ValueError):
        r2.device_raw[0, 0] = 1.0
