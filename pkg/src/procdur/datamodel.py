"""Procedure records, device signal registry, 1 Hz resampling and the on-disk format.

A dataset is a directory of ``*.jsonl`` files, one procedure per file. The
first line is a header object, every following line is one frame::

    {"format_version": 1, "id": "p001", "ptype": 4, "n": 2,
     "channels": {"device": true, "tools": true, "image": false, "d_img": 0}}
    {"t": 1, "device": [...14 raw values...], "tools": [...12 values...]}
    {"t": 2, "device": [...], "tools": [...]}

Device values are stored in raw signal units and normalized on access.
"""

from __future__ import annotations

import json
import math
import re
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
N_DEVICE = 14
N_TOOLS = 12
N_TYPES = 5
DEFAULT_D_IMG = 64

_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")


@dataclass(frozen=True)
class SignalSpec:
    name: str
    kind: str  # "continuous" | "binary"
    range_min: float
    range_max: float
    source_device: str

    def __post_init__(self) -> None:
        if self.kind not in ("continuous", "binary"):
            raise ValueError(f"unknown signal kind {self.kind!r}")
        if self.kind == "binary" and (self.range_min, self.range_max) != (0.0, 1.0):
            raise ValueError(f"binary signal {self.name} must have range 0..1")
        if not self.range_min < self.range_max:
            raise ValueError(f"signal {self.name}: range_min must be < range_max")

    @property
    def fill_value(self) -> float:
        """Value reported before the signal's first event (device idle)."""
        return 0.0 if self.kind == "binary" else self.range_min


SIGNALS: tuple[SignalSpec, ...] = (
    SignalSpec("insufflator.current_gas_flow", "continuous", 0.0, 215.0, "insufflator"),
    SignalSpec("insufflator.target_gas_flow", "continuous", 10.0, 300.0, "insufflator"),
    SignalSpec("insufflator.current_gas_pressure", "continuous", 0.0, 255.0, "insufflator"),
    SignalSpec("insufflator.target_gas_pressure", "continuous", 9.0, 23.0, "insufflator"),
    SignalSpec("insufflator.used_gas_volume", "continuous", 0.0, 9501.0, "insufflator"),
    SignalSpec("insufflator.gas_supply_pressure", "continuous", 0.0, 760.0, "insufflator"),
    SignalSpec("insufflator.device_on", "binary", 0.0, 1.0, "insufflator"),
    SignalSpec("or_lights.all_off", "binary", 0.0, 1.0, "or_lights"),
    SignalSpec("or_lights.intensity_1", "continuous", 0.0, 100.0, "or_lights"),
    SignalSpec("or_lights.intensity_2", "continuous", 0.0, 100.0, "or_lights"),
    SignalSpec("endoscopic_light.intensity", "continuous", 0.0, 100.0, "endoscopic_light"),
    SignalSpec("camera.white_balance", "binary", 0.0, 1.0, "camera"),
    SignalSpec("camera.gains", "continuous", 0.0, 3298.0, "camera"),
    SignalSpec("camera.exposure_index", "continuous", 0.0, 834.0, "camera"),
)

SIGNAL_INDEX: dict[str, int] = {s.name: k for k, s in enumerate(SIGNALS)}


@dataclass(frozen=True)
class ProcedureType:
    id: int
    label: str

    def one_hot(self) -> np.ndarray:
        v = np.zeros(N_TYPES)
        v[self.id - 1] = 1.0
        return v


PROCEDURE_TYPES: tuple[ProcedureType, ...] = (
    ProcedureType(1, "Colorectal"),
    ProcedureType(2, "Upper Gastrointestinal and Bariatric"),
    ProcedureType(3, "Hepato-Pancreatico-Biliary"),
    ProcedureType(4, "General Laparoscopic"),
    ProcedureType(5, "Singular case"),
)


def procedure_type(type_id: int) -> ProcedureType:
    if isinstance(type_id, bool) or not isinstance(type_id, (int, np.integer)):
        raise ValueError(f"procedure type must be an integer, got {type_id!r}")
    if not 1 <= type_id <= N_TYPES:
        raise ValueError(f"procedure type must be in 1..{N_TYPES}, got {type_id}")
    return PROCEDURE_TYPES[int(type_id) - 1]


@dataclass(frozen=True)
class RawEvent:
    signal: str
    timestamp: float
    value: float


@dataclass(frozen=True, eq=False)
class Frame:
    """One second of a procedure; ``device`` is already normalized."""

    t: int
    device: np.ndarray | None = None
    tools: np.ndarray | None = None
    image_features: np.ndarray | None = None


class DatasetError(ValueError):
    """Malformed dataset file; carries the file, line number and reason."""

    def __init__(self, path: str | Path, line: int, reason: str):
        self.path = str(path)
        self.line = line
        self.reason = reason
        super().__init__(f"{self.path}:{line}: {reason}")


def _frozen(a: np.ndarray | None, cols: int, name: str) -> np.ndarray | None:
    if a is None:
        return None
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != cols:
        raise ValueError(f"{name} must have shape (n, {cols}), got {a.shape}")
    a.flags.writeable = False
    return a


def _arr_eq(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is b
    return a.shape == b.shape and bool(np.array_equal(a, b))


class ProcedureRecord:
    """A single procedure: metadata plus per-second channel matrices.

    Channel matrices have one row per frame (row ``i - 1`` is frame ``i``).
    Channel presence is per record; absent channels are ``None``.
    """

    def __init__(
        self,
        id: str,
        ptype: ProcedureType | int,
        *,
        device_raw: np.ndarray | None = None,
        tools: np.ndarray | None = None,
        image: np.ndarray | None = None,
        n: int | None = None,
    ):
        if not isinstance(id, str) or not _ID_RE.match(id):
            raise ValueError(f"invalid record id {id!r}")
        self.id = id
        self.ptype = ptype if isinstance(ptype, ProcedureType) else procedure_type(ptype)
        self.device_raw = _frozen(device_raw, N_DEVICE, "device_raw")
        self.tools = _frozen(tools, N_TOOLS, "tools")
        self.image = None
        self.d_img = 0
        if image is not None:
            image = np.asarray(image, dtype=np.float64)
            if image.ndim != 2 or image.shape[1] < 1:
                raise ValueError(f"image must have shape (n, d_img), got {image.shape}")
            self.image = _frozen(image, image.shape[1], "image")
            self.d_img = image.shape[1]

        lengths = {len(a) for a in (self.device_raw, self.tools, self.image) if a is not None}
        if n is not None:
            lengths.add(int(n))
        if len(lengths) != 1:
            raise ValueError(f"record {id}: inconsistent or unknown frame count {sorted(lengths)}")
        self._n = lengths.pop()
        if self._n < 1:
            raise ValueError(f"record {id}: duration must be >= 1 frame")
        if self.device_raw is not None and not np.all(np.isfinite(self.device_raw)):
            raise ValueError(f"record {id}: non-finite device value")
        if self.tools is not None and not (np.all(self.tools >= 0.0) and np.all(self.tools <= 1.0)):
            raise ValueError(f"record {id}: tool presence outside [0, 1]")
        if self.image is not None and not np.all(np.isfinite(self.image)):
            raise ValueError(f"record {id}: non-finite image feature")
        self._device = None
        self._frozen = True

    def __setattr__(self, name, value):
        if getattr(self, "_frozen", False) and name != "_device":
            raise AttributeError(f"ProcedureRecord is immutable (cannot set {name!r})")
        object.__setattr__(self, name, value)

    @property
    def duration_n(self) -> int:
        return self._n

    def __len__(self) -> int:
        return self._n

    @property
    def device(self) -> np.ndarray | None:
        """Normalized device matrix (n x 14), values in [0, 1]."""
        if self.device_raw is None:
            return None
        if self._device is None:
            d = normalize_device(self.device_raw)
            d.flags.writeable = False
            self._device = d
        return self._device

    @property
    def channels(self) -> dict[str, bool]:
        return {
            "device": self.device_raw is not None,
            "tools": self.tools is not None,
            "image": self.image is not None,
        }

    def frame(self, i: int) -> Frame:
        if not 1 <= i <= self._n:
            raise IndexError(f"frame {i} out of range 1..{self._n}")
        dev = self.device
        return Frame(
            t=i,
            device=None if dev is None else dev[i - 1],
            tools=None if self.tools is None else self.tools[i - 1],
            image_features=None if self.image is None else self.image[i - 1],
        )

    @property
    def frames(self) -> list[Frame]:
        return [self.frame(i) for i in range(1, self._n + 1)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProcedureRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.ptype == other.ptype
            and self._n == other._n
            and self.d_img == other.d_img
            and _arr_eq(self.device_raw, other.device_raw)
            and _arr_eq(self.tools, other.tools)
            and _arr_eq(self.image, other.image)
        )

    def __repr__(self) -> str:
        present = [k for k, v in self.channels.items() if v]
        return f"ProcedureRecord(id={self.id!r}, ptype={self.ptype.id}, n={self._n}, channels={present})"


def resample_to_1hz(
    events: Iterable[RawEvent],
    horizon: int,
    registry: Sequence[SignalSpec] = SIGNALS,
) -> dict[str, np.ndarray]:
    """Resample irregular device events to one value per second.

    For second ``t`` (1-based) each signal reports its latest value with
    timestamp ``<= t``. Faster signals therefore keep only the last value in
    each second; slower ones hold their previous value. Signals without any
    event yet report their fill value.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    index = {s.name: k for k, s in enumerate(registry)}
    per_signal: dict[str, list[RawEvent]] = {s.name: [] for s in registry}
    for ev in events:
        if ev.signal not in index:
            raise ValueError(f"unknown signal identifier {ev.signal!r}")
        if not (math.isfinite(ev.timestamp) and math.isfinite(ev.value)):
            raise ValueError(f"non-finite event for signal {ev.signal!r}")
        bucket = per_signal[ev.signal]
        if bucket and ev.timestamp < bucket[-1].timestamp:
            raise ValueError(f"timestamps of signal {ev.signal!r} are not non-decreasing")
        bucket.append(ev)

    out: dict[str, np.ndarray] = {}
    seconds = np.arange(1, horizon + 1, dtype=np.float64)
    for spec in registry:
        evs = per_signal[spec.name]
        series = np.full(horizon, spec.fill_value)
        if evs:
            ts = np.array([e.timestamp for e in evs])
            vals = np.array([e.value for e in evs])
            # index of the last event with timestamp <= t
            last = np.searchsorted(ts, seconds, side="right") - 1
            has = last >= 0
            series[has] = vals[last[has]]
        out[spec.name] = series
    return out


def device_matrix(resampled: Mapping[str, np.ndarray], registry: Sequence[SignalSpec] = SIGNALS) -> np.ndarray:
    """Stack resampled series into an (n x 14) raw device matrix in registry order."""
    return np.column_stack([resampled[s.name] for s in registry])


def normalize_device(raw: np.ndarray, registry: Sequence[SignalSpec] = SIGNALS) -> np.ndarray:
    """Scale raw device values to [0, 1] using the registry value ranges.

    Works on a single 14-vector or an (n x 14) matrix. Continuous values
    outside the nominal range are clamped; binary signals are thresholded
    at 0.5 so they stay exactly 0 or 1.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != len(registry):
        raise ValueError(f"expected {len(registry)} device values, got {raw.shape[-1]}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite device value")
    lo = np.array([s.range_min for s in registry])
    hi = np.array([s.range_max for s in registry])
    binary = np.array([s.kind == "binary" for s in registry])
    out = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
    out = np.where(binary, (raw >= 0.5).astype(np.float64), out)
    return out


# --------------------------------------------------------------------------
# file format


def _header(rec: ProcedureRecord) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "id": rec.id,
        "ptype": rec.ptype.id,
        "n": rec.duration_n,
        "channels": {
            "device": rec.device_raw is not None,
            "tools": rec.tools is not None,
            "image": rec.image is not None,
            "d_img": rec.d_img,
        },
    }


def write_record(rec: ProcedureRecord, path: str | Path) -> None:
    lines = [json.dumps(_header(rec), allow_nan=False)]
    dev = None if rec.device_raw is None else rec.device_raw.tolist()
    tools = None if rec.tools is None else rec.tools.tolist()
    img = None if rec.image is None else rec.image.tolist()
    for i in range(rec.duration_n):
        frame: dict = {"t": i + 1}
        if dev is not None:
            frame["device"] = dev[i]
        if tools is not None:
            frame["tools"] = tools[i]
        if img is not None:
            frame["img"] = img[i]
        lines.append(json.dumps(frame, allow_nan=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def save_dataset(records: Iterable[ProcedureRecord], path: str | Path) -> None:
    """Write records as one ``<id>.jsonl`` file each into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    seen: set[str] = set()
    for rec in records:
        if rec.id in seen:
            raise ValueError(f"duplicate record id {rec.id!r}")
        seen.add(rec.id)
        write_record(rec, root / f"{rec.id}.jsonl")


def _reject_constant(name: str):
    raise ValueError(f"non-finite number {name}")


def _parse_json(text: str, path: Path, lineno: int) -> dict:
    try:
        obj = json.loads(text, parse_constant=_reject_constant)
    except ValueError as exc:
        raise DatasetError(path, lineno, f"invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise DatasetError(path, lineno, "expected a JSON object")
    return obj


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _vector(obj: dict, key: str, dim: int, path: Path, lineno: int) -> list[float]:
    vals = obj[key]
    if not isinstance(vals, list):
        raise DatasetError(path, lineno, f"{key} must be a list")
    if len(vals) != dim:
        raise DatasetError(path, lineno, f"{key} has {len(vals)} values, expected {dim}")
    for v in vals:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise DatasetError(path, lineno, f"{key} contains a non-numeric value {v!r}")
    return [float(v) for v in vals]


def _parse_header(obj: dict, path: Path) -> tuple[dict, dict]:
    expected = {"format_version", "id", "ptype", "n", "channels"}
    if set(obj) != expected:
        raise DatasetError(path, 1, f"header keys {sorted(obj)} != {sorted(expected)}")
    if obj["format_version"] != FORMAT_VERSION or not _is_int(obj["format_version"]):
        raise DatasetError(path, 1, f"unsupported format_version {obj['format_version']!r}")
    if not isinstance(obj["id"], str) or not _ID_RE.match(obj["id"]):
        raise DatasetError(path, 1, f"invalid id {obj['id']!r}")
    if not _is_int(obj["ptype"]) or not 1 <= obj["ptype"] <= N_TYPES:
        raise DatasetError(path, 1, f"ptype must be an integer in 1..{N_TYPES}")
    if not _is_int(obj["n"]) or obj["n"] < 1:
        raise DatasetError(path, 1, "n must be a positive integer")
    ch = obj["channels"]
    if not isinstance(ch, dict) or set(ch) != {"device", "tools", "image", "d_img"}:
        raise DatasetError(path, 1, "channels must have keys device, tools, image, d_img")
    for k in ("device", "tools", "image"):
        if not isinstance(ch[k], bool):
            raise DatasetError(path, 1, f"channels.{k} must be a boolean")
    if not _is_int(ch["d_img"]) or ch["d_img"] < 0:
        raise DatasetError(path, 1, "channels.d_img must be a non-negative integer")
    if ch["image"] and ch["d_img"] < 1:
        raise DatasetError(path, 1, "channels.d_img must be >= 1 when image is present")
    return obj, ch


def _parse_frame(obj: dict, ch: dict, t: int, path: Path, lineno: int):
    """Validate one frame object; returns (device, tools, img) rows, None for absent channels."""
    keys = {"t"} | {k for k, c in (("device", "device"), ("tools", "tools"), ("img", "image")) if ch[c]}
    if set(obj) != keys:
        raise DatasetError(path, lineno, f"frame keys {sorted(obj)} != {sorted(keys)}")
    if not _is_int(obj["t"]) or obj["t"] != t:
        raise DatasetError(path, lineno, f"non-consecutive frame: expected t={t}, got {obj['t']!r}")
    dev = _vector(obj, "device", N_DEVICE, path, lineno) if ch["device"] else None
    tools = None
    if ch["tools"]:
        tools = _vector(obj, "tools", N_TOOLS, path, lineno)
        if any(not 0.0 <= v <= 1.0 for v in tools):
            raise DatasetError(path, lineno, "tools values must lie in [0, 1]")
    img = _vector(obj, "img", ch["d_img"], path, lineno) if ch["image"] else None
    return dev, tools, img


def open_stream(lines: Iterable[str], source: str | Path = "<stdin>") -> tuple[dict, Iterator[Frame]]:
    """Incremental reader for one procedure in the dataset file format.

    The header is parsed immediately; frames are parsed, validated and
    normalized one line at a time as the returned iterator is consumed, so a
    live source can be predicted on while it is still being written.
    """
    path = Path(source)
    it = iter(lines)

    def clean(line: str, lineno: int) -> str:
        line = line[:-1] if line.endswith("\n") else line
        if "\r" in line:
            raise DatasetError(path, lineno, "CR line endings are not allowed")
        return line

    first = next(it, None)
    if first is None or not clean(first, 1):
        raise DatasetError(path, 1, "empty input")
    header, ch = _parse_header(_parse_json(clean(first, 1), path, 1), path)
    n = header["n"]

    def frames() -> Iterator[Frame]:
        t = 0
        for t, line in enumerate(it, start=1):
            lineno = t + 1
            if t > n:
                raise DatasetError(path, lineno, f"more frames than the declared n={n}")
            d, tl, v = _parse_frame(_parse_json(clean(line, lineno), path, lineno), ch, t, path, lineno)
            yield Frame(
                t,
                None if d is None else normalize_device(np.array(d)),
                None if tl is None else np.array(tl),
                None if v is None else np.array(v),
            )
        if t != n:
            raise DatasetError(path, t + 2, f"header declares n={n} but input ended after {t} frames")

    return header, frames()


def load_record(path: str | Path) -> ProcedureRecord:
    """Parse one procedure file. Any defect raises :class:`DatasetError`."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8", newline="") as fh:  # keep CRs visible
            text = fh.read()
    except UnicodeDecodeError:
        raise DatasetError(path, 0, "file is not valid UTF-8") from None
    except OSError as exc:
        raise DatasetError(path, 0, f"cannot read file ({exc.strerror})") from None
    if "\r" in text:
        raise DatasetError(path, 0, "CR line endings are not allowed")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetError(path, 1, "empty file")

    header, ch = _parse_header(_parse_json(lines[0], path, 1), path)
    n = header["n"]
    if len(lines) - 1 != n:
        raise DatasetError(path, len(lines), f"header declares n={n} but file has {len(lines) - 1} frame lines")

    dev, tools, img = [], [], []
    for i, line in enumerate(lines[1:], start=1):
        d, t, v = _parse_frame(_parse_json(line, path, i + 1), ch, i, path, i + 1)
        dev.append(d)
        tools.append(t)
        img.append(v)

    try:
        return ProcedureRecord(
            header["id"],
            header["ptype"],
            device_raw=np.array(dev) if ch["device"] else None,
            tools=np.array(tools) if ch["tools"] else None,
            image=np.array(img) if ch["image"] else None,
            n=n,
        )
    except ValueError as exc:
        raise DatasetError(path, 0, str(exc)) from None


def load_dataset(path: str | Path) -> list[ProcedureRecord]:
    """Load a dataset directory (files sorted by name) or a single record file."""
    path = Path(path)
    if path.is_file():
        return [load_record(path)]
    if not path.is_dir():
        raise DatasetError(path, 0, "no such dataset file or directory")
    records = [load_record(p) for p in sorted(path.glob("*.jsonl"))]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DatasetError(path, 0, "duplicate record ids in dataset")
    return records
