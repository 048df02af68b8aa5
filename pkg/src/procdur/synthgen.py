"""Synthetic procedures with hidden phases and a known progress ground truth.

Each procedure draws a type, a log-normal duration and an ordered sequence of
hidden phases with random boundaries. All modalities see the phases. On top of
that, each modality carries a progress "clock" that is only visible during its
own stage of the procedure, so the modalities complement each other in time:

* image: a displacement along a fixed direction, visible in the first half;
* tools: two tools whose usage rises and two whose usage falls, visible in the
  middle half;
* device: the used-gas-volume counter, which only grows in the second half.

Each clock reads progress through a small per-procedure, per-modality
distortion. A single modality therefore leaves part of the timeline uncovered,
while the fused inputs cover all of it.

Each modality also carries a constant "pace" cue: an independent noisy reading
of how much longer or shorter the procedure is than typical for its type. The
device shows it as the gas supply pressure level, the tools as the usage rate of
one tool, and the image as an offset along a second fixed direction. Fusing the
three readings averages out their noise, which matters most early on, when no
clock is precise in relative terms.

Every knob that ties a channel block to progress is scaled by that block's
informativeness; at 0 the block is noise independent of progress and phase.
The ``ptype`` informativeness controls how much the mean duration differs
between procedure types (0: all types share one mean).
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from procdur.datamodel import (
    DEFAULT_D_IMG,
    N_DEVICE,
    N_TOOLS,
    N_TYPES,
    SIGNALS,
    ProcedureRecord,
)

# reference cohort: procedures per type and average length (min)
TYPE_COUNTS = {1: 39, 2: 11, 3: 4, 4: 21, 5: 5}
TYPE_MEAN_MINUTES = {1: 156.0, 2: 107.0, 3: 102.0, 4: 41.0, 5: 91.0}

INFORMATIVENESS_KEYS = ("device", "tools", "image", "ptype")

# device signal indices (registry order)
CUR_FLOW, TGT_FLOW, CUR_PRESSURE, TGT_PRESSURE, VOLUME, SUPPLY, DEVICE_ON = range(7)
LIGHTS_OFF, LIGHT_1, LIGHT_2, ENDO_LIGHT, WHITE_BALANCE, GAINS, EXPOSURE = range(7, 14)
_PHASE_LEVEL_CHANNELS = (TGT_FLOW, TGT_PRESSURE, LIGHT_1, LIGHT_2, ENDO_LIGHT)
_PHASE_BINARY_CHANNELS = (DEVICE_ON, LIGHTS_OFF)

VOLUME_TYPICAL = 6000.0  # typical total gas volume per procedure, raw units
CLOCK_SPREAD = 0.1  # log-sd of the per-procedure, per-modality clock distortion
# stretch of (distorted) progress over which each modality's clock is visible
CLOCK_WINDOWS = {"image": (0.0, 0.5), "tools": (0.25, 0.75), "device": (0.5, math.inf)}
IMAGE_CLOCK_AMPLITUDE = 6.0
IMAGE_NOISE = 0.5
PHASE_CONCENTRATION = 10.0  # how tightly a procedure's phase proportions follow its type
CLOCK_TOOLS = (8, 9, 10, 11)  # tools driven by the tools clock: two rising, two falling
PACE_TOOL = 7  # tool whose usage rate reflects the procedure's pace
PACE_NOISE = 0.25  # sd of each modality's own reading of the log pace
PACE_SCALE = 0.5  # log pace that maps to most of a pace carrier's range
IMAGE_PACE_AMPLITUDE = 3.0


def _default_mix() -> dict[int, float]:
    total = sum(TYPE_COUNTS.values())
    return {t: c / total for t, c in TYPE_COUNTS.items()}


def _default_informativeness() -> dict[str, float]:
    return {"device": 0.8, "tools": 0.8, "image": 0.8, "ptype": 1.0}


@dataclass(frozen=True)
class SynthSpec:
    n_procedures: int = 120
    type_mix: Mapping[int, float] = field(default_factory=_default_mix)
    phases_per_type: int = 6
    mean_duration: Mapping[int, float] | None = None
    overall_mean: float = 600.0
    duration_cv: float = 0.3
    modality_informativeness: Mapping[str, float] = field(default_factory=_default_informativeness)
    noise_sigma: float = 0.05
    d_img: int = DEFAULT_D_IMG
    channels: tuple[str, ...] = ("device", "tools", "image")
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_procedures < 0:
            raise ValueError("n_procedures must be >= 0")
        if not self.type_mix or any(t not in range(1, N_TYPES + 1) for t in self.type_mix):
            raise ValueError("type_mix keys must be procedure types 1..5")
        if any(p < 0 for p in self.type_mix.values()) or abs(sum(self.type_mix.values()) - 1.0) > 1e-9:
            raise ValueError("type_mix proportions must be non-negative and sum to 1")
        if self.phases_per_type < 1:
            raise ValueError("phases_per_type must be >= 1")
        if self.overall_mean < 60:
            raise ValueError("overall_mean must be >= 60 s")
        if self.mean_duration is not None:
            if set(self.mean_duration) != set(self.type_mix):
                raise ValueError("mean_duration must give a mean for every type in type_mix")
            if any(m < 60 for m in self.mean_duration.values()):
                raise ValueError("mean durations must be >= 60 s")
        if self.duration_cv < 0:
            raise ValueError("duration_cv must be >= 0")
        unknown = set(self.modality_informativeness) - set(INFORMATIVENESS_KEYS)
        if unknown:
            raise ValueError(f"unknown informativeness keys {sorted(unknown)}")
        if any(not 0.0 <= v <= 1.0 for v in self.modality_informativeness.values()):
            raise ValueError("informativeness values must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.d_img < 1:
            raise ValueError("d_img must be >= 1")
        if not set(self.channels) <= {"device", "tools", "image"}:
            raise ValueError("channels must be a subset of device, tools, image")

    def informativeness(self, key: str) -> float:
        defaults = _default_informativeness()
        return float(self.modality_informativeness.get(key, defaults[key]))

    def type_means(self) -> dict[int, float]:
        """Mean duration per type, seconds."""
        if self.mean_duration is not None:
            return {t: float(m) for t, m in self.mean_duration.items()}
        a = self.informativeness("ptype")
        ratio = {t: (TYPE_MEAN_MINUTES[t]) ** a for t in self.type_mix}
        mixed = sum(self.type_mix[t] * ratio[t] for t in self.type_mix)
        return {t: max(60.0, self.overall_mean * ratio[t] / mixed) for t in self.type_mix}

    def to_dict(self) -> dict:
        return {
            "n_procedures": self.n_procedures,
            "type_mix": {str(k): v for k, v in self.type_mix.items()},
            "phases_per_type": self.phases_per_type,
            "mean_duration": None if self.mean_duration is None else {str(k): v for k, v in self.mean_duration.items()},
            "overall_mean": self.overall_mean,
            "duration_cv": self.duration_cv,
            "modality_informativeness": dict(self.modality_informativeness),
            "noise_sigma": self.noise_sigma,
            "d_img": self.d_img,
            "channels": list(self.channels),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> SynthSpec:
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown generator settings {sorted(unknown)}")
        if "type_mix" in d:
            d["type_mix"] = {int(k): float(v) for k, v in d["type_mix"].items()}
        if d.get("mean_duration") is not None:
            d["mean_duration"] = {int(k): float(v) for k, v in d["mean_duration"].items()}
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PhaseTrace:
    """Hidden generator state kept for diagnostics."""

    record_id: str
    n: int
    phase_ids: np.ndarray  # (n,) phase index per frame, 0-based, non-decreasing
    boundaries: tuple[int, ...]  # first frame (1-based) of each phase

    def to_dict(self) -> dict:
        return {"record_id": self.record_id, "n": self.n, "boundaries": list(self.boundaries)}

    @classmethod
    def from_dict(cls, d: Mapping) -> PhaseTrace:
        n = int(d["n"])
        bounds = tuple(int(b) for b in d["boundaries"])
        return cls(d["record_id"], n, _phase_ids_from_bounds(bounds, n), bounds)


def _phase_ids_from_bounds(bounds: Sequence[int], n: int) -> np.ndarray:
    ids = np.zeros(n, dtype=np.int64)
    for k, b in enumerate(bounds):
        ids[b - 1 :] = k
    return ids


@dataclass(frozen=True)
class _World:
    """Structures shared by all procedures of one generated dataset."""

    phase_props: np.ndarray  # (types, phases) mean phase proportions
    phase_levels: np.ndarray  # (types, phases, 14) normalized device levels
    phase_on: np.ndarray  # (types, phases, 14) binary on-probabilities
    tool_rates: np.ndarray  # (types, phases, 12)
    embed: np.ndarray  # (types, phases, d_img)
    progress_dir: np.ndarray  # (d_img,)
    pace_dir: np.ndarray  # (d_img,), orthogonal to progress_dir


def _make_world(spec: SynthSpec, rng: np.random.Generator) -> _World:
    K = spec.phases_per_type
    props = rng.dirichlet(np.full(K, 4.0), size=N_TYPES)
    levels = rng.uniform(0.15, 0.9, size=(N_TYPES, K, N_DEVICE))
    on = np.where(rng.random((N_TYPES, K, N_DEVICE)) < 0.5, 0.05, 0.95)
    rates = np.full((N_TYPES, K, N_TOOLS), 0.03)
    for t in range(N_TYPES):
        for k in range(K):
            active = rng.choice(N_TOOLS, size=rng.integers(2, 5), replace=False)
            rates[t, k, active] = rng.uniform(0.6, 0.95, size=len(active))
    embed = rng.normal(0.0, 1.0, size=(N_TYPES, K, spec.d_img))
    direction = rng.normal(0.0, 1.0, size=spec.d_img)
    direction /= np.linalg.norm(direction)
    pace = rng.normal(0.0, 1.0, size=spec.d_img)
    pace -= (pace @ direction) * direction
    norm = np.linalg.norm(pace)
    pace = pace / norm if norm > 0 else pace  # d_img == 1 leaves no room for a second direction
    return _World(props, levels, on, rates, embed, direction, pace)


def _phase_bounds(props: np.ndarray, n: int) -> tuple[int, ...]:
    """First frame of each phase; phases are non-empty whenever n allows it."""
    K = len(props)
    bounds = [1]
    for k, edge in enumerate(np.cumsum(props)[:-1], start=1):
        b = int(round(edge * n)) + 1
        if n >= K:
            b = min(max(b, bounds[-1] + 1), n - (K - 1 - k))
        else:
            b = min(max(b, bounds[-1]), n)
        bounds.append(b)
    return tuple(bounds)


def _piecewise_nuisance(rng: np.random.Generator, n: int, lo: float = 0.15, hi: float = 0.9) -> np.ndarray:
    """Random piecewise-constant level with change points unrelated to the phases."""
    n_changes = rng.poisson(5)
    cuts = np.sort(rng.integers(1, max(n, 2), size=n_changes))
    levels = rng.uniform(lo, hi, size=n_changes + 1)
    return levels[np.searchsorted(cuts, np.arange(n), side="right")]


def _clock(rng: np.random.Generator, progress: np.ndarray, modality: str) -> tuple[np.ndarray, np.ndarray]:
    """Position u in [0, 1] inside the modality's window, and the in-window mask.

    Progress is read through a per-procedure multiplicative distortion first.
    """
    q = progress * np.exp(rng.normal(0.0, CLOCK_SPREAD))
    lo, hi = CLOCK_WINDOWS[modality]
    inside = (q >= lo) & (q < hi)
    width = (hi if math.isfinite(hi) else 1.0) - lo
    return np.clip((q - lo) / width, 0.0, None) * inside, inside


def _one_procedure(spec: SynthSpec, world: _World, index: int, rng: np.random.Generator):
    K = spec.phases_per_type
    types = sorted(spec.type_mix)
    ptype = int(rng.choice(types, p=[spec.type_mix[t] for t in types]))
    mean = spec.type_means()[ptype]
    s2 = np.log1p(spec.duration_cv**2)
    n = int(max(60, round(float(np.exp(rng.normal(np.log(mean) - s2 / 2, np.sqrt(s2)))))))

    props = rng.dirichlet(PHASE_CONCENTRATION * world.phase_props[ptype - 1] + 1e-3)
    bounds = _phase_bounds(props, n)
    phase = _phase_ids_from_bounds(bounds, n)
    progress = np.arange(1, n + 1) / n
    t_idx = ptype - 1
    sig = spec.noise_sigma
    log_pace = float(np.log(n / mean))  # how much longer than typical for its type

    def pace_reading() -> float:
        """One modality's noisy view of the pace, squashed to (-1, 1)."""
        return math.tanh((log_pace + rng.normal(0.0, PACE_NOISE)) / PACE_SCALE)

    device = tools = image = None
    if "device" in spec.channels:
        a = spec.informativeness("device")
        norm = np.empty((n, N_DEVICE))
        for c in range(N_DEVICE):
            norm[:, c] = _piecewise_nuisance(rng, n)
        for c in _PHASE_LEVEL_CHANNELS:
            norm[:, c] = a * world.phase_levels[t_idx, phase, c] + (1 - a) * norm[:, c]
        norm[:, SUPPLY] = a * (0.5 + 0.35 * pace_reading()) + (1 - a) * norm[:, SUPPLY]
        norm[:, CUR_FLOW] = norm[:, TGT_FLOW] * rng.uniform(0.5, 0.8)
        norm[:, CUR_PRESSURE] = 0.05 + 0.08 * norm[:, TGT_PRESSURE]
        norm += rng.normal(0.0, sig, size=norm.shape)
        raw = np.empty((n, N_DEVICE))
        for c, s in enumerate(SIGNALS):
            raw[:, c] = s.range_min + norm[:, c] * (s.range_max - s.range_min)
        # binary signals: one state per phase (informative) or per nuisance segment
        phase_locked = rng.random() < a
        for c in _PHASE_BINARY_CHANNELS:
            if phase_locked:
                state = rng.random(K) < world.phase_on[t_idx, :, c]
                raw[:, c] = state[phase].astype(float)
            else:
                raw[:, c] = (_piecewise_nuisance(rng, n, 0.0, 1.0) >= 0.5).astype(float)
        raw[:, WHITE_BALANCE] = (rng.random(n) < 0.01).astype(float)
        # used gas volume: monotone counter, flat until the device window opens
        steps = rng.exponential(1.0, size=n)
        u, _ = _clock(rng, progress, "device")
        informative = VOLUME_TYPICAL * u
        rate = 0.25 * VOLUME_TYPICAL / spec.overall_mean * np.exp(rng.normal(0.0, 0.5))
        nuisance = np.cumsum(rate * steps)
        raw[:, VOLUME] = np.minimum(a * informative + (1 - a) * nuisance, SIGNALS[VOLUME].range_max)
        device = raw

    if "tools" in spec.channels:
        a = spec.informativeness("tools")
        rates = world.tool_rates[t_idx, phase].copy()
        u, inside = _clock(rng, progress, "tools")
        rising, falling = CLOCK_TOOLS[:2], CLOCK_TOOLS[2:]
        rates[:, rising] = np.where(inside, 0.05 + 0.9 * u, 0.03)[:, None]
        rates[:, falling] = np.where(inside, 0.95 - 0.9 * u, 0.03)[:, None]
        rates[:, PACE_TOOL] = 0.5 + 0.4 * pace_reading()
        p = a * rates + (1 - a) * 0.25
        tools = (rng.random((n, N_TOOLS)) < p).astype(float)

    if "image" in spec.channels:
        a = spec.informativeness("image")
        u, inside = _clock(rng, progress, "image")
        shift = IMAGE_CLOCK_AMPLITUDE * np.where(inside, 0.5 + u, 0.0)
        signal = world.embed[t_idx, phase] + shift[:, None] * world.progress_dir
        signal += IMAGE_PACE_AMPLITUDE * pace_reading() * world.pace_dir
        image = a * signal + rng.normal(0.0, IMAGE_NOISE, size=(n, spec.d_img))

    rid = f"synth{index:05d}"
    record = ProcedureRecord(rid, ptype, device_raw=device, tools=tools, image=image, n=n)
    return record, PhaseTrace(rid, n, phase, bounds)


def generate_traced(spec: SynthSpec) -> tuple[list[ProcedureRecord], dict[str, PhaseTrace]]:
    root = np.random.SeedSequence(spec.seed)
    world_seed, proc_seed = root.spawn(2)
    world = _make_world(spec, np.random.default_rng(world_seed))
    records, traces = [], {}
    for k, child in enumerate(proc_seed.spawn(spec.n_procedures)):
        rec, trace = _one_procedure(spec, world, k, np.random.default_rng(child))
        records.append(rec)
        traces[rec.id] = trace
    return records, traces


def generate(spec: SynthSpec) -> list[ProcedureRecord]:
    return generate_traced(spec)[0]


def oracle_progress(record: ProcedureRecord, trace: PhaseTrace) -> tuple[np.ndarray, np.ndarray]:
    """True progress i/N per frame and the hidden phase id of each frame."""
    if trace.record_id != record.id or trace.n != record.duration_n:
        raise ValueError(f"trace for {trace.record_id!r} does not belong to record {record.id!r}")
    return np.arange(1, record.duration_n + 1) / record.duration_n, trace.phase_ids.copy()


def write_traces(traces: Mapping[str, PhaseTrace], path: str | Path, spec: SynthSpec | None = None) -> None:
    obj = {
        "spec": None if spec is None else spec.to_dict(),
        "traces": [traces[k].to_dict() for k in sorted(traces)],
    }
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def read_traces(path: str | Path) -> dict[str, PhaseTrace]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return {d["record_id"]: PhaseTrace.from_dict(d) for d in obj["traces"]}
