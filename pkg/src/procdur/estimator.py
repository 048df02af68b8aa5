"""Fusion network variants, progress labels, training, streaming sessions, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from numbers import Real
from pathlib import Path

import numpy as np

from procdur.datamodel import N_DEVICE, N_TOOLS, N_TYPES, Frame, ProcedureRecord, ProcedureType, procedure_type
from procdur.neural import (
    ACTIVATIONS,
    GRU_CONVENTION,
    AdamState,
    Network,
    adam_step,
    backward_sequence,
    bce_with_logits,
    GradCheckReport,
    check_gradients,
    clip_by_global_norm,
    encode_inputs,
    forward_sequence,
    init_network,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODALITIES = ("image", "tools", "device")

VARIANTS: dict[str, frozenset[str]] = {
    "v": frozenset({"image"}),
    "t": frozenset({"tools"}),
    "d": frozenset({"device"}),
    "td": frozenset({"tools", "device"}),
    "vt": frozenset({"image", "tools"}),
    "vtd": frozenset({"image", "tools", "device"}),
}

PRESETS: dict[str, dict] = {
    "desk": {"lr": 1e-3, "epochs": 30},
    "fine": {"lr": 1e-6, "epochs": 50},
}


class ChannelMismatchError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    use_image: bool = False
    use_tools: bool = False
    use_device: bool = True
    use_ptype: bool = True
    d_img: int = 64
    enc_image: int = 64
    enc_tools: int = 16
    enc_device: int = 16
    hidden: int = 128
    lr: float = 1e-3
    epochs: int = 30
    seed: int = 0
    clip_norm: float | None = None
    epsilon_progress: float = 1e-4
    encoder_activation: str = "tanh"
    preset: str = "desk"
    raw_modalities: tuple[str, ...] = ()  # fed to the GRU as-is, without an encoder

    def __post_init__(self) -> None:
        if not (self.use_image or self.use_tools or self.use_device):
            raise ValueError("at least one of image, tools, device must be enabled")
        if not 0.0 < self.epsilon_progress <= 0.01:
            raise ValueError("epsilon_progress must lie in (0, 0.01]")
        for name in ("d_img", "enc_image", "enc_tools", "enc_device", "hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0.0:
            raise ValueError("lr must be > 0")
        if self.clip_norm is not None and not self.clip_norm > 0.0:
            raise ValueError("clip_norm must be > 0 when set")
        if self.encoder_activation not in ACTIVATIONS:
            raise ValueError(f"encoder_activation must be one of {ACTIVATIONS}")
        object.__setattr__(self, "raw_modalities", tuple(self.raw_modalities))
        if not set(self.raw_modalities) <= set(self.modalities):
            raise ValueError(f"raw_modalities {self.raw_modalities} must be enabled modalities {self.modalities}")

    @property
    def modalities(self) -> tuple[str, ...]:
        on = {"image": self.use_image, "tools": self.use_tools, "device": self.use_device}
        return tuple(m for m in MODALITIES if on[m])

    @property
    def encoded_modalities(self) -> tuple[str, ...]:
        return tuple(m for m in self.modalities if m not in self.raw_modalities)

    @property
    def raw_width(self) -> int:
        dims = {"image": self.d_img, "tools": N_TOOLS, "device": N_DEVICE}
        return sum(dims[m] for m in self.modalities if m in self.raw_modalities)

    @property
    def variant(self) -> str:
        """Network name, e.g. ``D-Net`` or ``VTD-Net``."""
        letters = {"image": "V", "tools": "T", "device": "D"}
        return "".join(letters[m] for m in self.modalities) + "-Net"

    @property
    def recurrent_input_width(self) -> int:
        widths = {"image": self.enc_image, "tools": self.enc_tools, "device": self.enc_device}
        encoded = sum(widths[m] for m in self.encoded_modalities)
        return encoded + self.raw_width + (N_TYPES if self.use_ptype else 0)

    @classmethod
    def for_variant(cls, variant: str, preset: str = "desk", **overrides) -> FusionConfig:
        key = variant.lower().removesuffix("-net")
        if key not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        mods = VARIANTS[key]
        kw = dict(
            use_image="image" in mods,
            use_tools="tools" in mods,
            use_device="device" in mods,
            preset=preset,
            **PRESETS[preset],
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> FusionConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        d = dict(d)
        if "raw_modalities" in d:
            d["raw_modalities"] = tuple(d["raw_modalities"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Model:
    config: FusionConfig
    net: Network
    adam: AdamState | None = None
    train_log: tuple[float, ...] = field(default=())


@dataclass(frozen=True)
class PredictionPoint:
    i: int
    y: float
    n_hat: float
    remaining: float


# --------------------------------------------------------------------------
# labels


def progress_label(i: int, n: int) -> Fraction:
    """Exact progress label i/n (a :class:`~fractions.Fraction`, usable as a real)."""
    if isinstance(i, bool) or isinstance(n, bool) or int(i) != i or int(n) != n:
        raise ValueError("i and n must be integers")
    if n < 1 or not 1 <= i <= n:
        raise ValueError(f"need 1 <= i <= n, got i={i}, n={n}")
    return Fraction(int(i), int(n))


def progress_labels(n: int) -> np.ndarray:
    """Float labels 1/n, 2/n, ..., 1 for training."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.arange(1, n + 1, dtype=np.float64) / n


def duration_from_progress(i: int, y: Real, eps: float = 1e-4) -> tuple[float, float]:
    """Predicted total duration i / max(y, eps) and the remaining time."""
    n_hat = i / max(y, eps)
    return float(n_hat), float(n_hat - i)


# --------------------------------------------------------------------------
# model assembly


def build_model(config: FusionConfig) -> Model:
    rng = np.random.default_rng(config.seed)
    in_dims = {"image": config.d_img, "tools": N_TOOLS, "device": N_DEVICE}
    out_dims = {"image": config.enc_image, "tools": config.enc_tools, "device": config.enc_device}
    encoders = [(m, in_dims[m], out_dims[m], config.encoder_activation) for m in config.encoded_modalities]
    extra_dim = config.raw_width + (N_TYPES if config.use_ptype else 0)
    net = init_network(rng, encoders, extra_dim, config.hidden)
    return Model(config, net)


def _check_channels(config: FusionConfig, record: ProcedureRecord) -> None:
    missing = [m for m in config.modalities if not record.channels[m]]
    if missing:
        raise ChannelMismatchError(
            f"record {record.id} lacks channel(s) {missing} required by {config.variant}"
        )
    if config.use_image and record.d_img != config.d_img:
        raise ChannelMismatchError(
            f"record {record.id} has d_img={record.d_img}, model expects {config.d_img}"
        )


def _split_inputs(config: FusionConfig, source: dict, ptype: ProcedureType, T: int):
    """Encoder blocks, plus the extra block: raw modalities then the type one-hot."""
    blocks = [source[m] for m in config.encoded_modalities]
    extra = [source[m] for m in config.modalities if m in config.raw_modalities]
    if config.use_ptype:
        extra.append(np.tile(ptype.one_hot(), (T, 1)))
    return blocks, (np.concatenate(extra, axis=1) if extra else None)


def record_inputs(config: FusionConfig, record: ProcedureRecord) -> tuple[list[np.ndarray], np.ndarray | None]:
    """Encoder input blocks (modality order) and the extra block for a whole record."""
    _check_channels(config, record)
    source = {"image": record.image, "tools": record.tools, "device": record.device}
    return _split_inputs(config, source, record.ptype, record.duration_n)


def frame_inputs(config: FusionConfig, frame: Frame, ptype: ProcedureType) -> tuple[list[np.ndarray], np.ndarray | None]:
    """Same as :func:`record_inputs` for a single frame (1-row blocks)."""
    source = {"image": frame.image_features, "tools": frame.tools, "device": frame.device}
    rows = {}
    for m in config.modalities:
        v = source[m]
        if v is None:
            raise ChannelMismatchError(f"frame t={frame.t} lacks channel {m!r} required by {config.variant}")
        rows[m] = np.asarray(v, dtype=np.float64)[None, :]
    return _split_inputs(config, rows, ptype, 1)


def _ptype(ptype: ProcedureType | int) -> ProcedureType:
    return ptype if isinstance(ptype, ProcedureType) else procedure_type(ptype)


def assemble_input(model: Model, frame: Frame, ptype: ProcedureType | int) -> np.ndarray:
    """Recurrent-cell input for one frame.

    Layout: encoder outputs (image, tools, device order), then raw modalities,
    then the type one-hot.
    """
    blocks, extra = frame_inputs(model.config, frame, _ptype(ptype))
    _, X = encode_inputs(model.net, blocks, extra)
    return X[0]


def predict_record(model: Model, record: ProcedureRecord) -> list[PredictionPoint]:
    """Offline predictions for every frame of a record (one batch forward pass)."""
    blocks, extra = record_inputs(model.config, record)
    y, _ = forward_sequence(model.net, blocks, extra)
    return _points(y, model.config.epsilon_progress)


def _points(y: np.ndarray, eps: float, start: int = 1) -> list[PredictionPoint]:
    out = []
    for k, yi in enumerate(y.tolist()):
        i = start + k
        n_hat, rem = duration_from_progress(i, yi, eps)
        out.append(PredictionPoint(i, yi, n_hat, rem))
    return out


# --------------------------------------------------------------------------
# training


def train(
    dataset: Sequence[ProcedureRecord],
    config: FusionConfig,
    *,
    on_epoch: Callable[[int, float], None] | None = None,
) -> Model:
    """Train a fresh model; one Adam step per procedure, full-sequence BPTT.

    The per-epoch mean loss is kept in ``model.train_log``.
    """
    model = build_model(config)
    if config.epochs == 0:
        return model
    if not dataset:
        raise TrainingError("cannot train on an empty dataset")
    prepared = []
    for rec in dataset:
        blocks, extra = record_inputs(config, rec)
        prepared.append((rec.id, blocks, extra, progress_labels(rec.duration_n)))

    shuffle_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    net = model.net
    params = net.params()
    state = AdamState(lr=config.lr)
    history = []
    for epoch in range(1, config.epochs + 1):
        losses = []
        for k in shuffle_rng.permutation(len(prepared)):
            rid, blocks, extra, labels = prepared[k]
            y, cache = forward_sequence(net, blocks, extra)
            loss = bce_with_logits(cache.logits, labels)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch} on procedure {rid}")
            grads = backward_sequence(net, cache, labels)
            if config.clip_norm is not None:
                grads = clip_by_global_norm(grads, config.clip_norm)
            params, state = adam_step(params, grads, state)
            net = net.with_params(params)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        log.debug("epoch %d mean loss %.6f", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return Model(config, net, state, tuple(history))


# --------------------------------------------------------------------------
# streaming


class OutOfOrderError(ValueError):
    pass


class Session:
    """Online predictor for one running procedure. Never modifies the model."""

    def __init__(self, model: Model, ptype: ProcedureType | int):
        self.model = model
        self.ptype = _ptype(ptype)
        self.h = np.zeros(model.net.hidden)
        self.i = 0

    def feed(self, frame: Frame) -> PredictionPoint:
        if frame.t != self.i + 1:
            raise OutOfOrderError(f"expected frame t={self.i + 1}, got t={frame.t}")
        blocks, extra = frame_inputs(self.model.config, frame, self.ptype)
        y, cache = forward_sequence(self.model.net, blocks, extra, h0=self.h)
        h = cache.h_last.copy()
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite recurrent state at frame {frame.t}")
        self.h = h
        self.i += 1
        (point,) = _points(y, self.model.config.epsilon_progress, start=self.i)
        return point


def open_session(model: Model, ptype: ProcedureType | int) -> Session:
    return Session(model, ptype)


def feed(session: Session, frame: Frame) -> PredictionPoint:
    return session.feed(frame)


# --------------------------------------------------------------------------
# gradient check harness


def grad_check(config: FusionConfig, seed: int, seq_len: int, tolerance: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of BPTT on a randomly initialised model and random inputs."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    model = build_model(replace(config, seed=seed))
    rng = np.random.default_rng([seed, seq_len])
    dims = {"image": config.d_img, "tools": N_TOOLS, "device": N_DEVICE}
    source = {m: rng.uniform(0.0, 1.0, size=(seq_len, dims[m])) for m in config.modalities}
    blocks, extra = _split_inputs(config, source, procedure_type(int(rng.integers(N_TYPES)) + 1), seq_len)
    # random non-zero biases so the check is not blind to bias gradients
    params = {
        k: v + (rng.normal(0.0, 0.1, size=v.shape) if k.endswith(".b") or ".b_" in k else 0.0)
        for k, v in model.net.params().items()
    }
    net = model.net.with_params(params)
    labels = progress_labels(seq_len)
    return check_gradients(net, blocks, extra, labels, tolerance=tolerance)


# --------------------------------------------------------------------------
# checkpoints


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def checkpoint_payload(model: Model) -> dict:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "gru_convention": GRU_CONVENTION,
        "variant": model.config.variant,
        "preset": model.config.preset,
        "seed": model.config.seed,
        "config": model.config.to_dict(),
        "params": {k: v.tolist() for k, v in model.net.params().items()},
        "adam_state": None,
        "train_log": list(model.train_log),
    }
    if model.adam is not None:
        a = model.adam
        payload["adam_state"] = {
            "lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "t": a.t,
            "m": {k: v.tolist() for k, v in a.m.items()},
            "v": {k: v.tolist() for k, v in a.v.items()},
        }
    return payload


def save_checkpoint(model: Model, path: str | Path) -> None:
    payload = checkpoint_payload(model)
    payload["checksum"] = hashlib.sha256(_canonical(payload).encode()).hexdigest()
    Path(path).write_text(json.dumps(payload, indent=1, allow_nan=False) + "\n", encoding="utf-8")


def _reject_constant(name: str):
    raise ValueError(f"non-finite number {name}")


def load_checkpoint(path: str | Path) -> Model:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from None
    try:
        payload = json.loads(text, parse_constant=_reject_constant)
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupted or truncated checkpoint ({exc})") from None
    if not isinstance(payload, dict):
        raise CheckpointError(f"{path}: checkpoint must be a JSON object")
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format_version {version!r} (expected {CHECKPOINT_VERSION})")
    checksum = payload.pop("checksum", None)
    if checksum != hashlib.sha256(_canonical(payload).encode()).hexdigest():
        raise CheckpointError(f"{path}: checksum mismatch (file modified or corrupted)")
    if payload.get("gru_convention") != GRU_CONVENTION:
        raise CheckpointError(f"{path}: unsupported GRU convention {payload.get('gru_convention')!r}")
    try:
        config = FusionConfig.from_dict(payload["config"])
        template = build_model(config).net
        params = {k: np.array(v, dtype=np.float64) for k, v in payload["params"].items()}
        net = template.with_params(params)
        adam = None
        if payload.get("adam_state") is not None:
            a = payload["adam_state"]
            adam = AdamState(
                lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"],
                m={k: np.array(v, dtype=np.float64) for k, v in a["m"].items()},
                v={k: np.array(v, dtype=np.float64) for k, v in a["v"].items()},
            )
            own = net.params()
            for acc in (adam.m, adam.v):
                for k, v in acc.items():
                    if k not in own or v.shape != own[k].shape:
                        raise ValueError(f"optimizer state {k} does not match the parameters")
        train_log = tuple(float(x) for x in payload.get("train_log", []))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid checkpoint contents ({exc})") from None
    return Model(config, net, adam, train_log)
