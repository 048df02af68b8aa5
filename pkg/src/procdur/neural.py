"""Small from-scratch recurrent regressor: dense encoders, a GRU, a sigmoid head.

The per-frame arithmetic lives in a handful of numba kernels written as plain
loops. Both the batch forward pass and single-frame streaming go through the
same kernels, so they produce bitwise identical numbers.

GRU convention (reset gate inside the candidate)::

    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    c  = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * c
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

GRU_CONVENTION = "reset-inside-candidate"

ACTIVATIONS = ("identity", "sigmoid", "tanh", "relu")
_ACT_CODE = {name: k for k, name in enumerate(ACTIVATIONS)}


class NonFiniteError(FloatingPointError):
    def __init__(self, what: str, step: int | None = None):
        self.step = step
        where = "" if step is None else f" at time step {step}"
        super().__init__(f"non-finite {what}{where}")


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _sigmoid(a):
    if a >= 0.0:
        return 1.0 / (1.0 + math.exp(-a))
    e = math.exp(a)
    return e / (1.0 + e)


@njit(cache=True)
def _apply(a, code):
    if code == 1:
        return _sigmoid(a)
    if code == 2:
        return math.tanh(a)
    if code == 3:
        return a if a > 0.0 else 0.0
    return a


@njit(cache=True)
def _dense_rows(W, b, X, code):
    T = X.shape[0]
    n_out, n_in = W.shape
    Y = np.empty((T, n_out))
    for t in range(T):
        for j in range(n_out):
            s = b[j]
            for k in range(n_in):
                s += W[j, k] * X[t, k]
            Y[t, j] = _apply(s, code)
    return Y


@njit(cache=True)
def _gru_forward(Wz, Wr, Wh, Uz, Ur, Uh, bz, br, bh, wo, bo, X, h0):
    T, D = X.shape
    H = h0.shape[0]
    Hs = np.empty((T + 1, H))
    Hs[0] = h0
    Z = np.empty((T, H))
    R = np.empty((T, H))
    C = np.empty((T, H))
    A = np.empty(T)
    rh = np.empty(H)
    for t in range(T):
        for j in range(H):
            az = bz[j]
            ar = br[j]
            for k in range(D):
                az += Wz[j, k] * X[t, k]
                ar += Wr[j, k] * X[t, k]
            for k in range(H):
                az += Uz[j, k] * Hs[t, k]
                ar += Ur[j, k] * Hs[t, k]
            Z[t, j] = _sigmoid(az)
            R[t, j] = _sigmoid(ar)
        for k in range(H):
            rh[k] = R[t, k] * Hs[t, k]
        for j in range(H):
            ah = bh[j]
            for k in range(D):
                ah += Wh[j, k] * X[t, k]
            for k in range(H):
                ah += Uh[j, k] * rh[k]
            c = math.tanh(ah)
            C[t, j] = c
            Hs[t + 1, j] = (1.0 - Z[t, j]) * Hs[t, j] + Z[t, j] * c
        ao = bo
        for k in range(H):
            ao += wo[k] * Hs[t + 1, k]
        A[t] = ao
    return Hs, Z, R, C, A


@njit(cache=True)
def _gru_backward(Wz, Wr, Wh, Uz, Ur, Uh, wo, X, Hs, Z, R, C, dA):
    T, D = X.shape
    H = Hs.shape[1]
    gWz = np.zeros((H, D))
    gWr = np.zeros((H, D))
    gWh = np.zeros((H, D))
    gUz = np.zeros((H, H))
    gUr = np.zeros((H, H))
    gUh = np.zeros((H, H))
    gbz = np.zeros(H)
    gbr = np.zeros(H)
    gbh = np.zeros(H)
    gwo = np.zeros(H)
    gbo = 0.0
    dX = np.zeros((T, D))
    dh = np.zeros(H)
    dhp = np.empty(H)
    daz = np.empty(H)
    dar = np.empty(H)
    dah = np.empty(H)
    drh = np.empty(H)
    for t in range(T - 1, -1, -1):
        g = dA[t]
        gbo += g
        for k in range(H):
            gwo[k] += g * Hs[t + 1, k]
            dh[k] += g * wo[k]
        for j in range(H):
            z = Z[t, j]
            c = C[t, j]
            dah[j] = dh[j] * z * (1.0 - c * c)
            daz[j] = dh[j] * (c - Hs[t, j]) * z * (1.0 - z)
        for k in range(H):
            drh[k] = 0.0
        for j in range(H):
            for k in range(H):
                drh[k] += Uh[j, k] * dah[j]
        for k in range(H):
            r = R[t, k]
            dar[k] = drh[k] * Hs[t, k] * r * (1.0 - r)
            dhp[k] = dh[k] * (1.0 - Z[t, k]) + drh[k] * r
        for j in range(H):
            gbz[j] += daz[j]
            gbr[j] += dar[j]
            gbh[j] += dah[j]
            for k in range(H):
                dhp[k] += Uz[j, k] * daz[j] + Ur[j, k] * dar[j]
                gUz[j, k] += daz[j] * Hs[t, k]
                gUr[j, k] += dar[j] * Hs[t, k]
                gUh[j, k] += dah[j] * R[t, k] * Hs[t, k]
            for k in range(D):
                x = X[t, k]
                gWz[j, k] += daz[j] * x
                gWr[j, k] += dar[j] * x
                gWh[j, k] += dah[j] * x
                dX[t, k] += Wz[j, k] * daz[j] + Wr[j, k] * dar[j] + Wh[j, k] * dah[j]
        for k in range(H):
            dh[k] = dhp[k]
    return gWz, gWr, gWh, gUz, gUr, gUh, gbz, gbr, gbh, gwo, gbo, dX


# --------------------------------------------------------------------------
# layers


def sigmoid(a):
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _act_grad(y: np.ndarray, activation: str) -> np.ndarray:
    if activation == "sigmoid":
        return y * (1.0 - y)
    if activation == "tanh":
        return 1.0 - y * y
    if activation == "relu":
        return (y > 0.0).astype(np.float64)
    return np.ones_like(y)


@dataclass(frozen=True, eq=False)
class DenseLayer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in _ACT_CODE:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent dense shapes W{self.W.shape} b{self.b.shape}")

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """activation(W x + b) for a single vector, or row-wise for a matrix."""
    x = np.asarray(x, dtype=np.float64)
    rows = np.atleast_2d(x)
    if rows.ndim != 2 or rows.shape[1] != layer.n_in:
        raise ValueError(f"dense layer expects input width {layer.n_in}, got {x.shape}")
    out = _dense_rows(layer.W, layer.b, np.ascontiguousarray(rows), _ACT_CODE[layer.activation])
    return out[0] if x.ndim == 1 else out


@dataclass(frozen=True, eq=False)
class GruCell:
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self) -> None:
        H, D = self.W_z.shape
        for name in ("W_z", "W_r", "W_h"):
            if getattr(self, name).shape != (H, D):
                raise ValueError(f"{name} must be ({H}, {D})")
        for name in ("U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (H, H):
                raise ValueError(f"{name} must be ({H}, {H})")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (H,):
                raise ValueError(f"{name} must be ({H},)")

    @property
    def hidden(self) -> int:
        return self.W_z.shape[0]

    @property
    def n_in(self) -> int:
        return self.W_z.shape[1]


_GRU_FIELDS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


def gru_step(cell: GruCell, h_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
    h_prev = np.asarray(h_prev, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if h_prev.shape != (cell.hidden,) or x.shape != (cell.n_in,):
        raise ValueError(
            f"gru_step expects h ({cell.hidden},) and x ({cell.n_in},), got {h_prev.shape} and {x.shape}"
        )
    Hs, *_ = _gru_forward(
        *(getattr(cell, f) for f in _GRU_FIELDS), np.zeros(cell.hidden), 0.0, x[None, :], h_prev
    )
    return Hs[1]


# --------------------------------------------------------------------------
# network


@dataclass(frozen=True, eq=False)
class Network:
    """Per-modality encoders -> concat (+ passthrough inputs) -> GRU -> sigmoid head."""

    encoders: tuple[tuple[str, DenseLayer], ...]
    extra_dim: int
    cell: GruCell
    head: DenseLayer

    def __post_init__(self) -> None:
        width = sum(layer.n_out for _, layer in self.encoders) + self.extra_dim
        if width != self.cell.n_in:
            raise ValueError(f"recurrent input width {self.cell.n_in} != encoders + extra ({width})")
        if self.head.n_in != self.cell.hidden or self.head.n_out != 1:
            raise ValueError("head must map hidden -> 1")
        if self.head.activation != "sigmoid":
            raise ValueError("head activation must be sigmoid")

    @property
    def input_width(self) -> int:
        return self.cell.n_in

    @property
    def hidden(self) -> int:
        return self.cell.hidden

    def params(self) -> dict[str, np.ndarray]:
        """Parameters by name, in a fixed order."""
        p: dict[str, np.ndarray] = {}
        for name, layer in self.encoders:
            p[f"enc.{name}.W"] = layer.W
            p[f"enc.{name}.b"] = layer.b
        for f in _GRU_FIELDS:
            p[f"gru.{f}"] = getattr(self.cell, f)
        p["head.W"] = self.head.W
        p["head.b"] = self.head.b
        return p

    def with_params(self, params: Mapping[str, np.ndarray]) -> Network:
        own = self.params()
        if set(params) != set(own):
            raise ValueError(f"parameter names differ: {sorted(set(params) ^ set(own))}")
        for k, v in params.items():
            if np.shape(v) != own[k].shape:
                raise ValueError(f"parameter {k} has shape {np.shape(v)}, expected {own[k].shape}")
        arr = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        encoders = tuple(
            (name, replace(layer, W=arr[f"enc.{name}.W"], b=arr[f"enc.{name}.b"]))
            for name, layer in self.encoders
        )
        cell = GruCell(**{f: arr[f"gru.{f}"] for f in _GRU_FIELDS})
        head = replace(self.head, W=arr["head.W"], b=arr["head.b"])
        return Network(encoders, self.extra_dim, cell, head)


def glorot(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    a = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-a, a, size=(n_out, n_in))


def init_network(
    rng: np.random.Generator,
    encoders: Sequence[tuple[str, int, int, str]],
    extra_dim: int,
    hidden: int,
) -> Network:
    """Glorot-uniform matrices, zero biases. ``encoders`` is (name, n_in, n_out, activation)."""
    enc = []
    for name, n_in, n_out, act in encoders:
        enc.append((name, DenseLayer(glorot(rng, n_out, n_in), np.zeros(n_out), act)))
    D = sum(n_out for _, _, n_out, _ in encoders) + extra_dim
    mats = {}
    for f in ("W_z", "W_r", "W_h"):
        mats[f] = glorot(rng, hidden, D)
    for f in ("U_z", "U_r", "U_h"):
        mats[f] = glorot(rng, hidden, hidden)
    for f in ("b_z", "b_r", "b_h"):
        mats[f] = np.zeros(hidden)
    head = DenseLayer(glorot(rng, 1, hidden), np.zeros(1), "sigmoid")
    return Network(tuple(enc), extra_dim, GruCell(**mats), head)


@dataclass(eq=False)
class SequenceCache:
    net: Network
    blocks: tuple[np.ndarray, ...]
    encoded: tuple[np.ndarray, ...]
    X: np.ndarray
    Hs: np.ndarray
    Z: np.ndarray
    R: np.ndarray
    C: np.ndarray
    logits: np.ndarray
    y: np.ndarray

    @property
    def h_last(self) -> np.ndarray:
        return self.Hs[-1]


def encode_inputs(net: Network, blocks: Sequence[np.ndarray], extra: np.ndarray | None):
    """Run the encoders and build the recurrent input matrix (T x input_width)."""
    if len(blocks) != len(net.encoders):
        raise ValueError(f"expected {len(net.encoders)} input blocks, got {len(blocks)}")
    T = None
    encoded = []
    for (name, layer), B in zip(net.encoders, blocks):
        B = np.ascontiguousarray(B, dtype=np.float64)
        if B.ndim != 2 or B.shape[1] != layer.n_in:
            raise ValueError(f"input block {name!r} must be (T, {layer.n_in}), got {B.shape}")
        if T is None:
            T = B.shape[0]
        elif B.shape[0] != T:
            raise ValueError("input blocks have different lengths")
        bad = ~np.isfinite(B).all(axis=1)
        if bad.any():
            raise NonFiniteError(f"input block {name!r}", int(np.argmax(bad)) + 1)
        encoded.append(_dense_rows(layer.W, layer.b, B, _ACT_CODE[layer.activation]))
    parts = list(encoded)
    if net.extra_dim:
        if extra is None:
            raise ValueError(f"extra input of width {net.extra_dim} required")
        extra = np.asarray(extra, dtype=np.float64)
        if extra.ndim != 2 or extra.shape[1] != net.extra_dim or (T is not None and extra.shape[0] != T):
            raise ValueError(f"extra input must be (T, {net.extra_dim}), got {extra.shape}")
        bad = ~np.isfinite(extra).all(axis=1)
        if bad.any():
            raise NonFiniteError("extra input", int(np.argmax(bad)) + 1)
        parts.append(extra)
    elif extra is not None and np.size(extra):
        raise ValueError("network takes no extra input")
    if not parts:
        raise ValueError("network has no inputs")
    X = np.ascontiguousarray(np.concatenate(parts, axis=1))
    return tuple(encoded), X


def forward_sequence(
    net: Network,
    blocks: Sequence[np.ndarray],
    extra: np.ndarray | None = None,
    h0: np.ndarray | None = None,
) -> tuple[np.ndarray, SequenceCache]:
    """Progress outputs y (T,) and the cache needed by :func:`backward_sequence`."""
    encoded, X = encode_inputs(net, blocks, extra)
    if X.shape[0] < 1:
        raise ValueError("sequence must contain at least one frame")
    h0 = np.zeros(net.hidden) if h0 is None else np.ascontiguousarray(h0, dtype=np.float64)
    c = net.cell
    Hs, Z, R, C, A = _gru_forward(
        c.W_z, c.W_r, c.W_h, c.U_z, c.U_r, c.U_h, c.b_z, c.b_r, c.b_h,
        net.head.W[0], float(net.head.b[0]), X, h0,
    )
    bad = ~np.isfinite(A)
    if bad.any():
        raise NonFiniteError("recurrent output", int(np.argmax(bad)) + 1)
    y = sigmoid(A)
    return y, SequenceCache(net, tuple(np.asarray(b) for b in blocks), encoded, X, Hs, Z, R, C, A, y)


def bce_loss(y: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy of predictions y against soft labels in [0, 1]."""
    y = np.asarray(y, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if y.shape != labels.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {labels.shape}")
    return float(np.mean(-(labels * np.log(y) + (1.0 - labels) * np.log1p(-y))))


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Same loss as :func:`bce_loss`, computed stably from pre-sigmoid values."""
    a = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if a.shape != labels.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {labels.shape}")
    softplus = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    return float(np.mean(softplus - labels * a))


def backward_sequence(net: Network, cache: SequenceCache, labels: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradient of the mean BCE loss with respect to every parameter."""
    if cache.net is not net:
        raise ValueError("cache was produced by a different network")
    labels = np.asarray(labels, dtype=np.float64)
    T = cache.X.shape[0]
    if labels.shape != (T,):
        raise ValueError(f"expected {T} labels, got shape {labels.shape}")
    dA = (cache.y - labels) / T
    c = net.cell
    (gWz, gWr, gWh, gUz, gUr, gUh, gbz, gbr, gbh, gwo, gbo, dX) = _gru_backward(
        c.W_z, c.W_r, c.W_h, c.U_z, c.U_r, c.U_h, net.head.W[0], cache.X,
        cache.Hs, cache.Z, cache.R, cache.C, dA,
    )
    grads: dict[str, np.ndarray] = {}
    col = 0
    for (name, layer), B, E in zip(net.encoders, cache.blocks, cache.encoded):
        dE = dX[:, col : col + layer.n_out]
        col += layer.n_out
        dpre = dE * _act_grad(E, layer.activation)
        grads[f"enc.{name}.W"] = dpre.T @ B
        grads[f"enc.{name}.b"] = dpre.sum(axis=0)
    for f, g in zip(_GRU_FIELDS, (gWz, gWr, gWh, gUz, gUr, gUh, gbz, gbr, gbh)):
        grads[f"gru.{f}"] = g
    grads["head.W"] = gwo[None, :]
    grads["head.b"] = np.array([gbo])
    return {k: grads[k] for k in net.params()}


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update. Returns new parameter and state objects; inputs are untouched."""
    if set(params) != set(grads):
        raise ValueError(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
    t = state.t + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient {k} has shape {g.shape}, expected {p.shape}")
        m_prev = state.m.get(k, np.zeros_like(p))
        v_prev = state.v.get(k, np.zeros_like(p))
        m[k] = state.beta1 * m_prev + (1.0 - state.beta1) * g
        v[k] = state.beta2 * v_prev + (1.0 - state.beta2) * (g * g)
        m_hat = m[k] / bc1
        v_hat = v[k] / bc2
        new_params[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, t=t, m=m, v=v)


# --------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradRow:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass(frozen=True)
class GradCheckReport:
    rows: tuple[GradRow, ...]
    tolerance: float

    @property
    def worst(self) -> GradRow:
        return max(self.rows, key=lambda r: r.rel_error)

    @property
    def max_rel_error(self) -> float:
        return self.worst.rel_error

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_table(self, limit: int | None = 20) -> str:
        rows = sorted(self.rows, key=lambda r: -r.rel_error)
        if limit is not None:
            rows = rows[:limit]
        lines = [f"{'parameter':<24}{'analytic':>16}{'numeric':>16}{'rel_error':>12}"]
        for r in rows:
            label = f"{r.name}{list(r.index)}"
            lines.append(f"{label:<24}{r.analytic:>16.8e}{r.numeric:>16.8e}{r.rel_error:>12.3e}")
        w = self.worst
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(
            f"{verdict}: max relative error {w.rel_error:.3e} at {w.name}{list(w.index)} "
            f"(tolerance {self.tolerance:g}, {len(self.rows)} entries checked)"
        )
        return "\n".join(lines)


def rel_error(a: float, n: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps ~0 gradients from dividing by noise."""
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(
    net: Network,
    blocks: Sequence[np.ndarray],
    extra: np.ndarray | None,
    labels: np.ndarray,
    *,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare backprop gradients against central finite differences, entry by entry."""
    if analytic is None:
        _, cache = forward_sequence(net, blocks, extra)
        analytic = backward_sequence(net, cache, labels)
    params = net.params()

    def loss_at(name: str, idx: tuple[int, ...], value: float) -> float:
        p = dict(params)
        arr = p[name].copy()
        arr[idx] = value
        p[name] = arr
        _, c = forward_sequence(net.with_params(p), blocks, extra)
        return bce_with_logits(c.logits, labels)

    rows = []
    for name, arr in params.items():
        for idx in np.ndindex(arr.shape):
            x0 = float(arr[idx])
            num = (loss_at(name, idx, x0 + h) - loss_at(name, idx, x0 - h)) / (2.0 * h)
            ana = float(analytic[name][idx])
            rows.append(GradRow(name, tuple(int(i) for i in idx), ana, num, rel_error(ana, num)))
    return GradCheckReport(tuple(rows), tolerance)
