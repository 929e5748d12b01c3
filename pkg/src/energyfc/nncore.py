"""Recurrent network core: projected-LSTM forward/backward from scratch.

Two architectures share one parameter layout:

* ``lstmp``: each layer projects its cell output down to ``h_out`` through
  a matrix ``W_hr``; the projected vector is the layer output *and* the
  vector the recurrence reads at the next step.  The final step of the
  top layer is the prediction directly, no extra linear head.
* ``lstm_baseline``: a conventional LSTM (hidden size = cell size, no
  projection) followed by a linear head that maps the last hidden state
  to ``h_out`` values.

Everything is float64 numpy and purely functional: forward returns a tape,
backward consumes it and returns gradients, nothing mutates in place.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import CheckpointError, ConfigError, NumericError

CHECKPOINT_FORMAT_VERSION = 1

# Per-layer array names in canonical (checkpoint) order.  W_hr is present
# for the projected architecture only.
LAYER_ARRAY_NAMES = (
    "W_ix", "W_fx", "W_gx", "W_ox",
    "W_ih", "W_fh", "W_gh", "W_oh",
    "b_i", "b_f", "b_g", "b_o",
    "W_hr",
)


class Arch(str, enum.Enum):
    LSTMP = "lstmp"
    LSTM_BASELINE = "lstm_baseline"


@dataclass(frozen=True)
class NetworkConfig:
    """Shape hyperparameters of a two-layer network.

    ``t_steps`` is the input window length (one step per millisecond),
    ``h_in`` the input feature size, ``h_cell`` the cell size, and
    ``h_out`` both the output size and the prediction horizon in steps.
    """

    arch: Arch
    t_steps: int
    h_in: int
    h_cell: int
    h_out: int
    num_layers: int = 2

    def __post_init__(self):
        if self.num_layers != 2:
            raise ConfigError(f"num_layers must be 2, got {self.num_layers}")
        for name in ("t_steps", "h_in", "h_cell", "h_out"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.arch is Arch.LSTMP and not self.h_out < self.h_cell:
            raise ConfigError(
                f"projected architecture requires h_out < h_cell, "
                f"got h_out={self.h_out}, h_cell={self.h_cell}"
            )

    @property
    def recurrent_size(self) -> int:
        """Size of the vector the recurrence reads (and each layer emits)."""
        return self.h_out if self.arch is Arch.LSTMP else self.h_cell

    def layer_input_size(self, layer: int) -> int:
        return self.h_in if layer == 0 else self.recurrent_size

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.value,
            "num_layers": self.num_layers,
            "T": self.t_steps,
            "H_in": self.h_in,
            "H_cell": self.h_cell,
            "H_out": self.h_out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        try:
            return cls(
                arch=Arch(d["arch"]),
                num_layers=int(d["num_layers"]),
                t_steps=int(d["T"]),
                h_in=int(d["H_in"]),
                h_cell=int(d["H_cell"]),
                h_out=int(d["H_out"]),
            )
        except KeyError as e:
            raise CheckpointError(f"config: missing field {e.args[0]!r}") from None


@dataclass
class LayerParams:
    """Weights of one recurrent layer.

    Input matrices are (h_cell, layer_input), recurrent matrices
    (h_cell, recurrent_size), biases (h_cell,).  ``W_hr`` is the
    (h_out, h_cell) projection, ``None`` for the baseline LSTM.
    """

    W_ix: np.ndarray
    W_fx: np.ndarray
    W_gx: np.ndarray
    W_ox: np.ndarray
    W_ih: np.ndarray
    W_fh: np.ndarray
    W_gh: np.ndarray
    W_oh: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_g: np.ndarray
    b_o: np.ndarray
    W_hr: np.ndarray | None = None

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in LAYER_ARRAY_NAMES:
            a = getattr(self, name)
            if a is not None:
                yield name, a


@dataclass
class NetworkParams:
    """All weights of the two-layer network, plus the baseline's head."""

    config: NetworkConfig
    layers: list[LayerParams]
    head_w: np.ndarray | None = None  # (h_out, h_cell), baseline only
    head_b: np.ndarray | None = None  # (h_out,), baseline only

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """All parameter tensors in a fixed, checkpoint-stable order."""
        for l, layer in enumerate(self.layers):
            for name, a in layer.arrays():
                yield f"layers[{l}].{name}", a
        if self.head_w is not None:
            yield "head.W", self.head_w
            yield "head.b", self.head_b

    def copy(self) -> "NetworkParams":
        out = zeros_like_params(self)
        for (_, dst), (_, src) in zip(out.named_arrays(), self.named_arrays()):
            dst[...] = src
        return out


# Gradients carry one tensor per parameter tensor; the container is the same.
Gradients = NetworkParams


@dataclass(frozen=True)
class StepState:
    """Cached activations of one cell step: projected output ``h``, cell
    state ``c``, and the four gate activations needed for backward."""

    h: np.ndarray
    c: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Numerically safe on both tails.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _layer_shapes(config: NetworkConfig, layer: int) -> dict[str, tuple[int, ...]]:
    hc, r = config.h_cell, config.recurrent_size
    n_in = config.layer_input_size(layer)
    shapes: dict[str, tuple[int, ...]] = {}
    for gate in "ifgo":
        shapes[f"W_{gate}x"] = (hc, n_in)
        shapes[f"W_{gate}h"] = (hc, r)
        shapes[f"b_{gate}"] = (hc,)
    if config.arch is Arch.LSTMP:
        shapes["W_hr"] = (config.h_out, hc)
    return shapes


def zeros_like_params(params: NetworkParams) -> Gradients:
    """A gradient container with the same tensor layout, all zeros."""
    layers = []
    for layer in params.layers:
        kw = {name: np.zeros_like(a) for name, a in layer.arrays()}
        if layer.W_hr is None:
            kw["W_hr"] = None
        layers.append(LayerParams(**kw))
    head_w = None if params.head_w is None else np.zeros_like(params.head_w)
    head_b = None if params.head_b is None else np.zeros_like(params.head_b)
    return NetworkParams(params.config, layers, head_w, head_b)


def init_params(config: NetworkConfig, seed: int) -> NetworkParams:
    """Seeded parameter initialisation.

    Weights are uniform in [-1/sqrt(h_cell), +1/sqrt(h_cell)]; biases start
    at zero except the forget gate, which starts at +1 so early training
    does not flush the cell state.
    """
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(config.h_cell)
    layers = []
    for l in range(config.num_layers):
        kw: dict[str, np.ndarray | None] = {}
        for name, shape in _layer_shapes(config, l).items():
            if name.startswith("W"):
                kw[name] = rng.uniform(-scale, scale, size=shape)
            else:
                kw[name] = np.ones(shape) if name == "b_f" else np.zeros(shape)
        if config.arch is not Arch.LSTMP:
            kw["W_hr"] = None
        layers.append(LayerParams(**kw))
    head_w = head_b = None
    if config.arch is Arch.LSTM_BASELINE:
        head_w = rng.uniform(-scale, scale, size=(config.h_out, config.h_cell))
        head_b = np.zeros(config.h_out)
    return NetworkParams(config, layers, head_w, head_b)


def count_parameters(config: NetworkConfig) -> int:
    """Exact number of scalar parameters for a config.

    Projected layer l: 4*h_cell*(in_l + h_out) + 4*h_cell + h_out*h_cell.
    Baseline layer l: 4*h_cell*(in_l + h_cell) + 4*h_cell, plus a
    (h_out*h_cell + h_out) linear head once.
    """
    hc, ho = config.h_cell, config.h_out
    total = 0
    for l in range(config.num_layers):
        n_in = config.layer_input_size(l)
        if config.arch is Arch.LSTMP:
            total += 4 * hc * (n_in + ho) + 4 * hc + ho * hc
        else:
            total += 4 * hc * (n_in + hc) + 4 * hc
    if config.arch is Arch.LSTM_BASELINE:
        total += ho * hc + ho
    return total


def _check_vector(name: str, v: np.ndarray, size: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (size,):
        raise ConfigError(f"{name} must have shape ({size},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericError(f"{name} contains non-finite values")
    return v


def lstmp_step(
    x: np.ndarray,
    h_prev: np.ndarray,
    c_prev: np.ndarray,
    p: LayerParams,
) -> StepState:
    """One cell step on a single sample.

    i, f, o are sigmoid gates and g a tanh candidate, each reading the
    step input and the previous (projected) output:

        c = f * c_prev + i * g
        m = o * tanh(c)
        h = W_hr @ m        (or h = m without a projection)
    """
    hc, n_in = p.W_ix.shape
    r = p.W_ih.shape[1]
    x = _check_vector("x", x, n_in)
    h_prev = _check_vector("h_prev", h_prev, r)
    c_prev = _check_vector("c_prev", c_prev, hc)

    i = _sigmoid(p.W_ix @ x + p.W_ih @ h_prev + p.b_i)
    f = _sigmoid(p.W_fx @ x + p.W_fh @ h_prev + p.b_f)
    g = np.tanh(p.W_gx @ x + p.W_gh @ h_prev + p.b_g)
    o = _sigmoid(p.W_ox @ x + p.W_oh @ h_prev + p.b_o)
    c = f * c_prev + i * g
    m = o * np.tanh(c)
    h = m if p.W_hr is None else p.W_hr @ m
    return StepState(h=h, c=c, i=i, f=f, g=g, o=o)


class _FusedLayer:
    """Gate matrices stacked for batched matmuls; built once per pass."""

    __slots__ = ("w_x", "w_h", "b", "w_hr", "h_cell", "rec")

    def __init__(self, p: LayerParams):
        self.w_x = np.concatenate([p.W_ix, p.W_fx, p.W_gx, p.W_ox], axis=0)
        self.w_h = np.concatenate([p.W_ih, p.W_fh, p.W_gh, p.W_oh], axis=0)
        self.b = np.concatenate([p.b_i, p.b_f, p.b_g, p.b_o])
        self.w_hr = p.W_hr
        self.h_cell = p.W_ix.shape[0]
        self.rec = p.W_ih.shape[1]


@dataclass
class Tape:
    """Forward cache sufficient for an exact backward pass.

    Arrays are time-major with a batch axis: gates and cell states are
    (T, B, h_cell) per layer, outputs (T, B, recurrent_size).
    """

    config: NetworkConfig
    windows: np.ndarray                    # (B, T, h_in)
    gates: list[np.ndarray]                # per layer (T, B, 4*h_cell): i|f|g|o
    cells: list[np.ndarray]                # per layer (T, B, h_cell)
    outputs: list[np.ndarray]              # per layer (T, B, rec)
    params_ref: NetworkParams = field(repr=False, default=None)

    def state(self, layer: int, t: int, batch_index: int = 0) -> StepState:
        hc = self.config.h_cell
        gates = self.gates[layer][t, batch_index]
        return StepState(
            h=self.outputs[layer][t, batch_index].copy(),
            c=self.cells[layer][t, batch_index].copy(),
            i=gates[:hc].copy(),
            f=gates[hc:2 * hc].copy(),
            g=gates[2 * hc:3 * hc].copy(),
            o=gates[3 * hc:].copy(),
        )


def forward_batch(params: NetworkParams, windows: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Run the network over a batch of windows.

    ``windows`` is (B, T, h_in); returns predictions (B, h_out) and the
    tape consumed by :func:`backward_batch`.
    """
    cfg = params.config
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[1:] != (cfg.t_steps, cfg.h_in):
        raise ConfigError(
            f"windows must be (B, {cfg.t_steps}, {cfg.h_in}), got {windows.shape}"
        )
    n_batch = windows.shape[0]
    x = np.swapaxes(windows, 0, 1)  # (T, B, h_in)

    gates_all, cells_all, outputs_all = [], [], []
    for layer in params.layers:
        fl = _FusedLayer(layer)
        hc, r = fl.h_cell, fl.rec
        if fl.w_hr is not None and fl.w_hr.shape[0] != r:
            raise ConfigError("projection output size must match recurrent size")
        gates = np.empty((cfg.t_steps, n_batch, 4 * hc))
        cells = np.empty((cfg.t_steps, n_batch, hc))
        outs = np.empty((cfg.t_steps, n_batch, r))
        h = np.zeros((n_batch, r))
        c = np.zeros((n_batch, hc))
        for t in range(cfg.t_steps):
            a = x[t] @ fl.w_x.T + h @ fl.w_h.T + fl.b
            i = _sigmoid(a[:, :hc])
            f = _sigmoid(a[:, hc:2 * hc])
            g = np.tanh(a[:, 2 * hc:3 * hc])
            o = _sigmoid(a[:, 3 * hc:])
            c = f * c + i * g
            m = o * np.tanh(c)
            h = m if fl.w_hr is None else m @ fl.w_hr.T
            gates[t, :, :hc] = i
            gates[t, :, hc:2 * hc] = f
            gates[t, :, 2 * hc:3 * hc] = g
            gates[t, :, 3 * hc:] = o
            cells[t] = c
            outs[t] = h
        gates_all.append(gates)
        cells_all.append(cells)
        outputs_all.append(outs)
        x = outs  # next layer consumes this layer's outputs

    last = outputs_all[-1][-1]  # (B, rec)
    if cfg.arch is Arch.LSTMP:
        preds = last.copy()
    else:
        preds = last @ params.head_w.T + params.head_b
    tape = Tape(cfg, windows, gates_all, cells_all, outputs_all, params_ref=params)
    return preds, tape


def backward_batch(
    params: NetworkParams, tape: Tape, d_preds: np.ndarray
) -> Gradients:
    """Exact gradients of a scalar loss whose output gradient is ``d_preds``.

    Backpropagates through time in both layers, through the projection,
    and through the recurrent path (the projected output feeds the next
    step's gates).  Returns a container mirroring the parameter layout.
    """
    cfg = params.config
    if tape.params_ref is not params:
        raise ConfigError("tape was produced by a different parameter set")
    d_preds = np.asarray(d_preds, dtype=np.float64)
    n_batch = tape.windows.shape[0]
    if d_preds.shape != (n_batch, cfg.h_out):
        raise ConfigError(
            f"d_preds must be ({n_batch}, {cfg.h_out}), got {d_preds.shape}"
        )

    grads = zeros_like_params(params)
    n_steps = cfg.t_steps

    # External gradient into the top layer's outputs: only the final step
    # receives loss gradient; earlier steps matter through recurrence only.
    top = len(params.layers) - 1
    d_ext = np.zeros_like(tape.outputs[top])
    if cfg.arch is Arch.LSTMP:
        d_ext[-1] = d_preds
    else:
        h_last = tape.outputs[top][-1]
        grads.head_w += d_preds.T @ h_last
        grads.head_b += d_preds.sum(axis=0)
        d_ext[-1] = d_preds @ params.head_w

    for l in range(top, -1, -1):
        layer = params.layers[l]
        fl = _FusedLayer(layer)
        hc = fl.h_cell
        x_seq = np.swapaxes(tape.windows, 0, 1) if l == 0 else tape.outputs[l - 1]
        gates, cells, outs = tape.gates[l], tape.cells[l], tape.outputs[l]

        d_wx = np.zeros_like(fl.w_x)
        d_wh = np.zeros_like(fl.w_h)
        d_b = np.zeros_like(fl.b)
        d_whr = None if fl.w_hr is None else np.zeros_like(fl.w_hr)
        d_x_seq = np.empty_like(x_seq) if l > 0 else None

        dh_next = np.zeros((n_batch, fl.rec))
        dc_next = np.zeros((n_batch, hc))
        for t in range(n_steps - 1, -1, -1):
            i = gates[t, :, :hc]
            f = gates[t, :, hc:2 * hc]
            g = gates[t, :, 2 * hc:3 * hc]
            o = gates[t, :, 3 * hc:]
            c = cells[t]
            c_prev = cells[t - 1] if t > 0 else np.zeros_like(c)
            h_prev = outs[t - 1] if t > 0 else np.zeros((n_batch, fl.rec))
            tc = np.tanh(c)

            dh = d_ext[t] + dh_next
            if fl.w_hr is None:
                dm = dh
            else:
                m = o * tc
                d_whr += dh.T @ m
                dm = dh @ fl.w_hr
            do = dm * tc
            dc = dc_next + dm * o * (1.0 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc_next = dc * f

            da = np.concatenate(
                [
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g * g),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            # Fused layout is i|f|g|o; the concat above is i|f|g|o as well.
            d_wx += da.T @ x_seq[t]
            d_wh += da.T @ h_prev
            d_b += da.sum(axis=0)
            dh_next = da @ fl.w_h
            if l > 0:
                d_x_seq[t] = da @ fl.w_x

        gl = grads.layers[l]
        gl.W_ix[...], gl.W_fx[...], gl.W_gx[...], gl.W_ox[...] = np.split(d_wx, 4, axis=0)
        gl.W_ih[...], gl.W_fh[...], gl.W_gh[...], gl.W_oh[...] = np.split(d_wh, 4, axis=0)
        gl.b_i[...], gl.b_f[...], gl.b_g[...], gl.b_o[...] = np.split(d_b, 4)
        if d_whr is not None:
            gl.W_hr[...] = d_whr
        if l > 0:
            d_ext = d_x_seq  # becomes the external gradient of the layer below

    return grads


def network_forward(window: np.ndarray, params: NetworkParams) -> tuple[np.ndarray, Tape]:
    """Single-sample forward pass: (T, h_in) window to an h_out prediction."""
    window = np.asarray(window, dtype=np.float64)
    cfg = params.config
    if window.shape != (cfg.t_steps, cfg.h_in):
        raise ConfigError(
            f"window must be ({cfg.t_steps}, {cfg.h_in}), got {window.shape}"
        )
    if not np.all(np.isfinite(window)):
        raise NumericError("window contains non-finite values")
    preds, tape = forward_batch(params, window[None, :, :])
    return preds[0], tape


def network_backward(
    tape: Tape,
    window: np.ndarray,
    d_prediction: np.ndarray,
    params: NetworkParams,
) -> Gradients:
    """Single-sample backward pass matching :func:`network_forward`."""
    window = np.asarray(window, dtype=np.float64)
    if tape.windows.shape[0] != 1 or not np.array_equal(tape.windows[0], window):
        raise ConfigError("tape does not match the given window")
    d_prediction = np.asarray(d_prediction, dtype=np.float64)
    if d_prediction.shape != (params.config.h_out,):
        raise ConfigError(
            f"d_prediction must be ({params.config.h_out},), got {d_prediction.shape}"
        )
    return backward_batch(params, tape, d_prediction[None, :])


# ---------------------------------------------------------------------------
# Checkpoint serialization


def _array_to_doc(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _array_from_doc(doc, path: str, expect_shape: tuple[int, ...]) -> np.ndarray:
    if not isinstance(doc, dict) or "shape" not in doc or "data" not in doc:
        raise CheckpointError(f"{path}: expected an object with 'shape' and 'data'")
    shape = tuple(doc["shape"])
    if shape != expect_shape:
        raise CheckpointError(f"{path}: shape {list(shape)} != expected {list(expect_shape)}")
    data = np.asarray(doc["data"], dtype=np.float64)
    if data.size != int(np.prod(expect_shape)):
        raise CheckpointError(
            f"{path}: {data.size} values for shape {list(expect_shape)}"
        )
    return data.reshape(expect_shape)


def save_checkpoint(params: NetworkParams, norm_stats: dict | None = None) -> str:
    """Serialize params (and normalization statistics) to a JSON document.

    Float values round-trip exactly: they are written with shortest
    round-trip decimal representation, so save -> load -> save is
    byte-identical.
    """
    for name, a in params.named_arrays():
        if not np.all(np.isfinite(a)):
            raise NumericError(f"cannot checkpoint non-finite tensor {name}")
    cfg = params.config
    doc: dict = {"format_version": CHECKPOINT_FORMAT_VERSION}
    doc.update(cfg.to_dict())
    doc["layers"] = [
        {name: _array_to_doc(a) for name, a in layer.arrays()}
        for layer in params.layers
    ]
    if cfg.arch is Arch.LSTM_BASELINE:
        doc["head"] = {"W": _array_to_doc(params.head_w), "b": _array_to_doc(params.head_b)}
    else:
        doc["head"] = None
    doc["norm_stats"] = norm_stats
    return json.dumps(doc, separators=(",", ":"))


def load_checkpoint(text: str) -> tuple[NetworkParams, dict | None]:
    """Parse a checkpoint document back into params and normalization stats."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise CheckpointError("document root must be an object")
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"format_version: expected {CHECKPOINT_FORMAT_VERSION}, got {version!r}"
        )
    cfg = NetworkConfig.from_dict(doc)

    layer_docs = doc.get("layers")
    if not isinstance(layer_docs, list) or len(layer_docs) != cfg.num_layers:
        raise CheckpointError(f"layers: expected a list of {cfg.num_layers} layers")
    layers = []
    for l, ld in enumerate(layer_docs):
        shapes = _layer_shapes(cfg, l)
        kw: dict[str, np.ndarray | None] = {}
        for name in LAYER_ARRAY_NAMES:
            path = f"layers[{l}].{name}"
            if name == "W_hr" and cfg.arch is not Arch.LSTMP:
                kw[name] = None
                continue
            if name not in ld:
                raise CheckpointError(f"{path}: missing field")
            kw[name] = _array_from_doc(ld[name], path, shapes[name])
        layers.append(LayerParams(**kw))

    head_w = head_b = None
    if cfg.arch is Arch.LSTM_BASELINE:
        head = doc.get("head")
        if not isinstance(head, dict):
            raise CheckpointError("head: missing field")
        head_w = _array_from_doc(head.get("W"), "head.W", (cfg.h_out, cfg.h_cell))
        head_b = _array_from_doc(head.get("b"), "head.b", (cfg.h_out,))

    params = NetworkParams(cfg, layers, head_w, head_b)
    return params, doc.get("norm_stats")
