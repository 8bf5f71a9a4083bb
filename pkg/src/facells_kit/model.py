"""From-scratch LSTM sequence classifier in 64-bit numpy.

Everything a config names is built here: stacked (optionally bidirectional)
LSTM layers over padded (a, b, p) triple sequences, a pooling head that reads
either the final states (``fs``) or the per-timestep average (``ga``), an
optional hidden dense layer, sigmoid outputs, exact backpropagation through
time, and an Adam optimizer. Padded steps are masked to exact zeros so they
can never leak into outputs, losses, or gradients.

Config names follow the compact scheme ``<stack>-<head>-<dense>``, e.g.
``1bi-fs-d1`` (one bidirectional layer of 256 cells, final-state head, output
layer only) or ``3bi(8)-ga-d40`` (three bidirectional layers of 8 cells,
average head, 40-unit ReLU dense before the output).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import expit

from .errors import DataError, NumericError

FS = "fs"
GA = "ga"

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    lstm_layers: tuple[tuple[int, bool], ...]
    head: str
    dense: tuple[tuple[int, str], ...] = ()
    outputs: int = 1
    input_dim: int = 3

    def __post_init__(self):
        layers = tuple((int(c), bool(b)) for c, b in self.lstm_layers)
        object.__setattr__(self, "lstm_layers", layers)
        object.__setattr__(self, "dense",
                           tuple((int(u), a) for u, a in self.dense))
        if not layers:
            raise DataError("at least one LSTM layer is required")
        if any(c <= 0 for c, _ in layers):
            raise DataError("LSTM cell counts must be positive")
        if self.head not in (FS, GA):
            raise DataError(f"head must be 'fs' or 'ga', got {self.head!r}")
        if any(a not in ("relu", "none") for _, a in self.dense):
            raise DataError("dense activations must be 'relu' or 'none'")
        if any(u <= 0 for u, _ in self.dense):
            raise DataError("dense unit counts must be positive")
        if self.outputs < 1:
            raise DataError("outputs must be >= 1")
        if self.input_dim < 1:
            raise DataError("input_dim must be >= 1")

    @property
    def pooled_dim(self) -> int:
        cells, bi = self.lstm_layers[-1]
        return cells * (2 if bi else 1)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "lstm_layers": [[c, b] for c, b in self.lstm_layers],
            "head": self.head,
            "dense": [[u, a] for u, a in self.dense],
            "outputs": self.outputs,
        }

    @classmethod
    def from_dict(cls, obj) -> "ModelConfig":
        try:
            return cls(
                lstm_layers=tuple((int(c), bool(b))
                                  for c, b in obj["lstm_layers"]),
                head=obj["head"],
                dense=tuple((int(u), str(a)) for u, a in obj.get("dense", [])),
                outputs=int(obj.get("outputs", 1)),
                input_dim=int(obj.get("input_dim", 3)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bad model config: {e}") from e


_NAME_RE = re.compile(
    r"^(?P<stack>[13])bi(?:\((?P<cells>\d+)\))?"
    r"-(?P<head>fs|ga)"
    r"-(?P<dense>d1|d40(?:\((?P<units>\d+)\))?)$")

_STACK_DEFAULTS = {"1": (1, 256), "3": (3, 150)}


def parse_config(name: str, outputs: int = 1) -> ModelConfig:
    """Build a ModelConfig from a compact name like ``1bi(16)-ga-d1``.

    ``1bi`` is one bidirectional layer of 256 cells, ``3bi`` three of 150; a
    parenthesized count overrides the width. ``d1`` means the sigmoid output
    layer only; ``d40`` inserts a 40-unit ReLU dense layer first.
    """
    m = _NAME_RE.match(name.strip())
    if m is None:
        raise DataError(f"cannot parse model config name {name!r}")
    depth, default_cells = _STACK_DEFAULTS[m.group("stack")]
    cells = int(m.group("cells") or default_cells)
    if cells <= 0:
        raise DataError(f"cell count must be positive in {name!r}")
    dense: tuple[tuple[int, str], ...] = ()
    if m.group("dense") != "d1":
        dense = ((int(m.group("units") or 40), "relu"),)
    return ModelConfig(lstm_layers=((cells, True),) * depth,
                       head=m.group("head"), dense=dense, outputs=outputs)


def config_name(cfg: ModelConfig) -> str:
    """Compact name for a config; inverse of parse_config where possible."""
    counts = {c for c, _ in cfg.lstm_layers}
    if (len(cfg.lstm_layers) in (1, 3) and len(counts) == 1
            and all(b for _, b in cfg.lstm_layers)):
        depth = len(cfg.lstm_layers)
        cells = counts.pop()
        default = _STACK_DEFAULTS[str(depth)][1]
        stack = f"{depth}bi" if cells == default else f"{depth}bi({cells})"
    else:
        stack = "+".join(f"{c}{'bi' if b else 'uni'}"
                         for c, b in cfg.lstm_layers)
    if not cfg.dense:
        dense = "d1"
    elif len(cfg.dense) == 1 and cfg.dense[0][1] == "relu":
        units = cfg.dense[0][0]
        dense = "d40" if units == 40 else f"d40({units})"
    else:
        dense = "+".join(f"d{u}" for u, _ in cfg.dense)
    return f"{stack}-{cfg.head}-{dense}"


@dataclass(frozen=True)
class SequenceBatch:
    """Padded sequences with valid lengths and binary targets.

    ``x`` is (batch, max_len, input_dim) float64; positions at or beyond a
    row's length are padding and never influence the model. ``y`` is (batch,)
    or (batch, outputs) with values in {0, 1}.
    """

    x: np.ndarray
    lengths: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.x, dtype=np.float64))
        lengths = np.asarray(self.lengths, dtype=np.int64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim != 3:
            raise DataError(f"batch x must be 3-d, got shape {x.shape}")
        if lengths.shape != (x.shape[0],):
            raise DataError("lengths must have one entry per batch row")
        if x.shape[0] == 0:
            raise DataError("empty batch")
        if lengths.min() < 1:
            raise DataError("zero-length sequence: nothing to pool")
        if lengths.max() > x.shape[1]:
            raise DataError("length exceeds padded width")
        if y.shape[0] != x.shape[0] or y.ndim > 2:
            raise DataError("targets must be (batch,) or (batch, outputs)")
        if y.size and not np.isin(y, (0.0, 1.0)).all():
            raise DataError("targets must be binary")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "y", y)

    @property
    def size(self) -> int:
        return self.x.shape[0]


def make_batch(sequences, labels) -> SequenceBatch:
    """Pad variable-length (len, k) arrays into one SequenceBatch."""
    arrays = [np.asarray(s, dtype=np.float64) for s in sequences]
    if not arrays:
        raise DataError("empty batch")
    lengths = np.array([len(a) for a in arrays], dtype=np.int64)
    width = int(lengths.max())
    x = np.zeros((len(arrays), width, arrays[0].shape[1]))
    for i, a in enumerate(arrays):
        x[i, :len(a)] = a
    return SequenceBatch(x, lengths, np.asarray(labels, dtype=np.float64))


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: ModelConfig,
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    """uniform(+-1/sqrt(fan_in)) weights, zero biases, forget-gate bias +1."""
    def mat(shape):
        k = 1.0 / np.sqrt(shape[0])
        return rng.uniform(-k, k, size=shape)

    params: dict[str, np.ndarray] = {}
    in_dim = cfg.input_dim
    for idx, (cells, bidirectional) in enumerate(cfg.lstm_layers):
        for direction in ("fw", "bw") if bidirectional else ("fw",):
            b = np.zeros(4 * cells)
            b[cells:2 * cells] = 1.0
            params[f"lstm{idx}.{direction}.W"] = mat((in_dim, 4 * cells))
            params[f"lstm{idx}.{direction}.U"] = mat((cells, 4 * cells))
            params[f"lstm{idx}.{direction}.b"] = b
        in_dim = cells * (2 if bidirectional else 1)
    for idx, (units, _) in enumerate(cfg.dense):
        params[f"dense{idx}.W"] = mat((in_dim, units))
        params[f"dense{idx}.b"] = np.zeros(units)
        in_dim = units
    params["out.W"] = mat((in_dim, cfg.outputs))
    params["out.b"] = np.zeros(cfg.outputs)
    return params


# ---------------------------------------------------------------------------
# forward


def lstm_cell_step(x, h_prev, c_prev, W, U, b):
    """One LSTM step; gate blocks in W/U/b are ordered [input|forget|cell|output]."""
    cells = h_prev.shape[-1]
    z = x @ W + h_prev @ U + b
    i = expit(z[..., :cells])
    f = expit(z[..., cells:2 * cells])
    g = np.tanh(z[..., 2 * cells:3 * cells])
    o = expit(z[..., 3 * cells:])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def _mask_of(lengths: np.ndarray, width: int) -> np.ndarray:
    return (np.arange(width)[None, :] < lengths[:, None]).astype(np.float64)


def _reverse_padded(x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Reverse each row's valid prefix; padding becomes zero. Self-inverse."""
    batch, width = x.shape[:2]
    idx = np.clip(lengths[:, None] - 1 - np.arange(width)[None, :],
                  0, width - 1)
    out = x[np.arange(batch)[:, None], idx]
    return out * _mask_of(lengths, width)[:, :, None]


@njit(cache=True)
def _dir_kernel(xw, mask, U, h_seq, i_a, f_a, g_a, o_a, tc_a, hp_a, cp_a,
                want_cache):
    """Masked LSTM recurrence over one direction (compiled hot loop).

    ``xw`` already holds x @ W + b. Hidden and cell states at padded steps
    are multiplied by the 0/1 mask, so they are forced to exact zeros and
    padding can never alter valid positions or later layers.
    """
    batch, width, four = xw.shape
    cells = four // 4
    h = np.zeros((batch, cells))
    c = np.zeros((batch, cells))
    for t in range(width):
        hu = np.dot(h, U)
        for r in range(batch):
            m = mask[r, t]
            for j in range(cells):
                i = 1.0 / (1.0 + np.exp(-(hu[r, j] + xw[r, t, j])))
                f = 1.0 / (1.0 + np.exp(-(hu[r, cells + j]
                                          + xw[r, t, cells + j])))
                g = np.tanh(hu[r, 2 * cells + j] + xw[r, t, 2 * cells + j])
                o = 1.0 / (1.0 + np.exp(-(hu[r, 3 * cells + j]
                                          + xw[r, t, 3 * cells + j])))
                if want_cache:
                    i_a[r, t, j] = i
                    f_a[r, t, j] = f
                    g_a[r, t, j] = g
                    o_a[r, t, j] = o
                    hp_a[r, t, j] = h[r, j]
                    cp_a[r, t, j] = c[r, j]
                cc = (f * c[r, j] + i * g) * m
                tc = np.tanh(cc)
                if want_cache:
                    tc_a[r, t, j] = tc
                c[r, j] = cc
                h[r, j] = o * tc * m
                h_seq[r, t, j] = h[r, j]


def _dir_forward(x, mask, W, U, b, want_cache):
    """Run one direction of one layer; optionally keep the BPTT cache."""
    batch, width, _ = x.shape
    cells = U.shape[0]
    xw = x.reshape(batch * width, -1) @ W
    xw = xw.reshape(batch, width, 4 * cells)
    xw += b
    h_seq = np.empty((batch, width, cells))
    shape = (batch, width, cells) if want_cache else (1, 1, 1)
    gates = [np.empty(shape) for _ in range(7)]
    _dir_kernel(xw, mask, np.ascontiguousarray(U), h_seq, *gates, want_cache)
    if not want_cache:
        return h_seq, None
    i, f, g, o, tc, h_prev, c_prev = gates
    return h_seq, {"i": i, "f": f, "g": g, "o": o, "tc": tc,
                   "h_prev": h_prev, "c_prev": c_prev,
                   "x": x, "mask": mask, "W": W, "U": U}


def _dir_backward(dh_seq, cache):
    """BPTT through one direction; returns (dX, dW, dU, db)."""
    x, mask = cache["x"], cache["mask"]
    W, U = cache["W"], cache["U"]
    batch, width, _ = x.shape
    cells = U.shape[0]
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(4 * cells)
    dx = np.empty_like(x)
    dh = np.zeros((batch, cells))
    dc = np.zeros((batch, cells))
    dz = np.empty((batch, 4 * cells))
    for t in range(width - 1, -1, -1):
        i = cache["i"][:, t]
        f = cache["f"][:, t]
        g = cache["g"][:, t]
        o = cache["o"][:, t]
        tc = cache["tc"][:, t]
        m = mask[:, t:t + 1]
        dh_m = (dh_seq[:, t] + dh) * m
        do = dh_m * tc
        dc_total = dc + dh_m * o * (1.0 - tc * tc)
        dc_m = dc_total * m
        di = dc_m * g
        df = dc_m * cache["c_prev"][:, t]
        dg = dc_m * i
        dc = dc_m * f
        dz[:, :cells] = di * i * (1.0 - i)
        dz[:, cells:2 * cells] = df * f * (1.0 - f)
        dz[:, 2 * cells:3 * cells] = dg * (1.0 - g * g)
        dz[:, 3 * cells:] = do * o * (1.0 - o)
        dW += x[:, t].T @ dz
        dU += cache["h_prev"][:, t].T @ dz
        db += dz.sum(axis=0)
        dh = dz @ U.T
        dx[:, t] = dz @ W.T
    return dx, dW, dU, db


def _stack_forward(cfg, params, batch, want_cache):
    """All LSTM layers; returns (aligned hidden per layer, caches)."""
    nrows, width = batch.x.shape[:2]
    mask = _mask_of(batch.lengths, width)
    # gather indices for prefix reversal, shared by every bidirectional layer
    rows = np.arange(nrows)[:, None]
    rev = np.clip(batch.lengths[:, None] - 1 - np.arange(width)[None, :],
                  0, width - 1)
    mask3 = mask[:, :, None]
    x = batch.x
    hiddens = []
    caches = []
    for idx, (cells, bidirectional) in enumerate(cfg.lstm_layers):
        h_fw, cache_fw = _dir_forward(
            x, mask, params[f"lstm{idx}.fw.W"], params[f"lstm{idx}.fw.U"],
            params[f"lstm{idx}.fw.b"], want_cache)
        if bidirectional:
            x_rev = x[rows, rev] * mask3
            h_bw_rev, cache_bw = _dir_forward(
                x_rev, mask, params[f"lstm{idx}.bw.W"],
                params[f"lstm{idx}.bw.U"], params[f"lstm{idx}.bw.b"],
                want_cache)
            h = np.concatenate([h_fw, h_bw_rev[rows, rev] * mask3], axis=2)
        else:
            cache_bw = None
            h = h_fw
        hiddens.append(h)
        caches.append((cache_fw, cache_bw, cells, bidirectional))
        x = h
    return hiddens, caches


def pool_hidden(h: np.ndarray, lengths: np.ndarray, head: str,
                bidirectional: bool = True) -> np.ndarray:
    """fs: [forward h at last valid step || backward h at first step];
    ga: mean of per-step hidden vectors over valid steps."""
    batch, width, dim = h.shape
    if head == GA:
        mask = _mask_of(lengths, width)
        return (h * mask[:, :, None]).sum(axis=1) / lengths[:, None]
    if head == FS:
        rows = np.arange(batch)
        if not bidirectional:
            return h[rows, lengths - 1]
        half = dim // 2
        return np.concatenate([h[rows, lengths - 1, :half], h[:, 0, half:]],
                              axis=1)
    raise DataError(f"unknown head {head!r}")


def _head_forward(cfg, params, pooled, want_cache):
    a = pooled
    dense_cache = []
    for idx, (units, act) in enumerate(cfg.dense):
        z = a @ params[f"dense{idx}.W"] + params[f"dense{idx}.b"]
        if want_cache:
            dense_cache.append((a, z))
        a = np.maximum(z, 0.0) if act == "relu" else z
    logits = a @ params["out.W"] + params["out.b"]
    if want_cache:
        dense_cache.append((a, logits))
    return logits, dense_cache


def forward(cfg: ModelConfig, params: dict, batch: SequenceBatch):
    """Probabilities (batch, outputs) and aligned hidden sequences per layer."""
    hiddens, _ = _stack_forward(cfg, params, batch, want_cache=False)
    pooled = pool_hidden(hiddens[-1], batch.lengths, cfg.head,
                         cfg.lstm_layers[-1][1])
    logits, _ = _head_forward(cfg, params, pooled, want_cache=False)
    return expit(logits), hiddens


def _targets(cfg: ModelConfig, batch: SequenceBatch) -> np.ndarray:
    y = batch.y.reshape(batch.size, -1)
    if y.shape[1] != cfg.outputs:
        raise DataError(
            f"targets have {y.shape[1]} columns, model has {cfg.outputs}")
    return y


def model_loss(cfg: ModelConfig, params: dict, batch: SequenceBatch) -> float:
    """Mean BCE of the model on a batch, computed stably from logits."""
    hiddens, _ = _stack_forward(cfg, params, batch, want_cache=False)
    pooled = pool_hidden(hiddens[-1], batch.lengths, cfg.head,
                         cfg.lstm_layers[-1][1])
    logits, _ = _head_forward(cfg, params, pooled, want_cache=False)
    y = _targets(cfg, batch)
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def loss_and_gradients(cfg: ModelConfig, params: dict, batch: SequenceBatch):
    """(loss, probabilities, gradients of mean BCE w.r.t. every parameter)."""
    hiddens, caches = _stack_forward(cfg, params, batch, want_cache=True)
    last_bi = cfg.lstm_layers[-1][1]
    pooled = pool_hidden(hiddens[-1], batch.lengths, cfg.head, last_bi)
    logits, dense_cache = _head_forward(cfg, params, pooled, want_cache=True)
    y = _targets(cfg, batch)
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    probs = expit(logits)

    grads: dict[str, np.ndarray] = {}
    dlogits = (probs - y) / y.size
    a_out, _ = dense_cache[-1]
    grads["out.W"] = a_out.T @ dlogits
    grads["out.b"] = dlogits.sum(axis=0)
    da = dlogits @ params["out.W"].T
    for idx in range(len(cfg.dense) - 1, -1, -1):
        a_in, z = dense_cache[idx]
        if cfg.dense[idx][1] == "relu":
            da = da * (z > 0.0)
        grads[f"dense{idx}.W"] = a_in.T @ da
        grads[f"dense{idx}.b"] = da.sum(axis=0)
        da = da @ params[f"dense{idx}.W"].T

    # route the pooled-vector gradient back onto the hidden sequence
    batch_n, width = batch.x.shape[0], batch.x.shape[1]
    dh = np.zeros_like(hiddens[-1])
    rows = np.arange(batch_n)
    if cfg.head == GA:
        mask = _mask_of(batch.lengths, width)
        dh += (da[:, None, :] / batch.lengths[:, None, None]) * mask[:, :, None]
    else:
        if last_bi:
            half = dh.shape[2] // 2
            dh[rows, batch.lengths - 1, :half] = da[:, :half]
            dh[:, 0, half:] = da[:, half:]
        else:
            dh[rows, batch.lengths - 1] = da

    for idx in range(len(cfg.lstm_layers) - 1, -1, -1):
        cache_fw, cache_bw, cells, bidirectional = caches[idx]
        if bidirectional:
            dx_fw, dWf, dUf, dbf = _dir_backward(dh[:, :, :cells], cache_fw)
            dh_bw_rev = _reverse_padded(dh[:, :, cells:], batch.lengths)
            dx_rev, dWb, dUb, dbb = _dir_backward(dh_bw_rev, cache_bw)
            dx = dx_fw + _reverse_padded(dx_rev, batch.lengths)
            grads[f"lstm{idx}.bw.W"] = dWb
            grads[f"lstm{idx}.bw.U"] = dUb
            grads[f"lstm{idx}.bw.b"] = dbb
        else:
            dx, dWf, dUf, dbf = _dir_backward(dh, cache_fw)
        grads[f"lstm{idx}.fw.W"] = dWf
        grads[f"lstm{idx}.fw.U"] = dUf
        grads[f"lstm{idx}.fw.b"] = dbf
        dh = dx
    return loss, probs, grads


def backward(cfg: ModelConfig, params: dict, batch: SequenceBatch) -> dict:
    """Exact gradients of the mean BCE w.r.t. every parameter."""
    return loss_and_gradients(cfg, params, batch)[2]


# ---------------------------------------------------------------------------
# metrics


def bce_loss(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean binary cross-entropy; probabilities clamped 1e-7 from 0 and 1."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-7, 1.0 - 1e-7)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise DataError(f"shape mismatch: probs {p.shape} vs targets {y.shape}")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def balanced_accuracy(probs: np.ndarray, targets: np.ndarray) -> float:
    """(TPR + TNR) / 2 at threshold 0.5; requires both classes present."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise DataError(f"shape mismatch: probs {p.shape} vs targets {y.shape}")
    pos = y == 1.0
    neg = y == 0.0
    if not pos.any() or not neg.any():
        raise DataError("balanced accuracy undefined: a class is absent")
    pred = p >= 0.5
    tpr = float(pred[pos].sum()) / float(pos.sum())
    tnr = float((~pred[neg]).sum()) / float(neg.sum())
    return (tpr + tnr) / 2.0


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(cfg: ModelConfig, params: dict,
                            batch: SequenceBatch, step: float = 1e-5) -> float:
    """Max relative error between BPTT and central finite differences.

    The error scale is max(|analytic|, |numeric|, 1e-3) so near-zero
    gradients are compared absolutely rather than amplifying FD noise.
    """
    _, _, grads = loss_and_gradients(cfg, params, batch)
    worst = 0.0
    for name, grad in grads.items():
        flat = params[name].ravel()
        gflat = grad.ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            hi = model_loss(cfg, params, batch)
            flat[k] = orig - step
            lo = model_loss(cfg, params, batch)
            flat[k] = orig
            fd = (hi - lo) / (2.0 * step)
            err = abs(gflat[k] - fd) / max(abs(gflat[k]), abs(fd), 1e-3)
            worst = max(worst, err)
    return worst


GRADCHECK_CONFIGS = ("1bi-fs-d1", "1bi-ga-d1", "1bi-ga-d40",
                     "3bi-ga-d1", "3bi-ga-d40")


def gradient_check_suite(cells: int = 8, batches: int = 4, seed: int = 0,
                         step: float = 1e-5, batch_rows: int = 4,
                         max_len: int = 6) -> list[tuple[str, float]]:
    """Finite-difference check every reference config at reduced width.

    Returns (config name, max relative error over `batches` seeded random
    batches) per config. ReLU kinks need care: a preactivation within the
    finite-difference step of zero makes the central difference straddle
    the kink and measure nothing about the gradient. Dense biases are
    therefore jittered away from zero (a generic parameter point), and any
    batch still landing near a kink is redrawn deterministically by
    advancing the shared generator.
    """
    rng = np.random.default_rng(seed)
    results = []
    for name in GRADCHECK_CONFIGS:
        base = parse_config(name)
        cfg = ModelConfig(
            lstm_layers=tuple((cells, bi) for _, bi in base.lstm_layers),
            head=base.head, dense=base.dense)
        params = init_params(cfg, rng)
        for idx in range(len(cfg.dense)):
            b = params[f"dense{idx}.b"]
            params[f"dense{idx}.b"] = b + rng.uniform(-0.1, 0.1, b.shape)
        worst = 0.0
        done = attempts = 0
        while done < batches:
            seqs = [rng.normal(size=(int(rng.integers(2, max_len + 1)), 3))
                    for _ in range(batch_rows)]
            y = rng.integers(0, 2, size=batch_rows).astype(float)
            batch = make_batch(seqs, y)
            attempts += 1
            if relu_margin(cfg, params, batch) < 10.0 * step:
                if attempts > batches + 20:
                    raise NumericError(f"{name}: cannot draw a batch clear "
                                       f"of the ReLU kink")
                continue
            worst = max(worst, finite_difference_check(cfg, params, batch,
                                                       step))
            done += 1
        results.append((name, worst))
    return results


def relu_margin(cfg: ModelConfig, params: dict, batch: SequenceBatch) -> float:
    """Smallest |preactivation| across ReLU units (inf if none).

    Finite differences straddle the ReLU kink when a preactivation sits
    within the FD step of zero; callers can skip such (params, batch) draws.
    """
    if not any(act == "relu" for _, act in cfg.dense):
        return np.inf
    hiddens, _ = _stack_forward(cfg, params, batch, want_cache=False)
    pooled = pool_hidden(hiddens[-1], batch.lengths, cfg.head,
                         cfg.lstm_layers[-1][1])
    margin = np.inf
    a = pooled
    for idx, (units, act) in enumerate(cfg.dense):
        z = a @ params[f"dense{idx}.W"] + params[f"dense{idx}.b"]
        if act == "relu":
            margin = min(margin, float(np.abs(z).min()))
            a = np.maximum(z, 0.0)
        else:
            a = z
    return margin


# ---------------------------------------------------------------------------
# optimizer


def init_adam_state(params: dict) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict:
    """One Adam update (in place): p -= lr * m_hat / (sqrt(v_hat) + eps)."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


def clip_gradients(grads: dict, max_norm: float = 5.0) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, cfg: ModelConfig, params: dict,
                    optimizer_state: dict | None = None,
                    attributes: list[str] | None = None) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in params.items()},
    }
    if optimizer_state is not None:
        doc["optimizer_state"] = {
            "t": optimizer_state["t"],
            "m": {k: v.ravel().tolist()
                  for k, v in optimizer_state["m"].items()},
            "v": {k: v.ravel().tolist()
                  for k, v in optimizer_state["v"].items()},
        }
    if attributes is not None:
        doc["attributes"] = list(attributes)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_checkpoint(path):
    """(config, params, extras) from a JSON checkpoint; params must be finite."""
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(
            f"unsupported checkpoint version {doc.get('format_version')!r}")
    cfg = ModelConfig.from_dict(doc["config"])
    params = {}
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64)
        arr = arr.reshape(entry["shape"])
        if not np.isfinite(arr).all():
            raise NumericError(f"checkpoint parameter {name} is not finite")
        params[name] = arr
    extras = {"attributes": doc.get("attributes")}
    if "optimizer_state" in doc:
        st = doc["optimizer_state"]
        extras["optimizer_state"] = {
            "t": int(st["t"]),
            "m": {k: np.asarray(v).reshape(params[k].shape)
                  for k, v in st["m"].items()},
            "v": {k: np.asarray(v).reshape(params[k].shape)
                  for k, v in st["v"].items()},
        }
    return cfg, params, extras
