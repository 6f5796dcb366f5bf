"""Minimal differentiable predictors with flat parameter vectors.

Networks are stacks of simple layers (patchwise dense trunks, dense layers,
fixed activations and bounded point heads) operating on numpy arrays.  All
parameters live in one flat, contiguous vector so optimizers and checkpoints
treat a predictor as a single array.  Forward and reverse passes are pure
functions of (parameters, input).

Layer vocabulary (JSON-serializable specs):

* ``["patches", p, f]`` - split an (B, S, S) image into non-overlapping
  p x p patches and apply a shared dense map to f features per patch.
* ``["dense", n_in, n_out]`` - affine layer on (B, n_in).
* ``["relu"]`` / ``["tanh"]`` - elementwise activations.
* ``["flatten"]`` - collapse trailing dimensions.
* ``["mean_pool"]`` - average over the patch axis of (B, N, F).
* ``["point_head", n, lo, hi]`` - sigmoid head mapping (B, 2n) to n 2D
  points with coordinates bounded to [lo, hi].
* ``["offset_head", side, pitch, reach]`` - sigmoid head mapping
  (B, 2*side^2) to side^2 2D points anchored on a regular grid with spacing
  ``pitch``; each point may move at most ``reach`` from its anchor.  The
  anchoring keeps predicted clouds spread out, which keeps minimal-set fits
  well conditioned.

Checkpoints are little-endian binary files: magic ``ESCK``, a format version,
the JSON layer spec, then the raw float32 parameter vector (see FORMATS.md).
"""

from __future__ import annotations

import json
import struct

import numpy as np
from scipy.special import expit

CHECKPOINT_MAGIC = b"ESCK"
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    """Input or gradient shape does not match the predictor specification."""


class CheckpointMismatch(ValueError):
    """Checkpoint header does not match the expected layer specification."""


def _param_shapes(layer):
    op = layer[0]
    if op == "patches":
        _, p, f = layer
        return [(p * p, f), (f,)]
    if op == "dense":
        _, n_in, n_out = layer
        return [(n_in, n_out), (n_out,)]
    return []


def _grid_anchors(side: int, pitch: float) -> np.ndarray:
    """Row-major (x, y) centers of a side x side grid with the given spacing."""
    idx = np.arange(side, dtype=np.float64)
    gx, gy = np.meshgrid((idx + 0.5) * pitch, (idx + 0.5) * pitch)
    return np.column_stack([gx.ravel(), gy.ravel()])


class Predictor:
    """A fixed-architecture network over one flat parameter vector."""

    def __init__(self, layers, seed=None, dtype=np.float32):
        self.layers = [list(l) for l in layers]
        self.dtype = np.dtype(dtype)
        self._shapes = [_param_shapes(l) for l in self.layers]
        self._sizes = [sum(int(np.prod(s)) for s in shapes)
                       for shapes in self._shapes]
        self.n_params = int(sum(self._sizes))
        self.params = np.zeros(self.n_params, dtype=self.dtype)
        if seed is not None:
            self.init_params(np.random.default_rng(seed))

    def init_params(self, rng: np.random.Generator):
        """Fan-in scaled uniform weights, zero biases."""
        out = np.zeros(self.n_params, dtype=np.float64)
        off = 0
        for shapes in self._shapes:
            for i, shape in enumerate(shapes):
                size = int(np.prod(shape))
                if i == 0 and len(shape) == 2:      # weight matrix
                    bound = 1.0 / np.sqrt(shape[0])
                    out[off:off + size] = rng.uniform(-bound, bound, size)
                off += size
        self.params = out.astype(self.dtype)
        return self

    def _layer_params(self, params, index):
        off = int(sum(self._sizes[:index]))
        views = []
        for shape in self._shapes[index]:
            size = int(np.prod(shape))
            views.append(params[off:off + size].reshape(shape))
            off += size
        return views

    def clone(self, dtype=None) -> "Predictor":
        other = Predictor(self.layers, dtype=dtype or self.dtype)
        other.params = self.params.astype(other.dtype).copy()
        return other

    # -- forward ------------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.trace(x)
        return y

    def trace(self, x: np.ndarray):
        """Forward pass keeping the per-layer activations needed by backward."""
        x = np.asarray(x, dtype=self.dtype)
        squeeze = False
        if self.layers and self.layers[0][0] == "patches" and x.ndim == 2:
            x = x[None, ...]
            squeeze = True
        elif self.layers and self.layers[0][0] == "dense" and x.ndim == 1:
            x = x[None, ...]
            squeeze = True
        caches = []
        for i, layer in enumerate(self.layers):
            op = layer[0]
            if op == "patches":
                _, p, f = layer
                if x.ndim != 3 or x.shape[1] % p or x.shape[2] % p:
                    raise ShapeMismatch(f"patches({p}) cannot tile input {x.shape}")
                B, S1, S2 = x.shape
                g1, g2 = S1 // p, S2 // p
                xp = x.reshape(B, g1, p, g2, p).transpose(0, 1, 3, 2, 4)
                xp = xp.reshape(B, g1 * g2, p * p)
                W, b = self._layer_params(self.params, i)
                caches.append((xp, (B, S1, S2)))
                x = xp @ W + b
            elif op == "dense":
                _, n_in, n_out = layer
                if x.ndim != 2 or x.shape[1] != n_in:
                    raise ShapeMismatch(f"dense expects (B, {n_in}), got {x.shape}")
                W, b = self._layer_params(self.params, i)
                caches.append(x)
                x = x @ W + b
            elif op == "relu":
                caches.append(x > 0)
                x = np.maximum(x, 0)
            elif op == "tanh":
                x = np.tanh(x)
                caches.append(x)
            elif op == "flatten":
                caches.append(x.shape)
                x = x.reshape(x.shape[0], -1)
            elif op == "mean_pool":
                if x.ndim != 3:
                    raise ShapeMismatch("mean_pool expects (B, N, F)")
                caches.append(x.shape)
                x = x.mean(axis=1)
            elif op == "point_head":
                _, n, lo, hi = layer
                if x.ndim != 2 or x.shape[1] != 2 * n:
                    raise ShapeMismatch(f"point_head expects (B, {2 * n})")
                s = expit(x)
                caches.append(s)
                x = (lo + (hi - lo) * s).reshape(x.shape[0], n, 2)
            elif op == "offset_head":
                _, side, pitch, reach = layer
                n = side * side
                if x.ndim != 2 or x.shape[1] != 2 * n:
                    raise ShapeMismatch(f"offset_head expects (B, {2 * n})")
                s = expit(x)
                caches.append(s)
                anchors = _grid_anchors(side, pitch)
                pts = (reach * (2.0 * s - 1.0)).reshape(x.shape[0], n, 2)
                x = (pts + anchors[None, :, :]).astype(s.dtype)
            else:
                raise ValueError(f"unknown layer {op!r}")
        if squeeze:
            x = x[0]
        return x, (caches, squeeze)

    # -- reverse ------------------------------------------------------------

    def backward(self, x: np.ndarray, output_gradient: np.ndarray) -> np.ndarray:
        """Parameter gradient of ``sum(output * output_gradient)``."""
        _, trace = self.trace(x)
        return self.backward_from_trace(trace, output_gradient)

    def backward_from_trace(self, trace, output_gradient) -> np.ndarray:
        caches, squeeze = trace
        g = np.asarray(output_gradient, dtype=self.dtype)
        if squeeze:
            g = g[None, ...]
        grad = np.zeros(self.n_params, dtype=self.dtype)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            op = layer[0]
            cache = caches[i]
            if op == "patches":
                xp, (B, S1, S2) = cache
                W, _ = self._layer_params(self.params, i)
                gW = np.einsum("bnp,bnf->pf", xp, g)
                gb = g.sum(axis=(0, 1))
                gx = g @ W.T
                _, p, _ = layer
                g1, g2 = S1 // p, S2 // p
                gx = gx.reshape(B, g1, g2, p, p).transpose(0, 1, 3, 2, 4)
                g = gx.reshape(B, S1, S2)
                self._write_grad(grad, i, [gW, gb])
            elif op == "dense":
                xin = cache
                W, _ = self._layer_params(self.params, i)
                gW = xin.T @ g
                gb = g.sum(axis=0)
                g = g @ W.T
                self._write_grad(grad, i, [gW, gb])
            elif op == "relu":
                g = g * cache
            elif op == "tanh":
                g = g * (1.0 - cache ** 2)
            elif op == "flatten":
                g = g.reshape(cache)
            elif op == "mean_pool":
                B, N, F = cache
                g = np.broadcast_to(g[:, None, :] / N, (B, N, F)).astype(g.dtype)
            elif op == "point_head":
                _, n, lo, hi = layer
                s = cache
                if g.shape[-2:] != (n, 2):
                    raise ShapeMismatch("point_head gradient shape mismatch")
                g = g.reshape(g.shape[0], 2 * n) * (hi - lo) * s * (1.0 - s)
            elif op == "offset_head":
                _, side, pitch, reach = layer
                n = side * side
                s = cache
                if g.shape[-2:] != (n, 2):
                    raise ShapeMismatch("offset_head gradient shape mismatch")
                g = g.reshape(g.shape[0], 2 * n) * (2.0 * reach) * s * (1.0 - s)
        return grad

    def _write_grad(self, grad, index, pieces):
        off = int(sum(self._sizes[:index]))
        for piece, shape in zip(pieces, self._shapes[index]):
            size = int(np.prod(shape))
            grad[off:off + size] += piece.astype(self.dtype).ravel()
            off += size


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment accumulators and the step counter."""

    def __init__(self, n_params: int, dtype=np.float32):
        self.m = np.zeros(n_params, dtype=dtype)
        self.v = np.zeros(n_params, dtype=dtype)
        self.t = 0


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected adaptive moment update; returns the new parameters."""
    if params.shape != grads.shape:
        raise ShapeMismatch("parameter/gradient shape mismatch")
    g = grads.astype(state.m.dtype)
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    return (params - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(params.dtype)


# ---------------------------------------------------------------------------
# classification loss
# ---------------------------------------------------------------------------


def nll_gating_loss(logits: np.ndarray, true_class: int):
    """Negative log softmax likelihood; gradient is softmax minus one-hot."""
    z = np.asarray(logits, dtype=float)
    z = z - z.max()
    logsumexp = np.log(np.sum(np.exp(z)))
    loss = logsumexp - z[true_class]
    grad = np.exp(z - logsumexp)
    grad[true_class] -= 1.0
    return float(loss), grad


def nll_gating_loss_batch(logits: np.ndarray, true_classes: np.ndarray):
    """Mean NLL over a batch of logit rows; gradient has the same shape."""
    z = np.asarray(logits, dtype=float)
    t = np.asarray(true_classes, dtype=int)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    losses = lse[:, 0] - z[np.arange(len(t)), t]
    grad = np.exp(z - lse)
    grad[np.arange(len(t)), t] -= 1.0
    return float(losses.mean()), grad / len(t)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, predictor: Predictor) -> None:
    spec = json.dumps(predictor.layers, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(predictor.params, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(spec)))
        fh.write(spec)
        fh.write(struct.pack("<Q", predictor.n_params))
        fh.write(payload)


def load_checkpoint(path, expected_layers=None) -> Predictor:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointMismatch(f"{path}: not a predictor checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointMismatch(f"{path}: unsupported version {version}")
        (spec_len,) = struct.unpack("<I", fh.read(4))
        layers = json.loads(fh.read(spec_len).decode("utf-8"))
        (count,) = struct.unpack("<Q", fh.read(8))
        raw = fh.read(count * 4)
    if expected_layers is not None and [list(l) for l in expected_layers] != layers:
        raise CheckpointMismatch(f"{path}: layer specification mismatch")
    pred = Predictor(layers, dtype=np.float32)
    if count != pred.n_params:
        raise CheckpointMismatch(f"{path}: parameter count mismatch")
    pred.params = np.frombuffer(raw, dtype="<f4").astype(np.float32).copy()
    return pred
