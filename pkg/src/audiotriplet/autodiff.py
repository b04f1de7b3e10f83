"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

A Tape records one forward computation as an append-only list of nodes.
``backward`` sweeps the tape in reverse and accumulates gradients into every
reachable node; parameters that do not influence the loss receive an exact
zero gradient. ``replay`` re-executes the recorded graph against the current
leaf values, which is what ``gradcheck`` uses to compare analytic gradients
with central finite differences.

All arithmetic is float64 internally. Every op output is checked for
finiteness; a non-finite result raises DivergenceError immediately instead of
propagating NaNs into an optimiser.

Ops are deliberately few: 2-D convolution with same padding (stride 1 or 2),
dense affine maps, relu (the hinge used by the triplet loss is the same
function), elementwise add/sub/mul, scalar shifts and scales, global average
pooling, 2x2 max pooling, row-wise L2 normalisation, the pairwise squared
Euclidean distance matrix, flat-index gather, full reductions, and a fused
softmax cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import ContractError, DivergenceError, ShapeError

Forward = Callable[..., tuple[np.ndarray, Any]]
Backward = Callable[[dict, Any, np.ndarray, np.ndarray, list[np.ndarray]], list[np.ndarray]]

_FORWARD: dict[str, Forward] = {}
_BACKWARD: dict[str, Backward] = {}


def _register(name: str, forward: Forward, backward: Backward) -> None:
    _FORWARD[name] = forward
    _BACKWARD[name] = backward


def _require(cond: bool, op: str, message: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {message}")


# ---------------------------------------------------------------------------
# op kernels


def _conv2d_fw(attrs: dict, x: np.ndarray, w: np.ndarray, b: np.ndarray):
    stride = attrs["stride"]
    _require(x.ndim == 4, "conv2d", f"input must be (N, C, H, W), got {x.shape}")
    _require(w.ndim == 4, "conv2d", f"weight must be (Cout, Cin, kh, kw), got {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    _require(cin_w == cin, "conv2d", f"weight expects {cin_w} input channels, input has {cin}")
    _require(b.shape == (cout,), "conv2d", f"bias must be ({cout},), got {b.shape}")
    _require(stride in (1, 2), "conv2d", f"stride must be 1 or 2, got {stride}")

    oh = -(-h // stride)
    ow = -(-wd // stride)
    pad_h = max((oh - 1) * stride + kh - h, 0)
    pad_w = max((ow - 1) * stride + kw - wd, 0)
    pt, pl = pad_h // 2, pad_w // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pad_h - pt), (pl, pad_w - pl)))

    acc = np.zeros((n, oh, ow, cout))
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride]
            acc += np.tensordot(sl, w[:, :, u, v], axes=([1], [1]))
    out = acc.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return out, (xp, pt, pl, oh, ow)


def _conv2d_bw(attrs, saved, value, grad, inputs):
    x, w, _b = inputs
    stride = attrs["stride"]
    xp, pt, pl, oh, ow = saved
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape

    gt = grad.transpose(0, 2, 3, 1)  # (N, OH, OW, Cout)
    gb = grad.sum(axis=(0, 2, 3))
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride]
            gw[:, :, u, v] = np.tensordot(gt, sl, axes=([0, 1, 2], [0, 2, 3]))
            contrib = np.tensordot(gt, w[:, :, u, v], axes=([3], [0]))
            gxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += contrib.transpose(0, 3, 1, 2)
    gx = gxp[:, :, pt : pt + h, pl : pl + wd]
    return [gx, gw, gb]


def _dense_fw(attrs, x, w, b):
    _require(x.ndim == 2, "dense", f"input must be (N, Din), got {x.shape}")
    _require(w.ndim == 2 and x.shape[1] == w.shape[0], "dense",
             f"weight {w.shape} incompatible with input {x.shape}")
    _require(b.shape == (w.shape[1],), "dense", f"bias must be ({w.shape[1]},), got {b.shape}")
    return x @ w + b, None


def _dense_bw(attrs, saved, value, grad, inputs):
    x, w, _b = inputs
    return [grad @ w.T, x.T @ grad, grad.sum(axis=0)]


def _relu_fw(attrs, x):
    return np.maximum(x, 0.0), x > 0.0


def _relu_bw(attrs, saved, value, grad, inputs):
    # Subgradient at exactly zero is taken to be zero.
    return [grad * saved]


def _add_fw(attrs, x, y):
    _require(x.shape == y.shape, "add", f"shape mismatch {x.shape} vs {y.shape}")
    return x + y, None


def _add_bw(attrs, saved, value, grad, inputs):
    return [grad, grad]


def _sub_fw(attrs, x, y):
    _require(x.shape == y.shape, "sub", f"shape mismatch {x.shape} vs {y.shape}")
    return x - y, None


def _sub_bw(attrs, saved, value, grad, inputs):
    return [grad, -grad]


def _mul_fw(attrs, x, y):
    _require(x.shape == y.shape, "mul", f"shape mismatch {x.shape} vs {y.shape}")
    return x * y, None


def _mul_bw(attrs, saved, value, grad, inputs):
    x, y = inputs
    return [grad * y, grad * x]


def _add_scalar_fw(attrs, x):
    return x + attrs["scalar"], None


def _add_scalar_bw(attrs, saved, value, grad, inputs):
    return [grad]


def _mul_scalar_fw(attrs, x):
    return x * attrs["scalar"], None


def _mul_scalar_bw(attrs, saved, value, grad, inputs):
    return [grad * attrs["scalar"]]


def _gap_fw(attrs, x):
    _require(x.ndim == 4, "global_avg_pool2d", f"input must be (N, C, H, W), got {x.shape}")
    return x.mean(axis=(2, 3)), None


def _gap_bw(attrs, saved, value, grad, inputs):
    x = inputs[0]
    _, _, h, w = x.shape
    return [np.broadcast_to(grad[:, :, None, None], x.shape) / (h * w)]


def _maxpool_fw(attrs, x):
    _require(x.ndim == 4, "max_pool2d", f"input must be (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    _require(h % 2 == 0 and w % 2 == 0, "max_pool2d", f"spatial dims must be even, got {h}x{w}")
    r = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = r.argmax(axis=-1)  # ties resolved to the first (lowest) position
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_bw(attrs, saved, value, grad, inputs):
    x = inputs[0]
    n, c, h, w = x.shape
    gr = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(gr, saved[..., None], grad[..., None], axis=-1)
    gx = gr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return [gx]


def _l2norm_fw(attrs, x):
    _require(x.ndim == 2, "l2_normalize", f"input must be (N, D), got {x.shape}")
    eps = attrs["eps"]
    inv = 1.0 / np.sqrt((x * x).sum(axis=1, keepdims=True) + eps)
    return x * inv, inv


def _l2norm_bw(attrs, saved, value, grad, inputs):
    x = inputs[0]
    inv = saved
    dot = (grad * x).sum(axis=1, keepdims=True)
    return [grad * inv - x * dot * inv**3]


def _pairwise_sqdist_fw(attrs, x):
    _require(x.ndim == 2, "pairwise_sqdist", f"input must be (N, D), got {x.shape}")
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    d = 0.5 * (d + d.T)  # exact symmetry against BLAS rounding
    d = np.maximum(d, 0.0)
    np.fill_diagonal(d, 0.0)
    return d, d > 0.0


def _pairwise_sqdist_bw(attrs, saved, value, grad, inputs):
    x = inputs[0]
    g = grad * saved  # clamped / diagonal entries carry no gradient
    s = g + g.T
    return [2.0 * (s.sum(axis=1)[:, None] * x - s @ x)]


def _take_fw(attrs, x):
    idx = attrs["indices"]
    return x.reshape(-1)[idx].copy(), None


def _take_bw(attrs, saved, value, grad, inputs):
    x = inputs[0]
    gx = np.zeros(x.size)
    np.add.at(gx, attrs["indices"], grad)
    return [gx.reshape(x.shape)]


def _mean_all_fw(attrs, x):
    return np.asarray(x.mean()), None


def _mean_all_bw(attrs, saved, value, grad, inputs):
    x = inputs[0]
    return [np.full(x.shape, float(grad) / x.size)]


def _sum_all_fw(attrs, x):
    return np.asarray(x.sum()), None


def _sum_all_bw(attrs, saved, value, grad, inputs):
    return [np.full(inputs[0].shape, float(grad))]


def _softmax_xent_fw(attrs, logits):
    labels = attrs["labels"]
    _require(logits.ndim == 2, "softmax_xent", f"logits must be (N, K), got {logits.shape}")
    _require(len(labels) == logits.shape[0], "softmax_xent",
             f"{len(labels)} labels for {logits.shape[0]} rows")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    nll = np.log(ez.sum(axis=1)) - z[np.arange(len(labels)), labels]
    return np.asarray(nll.mean()), p


def _softmax_xent_bw(attrs, saved, value, grad, inputs):
    labels = attrs["labels"]
    p = saved.copy()
    p[np.arange(len(labels)), labels] -= 1.0
    return [p * (float(grad) / len(labels))]


_register("conv2d", _conv2d_fw, _conv2d_bw)
_register("dense", _dense_fw, _dense_bw)
_register("relu", _relu_fw, _relu_bw)
_register("hinge", _relu_fw, _relu_bw)  # same kernel; kept as a named op for loss graphs
_register("add", _add_fw, _add_bw)
_register("sub", _sub_fw, _sub_bw)
_register("mul", _mul_fw, _mul_bw)
_register("add_scalar", _add_scalar_fw, _add_scalar_bw)
_register("mul_scalar", _mul_scalar_fw, _mul_scalar_bw)
_register("global_avg_pool2d", _gap_fw, _gap_bw)
_register("max_pool2d", _maxpool_fw, _maxpool_bw)
_register("l2_normalize", _l2norm_fw, _l2norm_bw)
_register("pairwise_sqdist", _pairwise_sqdist_fw, _pairwise_sqdist_bw)
_register("take", _take_fw, _take_bw)
_register("mean_all", _mean_all_fw, _mean_all_bw)
_register("sum_all", _sum_all_fw, _sum_all_bw)
_register("softmax_xent", _softmax_xent_fw, _softmax_xent_bw)

OP_NAMES = tuple(sorted(_FORWARD))


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    saved: Any = None
    grad: np.ndarray | None = None


class Tape:
    """Records a forward computation and differentiates it in reverse."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.param_ids: list[int] = []

    # -- leaves ------------------------------------------------------------

    def leaf(self, value: np.ndarray) -> int:
        """Add a constant input node. The array is used as-is (float64)."""
        arr = np.ascontiguousarray(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), arr))
        return len(self.nodes) - 1

    def parameter(self, value: np.ndarray) -> int:
        """Add a trainable leaf; gradcheck and backward target these nodes."""
        nid = self.leaf(value)
        self.param_ids.append(nid)
        return nid

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def grad(self, nid: int) -> np.ndarray | None:
        return self.nodes[nid].grad

    # -- op construction ----------------------------------------------------

    def _push(self, op: str, inputs: tuple[int, ...], attrs: dict) -> int:
        vals = [self.nodes[i].value for i in inputs]
        value, saved = _FORWARD[op](attrs, *vals)
        if not np.all(np.isfinite(value)):
            raise DivergenceError(f"non-finite values in output of op '{op}'")
        self.nodes.append(Node(op, inputs, value, attrs, saved))
        return len(self.nodes) - 1

    def conv2d(self, x: int, w: int, b: int, stride: int = 1) -> int:
        return self._push("conv2d", (x, w, b), {"stride": stride})

    def dense(self, x: int, w: int, b: int) -> int:
        return self._push("dense", (x, w, b), {})

    def relu(self, x: int) -> int:
        return self._push("relu", (x,), {})

    def hinge(self, x: int) -> int:
        """max(x, 0); subgradient at 0 is 0. Used as the triplet hinge."""
        return self._push("hinge", (x,), {})

    def add(self, x: int, y: int) -> int:
        return self._push("add", (x, y), {})

    def sub(self, x: int, y: int) -> int:
        return self._push("sub", (x, y), {})

    def mul(self, x: int, y: int) -> int:
        return self._push("mul", (x, y), {})

    def add_scalar(self, x: int, scalar: float) -> int:
        return self._push("add_scalar", (x,), {"scalar": float(scalar)})

    def mul_scalar(self, x: int, scalar: float) -> int:
        return self._push("mul_scalar", (x,), {"scalar": float(scalar)})

    def global_avg_pool2d(self, x: int) -> int:
        return self._push("global_avg_pool2d", (x,), {})

    def max_pool2d(self, x: int) -> int:
        return self._push("max_pool2d", (x,), {})

    def l2_normalize(self, x: int, eps: float = 1e-12) -> int:
        return self._push("l2_normalize", (x,), {"eps": float(eps)})

    def pairwise_sqdist(self, x: int) -> int:
        return self._push("pairwise_sqdist", (x,), {})

    def take(self, x: int, indices) -> int:
        idx = np.asarray(indices, dtype=np.intp)
        size = self.nodes[x].value.size
        if idx.size and (idx.min() < 0 or idx.max() >= size):
            raise ShapeError(f"take: indices out of range for input of size {size}")
        return self._push("take", (x,), {"indices": idx})

    def mean_all(self, x: int) -> int:
        return self._push("mean_all", (x,), {})

    def sum_all(self, x: int) -> int:
        return self._push("sum_all", (x,), {})

    def softmax_xent(self, logits: int, labels) -> int:
        labels = np.asarray(labels, dtype=np.intp)
        return self._push("softmax_xent", (logits,), {"labels": labels})

    # -- execution ------------------------------------------------------------

    def replay(self) -> None:
        """Re-run every recorded op against the current leaf values."""
        for node in self.nodes:
            if node.op == "leaf":
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            node.value, node.saved = _FORWARD[node.op](node.attrs, *vals)

    def backward(self, loss_id: int) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(node) for every node; return parameter grads.

        The loss must be scalar. Parameters that the loss does not depend on
        get an exact zero gradient of matching shape.
        """
        loss = self.nodes[loss_id]
        if loss.value.shape != ():
            raise ContractError(f"backward: loss must be scalar, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones(())
        for nid in range(loss_id, -1, -1):
            node = self.nodes[nid]
            if node.grad is None or node.op == "leaf":
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            grads = _BACKWARD[node.op](node.attrs, node.saved, node.value, node.grad, vals)
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise DivergenceError(f"non-finite gradient in backward of op '{node.op}'")
            for iid, g in zip(node.inputs, grads):
                tgt = self.nodes[iid]
                tgt.grad = g if tgt.grad is None else tgt.grad + g
        out = {}
        for pid in self.param_ids:
            g = self.nodes[pid].grad
            out[pid] = np.zeros_like(self.nodes[pid].value) if g is None else g
        return out


def gradcheck(builder: Callable[[Tape, np.random.Generator], int], seed: int,
              step: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    ``builder`` receives a fresh tape and a seeded generator, constructs a
    graph, and returns the id of a scalar loss node. Every element of every
    parameter node is perturbed by ±step and the tape replayed. Returns the
    worst relative error, where the error is normalised by
    max(|analytic|, |numeric|, 1e-3) so exact-zero gradients compare cleanly.
    """
    tape = Tape()
    rng = np.random.default_rng(seed)
    loss_id = builder(tape, rng)
    analytic = tape.backward(loss_id)

    worst = 0.0
    for pid in tape.param_ids:
        flat = tape.nodes[pid].value.reshape(-1)
        a_flat = analytic[pid].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            tape.replay()
            lp = float(tape.nodes[loss_id].value)
            flat[i] = orig - step
            tape.replay()
            lm = float(tape.nodes[loss_id].value)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * step)
            err = abs(fd - a_flat[i]) / max(abs(fd), abs(a_flat[i]), 1e-3)
            worst = max(worst, err)
    tape.replay()
    return worst
