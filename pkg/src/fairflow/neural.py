"""Small fixed-architecture perceptrons with hand-written backprop.

Parameters are float64 numpy arrays; a layer computes ``x @ W + b``.  The
actor ends in ``tanh``; the critic ends linearly and takes ``[g, s, a]``
concatenated as its input.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HIDDEN = (256, 128, 64)
FORMAT_VERSION = 1
MAGIC = b"FFCKPT\x00\x01"


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden: str = "relu"        # "relu" | "identity"
    out: str = "linear"         # "tanh" | "linear"

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def tensors(self) -> list[np.ndarray]:
        """Layer order, weight then bias for each layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.hidden, self.out)

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases], self.hidden, self.out)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())


GradientSet = MlpParams


def init_params(input_dim: int, seed, widths=HIDDEN, out: str = "linear",
                hidden: str = "relu") -> MlpParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    if input_dim <= 0:
        raise ValueError("input_dim must be positive")
    rng = np.random.default_rng(seed)
    dims = (input_dim, *widths, 1)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        lim = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, hidden, out)


def forward(p: MlpParams, x: np.ndarray):
    """Return (output of shape (B,), cache) for a batch ``x`` of shape (B, in)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    acts = [x]
    pre = []
    h = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ w + b
        pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0) if p.hidden == "relu" else z
        else:
            h = np.tanh(z) if p.out == "tanh" else z
        acts.append(h)
    return h[:, 0], (acts, pre)


def backward(p: MlpParams, cache, upstream) -> tuple[GradientSet, np.ndarray]:
    """Gradients of ``sum(output * upstream)`` w.r.t. every parameter and the input."""
    acts, pre = cache
    batch = acts[0].shape[0]
    up = np.broadcast_to(np.asarray(upstream, dtype=np.float64), (batch,)).reshape(batch, 1)
    last = len(p.weights) - 1
    if p.out == "tanh":
        delta = up * (1.0 - acts[-1] ** 2)
    else:
        delta = up
    gw = [None] * len(p.weights)
    gb = [None] * len(p.weights)
    for i in range(last, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ p.weights[i].T
        if i > 0 and p.hidden == "relu":
            delta = delta * (pre[i - 1] > 0)
    return MlpParams(gw, gb, p.hidden, p.out), delta


def actor_forward(p: MlpParams, state) -> float | np.ndarray:
    """Action(s) in (-1, 1); a 1-D state gives a float, a batch gives an array."""
    s = np.asarray(state, dtype=np.float64)
    y, _ = forward(p, s[None, :] if s.ndim == 1 else s)
    return float(y[0]) if s.ndim == 1 else y


def critic_input(g, s, a) -> np.ndarray:
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
    return np.concatenate([g, s, a], axis=1)


def critic_forward(p: MlpParams, g, s, a) -> float | np.ndarray:
    single = np.ndim(s) == 1
    y, _ = forward(p, critic_input(g, s, a))
    return float(y[0]) if single else y


# -- optimisation ------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, p: MlpParams, lr: float = 1e-3) -> "OptimizerState":
        return cls([np.zeros_like(t) for t in p.tensors()],
                   [np.zeros_like(t) for t in p.tensors()], 0, lr)


def apply_update(p: MlpParams, opt: OptimizerState, grads: GradientSet) -> None:
    """One Adam descent step on ``p`` in place."""
    params = p.tensors()
    gs = grads.tensors()
    if len(params) != len(gs) or any(a.shape != b.shape for a, b in zip(params, gs)):
        raise ValueError("gradient shapes do not match parameters")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    corr1 = 1 - b1 ** opt.step
    corr2 = 1 - b2 ** opt.step
    for t, g, m, v in zip(params, gs, opt.m, opt.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        t -= opt.lr * (m / corr1) / (np.sqrt(v / corr2) + opt.eps)


def soft_update(target: MlpParams, online: MlpParams, tau: float) -> None:
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    for t, o in zip(target.tensors(), online.tensors()):
        if t.shape != o.shape:
            raise ValueError("target and online shapes differ")
        t *= 1 - tau
        t += tau * o


# -- checkpoints -------------------------------------------------------------

class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    nets: dict[str, MlpParams]
    meta: dict = field(default_factory=dict)
    optimizers: dict[str, OptimizerState] = field(default_factory=dict)


def _net_header(p: MlpParams) -> dict:
    return {"input_dim": p.input_dim, "widths": list(p.widths), "hidden": p.hidden, "out": p.out}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Versioned JSON header followed by little-endian float64 tensors.

    Tensor order: each net in sorted name order, layer by layer, weights
    (row major) then biases; then each optimizer's first and second moments,
    also by sorted name.
    """
    header = {
        "format_version": FORMAT_VERSION,
        "nets": {name: _net_header(p) for name, p in ckpt.nets.items()},
        "optimizers": {name: {"step": o.step, "lr": o.lr, "beta1": o.beta1, "beta2": o.beta2,
                              "eps": o.eps} for name, o in ckpt.optimizers.items()},
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    for name in sorted(ckpt.nets):
        for t in ckpt.nets[name].tensors():
            buf.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    for name in sorted(ckpt.optimizers):
        o = ckpt.optimizers[name]
        for t in (*o.m, *o.v):
            buf.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _shapes(h: dict) -> list[tuple[int, ...]]:
    dims = [h["input_dim"], *h["widths"], 1]
    out = []
    for a, b in zip(dims, dims[1:]):
        out.extend([(a, b), (b,)])
    return out


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, hlen = struct.unpack("<II", data[8:16])
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, "
                              f"expected {FORMAT_VERSION}")
    try:
        header = json.loads(data[16:16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = np.frombuffer(data[16 + hlen:], dtype="<f8")
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + n > payload.size:
            raise CheckpointError(f"{path}: truncated payload")
        arr = payload[pos:pos + n].reshape(shape).astype(np.float64)
        pos += n
        return arr

    nets = {}
    for name, h in header["nets"].items():
        tensors = [take(s) for s in _shapes(h)]
        nets[name] = MlpParams(tensors[0::2], tensors[1::2], h["hidden"], h["out"])
    opts = {}
    for name, oh in header["optimizers"].items():
        shapes = [t.shape for t in nets[name].tensors()]
        m = [take(s) for s in shapes]
        v = [take(s) for s in shapes]
        opts[name] = OptimizerState(m, v, oh["step"], oh["lr"], oh["beta1"], oh["beta2"], oh["eps"])
    if pos != payload.size:
        raise CheckpointError(f"{path}: {payload.size - pos} trailing values")
    return Checkpoint(nets, header["meta"], opts)
