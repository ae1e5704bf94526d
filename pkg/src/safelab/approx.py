"""Small fully connected networks with hand-written backprop, Adam, ensembles
and a central-difference gradient checker.

Networks map a batch ``x`` of shape ``(n, in)`` through ReLU hidden layers to
one of four heads:

* ``linear``   - raw output
* ``gaussian`` - ``[mean | logvar]`` with the log-variance softly clamped into
  ``logvar_range``
* ``sigmoid``  - probabilities of a binary event
* ``softmax``  - categorical probabilities

Checkpoint format (``.npn``)::

    line 1: ASCII  ``SAFELAB-NET 1 <json-header>\\n``
    rest:   little-endian float64 parameters, member by member, layer by
            layer, W (row-major, shape (fan_in, fan_out)) then b

The JSON header holds ``widths``, ``head``, ``logvar_range``, ``n_members``
and a free-form ``meta`` dict. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from safelab.dataset import atomic_write_bytes

log = logging.getLogger(__name__)

HEADS = ("linear", "gaussian", "sigmoid", "softmax")
MAGIC = b"SAFELAB-NET 1 "


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Mlp:
    def __init__(self, widths: Sequence[int], head: str = "linear",
                 rng: np.random.Generator | None = None,
                 logvar_range: tuple[float, float] = (-10.0, 2.0)):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if head == "gaussian" and widths[-1] % 2:
            raise ValueError("gaussian head needs an even output width")
        self.widths = tuple(int(w) for w in widths)
        self.head = head
        self.logvar_range = tuple(float(v) for v in logvar_range)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1] // 2 if self.head == "gaussian" else self.widths[-1]

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Mlp":
        new = Mlp.__new__(Mlp)
        new.widths, new.head, new.logvar_range = self.widths, self.head, self.logvar_range
        new.params = [p.copy() for p in self.params]
        return new

    def load_params(self, other: "Mlp") -> None:
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    # --- forward / backward ---------------------------------------------------

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input width {x.shape[-1]} != network input {self.in_dim}")
        return x

    def _clamp(self, raw):
        lo, hi = self.logvar_range
        upper = hi - softplus(hi - raw)
        return lo + softplus(upper - lo), upper

    def forward(self, x) -> tuple[np.ndarray, dict]:
        x = self._check(x)
        acts = [x]
        h = x
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if i < self.n_layers - 1:
                h = np.maximum(z, 0.0)
                acts.append(h)
            else:
                h = z
        cache = {"acts": acts, "logits": h}
        return self._apply_head(h, cache), cache

    def _apply_head(self, z, cache=None):
        if self.head == "linear":
            return z
        if self.head == "sigmoid":
            return sigmoid(z)
        if self.head == "softmax":
            return np.exp(log_softmax(z))
        d = z.shape[-1] // 2
        logvar, upper = self._clamp(z[..., d:])
        if cache is not None:
            cache["upper"] = upper
        return np.concatenate([z[..., :d], logvar], axis=-1)

    def predict(self, x) -> np.ndarray:
        h = self._check(x)
        for i in range(self.n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < self.n_layers - 1:
                np.maximum(h, 0.0, out=h)
        return self._apply_head(h)

    def backward(self, cache: dict, grad_out) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of a scalar loss given dL/d(head output)."""
        g = np.asarray(grad_out, dtype=float)
        z = cache["logits"]
        if self.head == "sigmoid":
            p = sigmoid(z)
            g = g * p * (1 - p)
        elif self.head == "softmax":
            p = np.exp(log_softmax(z))
            g = p * (g - np.sum(g * p, axis=-1, keepdims=True))
        elif self.head == "gaussian":
            d = z.shape[-1] // 2
            lo, hi = self.logvar_range
            dlv = sigmoid(cache["upper"] - lo) * sigmoid(hi - z[..., d:])
            g = np.concatenate([g[..., :d], g[..., d:] * dlv], axis=-1)
        return self.backward_logits(cache, g)

    def backward_logits(self, cache: dict, grad_logits) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients given dL/d(pre-head output); used by losses written on logits."""
        acts = cache["acts"]
        g = np.asarray(grad_logits, dtype=float)
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for i in reversed(range(self.n_layers)):
            W = self.params[2 * i]
            h = acts[i]
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ W.T
            if i > 0:
                g = g * (acts[i] > 0)
        return grads, g


def split_gaussian(out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = out.shape[-1] // 2
    return out[..., :d], out[..., d:]


# --- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    shapes: list[tuple[int, ...]]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros(s) for s in self.shapes]
            self.v = [np.zeros(s) for s in self.shapes]

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([p.shape for p in params], **kw)


def _all_finite(arrays) -> bool:
    # a sum is finite only if every term is; overflow can only cause a spurious skip
    return bool(np.isfinite(sum(float(np.sum(a)) for a in arrays)))


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                state: AdamState) -> bool:
    """Bias-corrected Adam step applied in place. Returns False (and skips the
    step) when any gradient is non-finite."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"shape mismatch {p.shape} vs {np.shape(g)}")
    if not _all_finite(grads):
        state.skipped += 1
        log.warning("non-finite gradient; Adam step %d skipped", state.step)
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


class Optimizer:
    """Adam bound to one network's parameter list."""

    def __init__(self, net: Mlp, lr: float = 1e-3):
        self.net = net
        self.state = AdamState.for_params(net.params, lr=lr)

    def step(self, grads) -> bool:
        ok = adam_update(self.net.params, grads, self.state)
        if ok:
            assert _all_finite(self.net.params), "non-finite parameter"
        return ok


# --- ensembles ----------------------------------------------------------------

class Ensemble:
    def __init__(self, n_members: int, widths: Sequence[int], head: str = "linear",
                 rng: np.random.Generator | None = None, **kw):
        if n_members < 1:
            raise ValueError("ensemble needs at least one member")
        rng = rng if rng is not None else np.random.default_rng(0)
        seeds = rng.spawn(n_members) if hasattr(rng, "spawn") else [
            np.random.default_rng(rng.integers(2**63)) for _ in range(n_members)]
        self.members = [Mlp(widths, head, rng=r, **kw) for r in seeds]

    def __len__(self) -> int:
        return len(self.members)

    def __getitem__(self, i: int) -> Mlp:
        return self.members[i]

    def predict_all(self, x) -> np.ndarray:
        """Stacked member outputs, shape (n_members, n, out)."""
        return np.stack([m.predict(x) for m in self.members])

    def predict_mean(self, x) -> np.ndarray:
        return self.predict_all(x).mean(axis=0)

    def copy(self) -> "Ensemble":
        new = Ensemble.__new__(Ensemble)
        new.members = [m.copy() for m in self.members]
        return new


# --- gradient checking ------------------------------------------------------------

def grad_check(params_or_net, loss_fn: Callable[[], tuple[float, list[np.ndarray]]],
               eps: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` evaluates the loss at the current parameter values and
    returns ``(loss, grads)`` with ``grads`` aligned to the parameter list.
    Parameters are perturbed in place and restored. With ``max_entries`` only a
    random subset of entries per array is probed.
    """
    params = params_or_net.params if isinstance(params_or_net, Mlp) else list(params_or_net)
    if not params:
        return 0.0
    _, analytic = loss_fn()
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn()[0]
            flat[j] = orig - eps
            down = loss_fn()[0]
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            denom = max(abs(gflat[j]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[j] - numeric) / denom)
    return worst


# --- checkpoints --------------------------------------------------------------------

def dumps_nets(nets: Sequence[Mlp], meta: dict | None = None) -> bytes:
    if not nets:
        raise ValueError("nothing to save")
    first = nets[0]
    for n in nets:
        if n.widths != first.widths or n.head != first.head:
            raise ValueError("all members must share architecture")
    header = {"widths": list(first.widths), "head": first.head,
              "logvar_range": list(first.logvar_range), "n_members": len(nets),
              "meta": meta or {}}
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes()
                    for n in nets for p in n.params)
    return MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + body


def loads_nets(blob: bytes) -> tuple[list[Mlp], dict]:
    if not blob.startswith(MAGIC):
        raise ValueError("not a safelab network checkpoint")
    nl = blob.index(b"\n")
    header = json.loads(blob[len(MAGIC):nl])
    body = memoryview(blob)[nl + 1:]
    widths = header["widths"]
    shapes = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    per_member = sum(int(np.prod(s)) for s in shapes)
    if len(body) != 8 * per_member * header["n_members"]:
        raise ValueError("checkpoint body has the wrong length")
    flat = np.frombuffer(body, dtype="<f8").astype(float)
    nets, off = [], 0
    for _ in range(header["n_members"]):
        net = Mlp.__new__(Mlp)
        net.widths = tuple(widths)
        net.head = header["head"]
        net.logvar_range = tuple(header["logvar_range"])
        net.params = []
        for s in shapes:
            size = int(np.prod(s))
            net.params.append(flat[off:off + size].reshape(s).copy())
            off += size
        nets.append(net)
    return nets, header["meta"]


def save_nets(path: str | Path, nets: Sequence[Mlp], meta: dict | None = None) -> None:
    atomic_write_bytes(path, dumps_nets(nets, meta))


def load_nets(path: str | Path) -> tuple[list[Mlp], dict]:
    return loads_nets(Path(path).read_bytes())
