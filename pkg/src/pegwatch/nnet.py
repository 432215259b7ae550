"""Minimal float64 neural-network toolkit.

Dense layers with optional residual skips, reverse-mode gradients over an
explicit tape of recorded operations, an Adam optimizer with bias
correction, and the probability primitives (diagonal Gaussian, Gaussian
mixture, 3-way cross entropy) the rest of the system trains with.

Deliberately not a general autodiff framework: the op set is exactly what
the training objectives need, and every op is checkable against central
finite differences in float64.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

LOG_STD_MIN = -6.0
LOG_STD_MAX = 2.0

_LOG_2PI = math.log(2.0 * math.pi)


class ConfigurationError(ValueError):
    """Shape or layer-spec mismatch detected before any math runs."""


class UsageError(RuntimeError):
    """API misuse, e.g. backward() twice on the same recorded tape."""


def _as_f64(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A node on the operation tape.

    Holds a float64 array, its accumulated gradient, and the backward
    closure recorded when the op that produced it ran. ``backward()``
    replays the tape in reverse topological order.
    """

    __slots__ = ("data", "grad", "_back", "_parents", "requires_grad", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: Array | None = None
        self._back = None
        self._parents: tuple[Tensor, ...] = ()
        self.requires_grad = bool(requires_grad)
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # -- tape plumbing -------------------------------------------------

    def _record(self, parents, back) -> "Tensor":
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            self.requires_grad = True
            self._parents = live
            self._back = back
        return self

    def _acc(self, g: Array):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise UsageError("backward() requires a scalar loss")
        if self._done:
            raise UsageError("backward() called twice without a new forward pass")
        self._done = True
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._back is not None and node.grad is not None:
                node._back(node.grad)

    # -- ops -----------------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _unbroadcast(g: Array, shape) -> Array:
        if g.shape == shape:
            return g
        while g.ndim > len(shape):
            g = g.sum(axis=0)
        for i, (gs, ts) in enumerate(zip(g.shape, shape)):
            if ts == 1 and gs != 1:
                g = g.sum(axis=i, keepdims=True)
        return g.reshape(shape)

    def __add__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data + other.data)

        def back(g):
            if self.requires_grad:
                self._acc(Tensor._unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._acc(Tensor._unbroadcast(g, other.data.shape))

        return out._record((self, other), back)

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data)

        def back(g):
            if self.requires_grad:
                self._acc(-g)

        return out._record((self,), back)

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data * other.data)

        def back(g):
            if self.requires_grad:
                self._acc(Tensor._unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._acc(Tensor._unbroadcast(g * self.data, other.data.shape))

        return out._record((self, other), back)

    __rmul__ = __mul__

    def matmul(self, other: "Tensor") -> "Tensor":
        other = Tensor._lift(other)
        if self.data.shape[-1] != other.data.shape[0]:
            raise ConfigurationError(
                f"matmul dimension mismatch: {self.data.shape} @ {other.data.shape}"
            )
        out = Tensor(self.data @ other.data)

        def back(g):
            if self.requires_grad:
                self._acc(g @ other.data.T)
            if other.requires_grad:
                other._acc(self.data.T @ g)

        return out._record((self, other), back)

    __matmul__ = matmul

    def relu(self):
        mask = self.data > 0.0
        out = Tensor(np.where(mask, self.data, 0.0))

        def back(g):
            if self.requires_grad:
                self._acc(g * mask)

        return out._record((self,), back)

    def tanh(self):
        t = np.tanh(self.data)
        out = Tensor(t)

        def back(g):
            if self.requires_grad:
                self._acc(g * (1.0 - t * t))

        return out._record((self,), back)

    def exp(self):
        e = np.exp(self.data)
        out = Tensor(e)

        def back(g):
            if self.requires_grad:
                self._acc(g * e)

        return out._record((self,), back)

    def log(self):
        out = Tensor(np.log(self.data))

        def back(g):
            if self.requires_grad:
                self._acc(g / self.data)

        return out._record((self,), back)

    def square(self):
        return self * self

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims))

        def back(g):
            if self.requires_grad:
                gg = g
                if axis is not None and not keepdims:
                    gg = np.expand_dims(gg, axis=axis)
                self._acc(np.broadcast_to(gg, self.data.shape).copy())

        return out._record((self,), back)

    def mean(self, axis=None, keepdims=False):
        denom = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / denom)

    def logsumexp(self, axis: int, keepdims: bool = True):
        m = self.data.max(axis=axis, keepdims=True)
        shifted = np.exp(self.data - m)
        total = shifted.sum(axis=axis, keepdims=True)
        val = m + np.log(total)
        out = Tensor(val if keepdims else np.squeeze(val, axis=axis))
        soft = shifted / total

        def back(g):
            if self.requires_grad:
                gg = g if keepdims else np.expand_dims(g, axis=axis)
                self._acc(gg * soft)

        return out._record((self,), back)

    def cols(self, start: int, stop: int):
        """Column slice of a 2-D tensor (for splitting network heads)."""
        out = Tensor(self.data[:, start:stop])

        def back(g):
            if self.requires_grad:
                buf = np.zeros_like(self.data)
                buf[:, start:stop] = g
                self._acc(buf)

        return out._record((self,), back)

    @staticmethod
    def concat(parts: list["Tensor"], axis: int = 1) -> "Tensor":
        parts = [Tensor._lift(p) for p in parts]
        out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
        offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])

        def back(g):
            for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(a, b)
                    p._acc(g[tuple(idx)])

        return out._record(tuple(parts), back)


def soft_clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Smooth squash of raw activations into (lo, hi) via scaled tanh."""
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    return x.tanh() * half + center


def soft_clamp_np(x: Array, lo: float, hi: float) -> Array:
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    return np.tanh(x) * half + center


# ---------------------------------------------------------------------
# Parameters and optimizer state


class ParamStore:
    """Named float64 parameter arrays with gradient and Adam moment buffers.

    Every parameter owns exactly one gradient buffer of identical shape;
    ``zero_grads`` resets all of them to exactly 0.0.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, Array] = {}
        self._v: dict[str, Array] = {}
        self.step_count = 0

    def add(self, name: str, value: Array) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        t = Tensor(_as_f64(value).copy(), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def named(self, prefix: str) -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def zero_grads(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)
            t._done = False

    def adam_step(self, lr: float = 1e-3, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8,
                  only: list[str] | None = None):
        """Standard bias-corrected Adam update over named parameters."""
        names = only if only is not None else list(self._params)
        for name in names:
            g = self._params[name].grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise UsageError(f"non-finite gradient in parameter {name!r}; aborting update")
        self.step_count += 1
        bc1 = 1.0 - beta1 ** self.step_count
        bc2 = 1.0 - beta2 ** self.step_count
        for name in names:
            p = self._params[name]
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)

    # -- checkpointing ---------------------------------------------------

    def save(self, path, meta: dict | None = None):
        """Serialize parameters + Adam state; round-trips bit-exactly."""
        payload = {"schema": "pegwatch-params-v1", "step_count": self.step_count,
                   "meta": meta or {}}
        arrays = {f"p/{n}": t.data for n, t in self._params.items()}
        arrays.update({f"m/{n}": a for n, a in self._m.items()})
        arrays.update({f"v/{n}": a for n, a in self._v.items()})
        arrays["__meta__"] = np.frombuffer(json.dumps(payload).encode(), dtype=np.uint8)
        with open(path, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        with np.load(path) as z:
            payload = json.loads(bytes(z["__meta__"]).decode())
            if payload.get("schema") != "pegwatch-params-v1":
                raise ConfigurationError(f"unknown checkpoint schema in {path}")
            store = cls()
            for key in z.files:
                if key.startswith("p/"):
                    name = key[2:]
                    store.add(name, z[key])
                    store._m[name] = z[f"m/{name}"].copy()
                    store._v[name] = z[f"v/{name}"].copy()
            store.step_count = int(payload["step_count"])
        return store, payload["meta"]

    def params_hash(self, prefix: str = "") -> str:
        """Stable content hash of (a prefix of) the parameter arrays."""
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self._params):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(self._params[name].data.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------
# Dense networks


@dataclass(frozen=True)
class MlpSpec:
    """Widths and wiring of a dense network.

    ``residual[i]`` enables a skip connection across hidden layer i when
    its input and output widths agree. The output layer is always linear.
    """

    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    activation: str = "relu"
    residual: tuple[bool, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.residual is None:
            object.__setattr__(self, "residual", tuple(True for _ in self.hidden))
        if len(self.residual) != len(self.hidden):
            raise ConfigurationError("residual flags must match hidden layer count")
        if self.activation not in ("relu", "tanh"):
            raise ConfigurationError(f"unsupported activation {self.activation!r}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.in_dim, *self.hidden, self.out_dim)

    def to_json(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": list(self.hidden),
                "out_dim": self.out_dim, "activation": self.activation,
                "residual": list(self.residual)}

    @classmethod
    def from_json(cls, d: dict) -> "MlpSpec":
        return cls(d["in_dim"], tuple(d["hidden"]), d["out_dim"],
                   d["activation"], tuple(d["residual"]))


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec, rng: np.random.Generator):
    """He-scaled initialization of all layers under ``prefix``."""
    sizes = spec.sizes
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(scale=math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        store.add(f"{prefix}/w{i}", w)
        store.add(f"{prefix}/b{i}", np.zeros(fan_out))


def forward_mlp(store: ParamStore, prefix: str, spec: MlpSpec, x: Tensor) -> Tensor:
    """Graph-mode forward pass; records the tape for backward()."""
    if x.data.ndim != 2 or x.data.shape[1] != spec.in_dim:
        raise ConfigurationError(
            f"{prefix}: expected input (*, {spec.in_dim}), got {x.data.shape}")
    h = x
    n_layers = len(spec.sizes) - 1
    for i in range(n_layers):
        w = store[f"{prefix}/w{i}"]
        b = store[f"{prefix}/b{i}"]
        pre = h.matmul(w) + b
        if i == n_layers - 1:
            return pre
        nxt = pre.relu() if spec.activation == "relu" else pre.tanh()
        if spec.residual[i] and h.data.shape[1] == nxt.data.shape[1]:
            nxt = nxt + h
        h = nxt
    return h


def forward_mlp_np(store: ParamStore, prefix: str, spec: MlpSpec, x: Array) -> Array:
    """Inference fast path: same math as forward_mlp, no tape."""
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ConfigurationError(
            f"{prefix}: expected input (*, {spec.in_dim}), got {x.shape}")
    h = x
    n_layers = len(spec.sizes) - 1
    for i in range(n_layers):
        pre = h @ store[f"{prefix}/w{i}"].data + store[f"{prefix}/b{i}"].data
        if i == n_layers - 1:
            return pre
        nxt = np.maximum(pre, 0.0) if spec.activation == "relu" else np.tanh(pre)
        if spec.residual[i] and h.shape[1] == nxt.shape[1]:
            nxt = nxt + h
        h = nxt
    return h


# ---------------------------------------------------------------------
# Probability primitives


class DiagGaussian:
    """Diagonal Gaussian over row vectors: mean and log_std are (B, D).

    log_std is expected to lie in [LOG_STD_MIN, LOG_STD_MAX]; network heads
    guarantee that via soft_clamp before constructing the distribution.
    """

    def __init__(self, mean: Tensor, log_std: Tensor):
        mean = Tensor._lift(mean)
        log_std = Tensor._lift(log_std)
        if mean.data.shape != log_std.data.shape:
            raise ConfigurationError("mean and log_std shapes differ")
        self.mean = mean
        self.log_std = log_std

    @property
    def dim(self) -> int:
        return self.mean.data.shape[-1]

    def log_prob(self, x) -> Tensor:
        """Row-wise log density, shape (B, 1)."""
        x = Tensor._lift(x)
        inv_std = (-self.log_std).exp()
        z = (x - self.mean) * inv_std
        return (z.square() * -0.5 - self.log_std).sum(axis=1, keepdims=True) \
            + (-0.5 * _LOG_2PI * self.dim)

    def kl(self, other: "DiagGaussian") -> Tensor:
        """Closed-form KL(self || other) per row, shape (B, 1)."""
        if self.dim != other.dim:
            raise ConfigurationError("KL between Gaussians of different dimension")
        var_ratio = ((self.log_std - other.log_std) * 2.0).exp()
        mean_term = ((self.mean - other.mean) * (-other.log_std).exp()).square()
        per_dim = other.log_std - self.log_std + (var_ratio + mean_term) * 0.5
        return per_dim.sum(axis=1, keepdims=True) + (-0.5 * self.dim)

    def rsample(self, eps: Array) -> Tensor:
        """Reparameterized sample with externally supplied standard noise."""
        return self.mean + self.log_std.exp() * Tensor(eps)

    def sample_np(self, rng: np.random.Generator) -> Array:
        eps = rng.standard_normal(self.mean.data.shape)
        return self.mean.data + np.exp(self.log_std.data) * eps


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p); always >= 0, exactly 0 when parameters coincide."""
    return q.kl(p)


class GaussianMixture:
    """Mixture of M diagonal Gaussians over row vectors.

    means/log_stds: list of M tensors shaped (B, D); logits: (B, M).
    Mixture weights are softmax(logits) rows.
    """

    def __init__(self, means: list[Tensor], log_stds: list[Tensor], logits: Tensor):
        if len(means) != len(log_stds) or not means:
            raise ConfigurationError("component count mismatch")
        self.means = [Tensor._lift(m) for m in means]
        self.log_stds = [Tensor._lift(s) for s in log_stds]
        self.logits = Tensor._lift(logits)
        if self.logits.data.shape[-1] != len(means):
            raise ConfigurationError("logits width must equal component count")

    @property
    def n_components(self) -> int:
        return len(self.means)

    def log_weights(self) -> Tensor:
        return self.logits - self.logits.logsumexp(axis=1, keepdims=True)

    def log_prob(self, x) -> Tensor:
        """Row-wise mixture log density via log-sum-exp, shape (B, 1)."""
        x = Tensor._lift(x)
        lw = self.log_weights()
        comps = []
        for m, (mu, ls) in enumerate(zip(self.means, self.log_stds)):
            lp = DiagGaussian(mu, ls).log_prob(x)
            comps.append(lp + lw.cols(m, m + 1))
        stacked = Tensor.concat(comps, axis=1)
        return stacked.logsumexp(axis=1, keepdims=True)

    def weights_np(self) -> Array:
        logits = self.logits.data
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        return e / e.sum(axis=1, keepdims=True)

    def mode_np(self) -> Array:
        """Mean of the highest-weight component, per row."""
        w = self.weights_np()
        top = w.argmax(axis=1)
        means = np.stack([m.data for m in self.means], axis=1)  # (B, M, D)
        return means[np.arange(len(top)), top]

    def sample_np(self, rng: np.random.Generator) -> Array:
        w = self.weights_np()
        batch = w.shape[0]
        out = np.empty((batch, self.means[0].data.shape[1]))
        comp = np.array([rng.choice(self.n_components, p=w[i]) for i in range(batch)])
        for i in range(batch):
            m = comp[i]
            mu = self.means[m].data[i]
            std = np.exp(self.log_stds[m].data[i])
            out[i] = mu + std * rng.standard_normal(mu.shape)
        return out


def gmm_log_prob(gmm: GaussianMixture, x) -> Tensor:
    return gmm.log_prob(x)


def cross_entropy(logits: Tensor, labels: Array) -> Tensor:
    """Mean -log softmax(logits)[label] over the batch; labels are int rows."""
    labels = np.asarray(labels, dtype=np.int64)
    lse = logits.logsumexp(axis=1, keepdims=True)
    log_probs = logits - lse
    onehot = np.zeros(logits.data.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = (log_probs * Tensor(onehot)).sum(axis=1, keepdims=True)
    return -picked.mean()


def softmax_np(logits: Array, axis: int = -1) -> Array:
    m = logits.max(axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------
# Finite-difference oracle (used by the test suite and exposed for reuse)


def finite_diff_grads(store: ParamStore, loss_fn, names: list[str] | None = None,
                      eps: float = 1e-5) -> dict[str, Array]:
    """Central finite differences of ``loss_fn()`` w.r.t. named parameters.

    ``loss_fn`` must recompute the loss from the store's current values and
    return a float. Restores all parameters afterwards.
    """
    grads: dict[str, Array] = {}
    for name in (names if names is not None else store.names()):
        p = store[name]
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = loss_fn()
            flat[i] = keep - eps
            lo = loss_fn()
            flat[i] = keep
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def grad_rel_error(analytic: Array, numeric: Array) -> float:
    """Norm-based relative disagreement between two gradient arrays."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)
