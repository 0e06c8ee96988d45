"""Minimal differentiable substrate: dense nets, explicit reverse mode, Adam.

There is no computational graph. Each forward pass returns a cache holding
exactly what its matching backward pass needs; composites chain these caches
by hand. The model set is small and fixed, so this stays verifiable against
the central-difference oracle, which is the module's acceptance gate.

All math is float64.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import FormatError, ShapeError, TrainingError

CHECKPOINT_VERSION = 1


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def identity(x: np.ndarray) -> np.ndarray:
    return x


_ACT = {"relu": relu, "tanh": tanh, "linear": identity}


def _act_grad(name: str, pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (pre > 0.0).astype(float)
    if name == "tanh":
        return 1.0 - out * out
    return np.ones_like(pre)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


@dataclass
class Tensor:
    value: np.ndarray
    trainable: bool = True
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = field(default=0, init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


class ParamStore:
    """Named tensors with per-parameter Adam moments and freeze flags."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> np.ndarray:
        if name in self._tensors:
            raise ShapeError(f"parameter {name!r} already exists")
        self._tensors[name] = Tensor(value, trainable)
        return self._tensors[name].value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def set(self, name: str, value: np.ndarray) -> None:
        t = self._tensors[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != t.value.shape:
            raise ShapeError(
                f"parameter {name!r} has shape {t.value.shape}, got {value.shape}"
            )
        t.value = value

    def remove(self, name: str) -> None:
        del self._tensors[name]

    def freeze(self, names: Iterable[str]) -> None:
        for name in names:
            self._tensors[name].trainable = False

    def unfreeze(self, names: Iterable[str]) -> None:
        for name in names:
            self._tensors[name].trainable = True

    def is_trainable(self, name: str) -> bool:
        return self._tensors[name].trainable

    def names(self) -> list[str]:
        return list(self._tensors)

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._tensors.items() if t.trainable]

    def n_params(self, trainable_only: bool = False) -> int:
        return sum(
            t.value.size
            for t in self._tensors.values()
            if t.trainable or not trainable_only
        )

    def clone(self) -> "ParamStore":
        other = ParamStore()
        for name, t in self._tensors.items():
            nt = Tensor(t.value.copy(), t.trainable)
            nt.m = t.m.copy()
            nt.v = t.v.copy()
            nt.step = t.step
            other._tensors[name] = nt
        return other

    # -- optimization ---------------------------------------------------------

    def adam_step(
        self,
        grads: dict[str, np.ndarray],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        """Standard Adam with bias correction; frozen tensors are never touched."""
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for {name!r}")
        for name, g in grads.items():
            t = self._tensors[name]
            if not t.trainable:
                continue
            if g.shape != t.value.shape:
                raise ShapeError(f"gradient shape {g.shape} != {t.value.shape} for {name!r}")
            t.step += 1
            t.m = beta1 * t.m + (1.0 - beta1) * g
            t.v = beta2 * t.v + (1.0 - beta2) * g * g
            m_hat = t.m / (1.0 - beta1**t.step)
            v_hat = t.v / (1.0 - beta2**t.step)
            t.value = t.value - lr * m_hat / (np.sqrt(v_hat) + eps)

    # -- persistence ------------------------------------------------------------

    def save(self, path: str, manifest: dict | None = None) -> None:
        header = {
            "version": CHECKPOINT_VERSION,
            "trainable": {n: t.trainable for n, t in self._tensors.items()},
            "manifest": manifest or {},
        }
        arrays = {f"param::{n}": t.value for n, t in self._tensors.items()}
        np.savez(
            path,
            header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
            **arrays,
        )

    @classmethod
    def load(cls, path: str, expect_shapes: dict[str, tuple] | None = None) -> tuple["ParamStore", dict]:
        try:
            with np.load(path) as data:
                payload = {k: data[k] for k in data.files}
        except (zipfile.BadZipFile, OSError, ValueError, EOFError) as exc:
            raise FormatError(f"unreadable checkpoint {path}: {exc}") from None
        if "header" not in payload:
            raise FormatError(f"checkpoint {path} missing header")
        header = json.loads(bytes(payload["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise FormatError(
                f"checkpoint version mismatch: expected {CHECKPOINT_VERSION}, found {header.get('version')}"
            )
        store = cls()
        for key, value in payload.items():
            if not key.startswith("param::"):
                continue
            name = key[len("param::"):]
            if expect_shapes and name in expect_shapes and tuple(value.shape) != tuple(expect_shapes[name]):
                raise FormatError(
                    f"checkpoint tensor {name!r} has shape {value.shape}, expected {expect_shapes[name]}"
                )
            store.add(name, value, trainable=header["trainable"].get(name, True))
        return store, header.get("manifest", {})


def add_grad(grads: dict[str, np.ndarray], name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


@dataclass
class LoraSpec:
    layer: int
    rank: int
    scale: float  # alpha / rank


class MLP:
    """Dense stack over a ParamStore; forward returns the cache backward needs.

    Layer ``i`` owns ``{prefix}/W{i}`` (out x in) and ``{prefix}/b{i}``. An
    attached low-rank adapter adds ``{prefix}/A{i}`` (r x in) and
    ``{prefix}/B{i}`` (out x r); the adapted layer computes
    ``W x + scale * B (A x)`` with the base frozen.
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        dims: Sequence[int],
        hidden_activation: str = "relu",
        output_activation: str = "linear",
        rng: np.random.Generator | None = None,
        init: bool = True,
    ):
        if len(dims) < 2:
            raise ShapeError(f"{prefix}: need at least input and output dims")
        self.store = store
        self.prefix = prefix
        self.dims = tuple(int(d) for d in dims)
        self.acts = [hidden_activation] * (len(dims) - 2) + [output_activation]
        for a in self.acts:
            if a not in _ACT:
                raise ShapeError(f"{prefix}: unknown activation {a!r}")
        self.lora: dict[int, LoraSpec] = {}
        if init:
            rng = rng or np.random.default_rng(0)
            for i, (d_in, d_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
                scale = np.sqrt(2.0 / d_in) if self.acts[i] == "relu" else np.sqrt(1.0 / d_in)
                store.add(f"{prefix}/W{i}", rng.normal(0.0, scale, size=(d_out, d_in)))
                store.add(f"{prefix}/b{i}", np.zeros(d_out))

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"{self.prefix}/W{i}", f"{self.prefix}/b{i}"]
            if i in self.lora:
                names += [f"{self.prefix}/A{i}", f"{self.prefix}/B{i}"]
        return names

    def base_names(self) -> list[str]:
        return [n for i in range(self.n_layers) for n in (f"{self.prefix}/W{i}", f"{self.prefix}/b{i}")]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dims[0]:
            raise ShapeError(
                f"{self.prefix}: input dim {x.shape[1]} != expected {self.dims[0]}"
            )
        cache = []
        out = x
        for i in range(self.n_layers):
            w = self.store[f"{self.prefix}/W{i}"]
            b = self.store[f"{self.prefix}/b{i}"]
            pre = out @ w.T + b
            low = None
            if i in self.lora:
                spec = self.lora[i]
                a = self.store[f"{self.prefix}/A{i}"]
                bb = self.store[f"{self.prefix}/B{i}"]
                low = out @ a.T
                pre = pre + spec.scale * (low @ bb.T)
            post = _ACT[self.acts[i]](pre)
            cache.append((out, pre, post, low))
            out = post
        return out, cache

    def backward(self, cache: list, dout: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        d = np.asarray(dout, dtype=np.float64)
        for i in range(self.n_layers - 1, -1, -1):
            x_in, pre, post, low = cache[i]
            dpre = d * _act_grad(self.acts[i], pre, post)
            w = self.store[f"{self.prefix}/W{i}"]
            add_grad(grads, f"{self.prefix}/W{i}", dpre.T @ x_in)
            add_grad(grads, f"{self.prefix}/b{i}", dpre.sum(axis=0))
            d = dpre @ w
            if i in self.lora:
                spec = self.lora[i]
                a = self.store[f"{self.prefix}/A{i}"]
                bb = self.store[f"{self.prefix}/B{i}"]
                add_grad(grads, f"{self.prefix}/B{i}", spec.scale * (dpre.T @ low))
                dlow = spec.scale * (dpre @ bb)
                add_grad(grads, f"{self.prefix}/A{i}", dlow.T @ x_in)
                d = d + dlow @ a
        return d

    # -- low-rank adaptation -------------------------------------------------

    def attach_lora(
        self,
        layers: Sequence[int],
        rank: int,
        alpha: float,
        rng: np.random.Generator | None = None,
    ) -> None:
        """Add zero-initialized adapters and freeze the base weights."""
        rng = rng or np.random.default_rng(0)
        for i in layers:
            d_in, d_out = self.dims[i], self.dims[i + 1]
            if rank > min(d_in, d_out):
                raise ShapeError(
                    f"{self.prefix}: lora rank {rank} exceeds min dim {min(d_in, d_out)} of layer {i}"
                )
            if i in self.lora:
                raise ShapeError(f"{self.prefix}: layer {i} already adapted")
            self.store.add(f"{self.prefix}/A{i}", rng.normal(0.0, 1.0 / rank, size=(rank, d_in)))
            self.store.add(f"{self.prefix}/B{i}", np.zeros((d_out, rank)))
            self.lora[i] = LoraSpec(layer=i, rank=rank, scale=alpha / rank)
        self.store.freeze(self.base_names())

    def merge_lora(self) -> None:
        """Fold scale * B A into W, drop the adapters, unfreeze the base."""
        for i, spec in sorted(self.lora.items()):
            a = self.store[f"{self.prefix}/A{i}"]
            bb = self.store[f"{self.prefix}/B{i}"]
            w = self.store[f"{self.prefix}/W{i}"]
            self.store._tensors[f"{self.prefix}/W{i}"].value = w + spec.scale * (bb @ a)
            self.store.remove(f"{self.prefix}/A{i}")
            self.store.remove(f"{self.prefix}/B{i}")
        self.lora.clear()
        self.store.unfreeze(self.base_names())


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient wrt pred."""
    diff = pred - target
    loss = float((diff * diff).mean())
    return loss, 2.0 * diff / diff.size


def finite_difference_check(
    store: ParamStore,
    loss_fn: Callable[[], tuple[float, dict[str, np.ndarray]]],
    eps: float = 1e-5,
    names: Sequence[str] | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn`` must be deterministic and must return the loss along with
    gradients for every checked tensor (missing entries count as zero).
    """
    _, grads = loss_fn()
    checked = names if names is not None else store.trainable_names()
    max_rel = 0.0
    for name in checked:
        value = store[name]
        analytic = grads.get(name, np.zeros_like(value))
        flat = value.reshape(-1)
        fd = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up, _ = loss_fn()
            flat[j] = orig - eps
            down, _ = loss_fn()
            flat[j] = orig
            fd[j] = (up - down) / (2.0 * eps)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(a)), 1e-6)
        max_rel = max(max_rel, float((np.abs(fd - a) / denom).max()))
    return max_rel
