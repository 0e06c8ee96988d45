"""Conditional denoising-diffusion model over normalized series windows.

The denoiser is a mixture-of-experts MLP: a softmax gating net weights M
expert nets, all reading one assembled input

    z = [x_t | time-embed(t) | cond-embed(c) or null | mask | context | prompts]

so the output is the gate-weighted sum of expert outputs. Training is
mask-restricted noise regression (revealed context carries no loss), with the
condition embedding replaced by a learned null vector at rate ``p_uncond`` to
enable classifier-free guidance at sampling time. Sampling is ancestral DDPM;
revealed history is enforced by re-noising it to the current step after every
update (inpainting), so unmasked positions come back exactly.

Fine-tuning hooks: low-rank adapters on the expert layers (base frozen while
attached, foldable on merge) and a retrieval memory of learnable key-prompt
pairs appended to the denoiser input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import COND_DIM, ConditionLayout, NormalizationStats
from .errors import ConfigError, DomainError, ModelError, ShapeError, TrainingError
from .nn import MLP, ParamStore, add_grad, softmax, softmax_backward

_TIME_FEATURES = 8
_NORM_EPS = 1e-12


# -- noise schedule -------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; alpha_bar[t] is the survival product with alpha_bar[0] = 1."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.beta)

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])


def make_schedule(steps: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, steps)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)


def forward_noise(x0: np.ndarray, alpha_bar, eps: np.ndarray) -> np.ndarray:
    """Closed-form noising: sqrt(a) x0 + sqrt(1 - a) eps. Exact at a = 1 and a = 0."""
    a = np.asarray(alpha_bar, dtype=float)
    if a.ndim > 0:
        a = a.reshape(a.shape + (1,) * (np.ndim(x0) - a.ndim))
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    t_arr = np.asarray(t)
    if (t_arr < 0).any() or (t_arr > schedule.steps).any():
        raise DomainError(f"t must be within [0, {schedule.steps}]")
    return forward_noise(x0, schedule.alpha_bar[t_arr], eps)


def time_features(t, steps: int) -> np.ndarray:
    """Sinusoidal features of the diffusion step, 8 dims, in [-1, 1]."""
    frac = np.atleast_1d(np.asarray(t, dtype=float)) / steps
    ks = np.arange(1, _TIME_FEATURES // 2 + 1)
    angles = 2.0 * np.pi * frac[:, None] * ks[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# -- prompt memory ----------------------------------------------------------------


@dataclass(frozen=True)
class MemoryConfig:
    n_pairs: int = 16
    top_n: int = 2
    prompt_dim: int = 4
    key_dim: int = 8
    pull_weight: float = 0.1


def prompt_retrieve(
    keys: np.ndarray, prompts: np.ndarray, query: np.ndarray, top_n: int
) -> tuple[np.ndarray, np.ndarray]:
    """Top-n keys by cosine similarity; ties go to the lowest index.

    The selected prompts are concatenated in ascending index order.
    """
    n_pairs = keys.shape[0]
    if top_n > n_pairs:
        raise ConfigError(f"top_n {top_n} exceeds memory size {n_pairs}")
    q = np.atleast_2d(query)
    sims = _cosine_sims(q, keys)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :top_n]
    indices = np.sort(order, axis=1)
    flat = prompts[indices].reshape(q.shape[0], -1)
    if np.ndim(query) == 1:
        return indices[0], flat[0]
    return indices, flat


def _cosine_sims(q: np.ndarray, keys: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(q, axis=1, keepdims=True) + _NORM_EPS
    kn = np.linalg.norm(keys, axis=1, keepdims=True) + _NORM_EPS
    return (q / qn) @ (keys / kn).T


# -- denoiser architecture -----------------------------------------------------------


@dataclass(frozen=True)
class DenoiserArch:
    series_len: int
    cond_dim: int = COND_DIM
    cond_emb_dim: int = 8
    time_dim: int = 8
    n_experts: int = 3
    expert_hidden: tuple[int, ...] = (64, 64)
    gate_hidden: tuple[int, ...] = (32,)
    memory: MemoryConfig | None = None

    @property
    def prompt_dim(self) -> int:
        return self.memory.top_n * self.memory.prompt_dim if self.memory else 0

    @property
    def input_dim(self) -> int:
        return 3 * self.series_len + self.time_dim + self.cond_emb_dim + self.prompt_dim


class DiffusionModel:
    """One generation head: schedule + MoE denoiser + channel/condition statistics."""

    def __init__(
        self,
        kind: str,
        arch: DenoiserArch,
        schedule: NoiseSchedule,
        stats: NormalizationStats,
        layout: ConditionLayout,
        seed: int = 0,
        p_uncond: float = 0.1,
        guidance_w: float = 1.0,
    ):
        if arch.cond_dim != layout.dim:
            raise ModelError(
                f"arch cond_dim {arch.cond_dim} != condition layout dim {layout.dim}"
            )
        if not 0.0 <= p_uncond < 1.0:
            raise ConfigError(f"p_uncond must be in [0, 1), got {p_uncond}")
        self.kind = kind
        self.arch = arch
        self.schedule = schedule
        self.stats = stats
        self.layout = layout
        self.p_uncond = p_uncond
        self.guidance_w = guidance_w
        self.lora_state: dict | None = None
        self.store = ParamStore()
        self._build(seed)

    def _build(self, seed: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 41)))
        a = self.arch
        self.cond_mlp = MLP(self.store, "cond", (a.cond_dim, 16, a.cond_emb_dim),
                            hidden_activation="tanh", output_activation="tanh", rng=rng)
        self.time_mlp = MLP(self.store, "time", (_TIME_FEATURES, a.time_dim),
                            output_activation="tanh", rng=rng)
        self.store.add("null_embed", rng.normal(0.0, 0.1, size=a.cond_emb_dim))
        zin = a.input_dim
        self.gate_mlp = MLP(self.store, "gate", (zin, *a.gate_hidden, a.n_experts), rng=rng)
        self.experts = [
            MLP(self.store, f"expert{i}", (zin, *a.expert_hidden, a.series_len), rng=rng)
            for i in range(a.n_experts)
        ]
        if a.memory:
            m = a.memory
            self.query_mlp = MLP(self.store, "memory/query", (2 * a.series_len, m.key_dim),
                                 output_activation="tanh", rng=rng)
            keys = rng.normal(size=(m.n_pairs, m.key_dim))
            keys /= np.linalg.norm(keys, axis=1, keepdims=True)
            self.store.add("memory/keys", keys)
            self.store.add("memory/prompts", rng.normal(0.0, 0.1, size=(m.n_pairs, m.prompt_dim)))
        else:
            self.query_mlp = None

    def _nets(self) -> list[MLP]:
        nets = [self.cond_mlp, self.time_mlp, self.gate_mlp, *self.experts]
        if self.query_mlp is not None:
            nets.append(self.query_mlp)
        return nets

    # -- forward ---------------------------------------------------------------

    def _check_inputs(self, x_t, cond, mask, context) -> None:
        L, dc = self.arch.series_len, self.arch.cond_dim
        if x_t.shape[1] != L or mask.shape != x_t.shape or context.shape != x_t.shape:
            raise ShapeError(f"series inputs must be (B, {L})")
        if cond.shape != (x_t.shape[0], dc):
            raise ShapeError(f"condition must be (B, {dc}), got {cond.shape}")

    def assemble_input(
        self,
        x_t: np.ndarray,
        t: np.ndarray,
        cond: np.ndarray,
        null_mask: np.ndarray,
        mask: np.ndarray,
        context: np.ndarray,
    ) -> tuple[np.ndarray, dict]:
        """Build the shared expert/gate input; cache carries embedding internals."""
        x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
        cond = np.atleast_2d(np.asarray(cond, dtype=float))
        mask_f = np.atleast_2d(np.asarray(mask, dtype=float))
        context = np.atleast_2d(np.asarray(context, dtype=float))
        self._check_inputs(x_t, cond, mask_f, context)
        t = np.broadcast_to(np.atleast_1d(t), (x_t.shape[0],))
        null_mask = np.broadcast_to(np.atleast_1d(null_mask), (x_t.shape[0],)).astype(bool)

        t_emb, cache_time = self.time_mlp.forward(time_features(t, self.schedule.steps))
        c_emb_net, cache_cond = self.cond_mlp.forward(cond)
        c_emb = np.where(null_mask[:, None], self.store["null_embed"][None, :], c_emb_net)

        cache: dict = {
            "null_mask": null_mask,
            "cache_time": cache_time,
            "cache_cond": cache_cond,
        }
        if self.arch.memory:
            q_in = np.concatenate([context, mask_f], axis=1)
            q, cache_q = self.query_mlp.forward(q_in)
            indices, prompt_vec = prompt_retrieve(
                self.store["memory/keys"], self.store["memory/prompts"], q, self.arch.memory.top_n
            )
            cache.update(cache_query=cache_q, query=q, indices=indices)
        else:
            prompt_vec = np.zeros((x_t.shape[0], 0))
        z = np.concatenate([x_t, t_emb, c_emb, mask_f, context, prompt_vec], axis=1)
        cache["z"] = z
        return z, cache

    def gate_weights(self, z: np.ndarray) -> np.ndarray:
        logits, _ = self.gate_mlp.forward(z)
        return softmax(logits)

    def expert_output(self, i: int, z: np.ndarray) -> np.ndarray:
        out, _ = self.experts[i].forward(z)
        return out

    def denoise(
        self,
        x_t: np.ndarray,
        t,
        cond: np.ndarray,
        mask: np.ndarray,
        context: np.ndarray,
        null_mask=False,
    ) -> np.ndarray:
        """Predicted noise: gate-weighted sum of expert outputs on the shared input."""
        eps_hat, _ = self._forward(x_t, t, cond, null_mask, mask, context)
        return eps_hat

    def _forward(self, x_t, t, cond, null_mask, mask, context) -> tuple[np.ndarray, dict]:
        z, cache = self.assemble_input(x_t, t, cond, null_mask, mask, context)
        logits, cache_gate = self.gate_mlp.forward(z)
        gate = softmax(logits)
        outs, caches_e = [], []
        for expert in self.experts:
            out, c = expert.forward(z)
            outs.append(out)
            caches_e.append(c)
        expert_out = np.stack(outs, axis=1)  # (B, M, L)
        eps_hat = (gate[:, :, None] * expert_out).sum(axis=1)
        cache.update(gate=gate, expert_out=expert_out, cache_gate=cache_gate, caches_e=caches_e)
        return eps_hat, cache

    def _backward(self, cache: dict, d_eps: np.ndarray, grads: dict[str, np.ndarray]) -> None:
        gate, expert_out = cache["gate"], cache["expert_out"]
        d_gate = (d_eps[:, None, :] * expert_out).sum(axis=2)
        d_logits = softmax_backward(gate, d_gate)
        dz = self.gate_mlp.backward(cache["cache_gate"], d_logits, grads)
        for i, expert in enumerate(self.experts):
            dz = dz + expert.backward(cache["caches_e"][i], gate[:, i : i + 1] * d_eps, grads)

        a = self.arch
        L = a.series_len
        ofs = L
        d_temb = dz[:, ofs : ofs + a.time_dim]
        ofs += a.time_dim
        d_cemb = dz[:, ofs : ofs + a.cond_emb_dim]
        ofs += a.cond_emb_dim
        ofs += 2 * L  # mask and context are inputs, no parameters behind them
        d_prompt = dz[:, ofs:]

        self.time_mlp.backward(cache["cache_time"], d_temb, grads)
        null = cache["null_mask"]
        if null.any():
            add_grad(grads, "null_embed", d_cemb[null].sum(axis=0))
        self.cond_mlp.backward(cache["cache_cond"], np.where(null[:, None], 0.0, d_cemb), grads)
        if self.arch.memory and d_prompt.size:
            m = self.arch.memory
            g_prompts = np.zeros_like(self.store["memory/prompts"])
            idx = cache["indices"]
            for j in range(m.top_n):
                np.add.at(g_prompts, idx[:, j], d_prompt[:, j * m.prompt_dim : (j + 1) * m.prompt_dim])
            add_grad(grads, "memory/prompts", g_prompts)

    def _pull_loss(self, cache: dict, grads: dict[str, np.ndarray]) -> float:
        """Retrieval alignment: pull each query toward its retrieved keys."""
        m = self.arch.memory
        q, idx = cache["query"], cache["indices"]
        keys = self.store["memory/keys"]
        batch, top_n = idx.shape
        w = m.pull_weight / (batch * top_n)
        qn = np.linalg.norm(q, axis=1, keepdims=True) + _NORM_EPS
        loss = 0.0
        dq = np.zeros_like(q)
        dk = np.zeros_like(keys)
        for j in range(top_n):
            k = keys[idx[:, j]]
            kn = np.linalg.norm(k, axis=1, keepdims=True) + _NORM_EPS
            dot = (q * k).sum(axis=1, keepdims=True)
            cos = dot / (qn * kn)
            loss += float(w * (1.0 - cos).sum())
            dcos_dq = k / (qn * kn) - cos * q / (qn * qn)
            dcos_dk = q / (qn * kn) - cos * k / (kn * kn)
            dq += -w * dcos_dq
            np.add.at(dk, idx[:, j], -w * dcos_dk)
        self.query_mlp.backward(cache["cache_query"], dq, grads)
        add_grad(grads, "memory/keys", dk)
        return loss

    # -- training ----------------------------------------------------------------

    def loss_and_grads(
        self,
        x0: np.ndarray,
        cond: np.ndarray,
        mask: np.ndarray,
        t: np.ndarray,
        eps: np.ndarray,
        null_mask: np.ndarray,
    ) -> tuple[float, dict[str, np.ndarray]]:
        """Mask-restricted noise-regression loss; deterministic given its inputs."""
        mask = np.asarray(mask, dtype=bool)
        counts = mask.sum(axis=1)
        if (counts == 0).any():
            raise DomainError("every sample needs at least one masked position")
        x_t = q_sample(x0, t, eps, self.schedule)
        context = np.where(mask, 0.0, x0)
        eps_hat, cache = self._forward(x_t, t, cond, null_mask, mask, context)
        diff = np.where(mask, eps_hat - eps, 0.0)
        batch = x0.shape[0]
        loss = float((np.square(diff).sum(axis=1) / counts).mean())
        grads: dict[str, np.ndarray] = {}
        d_eps_hat = 2.0 * diff / counts[:, None] / batch
        self._backward(cache, d_eps_hat, grads)
        if self.arch.memory:
            loss += self._pull_loss(cache, grads)
        return loss, grads

    def train_step(
        self,
        x0: np.ndarray,
        cond: np.ndarray,
        mask: np.ndarray,
        rng: np.random.Generator,
        lr: float = 1e-3,
    ) -> float:
        batch = x0.shape[0]
        t = rng.integers(1, self.schedule.steps + 1, size=batch)
        eps = rng.standard_normal(x0.shape)
        null_mask = rng.random(batch) < self.p_uncond
        loss, grads = self.loss_and_grads(x0, cond, mask, t, eps, null_mask)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite training loss {loss}")
        self.store.adam_step(grads, lr=lr)
        if self.arch.memory and self.store.is_trainable("memory/keys"):
            keys = self.store["memory/keys"]
            self.store.set("memory/keys", keys / (np.linalg.norm(keys, axis=1, keepdims=True) + _NORM_EPS))
        return loss

    def train(
        self,
        series_norm: np.ndarray,
        cond_norm: np.ndarray,
        masks: np.ndarray,
        steps: int,
        batch_size: int,
        rng: np.random.Generator,
        lr: float = 1e-3,
    ) -> list[float]:
        n = series_norm.shape[0]
        losses = []
        for _ in range(steps):
            idx = rng.integers(0, n, size=min(batch_size, n))
            losses.append(self.train_step(series_norm[idx], cond_norm[idx], masks[idx], rng, lr=lr))
        return losses

    # -- sampling -----------------------------------------------------------------

    def sample(
        self,
        cond: np.ndarray,
        mask: np.ndarray,
        context: np.ndarray | None,
        rng: np.random.Generator,
        guidance_w: float | None = None,
    ) -> np.ndarray:
        """Ancestral sampling; returns series in raw units, history honored exactly.

        ``context`` is raw-unit history (ignored at masked positions); it may be
        omitted only for fully masked generation. ``guidance_w`` mixes the
        conditional and null-condition noise estimates as (1+w) cond - w null.
        """
        w = self.guidance_w if guidance_w is None else guidance_w
        if w < 0:
            raise ConfigError(f"guidance_w must be >= 0, got {w}")
        cond = np.atleast_2d(np.asarray(cond, dtype=float))
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        batch, L = mask.shape
        if L != self.arch.series_len:
            raise ShapeError(f"mask length {L} != series_len {self.arch.series_len}")
        if context is None:
            if not mask.all():
                raise ModelError("context required when any position is revealed")
            ctx = np.zeros((batch, L))
        else:
            ctx = np.where(mask, 0.0, self.stats.normalize(np.atleast_2d(context)))
        for name in self.store.names():
            if not np.isfinite(self.store[name]).all():
                raise ModelError(f"model parameter {name!r} is non-finite")

        sched = self.schedule
        x = rng.standard_normal((batch, L))
        for t in range(sched.steps, 0, -1):
            t_arr = np.full(batch, t)
            eps_hat = self.denoise(x, t_arr, cond, mask, ctx, null_mask=False)
            if w > 0:
                eps_null = self.denoise(x, t_arr, cond, mask, ctx, null_mask=True)
                eps_hat = (1.0 + w) * eps_hat - w * eps_null
            beta_t = sched.beta_at(t)
            a_bar_t = sched.alpha_bar[t]
            mean = (x - beta_t / np.sqrt(1.0 - a_bar_t) * eps_hat) / np.sqrt(1.0 - beta_t)
            x = mean + np.sqrt(beta_t) * rng.standard_normal((batch, L)) if t > 1 else mean
            # Re-noise the revealed history to step t-1 and overwrite (inpainting).
            known = forward_noise(ctx, sched.alpha_bar[t - 1], rng.standard_normal((batch, L)))
            x = np.where(mask, x, known)
        return self.stats.denormalize(x)

    # -- low-rank adaptation ---------------------------------------------------------

    def lora_attach(self, rank: int, alpha: float, seed: int = 0) -> None:
        """Adapter pair on every expert layer; everything else freezes."""
        if self.lora_state is not None:
            raise ConfigError("adapters already attached")
        rng = np.random.default_rng(np.random.SeedSequence((seed, 77)))
        for expert in self.experts:
            expert.attach_lora(range(expert.n_layers), rank, alpha, rng=rng)
        adapter_names = {
            n for e in self.experts for n in e.param_names() if "/A" in n or "/B" in n
        }
        self.store.freeze([n for n in self.store.names() if n not in adapter_names])
        self.lora_state = {"rank": rank, "alpha": alpha}

    def lora_merge(self) -> None:
        if self.lora_state is None:
            raise ConfigError("no adapters attached")
        for expert in self.experts:
            expert.merge_lora()
        self.store.unfreeze(self.store.names())
        self.lora_state = None

    # -- persistence -------------------------------------------------------------------

    def manifest(self) -> dict:
        arch = asdict(self.arch)
        arch["memory"] = asdict(self.arch.memory) if self.arch.memory else None
        return {
            "kind": self.kind,
            "arch": arch,
            "schedule": {
                "steps": self.schedule.steps,
                "beta_min": float(self.schedule.beta[0]),
                "beta_max": float(self.schedule.beta[-1]),
            },
            "stats": {"mean": self.stats.mean, "std": self.stats.std},
            "layout": {
                "fingerprint": ConditionLayout.fingerprint(),
                "mean": self.layout.mean.tolist(),
                "std": self.layout.std.tolist(),
            },
            "p_uncond": self.p_uncond,
            "guidance_w": self.guidance_w,
            "lora": self.lora_state,
        }

    def save(self, path: str) -> None:
        self.store.save(path, manifest=self.manifest())

    @classmethod
    def load(cls, path: str) -> "DiffusionModel":
        store, manifest = ParamStore.load(path)
        if manifest.get("layout", {}).get("fingerprint") != ConditionLayout.fingerprint():
            raise ModelError(
                f"checkpoint {path} was written under a different condition layout"
            )
        arch_d = dict(manifest["arch"])
        mem = arch_d.pop("memory")
        arch = DenoiserArch(
            **{**arch_d, "expert_hidden": tuple(arch_d["expert_hidden"]),
               "gate_hidden": tuple(arch_d["gate_hidden"])},
            memory=MemoryConfig(**mem) if mem else None,
        )
        sched = manifest["schedule"]
        model = cls(
            kind=manifest["kind"],
            arch=arch,
            schedule=make_schedule(sched["steps"], sched["beta_min"], sched["beta_max"]),
            stats=NormalizationStats(**manifest["stats"]),
            layout=ConditionLayout(
                mean=np.array(manifest["layout"]["mean"]), std=np.array(manifest["layout"]["std"])
            ),
            p_uncond=manifest["p_uncond"],
            guidance_w=manifest["guidance_w"],
        )
        if manifest.get("lora"):
            model.lora_attach(manifest["lora"]["rank"], manifest["lora"]["alpha"])
        expected = {name: model.store[name].shape for name in model.store.names()}
        missing = set(expected) - set(store.names())
        if missing:
            raise ModelError(f"checkpoint {path} missing tensor {sorted(missing)[0]!r}")
        for name in expected:
            if store[name].shape != expected[name]:
                raise ModelError(
                    f"checkpoint tensor {name!r} shape {store[name].shape} != expected {expected[name]}"
                )
        model.store = store
        for net in model._nets():
            net.store = store
        return model

    def check_layout(self, layout: ConditionLayout) -> None:
        if layout.dim != self.layout.dim:
            raise ModelError(
                f"dataset condition dim {layout.dim} != model condition dim {self.layout.dim}"
            )
