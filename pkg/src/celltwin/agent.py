"""Sleep/offload optimization: policy-gradient agent and rule-based baselines.

The joint action is factorized per cell into one categorical choice over
{stay active} + {sleep with bias b : b in the bias set}; a sleeping cell's
bias is granted to its compensation neighbors during user association. The
learner is score-function policy gradient with a running-mean return baseline,
kept deliberately simple so its gradient can be checked against the
finite-difference oracle. The environment interface is agent-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TrainingError
from .nn import MLP, ParamStore, softmax

DEFAULT_BIAS_LEVELS = (0.0, 3.0, 6.0)


@dataclass(frozen=True)
class RewardWeights:
    lambda_e: float = 1.0
    lambda_r: float = 1.0
    lambda_d: float = 2.0
    rsrp_lo_dbm: float = -120.0
    rsrp_hi_dbm: float = -80.0

    def __post_init__(self):
        if self.lambda_e < 0 or self.lambda_r < 0 or self.lambda_d < 0:
            raise ValueError("reward weights must be nonnegative")
        if self.lambda_e + self.lambda_r <= 0:
            raise ValueError("lambda_e + lambda_r must be positive")
        if self.rsrp_hi_dbm <= self.rsrp_lo_dbm:
            raise ValueError("rsrp_hi_dbm must exceed rsrp_lo_dbm")


def compute_reward(
    energy_wh: float,
    reference_energy_wh: float,
    rsrp_avg_dbm: float | None,
    dropped: float,
    total_users: int,
    weights: RewardWeights,
) -> float:
    """Energy-normalized, coverage-weighted step reward.

    The RSRP term is vacuously 1 when the step has no users at all, and 0 when
    users exist but none is served.
    """
    if reference_energy_wh <= 0:
        raise ValueError("reference_energy_wh must be positive")
    if total_users == 0:
        rsrp_term = 1.0
    elif rsrp_avg_dbm is None:
        rsrp_term = 0.0
    else:
        span = weights.rsrp_hi_dbm - weights.rsrp_lo_dbm
        rsrp_term = float(np.clip((rsrp_avg_dbm - weights.rsrp_lo_dbm) / span, 0.0, 1.0))
    dropped_frac = 0.0 if total_users == 0 else dropped / total_users
    return (
        -weights.lambda_e * (energy_wh / reference_energy_wh)
        + weights.lambda_r * rsrp_term
        - weights.lambda_d * dropped_frac
    )


@dataclass(frozen=True)
class Action:
    sleep: np.ndarray            # (n_cells,) bool
    bias_level_db: np.ndarray    # (n_cells,) bias granted by each sleeping cell

    @classmethod
    def from_choices(cls, choices: np.ndarray, bias_levels=DEFAULT_BIAS_LEVELS) -> "Action":
        choices = np.asarray(choices)
        sleep = choices > 0
        bias = np.zeros(len(choices))
        bias[sleep] = np.asarray(bias_levels)[choices[sleep] - 1]
        return cls(sleep=sleep, bias_level_db=bias)

    @classmethod
    def all_active(cls, n_cells: int) -> "Action":
        return cls(sleep=np.zeros(n_cells, dtype=bool), bias_level_db=np.zeros(n_cells))

    @classmethod
    def all_sleep(cls, n_cells: int, bias_db: float = 3.0) -> "Action":
        return cls(sleep=np.ones(n_cells, dtype=bool), bias_level_db=np.full(n_cells, bias_db))


def resolve_bias(action: Action, neighbors: list[tuple[int, ...]]) -> np.ndarray:
    """Per-cell association bias: each sleeping cell grants its bias to its neighbors."""
    bias = np.zeros(len(neighbors))
    for c in np.flatnonzero(action.sleep):
        for nb in neighbors[c]:
            bias[nb] += action.bias_level_db[c]
    return bias


@dataclass
class Observation:
    """Agent input: current state plus world-model-predicted next window."""

    load_frac: np.ndarray
    pred_load_frac: np.ndarray
    pred_users_norm: np.ndarray
    neighbor_pred_load: np.ndarray
    hour_sin: float
    hour_cos: float

    def vector(self) -> np.ndarray:
        return np.concatenate([
            self.load_frac, self.pred_load_frac, self.pred_users_norm,
            self.neighbor_pred_load, [self.hour_sin, self.hour_cos],
        ])

    @staticmethod
    def dim(n_cells: int) -> int:
        return 4 * n_cells + 2


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, obs_dim)
    choices: np.ndarray       # (T, n_cells)
    rewards: np.ndarray       # (T,)
    log_probs: np.ndarray     # (T,)

    def __post_init__(self):
        if not (len(self.observations) == len(self.choices) == len(self.rewards) == len(self.log_probs)):
            raise ShapeError("trajectory fields must have equal length")
        if not np.isfinite(self.rewards).all():
            raise TrainingError("non-finite reward in trajectory")

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


class Policy:
    """Factorized categorical policy over per-cell sleep/bias choices."""

    def __init__(
        self,
        n_cells: int,
        obs_dim: int,
        hidden: tuple[int, ...] = (32,),
        bias_levels: tuple[float, ...] = DEFAULT_BIAS_LEVELS,
        seed: int = 0,
    ):
        self.n_cells = n_cells
        self.obs_dim = obs_dim
        self.bias_levels = tuple(bias_levels)
        self.n_choices = 1 + len(bias_levels)
        self.hidden = tuple(hidden)
        self.store = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence((seed, 52)))
        self.mlp = MLP(self.store, "policy", (obs_dim, *hidden, n_cells * self.n_choices),
                       hidden_activation="tanh", rng=rng)
        self._baseline: float | None = None

    # -- distribution --------------------------------------------------------

    def distribution(self, obs: np.ndarray) -> tuple[np.ndarray, list]:
        """Per-cell choice probabilities, shape (B, n_cells, n_choices)."""
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if obs.shape[1] != self.obs_dim:
            raise ShapeError(f"observation dim {obs.shape[1]} != expected {self.obs_dim}")
        logits, cache = self.mlp.forward(obs)
        probs = softmax(logits.reshape(obs.shape[0], self.n_cells, self.n_choices))
        return probs, cache

    def sample(self, obs: np.ndarray, rng: np.random.Generator) -> tuple[Action, float, np.ndarray]:
        probs, _ = self.distribution(obs)
        p = probs[0]
        u = rng.random(self.n_cells)
        cum = np.cumsum(p, axis=1)
        choices = (u[:, None] > cum).sum(axis=1)
        log_prob = float(np.log(p[np.arange(self.n_cells), choices]).sum())
        return Action.from_choices(choices, self.bias_levels), log_prob, choices

    def log_prob(self, obs: np.ndarray, choices: np.ndarray) -> np.ndarray:
        probs, _ = self.distribution(obs)
        choices = np.atleast_2d(np.asarray(choices, dtype=int))
        rows = np.arange(probs.shape[0])[:, None]
        cols = np.arange(self.n_cells)[None, :]
        return np.log(probs[rows, cols, choices]).sum(axis=1)

    # -- learning --------------------------------------------------------------

    def surrogate_loss_and_grads(
        self, obs: np.ndarray, choices: np.ndarray, step_weights: np.ndarray
    ) -> tuple[float, dict[str, np.ndarray]]:
        """Loss -sum_k w_k log pi(choice_k | obs_k) and its exact gradients."""
        probs, cache = self.distribution(obs)
        k = probs.shape[0]
        rows = np.arange(k)[:, None]
        cols = np.arange(self.n_cells)[None, :]
        chosen = probs[rows, cols, choices]
        loss = float(-(step_weights * np.log(chosen).sum(axis=1)).sum())
        onehot = np.zeros_like(probs)
        onehot[rows, cols, choices] = 1.0
        dlogits = -step_weights[:, None, None] * (onehot - probs)
        grads: dict[str, np.ndarray] = {}
        self.mlp.backward(cache, dlogits.reshape(k, -1), grads)
        return loss, grads

    def update(self, trajectories: list[Trajectory], lr: float) -> dict:
        """One REINFORCE step with a running-mean return baseline."""
        if not trajectories:
            raise TrainingError("need at least one trajectory")
        returns = np.array([t.episode_return for t in trajectories])
        baseline = returns.mean() if self._baseline is None else self._baseline
        advantages = returns - baseline
        obs = np.vstack([t.observations for t in trajectories])
        choices = np.vstack([t.choices for t in trajectories]).astype(int)
        weights = np.concatenate([
            np.full(len(t.rewards), adv / len(trajectories))
            for t, adv in zip(trajectories, advantages)
        ])
        loss, grads = self.surrogate_loss_and_grads(obs, choices, weights)
        self.store.adam_step(grads, lr=lr)
        self._baseline = float(baseline * 0.9 + returns.mean() * 0.1)
        probs, _ = self.distribution(obs)
        entropy = float(-(probs * np.log(probs + 1e-12)).sum(axis=2).mean())
        return {
            "mean_return": float(returns.mean()),
            "baseline": self._baseline,
            "entropy": entropy,
            "loss": loss,
        }

    # -- persistence --------------------------------------------------------------

    def save(self, path: str) -> None:
        self.store.save(path, manifest={
            "n_cells": self.n_cells,
            "obs_dim": self.obs_dim,
            "hidden": list(self.hidden),
            "bias_levels": list(self.bias_levels),
            "baseline": self._baseline,
        })

    @classmethod
    def load(cls, path: str) -> "Policy":
        store, manifest = ParamStore.load(path)
        policy = cls(
            n_cells=manifest["n_cells"],
            obs_dim=manifest["obs_dim"],
            hidden=tuple(manifest["hidden"]),
            bias_levels=tuple(manifest["bias_levels"]),
        )
        for name in policy.store.names():
            if name not in store:
                raise TrainingError(f"policy checkpoint missing tensor {name!r}")
            policy.store.set(name, store[name])
        policy._baseline = manifest.get("baseline")
        return policy


# -- rule-based baselines ------------------------------------------------------------


def baseline_empirical(load_frac: np.ndarray, tau: float = 0.2, bias_db: float = 3.0) -> Action:
    """Sleep every cell whose current load fraction is strictly below a global threshold."""
    load_frac = np.asarray(load_frac, dtype=float)
    sleep = load_frac < tau
    bias = np.where(sleep, bias_db, 0.0)
    return Action(sleep=sleep, bias_level_db=bias)


def baseline_custom(
    load_frac: np.ndarray,
    history: np.ndarray,
    percentile: float = 25.0,
    bias_db: float = 3.0,
) -> Action:
    """Per-cell threshold at a percentile of that cell's own load history."""
    load_frac = np.asarray(load_frac, dtype=float)
    history = np.atleast_2d(np.asarray(history, dtype=float))
    if history.shape[1] != load_frac.shape[0]:
        raise ShapeError("history must have one column per cell")
    thresholds = np.percentile(history, percentile, axis=0)
    sleep = load_frac < thresholds
    bias = np.where(sleep, bias_db, 0.0)
    return Action(sleep=sleep, bias_level_db=bias)


@dataclass
class GreedyEvaluation:
    """What the greedy loop needs to know about a tentative sleep pattern."""

    rsrp_avg_dbm: float | None
    per_cell_overload_mbps: np.ndarray


def baseline_greedy(
    load_frac: np.ndarray,
    neighbors: list[tuple[int, ...]],
    evaluate_fn,
    rsrp_floor_dbm: float,
    margin_db: float = 8.0,
    bias_db: float = 3.0,
) -> Action:
    """Iteratively sleep cells in ascending-load priority order, with rollback.

    ``evaluate_fn(sleep_mask, bias_vector) -> GreedyEvaluation`` judges each
    tentative pattern; a tentative sleep is reverted when the average RSRP
    falls below floor + margin or any compensation neighbor overloads.
    """
    load_frac = np.asarray(load_frac, dtype=float)
    n = load_frac.shape[0]
    order = np.lexsort((np.arange(n), load_frac))
    sleep = np.zeros(n, dtype=bool)
    threshold = rsrp_floor_dbm + margin_db
    for c in order:
        tentative = sleep.copy()
        tentative[c] = True
        action = Action(sleep=tentative, bias_level_db=np.where(tentative, bias_db, 0.0))
        ev = evaluate_fn(tentative, resolve_bias(action, neighbors))
        if np.isfinite(threshold) and (ev.rsrp_avg_dbm is None or ev.rsrp_avg_dbm < threshold):
            continue
        if any(ev.per_cell_overload_mbps[list(neighbors[c])] > 1e-9):
            continue
        sleep = tentative
    return Action(sleep=sleep, bias_level_db=np.where(sleep, bias_db, 0.0))
