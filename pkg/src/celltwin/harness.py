"""Closed loop: train the agent inside the generative twin, judge it on the oracle.

Separation of worlds is the organizing rule here. During policy training every
observation and reward comes from world-model samples (the oracle contributes
only static configuration: topology, power model, capacities). During
evaluation the roles flip: rewards, energy and coverage come from the oracle,
while the world model only supplies the forecast features inside the agent's
observation. Every result row is tagged with its environment so the two can
never be conflated in a report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats as sstats

from . import dataset as ds
from .agent import (
    Action,
    GreedyEvaluation,
    Observation,
    Policy,
    RewardWeights,
    Trajectory,
    baseline_custom,
    baseline_empirical,
    baseline_greedy,
    compute_reward,
    resolve_bias,
)
from .diffusion import DenoiserArch, DiffusionModel, MemoryConfig, make_schedule
from .errors import ConfigError, ModelError
from .scenario import Oracle, ScenarioConfig, build_scenario, cell_power_watts

SCHEMES = ("agent", "empirical", "custom", "greedy", "always_on", "all_sleep")

REPORT_COLUMNS = (
    "scheme", "scenario", "peak_fraction", "seed", "environment", "utility",
    "energy_wh", "energy_saved_pct", "rsrp_avg_dbm", "rsrp_delta_db", "dropped_rate",
)


@dataclass
class EpisodeResult:
    policy_id: str
    environment: str  # "worldmodel" | "oracle"
    seed: int
    energy_wh: np.ndarray
    rsrp_avg_dbm: np.ndarray  # NaN on steps with nobody served
    dropped_rate: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        n = len(self.rewards)
        if not (len(self.energy_wh) == len(self.rsrp_avg_dbm) == len(self.dropped_rate) == n):
            raise ConfigError("episode result fields must have equal length")
        if not np.isfinite(self.rewards).all():
            raise ConfigError("episode rewards must be finite")

    @property
    def utility(self) -> float:
        return float(self.rewards.mean())

    @property
    def total_energy_wh(self) -> float:
        return float(self.energy_wh.sum())

    @property
    def mean_rsrp_dbm(self) -> float:
        served = ~np.isnan(self.rsrp_avg_dbm)
        return float(self.rsrp_avg_dbm[served].mean()) if served.any() else float("nan")

    @property
    def mean_dropped_rate(self) -> float:
        return float(self.dropped_rate.mean())


# -- world-model bundle -----------------------------------------------------------


@dataclass
class WMTrainConfig:
    diffusion_steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02
    n_experts: int = 3
    expert_hidden: tuple[int, ...] = (64, 64)
    gate_hidden: tuple[int, ...] = (32,)
    cond_emb_dim: int = 8
    time_dim: int = 8
    train_steps: int = 2500
    batch_size: int = 64
    lr: float = 1e-3
    p_uncond: float = 0.1
    guidance_w: float = 1.0
    memory_kinds: tuple[str, ...] = ("traffic", "users")
    seed: int = 11


@dataclass
class WorldModelBundle:
    """The three generation heads the optimization loop consumes."""

    traffic: DiffusionModel
    users: DiffusionModel
    rsrp: DiffusionModel

    def head(self, kind: str) -> DiffusionModel:
        return {"traffic": self.traffic, "users": self.users, "rsrp": self.rsrp}[kind]

    @classmethod
    def train_from_datasets(
        cls,
        datasets: dict[str, ds.SampleSet],
        config: WMTrainConfig = WMTrainConfig(),
    ) -> tuple["WorldModelBundle", dict[str, list[float]]]:
        missing = {"traffic", "users", "rsrp"} - set(datasets)
        if missing:
            raise ConfigError(f"datasets missing kind {sorted(missing)[0]!r}")
        heads, curves = {}, {}
        for kind in ("traffic", "users", "rsrp"):
            sample_set = datasets[kind]
            arch = DenoiserArch(
                series_len=sample_set.series_len,
                cond_emb_dim=config.cond_emb_dim,
                time_dim=config.time_dim,
                n_experts=config.n_experts,
                expert_hidden=config.expert_hidden,
                gate_hidden=config.gate_hidden,
                memory=MemoryConfig() if kind in config.memory_kinds else None,
            )
            model = DiffusionModel(
                kind=kind,
                arch=arch,
                schedule=make_schedule(config.diffusion_steps, config.beta_min, config.beta_max),
                stats=sample_set.stats,
                layout=sample_set.layout,
                seed=config.seed,
                p_uncond=config.p_uncond,
                guidance_w=config.guidance_w,
            )
            train_idx = sample_set.split["train"]
            rng = np.random.default_rng(np.random.SeedSequence((config.seed, 21, ds.KINDS.index(kind))))
            curves[kind] = model.train(
                sample_set.normalized_series(train_idx),
                sample_set.normalized_conditions(train_idx),
                sample_set.masks[train_idx],
                steps=config.train_steps,
                batch_size=config.batch_size,
                rng=rng,
                lr=config.lr,
            )
            heads[kind] = model
        return cls(**heads), curves

    def save(self, paths: dict[str, str]) -> None:
        for kind in ("traffic", "users", "rsrp"):
            self.head(kind).save(paths[kind])

    @classmethod
    def load(cls, paths: dict[str, str]) -> "WorldModelBundle":
        models = {kind: DiffusionModel.load(paths[kind]) for kind in ("traffic", "users", "rsrp")}
        for kind, model in models.items():
            if model.kind != kind:
                raise ModelError(f"checkpoint at {paths[kind]} holds kind {model.kind!r}, expected {kind!r}")
        return cls(**models)


# -- shared environment geometry ------------------------------------------------------


class _Geometry:
    """Static scenario facts both environments rely on."""

    def __init__(self, oracle: Oracle):
        self.oracle = oracle
        self.n_cells = oracle.n_cells
        self.n_grids = oracle.n_grids
        self.cells = oracle.cells
        self.neighbors = [tuple(oracle.cell_pos_index(nb) for nb in c.neighbors) for c in oracle.cells]
        self.capacity = np.array([c.capacity_mbps for c in oracle.cells])
        self.nearest = np.array([oracle.nearest_cell_of_grid(g) for g in range(oracle.n_grids)])
        self.grid_users_weight = np.array(
            [g.base_users * g.poi_weight for g in oracle.config.grids]
        )
        self.users_scale = np.maximum(
            np.bincount(self.nearest, weights=self.grid_users_weight, minlength=self.n_cells), 1.0
        )
        self.step_hours = oracle.config.traffic_step_hours
        self.steps_per_day = 24 // self.step_hours
        self.user_steps_per_day = 24 // oracle.config.user_step_hours
        self.users_per_traffic_step = self.step_hours // oracle.config.user_step_hours

    def aggregate_users(self, per_grid: np.ndarray) -> np.ndarray:
        return np.bincount(self.nearest, weights=per_grid, minlength=self.n_cells)

    def observation(self, load_frac, pred_load_frac, pred_users_cell, hour) -> Observation:
        pred = np.asarray(pred_load_frac, dtype=float)
        neighbor_pred = np.array([pred[list(nbs)].mean() for nbs in self.neighbors])
        angle = 2.0 * np.pi * (hour % 24) / 24.0
        return Observation(
            load_frac=np.asarray(load_frac, dtype=float),
            pred_load_frac=pred,
            pred_users_norm=np.asarray(pred_users_cell, dtype=float) / self.users_scale,
            neighbor_pred_load=neighbor_pred,
            hour_sin=float(np.sin(angle)),
            hour_cos=float(np.cos(angle)),
        )


def _conditions_traffic(oracle: Oracle, layout: ds.ConditionLayout) -> np.ndarray:
    raw = np.stack([ds.condition_for_traffic(oracle, c.id, 0) for c in oracle.cells])
    return layout.normalize(raw)


def _conditions_users(oracle: Oracle, layout: ds.ConditionLayout) -> np.ndarray:
    raw = np.stack([ds.condition_for_users(oracle, g, 0) for g in range(oracle.n_grids)])
    return layout.normalize(raw)


def _conditions_rsrp_table(
    oracle: Oracle,
    layout: ds.ConditionLayout,
    draws: int = 1,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Link conditions for every (grid, cell[, draw]) triple, rows in that order.

    With multiple draws per link the distances are jittered within the grid
    square, so the draws stand for users spread over the grid rather than a
    single point at its center.
    """
    geo_positions = np.array([g.position for g in oracle.config.grids])
    edge = oracle._grid_edge_km
    rows = []
    for g in range(oracle.n_grids):
        for c in range(oracle.n_cells):
            for _ in range(draws):
                pos = geo_positions[g]
                if draws > 1 and rng is not None:
                    pos = pos + rng.uniform(-edge / 2, edge / 2, size=2)
                dist = float(np.linalg.norm(pos - np.array(oracle.cells[c].position)))
                rows.append(ds.condition_for_rsrp(oracle, c, dist, hour=12, sleep_frac=0.3))
    return layout.normalize(np.stack(rows))


# -- world-model environment -----------------------------------------------------------


@dataclass
class WorldModelEnvConfig:
    day_pool: int = 32
    rsrp_pool: int = 12
    rsrp_draws: int = 4
    sample_seed: int = 19


class WorldModelEnv:
    """Virtual day built entirely from world-model samples.

    On construction the environment pre-samples a pool of full synthetic days
    (traffic per cell, users per grid) and per-(grid, cell) RSRP tables; each
    episode draws one of each, which keeps per-step cost at array lookups while
    every quantity the agent sees still comes from the generative model. Each
    table holds several draws per (grid, cell) link so a grid near the drop
    floor loses a fraction of its users rather than all or none.
    """

    environment_id = "worldmodel"

    def __init__(
        self,
        bundle: WorldModelBundle,
        oracle: Oracle,
        weights: RewardWeights,
        config: WorldModelEnvConfig = WorldModelEnvConfig(),
    ):
        self.geo = _Geometry(oracle)
        self.bundle = bundle
        self.weights = weights
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence((config.sample_seed, 3)))
        geo = self.geo

        cond_t = np.tile(_conditions_traffic(oracle, bundle.traffic.layout), (config.day_pool, 1))
        full_t = np.ones((cond_t.shape[0], geo.steps_per_day), dtype=bool)
        flat_t = bundle.traffic.sample(cond_t, full_t, None, rng)
        self.traffic_pool = np.clip(
            flat_t.reshape(config.day_pool, geo.n_cells, geo.steps_per_day),
            0.0, geo.capacity[None, :, None],
        )

        cond_u = np.tile(_conditions_users(oracle, bundle.users.layout), (config.day_pool, 1))
        full_u = np.ones((cond_u.shape[0], geo.user_steps_per_day), dtype=bool)
        flat_u = bundle.users.sample(cond_u, full_u, None, rng)
        self.users_pool = np.rint(np.clip(
            flat_u.reshape(config.day_pool, geo.n_grids, geo.user_steps_per_day), 0.0, None
        ))

        # Guidance-free sampling keeps the conditional spread honest, which is
        # what calibrates the fraction of below-floor draws on far links.
        cond_r = _conditions_rsrp_table(oracle, bundle.rsrp.layout, config.rsrp_draws, rng)
        tiled = np.tile(cond_r, (config.rsrp_pool, 1))
        flat = bundle.rsrp.sample(
            tiled, np.ones((tiled.shape[0], 1), dtype=bool), None, rng, guidance_w=0.0
        )
        self.rsrp_pool = flat.reshape(
            config.rsrp_pool, geo.n_grids, geo.n_cells, config.rsrp_draws
        )

        self._day = None
        self._users_day = None
        self._table = None          # (n_grids, n_cells, rsrp_draws)
        self._table_mean = None
        self._natural = None
        self._step = 0

    @property
    def steps_per_episode(self) -> int:
        return self.geo.steps_per_day

    def reset(self, rng: np.random.Generator) -> Observation:
        self._day = self.traffic_pool[rng.integers(0, len(self.traffic_pool))]
        self._users_day = self.users_pool[rng.integers(0, len(self.users_pool))]
        self._table = self.rsrp_pool[rng.integers(0, len(self.rsrp_pool))]
        self._table_mean = self._table.mean(axis=2)
        self._natural = np.argmax(self._table_mean, axis=1)
        self._step = 0
        return self._observation()

    def _users_now(self, step: int) -> np.ndarray:
        hour = min(step * self.geo.users_per_traffic_step, self.geo.user_steps_per_day - 1)
        return self._users_day[:, hour]

    def _observation(self) -> Observation:
        geo = self.geo
        d = self._step
        nxt = min(d + 1, geo.steps_per_day - 1)
        users_next = self._users_now(nxt)
        return geo.observation(
            load_frac=self._day[:, d] / geo.capacity,
            pred_load_frac=self._day[:, nxt] / geo.capacity,
            pred_users_cell=geo.aggregate_users(users_next),
            hour=d * geo.step_hours,
        )

    def step(self, action: Action) -> tuple[Observation | None, float, bool, dict]:
        geo = self.geo
        d = self._step
        native = self._day[:, d]
        users = self._users_now(d)
        total_users = int(users.sum())
        floor = geo.oracle.config.rsrp_floor_dbm

        sleep = action.sleep
        bias = resolve_bias(action, geo.neighbors)
        active = ~sleep
        grid_idx = np.arange(geo.n_grids)
        if active.any():
            biased = np.where(active[None, :], self._table_mean + bias[None, :], -np.inf)
            serving = np.argmax(biased, axis=1)
            draws = self._table[grid_idx, serving]  # (n_grids, rsrp_draws)
            above = draws >= floor
            served_frac = above.mean(axis=1)
            with np.errstate(invalid="ignore"):
                grid_rsrp = np.where(
                    served_frac > 0,
                    np.where(above, draws, 0.0).sum(axis=1) / np.maximum(above.sum(axis=1), 1),
                    np.nan,
                )
        else:
            serving = np.full(geo.n_grids, -1)
            served_frac = np.zeros(geo.n_grids)
            grid_rsrp = np.full(geo.n_grids, np.nan)

        # Load bookkeeping mirrors the oracle: active cells keep their native
        # load; a sleeping cell's load follows its natural users proportionally.
        load = np.where(sleep, 0.0, native)
        nat_users_per_cell = np.bincount(self._natural, weights=users, minlength=geo.n_cells)
        for c in np.flatnonzero(sleep):
            if nat_users_per_cell[c] <= 0:
                continue
            mine = self._natural == c
            share = native[c] * users[mine] * served_frac[mine] / nat_users_per_cell[c]
            np.add.at(load, serving[mine], share)
        load[sleep] = 0.0
        overload = np.maximum(load - geo.capacity, 0.0)
        load = np.minimum(load, geo.capacity)

        power = np.array([
            cell_power_watts(cell, load[i] / cell.capacity_mbps, bool(sleep[i]))
            for i, cell in enumerate(geo.cells)
        ])
        energy = float(power.sum() * geo.step_hours)
        ref_power = sum(
            cell_power_watts(cell, min(native[i] / cell.capacity_mbps, 1.0), False)
            for i, cell in enumerate(geo.cells)
        )
        ref_energy = float(ref_power * geo.step_hours)

        served_users = users * served_frac
        n_served = float(served_users.sum())
        dropped = float(total_users - n_served)
        if n_served > 0:
            valid = served_users > 0
            rsrp_avg = float((served_users[valid] * grid_rsrp[valid]).sum() / n_served)
        else:
            rsrp_avg = None
        reward = compute_reward(energy, ref_energy, rsrp_avg, dropped, total_users, self.weights)

        self._step += 1
        done = self._step >= geo.steps_per_day
        obs = None if done else self._observation()
        info = {
            "energy_wh": energy,
            "reference_energy_wh": ref_energy,
            "rsrp_avg_dbm": rsrp_avg,
            "dropped": dropped,
            "total_users": total_users,
            "overload_mbps": overload,
        }
        return obs, reward, done, info


# -- oracle environment ---------------------------------------------------------------


class OracleEnv:
    """Ground-truth day; the world model contributes only forecast features.

    ``predict_mode`` selects how next-window forecasts are produced:
    ``long_term`` draws one full context-only day per episode, ``short_term``
    re-generates each step conditioned on the history revealed so far.
    """

    environment_id = "oracle"

    def __init__(
        self,
        oracle: Oracle,
        weights: RewardWeights,
        bundle: WorldModelBundle | None = None,
        day: int = 1,
        predict_mode: str = "long_term",
        predict_seed: int = 5,
    ):
        if predict_mode not in ("long_term", "short_term"):
            raise ConfigError(f"unknown predict_mode {predict_mode!r}")
        if (day + 1) * 24 > oracle.config.horizon_hours:
            raise ConfigError(f"day {day} exceeds the scenario horizon")
        self.geo = _Geometry(oracle)
        self.oracle = oracle
        self.weights = weights
        self.bundle = bundle
        self.day = day
        self.predict_mode = predict_mode
        self.predict_seed = predict_seed
        self._t0 = day * 24
        self._step = 0
        self._pred_day = None
        self._pred_users = None

    @property
    def steps_per_episode(self) -> int:
        return self.geo.steps_per_day

    def history_load_fractions(self) -> np.ndarray:
        """Previous-day native load fractions, for threshold baselines."""
        geo = self.geo
        t0 = self._t0 - 24
        rows = []
        for k in range(geo.steps_per_day):
            t = t0 + k * geo.step_hours
            rows.append([
                self.oracle.traffic_at(c.id, t) / c.capacity_mbps for c in geo.cells
            ])
        return np.array(rows)

    def current_load_fraction(self) -> np.ndarray:
        t = self._t0 + self._step * self.geo.step_hours
        return np.array([
            min(self.oracle.traffic_at(c.id, t) / c.capacity_mbps, 1.0) for c in self.geo.cells
        ])

    def greedy_evaluator(self):
        t = self._t0 + self._step * self.geo.step_hours

        def evaluate(sleep_mask: np.ndarray, bias_vec: np.ndarray) -> GreedyEvaluation:
            state = self.oracle.step_network(t, sleep_mask, bias_vec)
            return GreedyEvaluation(
                rsrp_avg_dbm=state.rsrp_avg_dbm,
                per_cell_overload_mbps=state.per_cell_overload_mbps,
            )

        return evaluate

    def reset(self, rng: np.random.Generator | None = None) -> Observation:
        self._step = 0
        if self.bundle is not None:
            self._sample_predictions()
        return self._observation()

    def _sample_predictions(self) -> None:
        geo = self.geo
        rng = np.random.default_rng(
            np.random.SeedSequence((self.predict_seed, self.oracle.config.seed, self.day))
        )
        cond_t = _conditions_traffic(self.oracle, self.bundle.traffic.layout)
        cond_u = _conditions_users(self.oracle, self.bundle.users.layout)
        if self.predict_mode == "long_term":
            full_t = np.ones((geo.n_cells, geo.steps_per_day), dtype=bool)
            self._pred_day = np.clip(
                self.bundle.traffic.sample(cond_t, full_t, None, rng), 0.0, geo.capacity[:, None]
            )
            full_u = np.ones((geo.n_grids, geo.user_steps_per_day), dtype=bool)
            self._pred_users = np.rint(
                np.clip(self.bundle.users.sample(cond_u, full_u, None, rng), 0.0, None)
            )
        else:
            self._pred_day = None
            self._pred_users = None

    def _short_term_prediction(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """Regenerate the day conditioned on oracle history up to this step."""
        geo = self.geo
        rng = np.random.default_rng(
            np.random.SeedSequence((self.predict_seed, self.oracle.config.seed, self.day, step))
        )
        revealed_t = step + 1
        mask_t = np.zeros((geo.n_cells, geo.steps_per_day), dtype=bool)
        mask_t[:, revealed_t:] = True
        context_t = np.zeros((geo.n_cells, geo.steps_per_day))
        for k in range(revealed_t):
            t = self._t0 + k * geo.step_hours
            context_t[:, k] = [self.oracle.traffic_at(c.id, t) for c in geo.cells]
        cond_t = _conditions_traffic(self.oracle, self.bundle.traffic.layout)
        if mask_t.any():
            gen_t = self.bundle.traffic.sample(cond_t, mask_t, context_t, rng)
        else:
            gen_t = context_t
        gen_t = np.clip(gen_t, 0.0, geo.capacity[:, None])

        revealed_u = min((step + 1) * geo.users_per_traffic_step, geo.user_steps_per_day)
        mask_u = np.zeros((geo.n_grids, geo.user_steps_per_day), dtype=bool)
        mask_u[:, revealed_u:] = True
        context_u = np.zeros((geo.n_grids, geo.user_steps_per_day))
        for h in range(revealed_u):
            t = self._t0 + h * self.oracle.config.user_step_hours
            context_u[:, h] = [self.oracle.users_at(g, t) for g in range(geo.n_grids)]
        cond_u = _conditions_users(self.oracle, self.bundle.users.layout)
        if mask_u.any():
            gen_u = self.bundle.users.sample(cond_u, mask_u, context_u, rng)
        else:
            gen_u = context_u
        return gen_t, np.rint(np.clip(gen_u, 0.0, None))

    def _observation(self) -> Observation:
        geo = self.geo
        d = self._step
        load_frac = self.current_load_fraction()
        nxt = min(d + 1, geo.steps_per_day - 1)
        if self.bundle is None:
            pred_load = load_frac
            users_next = np.zeros(geo.n_grids)
        elif self.predict_mode == "long_term":
            pred_load = self._pred_day[:, nxt] / geo.capacity
            hour = min(nxt * geo.users_per_traffic_step, geo.user_steps_per_day - 1)
            users_next = self._pred_users[:, hour]
        else:
            gen_t, gen_u = self._short_term_prediction(d)
            pred_load = gen_t[:, nxt] / geo.capacity
            hour = min(nxt * geo.users_per_traffic_step, geo.user_steps_per_day - 1)
            users_next = gen_u[:, hour]
        return geo.observation(
            load_frac=load_frac,
            pred_load_frac=pred_load,
            pred_users_cell=geo.aggregate_users(users_next),
            hour=d * geo.step_hours,
        )

    def step(self, action: Action) -> tuple[Observation | None, float, bool, dict]:
        geo = self.geo
        t = self._t0 + self._step * geo.step_hours
        bias = resolve_bias(action, geo.neighbors)
        state = self.oracle.step_network(t, action.sleep, bias)
        energy = state.energy_wh(geo.step_hours)
        ref_energy = self.oracle.reference_power_watts(t) * geo.step_hours
        reward = compute_reward(
            energy, ref_energy, state.rsrp_avg_dbm, state.dropped_users,
            state.total_users, self.weights,
        )
        self._step += 1
        done = self._step >= geo.steps_per_day
        obs = None if done else self._observation()
        info = {
            "energy_wh": energy,
            "reference_energy_wh": ref_energy,
            "rsrp_avg_dbm": state.rsrp_avg_dbm,
            "dropped": state.dropped_users,
            "total_users": state.total_users,
            "overload_mbps": state.per_cell_overload_mbps,
        }
        return obs, reward, done, info


# -- actors ------------------------------------------------------------------------


def _policy_action(policy: Policy, obs: Observation, rng, stochastic: bool):
    vec = obs.vector()
    if stochastic:
        action, log_prob, choices = policy.sample(vec, rng)
        return action, log_prob, choices
    probs, _ = policy.distribution(vec)
    choices = np.argmax(probs[0], axis=1)
    log_prob = float(np.log(probs[0, np.arange(policy.n_cells), choices]).sum())
    return Action.from_choices(choices, policy.bias_levels), log_prob, choices


def run_wm_episode(
    env: WorldModelEnv, policy: Policy, rng: np.random.Generator, stochastic: bool = True
) -> tuple[Trajectory, EpisodeResult]:
    obs = env.reset(rng)
    obs_rows, choice_rows, rewards, log_probs = [], [], [], []
    energy, rsrp, dropped = [], [], []
    done = False
    while not done:
        action, log_prob, choices = _policy_action(policy, obs, rng, stochastic)
        obs_rows.append(obs.vector())
        choice_rows.append(choices)
        next_obs, reward, done, info = env.step(action)
        rewards.append(reward)
        log_probs.append(log_prob)
        energy.append(info["energy_wh"])
        rsrp.append(np.nan if info["rsrp_avg_dbm"] is None else info["rsrp_avg_dbm"])
        dropped.append(info["dropped"] / max(info["total_users"], 1))
        obs = next_obs
    traj = Trajectory(
        observations=np.array(obs_rows),
        choices=np.array(choice_rows),
        rewards=np.array(rewards),
        log_probs=np.array(log_probs),
    )
    result = EpisodeResult(
        policy_id="agent",
        environment=env.environment_id,
        seed=env.config.sample_seed,
        energy_wh=np.array(energy),
        rsrp_avg_dbm=np.array(rsrp),
        dropped_rate=np.array(dropped),
        rewards=np.array(rewards),
    )
    return traj, result


@dataclass
class AgentTrainConfig:
    updates: int = 300
    episodes_per_update: int = 6
    lr: float = 0.03
    hidden: tuple[int, ...] = (32,)
    bias_levels: tuple[float, ...] = (0.0, 3.0, 6.0)
    seed: int = 3


def run_training(
    bundle: WorldModelBundle,
    oracle: Oracle,
    weights: RewardWeights,
    config: AgentTrainConfig = AgentTrainConfig(),
    env_config: WorldModelEnvConfig = WorldModelEnvConfig(),
) -> tuple[Policy, list[float]]:
    """REINFORCE inside the world-model environment; returns the learning curve."""
    env = WorldModelEnv(bundle, oracle, weights, env_config)
    policy = Policy(
        n_cells=oracle.n_cells,
        obs_dim=Observation.dim(oracle.n_cells),
        hidden=config.hidden,
        bias_levels=config.bias_levels,
        seed=config.seed,
    )
    curve = []
    for update in range(config.updates):
        trajectories = []
        for episode in range(config.episodes_per_update):
            rng = np.random.default_rng(np.random.SeedSequence((config.seed, 9, update, episode)))
            traj, _ = run_wm_episode(env, policy, rng, stochastic=True)
            trajectories.append(traj)
        diag = policy.update(trajectories, lr=config.lr)
        curve.append(diag["mean_return"])
    return policy, curve


# -- oracle evaluation ----------------------------------------------------------------


@dataclass
class EvalConfig:
    tau: float = 0.2
    percentile: float = 25.0
    greedy_margin_db: float = 8.0
    baseline_bias_db: float = 3.0
    day: int = 1
    predict_mode: str = "long_term"


def _rule_action(scheme: str, env: OracleEnv, history: np.ndarray, cfg: EvalConfig) -> Action:
    load = env.current_load_fraction()
    n = env.geo.n_cells
    if scheme == "always_on":
        return Action.all_active(n)
    if scheme == "all_sleep":
        return Action.all_sleep(n, cfg.baseline_bias_db)
    if scheme == "empirical":
        return baseline_empirical(load, tau=cfg.tau, bias_db=cfg.baseline_bias_db)
    if scheme == "custom":
        return baseline_custom(load, history, percentile=cfg.percentile, bias_db=cfg.baseline_bias_db)
    if scheme == "greedy":
        return baseline_greedy(
            load, env.geo.neighbors, env.greedy_evaluator(),
            rsrp_floor_dbm=env.oracle.config.rsrp_floor_dbm,
            margin_db=cfg.greedy_margin_db, bias_db=cfg.baseline_bias_db,
        )
    raise ConfigError(f"unknown scheme {scheme!r}")


def run_oracle_episode(
    scheme: str,
    env: OracleEnv,
    seed: int,
    policy: Policy | None = None,
    cfg: EvalConfig = EvalConfig(),
) -> EpisodeResult:
    """One evaluated day on the oracle for one scheme; deterministic per inputs."""
    history = env.history_load_fractions() if scheme == "custom" else None
    obs = env.reset()
    energy, rsrp, dropped, rewards = [], [], [], []
    done = False
    while not done:
        if scheme == "agent":
            if policy is None:
                raise ConfigError("agent scheme needs a policy")
            action, _, _ = _policy_action(policy, obs, rng=None, stochastic=False)
        else:
            action = _rule_action(scheme, env, history, cfg)
        obs, reward, done, info = env.step(action)
        rewards.append(reward)
        energy.append(info["energy_wh"])
        rsrp.append(np.nan if info["rsrp_avg_dbm"] is None else info["rsrp_avg_dbm"])
        dropped.append(info["dropped"] / max(info["total_users"], 1))
    return EpisodeResult(
        policy_id=scheme,
        environment=env.environment_id,
        seed=seed,
        energy_wh=np.array(energy),
        rsrp_avg_dbm=np.array(rsrp),
        dropped_rate=np.array(dropped),
        rewards=np.array(rewards),
    )


def _check_envelope(results: dict[str, EpisodeResult], weights: RewardWeights) -> None:
    """No scheme may beat the all-sleep energy bound or the always-on coverage bound."""
    sleep_floor = results["all_sleep"].total_energy_wh
    ref = results["always_on"]

    def rsrp_term(r: EpisodeResult) -> float:
        span = weights.rsrp_hi_dbm - weights.rsrp_lo_dbm
        vals = r.rsrp_avg_dbm[~np.isnan(r.rsrp_avg_dbm)]
        if vals.size == 0:
            return 0.0
        return float(np.clip((vals - weights.rsrp_lo_dbm) / span, 0.0, 1.0).mean())

    for name, res in results.items():
        if res.total_energy_wh < sleep_floor - 1e-6:
            raise RuntimeError(f"sanity envelope: {name} reports energy below the all-sleep bound")
        if res.mean_dropped_rate == 0.0 and ref.mean_dropped_rate == 0.0:
            if rsrp_term(res) > rsrp_term(ref) + 1e-9:
                raise RuntimeError(f"sanity envelope: {name} reports coverage above the always-on bound")


def evaluate_policy(
    scenario: ScenarioConfig,
    schemes: tuple[str, ...],
    seeds: tuple[int, ...],
    weights: RewardWeights,
    bundle: WorldModelBundle | None = None,
    policy: Policy | None = None,
    cfg: EvalConfig = EvalConfig(),
) -> list[EpisodeResult]:
    """Evaluate schemes on full oracle days, one scenario seed at a time.

    The always-on and all-sleep references are always evaluated; every result
    set is checked against the sanity envelope before being returned.
    """
    out: list[EpisodeResult] = []
    run = tuple(dict.fromkeys(tuple(schemes) + ("always_on", "all_sleep")))
    for seed in seeds:
        oracle = build_scenario(replace(scenario, seed=int(seed)))
        per_seed: dict[str, EpisodeResult] = {}
        for scheme in run:
            env = OracleEnv(
                oracle, weights,
                bundle=bundle if scheme == "agent" else None,
                day=cfg.day, predict_mode=cfg.predict_mode,
            )
            per_seed[scheme] = run_oracle_episode(scheme, env, seed, policy=policy, cfg=cfg)
        _check_envelope(per_seed, weights)
        out.extend(per_seed.values())
    return out


# -- generation metrics ----------------------------------------------------------------


def oracle_mean_traffic(oracle: Oracle) -> np.ndarray:
    """Noise-free daily load profile, (n_cells, steps_per_day)."""
    step = oracle.config.traffic_step_hours
    return np.array([
        [oracle.deterministic_traffic_at(c.id, k * step) for k in range(24 // step)]
        for c in oracle.cells
    ])


def oracle_traffic_draws(scenario: ScenarioConfig, n: int) -> np.ndarray:
    """(n, n_cells, steps) day realizations across reseeded scenario copies."""
    step = scenario.traffic_step_hours
    days = []
    for k in range(n):
        oracle = build_scenario(replace(scenario, seed=1_000_003 + k))
        days.append([
            [oracle.traffic_at(c.id, s * step) for s in range(24 // step)]
            for c in oracle.cells
        ])
    return np.array(days)


def _lag1_autocorr(series: np.ndarray) -> float:
    a, b = series[:-1], series[1:]
    if a.std() < 1e-12 or b.std() < 1e-12:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def traffic_generation_metrics(
    model: DiffusionModel,
    scenario: ScenarioConfig,
    task: str,
    n_samples: int = 48,
    history_steps: int = 6,
    sample_seed: int = 23,
) -> dict[str, float]:
    """Fidelity of generated traffic against the oracle, normalized by its range.

    ``task`` is ``long_term_generation`` (context-free) or
    ``short_term_prediction`` (the day's first ``history_steps`` windows are
    revealed from a held-out oracle realization and only the tail is scored).
    """
    oracle = build_scenario(scenario)
    det_profile = oracle_mean_traffic(oracle)
    n_cells, steps = det_profile.shape
    value_range = float(det_profile.max() - det_profile.min())
    draws = oracle_traffic_draws(scenario, n_samples)
    mean_profile = draws.mean(axis=0)  # empirical, same estimator as the generated side

    if task == "long_term_generation":
        mask = np.ones(steps, dtype=bool)
        context = None
    elif task == "short_term_prediction":
        if not 0 < history_steps < steps:
            raise ConfigError(f"history_steps must be in (0, {steps})")
        mask = ds.make_mask("short_term_prediction", steps, steps - history_steps)
        context = np.array([
            [oracle.traffic_at(c.id, k * scenario.traffic_step_hours) for k in range(steps)]
            for c in oracle.cells
        ])
    else:
        raise ConfigError(f"unknown task {task!r}")

    rng = np.random.default_rng(np.random.SeedSequence((sample_seed, 31)))
    conds = _conditions_traffic(oracle, model.layout)
    tiled_cond = np.repeat(conds, n_samples, axis=0)
    tiled_mask = np.tile(mask, (n_cells * n_samples, 1))
    tiled_ctx = None if context is None else np.repeat(context, n_samples, axis=0)
    gen = model.sample(tiled_cond, tiled_mask, tiled_ctx, rng)
    gen = np.clip(gen, 0.0, None).reshape(n_cells, n_samples, steps)

    scored = mask
    gen_mean = gen.mean(axis=1)
    mae = float(np.abs(gen_mean[:, scored] - mean_profile[:, scored]).mean())
    w1_vals = [
        sstats.wasserstein_distance(gen[c, :, s], draws[:, c, s])
        for c in range(n_cells)
        for s in np.flatnonzero(scored)
    ]
    w1 = float(np.mean(w1_vals))
    acf_gap = float(np.mean([
        abs(
            np.mean([_lag1_autocorr(gen[c, i]) for i in range(n_samples)])
            - np.mean([_lag1_autocorr(draws[i, c]) for i in range(n_samples)])
        )
        for c in range(n_cells)
    ]))
    return {
        "task": task,
        "mae": mae,
        "mae_frac_of_range": mae / value_range,
        "w1": w1,
        "w1_frac_of_range": w1 / value_range,
        "acf_lag1_gap": acf_gap,
        "oracle_range": value_range,
    }


def rsrp_controllability(
    model: DiffusionModel,
    tx_range: tuple[float, float],
    freq_range: tuple[float, float],
    dist_range: tuple[float, float],
    grid_points: int = 5,
    replicates: int = 16,
    sample_seed: int = 29,
) -> dict[str, float]:
    """Spearman rank checks over a (tx, freq, distance) condition lattice.

    Controllability is judged on axis-marginal means: for each tx level the
    generated RSRP is averaged over every (freq, distance, replicate) cell
    before ranking, and likewise per distance level.
    """
    tx = np.linspace(*tx_range, grid_points)
    freq = np.linspace(*freq_range, grid_points)
    dist = np.linspace(*dist_range, grid_points)
    conds = []
    for a in tx:
        for f in freq:
            for d in dist:
                conds.append(model.layout.normalize_partial(
                    {"tx_power_dbm": a, "carrier_freq_mhz": f, "distance_km": d}
                ))
    conds = np.repeat(np.stack(conds), replicates, axis=0)
    rng = np.random.default_rng(np.random.SeedSequence((sample_seed, 37)))
    gen = model.sample(conds, np.ones((conds.shape[0], 1), dtype=bool), None, rng)
    cube = gen.reshape(grid_points, grid_points, grid_points, replicates)
    tx_means = cube.mean(axis=(1, 2, 3))
    dist_means = cube.mean(axis=(0, 1, 3))
    rho_tx = float(sstats.spearmanr(tx, tx_means).statistic)
    rho_dist = float(sstats.spearmanr(dist, dist_means).statistic)
    return {"spearman_tx": rho_tx, "spearman_distance": rho_dist}


def generation_metrics(
    bundle: WorldModelBundle,
    scenario: ScenarioConfig,
    n_samples: int = 48,
) -> dict[str, float]:
    """Combined fidelity + controllability report for one bundle and scenario."""
    oracle = build_scenario(scenario)
    tx_vals = [c.tx_power_dbm for c in oracle.cells]
    freq_vals = [c.carrier_freq_mhz for c in oracle.cells]
    long = traffic_generation_metrics(bundle.traffic, scenario, "long_term_generation", n_samples)
    short = traffic_generation_metrics(bundle.traffic, scenario, "short_term_prediction", n_samples)
    ctrl = rsrp_controllability(
        bundle.rsrp,
        tx_range=(min(tx_vals), max(tx_vals)),
        freq_range=(min(freq_vals), max(freq_vals)),
        dist_range=(0.2, 2.4),
    )
    out = {}
    for prefix, metrics in (("long", long), ("short", short)):
        for key in ("mae", "mae_frac_of_range", "w1", "w1_frac_of_range", "acf_lag1_gap"):
            out[f"{prefix}_{key}"] = metrics[key]
    out.update(ctrl)
    return out


# -- counterfactual suite ----------------------------------------------------------------


@dataclass
class CounterfactualConfig:
    fractions: tuple[float, ...] = (0.5, 0.6, 0.8)
    lora_rank: int = 4
    lora_alpha: float = 8.0
    adapt_steps: int = 200
    adapt_days: int = 4
    adapt_lr: float = 2e-3
    adapt_seed: int = 43
    retrain_agent: bool = False
    retrain_updates: int = 120


def adapt_traffic_model(
    base: DiffusionModel, oracle_cf: Oracle, cfg: CounterfactualConfig
) -> DiffusionModel:
    """Low-rank adaptation of the traffic head on a small counterfactual rollout.

    The clone keeps the base model's normalization and condition statistics so
    the adapted head stays drop-in compatible with the rest of the bundle.
    """
    clone = DiffusionModel(
        kind=base.kind, arch=base.arch, schedule=base.schedule, stats=base.stats,
        layout=base.layout, p_uncond=base.p_uncond, guidance_w=base.guidance_w,
    )
    for name in base.store.names():
        clone.store.set(name, base.store[name].copy())
    clone.lora_attach(cfg.lora_rank, cfg.lora_alpha, seed=cfg.adapt_seed)
    cf_sets = ds.collect_dataset(oracle_cf, n_days=cfg.adapt_days, kinds=("traffic",))
    cf = cf_sets["traffic"]
    rng = np.random.default_rng(np.random.SeedSequence((cfg.adapt_seed, 47)))
    clone.train(
        base.stats.normalize(cf.series),
        base.layout.normalize(cf.conditions),
        cf.masks,
        steps=cfg.adapt_steps,
        batch_size=32,
        rng=rng,
        lr=cfg.adapt_lr,
    )
    return clone


def counterfactual_suite(
    scenario: ScenarioConfig,
    bundle: WorldModelBundle,
    policy: Policy,
    seeds: tuple[int, ...],
    weights: RewardWeights,
    cfg: CounterfactualConfig = CounterfactualConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    agent_cfg: AgentTrainConfig = AgentTrainConfig(),
) -> tuple[list[dict], list[dict]]:
    """Re-run every scheme under scaled-peak scenarios with an adapted twin.

    Returns (episode rows, world-model adaptation rows). The agent is evaluated
    zero-shot with the adapted traffic head supplying its forecasts; when
    ``cfg.retrain_agent`` is set an additionally retrained agent is reported
    under the scheme name ``agent_retrained``.
    """
    episode_rows: list[dict] = []
    wm_rows: list[dict] = []
    for phi in cfg.fractions:
        scen_cf = replace(scenario, counterfactual_peak_fraction=float(phi))
        oracle_cf = build_scenario(scen_cf)
        adapted = adapt_traffic_model(bundle.traffic, oracle_cf, cfg)
        frozen_m = traffic_generation_metrics(bundle.traffic, scen_cf, "long_term_generation")
        adapted_m = traffic_generation_metrics(adapted, scen_cf, "long_term_generation")
        wm_rows.append({
            "peak_fraction": float(phi),
            "mae_frozen": frozen_m["mae"],
            "mae_adapted": adapted_m["mae"],
            "mae_frac_frozen": frozen_m["mae_frac_of_range"],
            "mae_frac_adapted": adapted_m["mae_frac_of_range"],
        })
        bundle_cf = WorldModelBundle(traffic=adapted, users=bundle.users, rsrp=bundle.rsrp)
        results = evaluate_policy(
            scen_cf, SCHEMES, seeds, weights, bundle=bundle_cf, policy=policy, cfg=eval_cfg,
        )
        episode_rows.extend(
            episode_row(r, scenario_name="counterfactual", peak_fraction=float(phi), results=results)
            for r in results
        )
        if cfg.retrain_agent:
            retrained, _ = run_training(
                bundle_cf, oracle_cf, weights,
                config=replace(agent_cfg, updates=cfg.retrain_updates),
            )
            extra = evaluate_policy(
                scen_cf, ("agent",), seeds, weights, bundle=bundle_cf, policy=retrained, cfg=eval_cfg,
            )
            for r in extra:
                if r.policy_id == "agent":
                    row = episode_row(r, "counterfactual", float(phi), extra)
                    row["scheme"] = "agent_retrained"
                    episode_rows.append(row)
    return episode_rows, wm_rows


# -- report assembly -----------------------------------------------------------------


def episode_row(
    result: EpisodeResult,
    scenario_name: str,
    peak_fraction: float | None,
    results: list[EpisodeResult],
) -> dict:
    """Flatten one episode against its same-seed always-on reference."""
    ref = next(
        (r for r in results if r.policy_id == "always_on"
         and r.seed == result.seed and r.environment == result.environment),
        None,
    )
    saved = float("nan")
    delta = float("nan")
    if ref is not None and ref.total_energy_wh > 0:
        saved = 100.0 * (ref.total_energy_wh - result.total_energy_wh) / ref.total_energy_wh
        delta = result.mean_rsrp_dbm - ref.mean_rsrp_dbm
    return {
        "scheme": result.policy_id,
        "scenario": scenario_name,
        "peak_fraction": float("nan") if peak_fraction is None else peak_fraction,
        "seed": result.seed,
        "environment": result.environment,
        "utility": result.utility,
        "energy_wh": result.total_energy_wh,
        "energy_saved_pct": saved,
        "rsrp_avg_dbm": result.mean_rsrp_dbm,
        "rsrp_delta_db": delta,
        "dropped_rate": result.mean_dropped_rate,
    }


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows_csv(rows: list[dict], path: str, columns: tuple[str, ...] = REPORT_COLUMNS) -> None:
    """Deterministic CSV: fixed column order, shortest-roundtrip float text."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_format_value(row.get(c, "")) for c in columns) + "\n")


def read_rows_csv(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            parts = line.rstrip("\n").split(",")
            row = dict(zip(header, parts))
            for key in row:
                if key not in ("scheme", "scenario", "environment"):
                    try:
                        row[key] = float(row[key])
                    except ValueError:
                        pass
            rows.append(row)
    return rows


def write_manifest(manifest: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
