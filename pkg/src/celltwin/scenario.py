"""Deterministic synthetic multi-cell radio network.

The oracle is the ground-truth "physical world" of the pipeline: it produces
per-cell traffic, per-grid user counts, per-user RSRP, user association and
energy consumption, all as pure functions of (config, seed, query). It is the
source of training data for the generative model and the final judge of any
optimization policy.

Modelling choices (stand-ins; the real quantities these mimic are unspecified):
  * propagation: free-space path loss + log-normal shadowing,
  * energy: linear load-dependent model (EARTH-style macro figures),
  * demand: per-profile diurnal template = sum of two circular Gaussian bumps.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import CellAsleepError, ConfigError, DomainError, UnknownIdError

POI_PROFILES = ("residential", "office", "mixed", "event")

# Diurnal bump parameters per profile: (peak_hour, width_h, weight).
_BUMPS = {
    "residential": ((8.0, 3.0, 0.35), (20.0, 2.5, 1.0)),
    "office": ((11.0, 2.0, 1.0), (15.0, 2.5, 0.85)),
    "mixed": ((10.0, 2.5, 0.7), (19.0, 3.0, 0.9)),
    "event": ((19.0, 1.2, 1.0), (22.0, 1.5, 0.6)),
}

# RNG stream tags; every random draw is keyed by (seed, tag, *query) so any
# query is reproducible in isolation and evaluation order cannot matter.
_S_TRAFFIC = 1
_S_USERS = 2
_S_POS = 3
_S_SHADOW = 4

MIN_DISTANCE_KM = 0.01  # 10 m clamp keeps the path-loss log finite


def _circular_hour_distance(hour: float, peak: float) -> float:
    d = abs(hour - peak) % 24.0
    return min(d, 24.0 - d)


def _raw_diurnal(profile: str, hour: float) -> float:
    total = 0.0
    for peak, width, weight in _BUMPS[profile]:
        d = _circular_hour_distance(hour, peak)
        total += weight * math.exp(-0.5 * (d / width) ** 2)
    return total


# Normalize each template to peak 1.0 on a fine grid, so `amp` is the peak
# demand fraction added on top of `base`.
_TEMPLATE_PEAK = {
    p: max(_raw_diurnal(p, h) for h in np.arange(0.0, 24.0, 0.05)) for p in POI_PROFILES
}


def diurnal(profile: str, hour: float) -> float:
    """Daily demand shape in [0, 1] for a POI profile at an hour of day."""
    if profile not in _BUMPS:
        raise ConfigError(f"unknown poi_profile {profile!r}")
    return _raw_diurnal(profile, hour) / _TEMPLATE_PEAK[profile]


@dataclass(frozen=True)
class CellConfig:
    id: int
    position: tuple[float, float]
    tx_power_dbm: float
    carrier_freq_mhz: float
    capacity_mbps: float
    poi_profile: str
    neighbors: tuple[int, ...]
    p0_watts: float = 130.0
    delta_p: float = 4.7
    p_max_out_watts: float = 20.0
    p_sleep_watts: float = 75.0


@dataclass(frozen=True)
class GridCell:
    position: tuple[float, float]
    poi_weight: float
    base_users: int


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    n_cells: int
    cell_configs: tuple[CellConfig, ...]
    grid_dim: int
    grids: tuple[GridCell, ...]
    horizon_hours: int
    traffic_step_hours: int = 2
    user_step_hours: int = 1
    counterfactual_peak_fraction: float | None = None
    rsrp_floor_dbm: float = -110.0
    shadowing_sigma_db: float = 4.0
    traffic_base: float = 0.15
    traffic_amp: float = 0.55
    traffic_noise_sigma: float = 0.05


@dataclass
class NetworkState:
    """Ground-truth network condition for one decision step.

    `serving_cell[u]` is -1 for dropped users; `per_user_rsrp_dbm` is NaN there.
    """

    t_hours: int
    per_cell_load_mbps: np.ndarray
    per_cell_overload_mbps: np.ndarray
    per_grid_users: np.ndarray
    sleep_mask: np.ndarray
    user_grid: np.ndarray
    serving_cell: np.ndarray
    per_user_rsrp_dbm: np.ndarray
    per_cell_power_watts: np.ndarray
    dropped_users: int

    @property
    def total_users(self) -> int:
        return int(self.serving_cell.shape[0])

    @property
    def served_users(self) -> int:
        return self.total_users - self.dropped_users

    @property
    def rsrp_avg_dbm(self) -> float | None:
        served = self.serving_cell >= 0
        if not served.any():
            return None
        return float(self.per_user_rsrp_dbm[served].mean())

    def energy_wh(self, step_hours: float) -> float:
        return float(self.per_cell_power_watts.sum() * step_hours)


def path_loss_db(distance_km: float, freq_mhz: float) -> float:
    """Free-space path loss; distance clamped at 10 m to avoid the d→0 pole."""
    if freq_mhz <= 0:
        raise DomainError(f"freq_mhz must be > 0, got {freq_mhz}")
    d = max(float(distance_km), MIN_DISTANCE_KM)
    return 32.45 + 20.0 * math.log10(d) + 20.0 * math.log10(freq_mhz)


def rsrp_dbm(
    cell: CellConfig,
    user_pos: tuple[float, float],
    shadowing_db: float = 0.0,
    asleep: bool = False,
) -> float:
    """Received power from one cell at one position; sleeping cells emit nothing."""
    if asleep:
        raise CellAsleepError(f"cell {cell.id} is asleep")
    d = math.dist(cell.position, user_pos)
    return cell.tx_power_dbm - path_loss_db(d, cell.carrier_freq_mhz) + shadowing_db


def cell_power_watts(cell: CellConfig, load_fraction: float, asleep: bool) -> float:
    """Linear power model: p0 + delta_p * rho * p_max_out when active, p_sleep otherwise."""
    if not 0.0 <= load_fraction <= 1.0:
        raise DomainError(f"load_fraction must be in [0, 1], got {load_fraction}")
    if asleep:
        return cell.p_sleep_watts
    return cell.p0_watts + cell.delta_p * load_fraction * cell.p_max_out_watts


def associate_users(
    rsrp_matrix: np.ndarray,
    sleep_mask: np.ndarray,
    bias_db: np.ndarray,
    rsrp_floor_dbm: float,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Attach each user to the active cell maximizing rsrp + bias.

    Ties break toward the lowest cell id. A user is dropped when the selected
    cell's unbiased RSRP is below the floor, or when every cell sleeps.
    Returns (serving_cell with -1 for dropped, per-user rsrp with NaN, dropped).
    """
    n_users, n_cells = rsrp_matrix.shape
    serving = np.full(n_users, -1, dtype=np.int64)
    rsrp_out = np.full(n_users, np.nan)
    active = ~np.asarray(sleep_mask, dtype=bool)
    if n_users == 0:
        return serving, rsrp_out, 0
    if not active.any():
        return serving, rsrp_out, n_users
    biased = rsrp_matrix + np.asarray(bias_db, dtype=float)[None, :]
    biased = np.where(active[None, :], biased, -np.inf)
    best = np.argmax(biased, axis=1)  # argmax takes the first (lowest id) on ties
    best_rsrp = rsrp_matrix[np.arange(n_users), best]
    ok = best_rsrp >= rsrp_floor_dbm
    serving[ok] = best[ok]
    rsrp_out[ok] = best_rsrp[ok]
    return serving, rsrp_out, int(n_users - ok.sum())


class Oracle:
    """Immutable query interface over one scenario; safe for concurrent reads."""

    def __init__(self, config: ScenarioConfig):
        _validate_config(config)
        self.config = config
        self.cells = tuple(config.cell_configs)
        self._cell_index = {c.id: i for i, c in enumerate(self.cells)}
        self.n_cells = config.n_cells
        self.n_grids = len(config.grids)
        self._grid_pos = np.array([g.position for g in config.grids])
        self._cell_pos = np.array([c.position for c in self.cells])
        self._tx = np.array([c.tx_power_dbm for c in self.cells])
        self._freq = np.array([c.carrier_freq_mhz for c in self.cells])
        self._capacity = np.array([c.capacity_mbps for c in self.cells])
        # Grid square edge, inferred from the lattice pitch.
        xs = np.unique(self._grid_pos[:, 0])
        self._grid_edge_km = float(xs[1] - xs[0]) if len(xs) > 1 else 1.0
        # Nearest cell per grid (ties -> lowest cell id via argmin).
        d = np.linalg.norm(self._grid_pos[:, None, :] - self._cell_pos[None, :, :], axis=2)
        self._nearest_cell = np.argmin(d, axis=1)
        self._grid_cell_dist = d
        # Counterfactual rescale of the deterministic demand, per profile.
        self._peak_scale = {}
        steps = range(0, 24, config.traffic_step_hours)
        for p in POI_PROFILES:
            peak = max(config.traffic_base + config.traffic_amp * diurnal(p, h) for h in steps)
            phi = config.counterfactual_peak_fraction
            self._peak_scale[p] = 1.0 if phi is None else phi / peak

    # -- keyed randomness ----------------------------------------------------

    def _rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence((self.config.seed,) + key))

    # -- element queries -----------------------------------------------------

    def cell(self, cell_id: int) -> CellConfig:
        try:
            return self.cells[self._cell_index[cell_id]]
        except KeyError:
            raise UnknownIdError(f"unknown cell id {cell_id}") from None

    def cell_pos_index(self, cell_id: int) -> int:
        try:
            return self._cell_index[cell_id]
        except KeyError:
            raise UnknownIdError(f"unknown cell id {cell_id}") from None

    def _check_t(self, t_hours: int) -> None:
        if not 0 <= t_hours < self.config.horizon_hours:
            raise DomainError(
                f"t_hours {t_hours} outside horizon [0, {self.config.horizon_hours})"
            )

    def deterministic_traffic_at(self, cell_id: int, t_hours: int) -> float:
        """Noise-free load in Mbps (the expected value of traffic_at)."""
        cell = self.cell(cell_id)
        self._check_t(t_hours)
        step = self.config.traffic_step_hours
        tq = (t_hours // step) * step
        raw = self.config.traffic_base + self.config.traffic_amp * diurnal(
            cell.poi_profile, tq % 24
        )
        raw *= self._peak_scale[cell.poi_profile]
        return cell.capacity_mbps * min(max(raw, 0.0), 1.0)

    def traffic_at(self, cell_id: int, t_hours: int) -> float:
        """Load in Mbps at the traffic-step granularity, with seeded noise."""
        cell = self.cell(cell_id)
        self._check_t(t_hours)
        step = self.config.traffic_step_hours
        tq = (t_hours // step) * step
        raw = self.config.traffic_base + self.config.traffic_amp * diurnal(
            cell.poi_profile, tq % 24
        )
        raw *= self._peak_scale[cell.poi_profile]
        sigma = self.config.traffic_noise_sigma
        if sigma > 0:
            eta = float(self._rng(_S_TRAFFIC, cell.id, tq).normal(0.0, sigma))
            raw *= 1.0 + eta
        return cell.capacity_mbps * min(max(raw, 0.0), 1.0)

    def user_rate(self, grid_index: int, t_hours: int) -> float:
        """Poisson rate behind users_at; keeps a 0.2 floor so grids never empty out."""
        if not 0 <= grid_index < self.n_grids:
            raise UnknownIdError(f"grid index {grid_index} out of range")
        self._check_t(t_hours)
        step = self.config.user_step_hours
        tq = (t_hours // step) * step
        g = self.config.grids[grid_index]
        profile = self.cells[self._nearest_cell[grid_index]].poi_profile
        return g.base_users * g.poi_weight * (0.2 + 0.8 * diurnal(profile, tq % 24))

    def users_at(self, grid_index: int, t_hours: int) -> int:
        rate = self.user_rate(grid_index, t_hours)
        if rate == 0.0:
            return 0
        step = self.config.user_step_hours
        tq = (t_hours // step) * step
        return int(self._rng(_S_USERS, grid_index, tq).poisson(rate))

    # -- composite step ------------------------------------------------------

    def _users_and_shadowing(self, t_hours: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Seeded users (grid ids, positions) and per-(user, cell) shadowing at t."""
        step = self.config.user_step_hours
        tq = (t_hours // step) * step
        counts = np.array([self.users_at(g, t_hours) for g in range(self.n_grids)])
        grid_ids, positions, shadows = [], [], []
        half = self._grid_edge_km / 2.0
        for g, count in enumerate(counts):
            if count == 0:
                continue
            jitter = self._rng(_S_POS, g, tq).uniform(-half, half, size=(count, 2))
            positions.append(self._grid_pos[g][None, :] + jitter)
            grid_ids.append(np.full(count, g, dtype=np.int64))
            sigma = self.config.shadowing_sigma_db
            if sigma > 0:
                shadows.append(self._rng(_S_SHADOW, g, tq).normal(0.0, sigma, size=(count, self.n_cells)))
            else:
                shadows.append(np.zeros((count, self.n_cells)))
        if not grid_ids:
            empty = np.zeros((0, self.n_cells))
            return counts, np.zeros(0, dtype=np.int64), np.zeros((0, 2)), empty
        return counts, np.concatenate(grid_ids), np.vstack(positions), np.vstack(shadows)

    def rsrp_matrix(self, positions: np.ndarray, shadowing: np.ndarray) -> np.ndarray:
        """Per-(user, cell) RSRP in dBm, vectorized free-space + shadowing."""
        if positions.shape[0] == 0:
            return np.zeros((0, self.n_cells))
        d = np.linalg.norm(positions[:, None, :] - self._cell_pos[None, :, :], axis=2)
        d = np.maximum(d, MIN_DISTANCE_KM)
        pl = 32.45 + 20.0 * np.log10(d) + 20.0 * np.log10(self._freq)[None, :]
        return self._tx[None, :] - pl + shadowing

    def step_network(
        self,
        t_hours: int,
        sleep_mask: Sequence[bool] | np.ndarray | None = None,
        bias_db: Sequence[float] | np.ndarray | None = None,
    ) -> NetworkState:
        """One decision step: demand, association, offloaded load, power.

        A sleeping cell's native load travels with its natural users (equal
        per-user share) to wherever those users re-attach; active cells keep
        their native load. Re-routed load is capped at capacity and the excess
        reported as overload.
        """
        self._check_t(t_hours)
        sleep = np.zeros(self.n_cells, dtype=bool) if sleep_mask is None else np.asarray(sleep_mask, dtype=bool)
        bias = np.zeros(self.n_cells) if bias_db is None else np.asarray(bias_db, dtype=float)
        if sleep.shape != (self.n_cells,) or bias.shape != (self.n_cells,):
            raise DomainError("sleep_mask and bias_db must have one entry per cell")

        native = np.array([self.traffic_at(c.id, t_hours) for c in self.cells])
        counts, user_grid, positions, shadowing = self._users_and_shadowing(t_hours)
        rsrp = self.rsrp_matrix(positions, shadowing)

        # Natural attachment (everything active, no bias) fixes per-user demand.
        nat_serving, _, _ = associate_users(
            rsrp, np.zeros(self.n_cells, dtype=bool), np.zeros(self.n_cells), self.config.rsrp_floor_dbm
        )
        demand = np.zeros(len(user_grid))
        for c in range(self.n_cells):
            mine = nat_serving == c
            n = int(mine.sum())
            if n > 0:
                demand[mine] = native[c] / n

        serving, user_rsrp, dropped = associate_users(rsrp, sleep, bias, self.config.rsrp_floor_dbm)

        load = np.where(sleep, 0.0, native)
        for c in np.flatnonzero(sleep):
            moved = (nat_serving == c) & (serving >= 0)
            if moved.any():
                np.add.at(load, serving[moved], demand[moved])
        load[sleep] = 0.0
        overload = np.maximum(load - self._capacity, 0.0)
        load = np.minimum(load, self._capacity)

        power = np.array(
            [
                cell_power_watts(cell, load[i] / cell.capacity_mbps, bool(sleep[i]))
                for i, cell in enumerate(self.cells)
            ]
        )
        return NetworkState(
            t_hours=t_hours,
            per_cell_load_mbps=load,
            per_cell_overload_mbps=overload,
            per_grid_users=counts,
            sleep_mask=sleep,
            user_grid=user_grid,
            serving_cell=serving,
            per_user_rsrp_dbm=user_rsrp,
            per_cell_power_watts=power,
            dropped_users=dropped,
        )

    def reference_power_watts(self, t_hours: int) -> float:
        """Total power with every cell active carrying its native load."""
        total = 0.0
        for cell in self.cells:
            rho = min(self.traffic_at(cell.id, t_hours) / cell.capacity_mbps, 1.0)
            total += cell_power_watts(cell, rho, asleep=False)
        return total

    def nearest_cell_of_grid(self, grid_index: int) -> int:
        if not 0 <= grid_index < self.n_grids:
            raise UnknownIdError(f"grid index {grid_index} out of range")
        return int(self._nearest_cell[grid_index])

    def grid_cell_distance_km(self, grid_index: int, cell_index: int) -> float:
        return float(self._grid_cell_dist[grid_index, cell_index])


def _validate_config(config: ScenarioConfig) -> None:
    if config.n_cells < 2:
        raise ConfigError(f"n_cells must be >= 2, got {config.n_cells}")
    if len(config.cell_configs) != config.n_cells:
        raise ConfigError(
            f"cell_configs has {len(config.cell_configs)} entries, n_cells is {config.n_cells}"
        )
    if config.horizon_hours <= 0:
        raise ConfigError("horizon_hours must be positive")
    if config.traffic_step_hours <= 0 or config.horizon_hours % config.traffic_step_hours:
        raise ConfigError(
            f"traffic_step_hours {config.traffic_step_hours} must divide horizon_hours {config.horizon_hours}"
        )
    if config.user_step_hours <= 0 or config.horizon_hours % config.user_step_hours:
        raise ConfigError(
            f"user_step_hours {config.user_step_hours} must divide horizon_hours {config.horizon_hours}"
        )
    if config.grid_dim <= 0:
        raise ConfigError("grid_dim must be positive")
    if len(config.grids) != config.grid_dim**2:
        raise ConfigError(
            f"grids has {len(config.grids)} entries, expected grid_dim^2 = {config.grid_dim ** 2}"
        )
    phi = config.counterfactual_peak_fraction
    if phi is not None and not 0.0 < phi <= 1.0:
        raise ConfigError(f"counterfactual_peak_fraction must be in (0, 1], got {phi}")
    if config.shadowing_sigma_db < 0:
        raise ConfigError("shadowing_sigma_db must be >= 0")
    if config.traffic_noise_sigma < 0:
        raise ConfigError("traffic_noise_sigma must be >= 0")
    ids = [c.id for c in config.cell_configs]
    if len(set(ids)) != len(ids):
        raise ConfigError("cell ids must be unique")
    known = set(ids)
    for cell in config.cell_configs:
        if cell.tx_power_dbm <= 0 or cell.carrier_freq_mhz <= 0 or cell.capacity_mbps <= 0:
            raise ConfigError(f"cell {cell.id}: tx_power_dbm, carrier_freq_mhz, capacity_mbps must be > 0")
        if cell.p_sleep_watts >= cell.p0_watts:
            raise ConfigError(f"cell {cell.id}: p_sleep_watts must be < p0_watts")
        if cell.poi_profile not in POI_PROFILES:
            raise ConfigError(f"cell {cell.id}: unknown poi_profile {cell.poi_profile!r}")
        if not cell.neighbors:
            raise ConfigError(f"cell {cell.id}: neighbors must be nonempty")
        for nb in cell.neighbors:
            if nb == cell.id:
                raise ConfigError(f"cell {cell.id}: neighbors must exclude self")
            if nb not in known:
                raise ConfigError(f"cell {cell.id}: neighbor id {nb} not in scenario")
    for i, g in enumerate(config.grids):
        if not math.isfinite(g.poi_weight) or g.poi_weight < 0:
            raise ConfigError(f"grid {i}: poi_weight must be finite and >= 0")
        if g.base_users < 0:
            raise ConfigError(f"grid {i}: base_users must be >= 0")


def build_scenario(config: ScenarioConfig) -> Oracle:
    """Validate a config and return the immutable oracle over it."""
    return Oracle(config)


# -- canned topology ----------------------------------------------------------

_HEX_PROFILES = ("office", "residential", "office", "mixed", "event", "residential", "mixed")
# Small-cell transmit powers: with free-space loss over a ~2 km map these land
# user RSRP in the -65..-105 dBm band, so the reward's coverage term is live
# and aggressive sleeping pushes edge users toward the drop floor. The (tx,
# freq) pairs form a near-factorial design so the two link effects stay
# separately identifiable from rollout data.
_HEX_TX = (13.0, 10.0, 13.0, 10.0, 11.5, 10.0, 11.5)
_HEX_FREQ = (2100.0, 2100.0, 3500.0, 700.0, 3500.0, 3500.0, 1800.0)
_HEX_CAP = (150.0, 120.0, 130.0, 100.0, 140.0, 110.0, 125.0)


def make_hex_scenario(
    seed: int = 0,
    grid_dim: int = 6,
    horizon_hours: int = 1440,
    ring_radius_km: float = 1.6,
    base_users: int = 10,
    counterfactual_peak_fraction: float | None = None,
    rsrp_floor_dbm: float = -94.0,
    **overrides,
) -> ScenarioConfig:
    """Seven-cell hexagonal layout: one center cell plus a ring of six.

    The center neighbors every ring cell; each ring cell neighbors the center
    and its two ring-adjacent cells. Grid user weights fall off with distance
    to the nearest cell so downtown grids are denser.
    """
    positions = [(0.0, 0.0)]
    for k in range(6):
        a = math.pi / 3.0 * k
        positions.append((ring_radius_km * math.cos(a), ring_radius_km * math.sin(a)))
    cells = []
    for i in range(7):
        if i == 0:
            neighbors = tuple(range(1, 7))
        else:
            left = 1 + (i - 1 - 1) % 6
            right = 1 + (i - 1 + 1) % 6
            neighbors = (0, left, right)
        cells.append(
            CellConfig(
                id=i,
                position=positions[i],
                tx_power_dbm=_HEX_TX[i],
                carrier_freq_mhz=_HEX_FREQ[i],
                capacity_mbps=_HEX_CAP[i],
                poi_profile=_HEX_PROFILES[i],
                neighbors=neighbors,
            )
        )
    half_span = ring_radius_km + 0.8
    centers = np.linspace(-half_span + half_span / grid_dim, half_span - half_span / grid_dim, grid_dim)
    grids = []
    cell_pos = np.array(positions)
    for iy, y in enumerate(centers):
        for ix, x in enumerate(centers):
            d_min = float(np.min(np.linalg.norm(cell_pos - np.array([x, y]), axis=1)))
            weight = round(0.5 + math.exp(-((d_min / 1.2) ** 2)) + 0.1 * ((ix + iy) % 3), 3)
            grids.append(GridCell(position=(float(x), float(y)), poi_weight=weight, base_users=base_users))
    return ScenarioConfig(
        seed=seed,
        n_cells=7,
        cell_configs=tuple(cells),
        grid_dim=grid_dim,
        grids=tuple(grids),
        horizon_hours=horizon_hours,
        counterfactual_peak_fraction=counterfactual_peak_fraction,
        rsrp_floor_dbm=rsrp_floor_dbm,
        **overrides,
    )


# -- JSON persistence ----------------------------------------------------------

_SCENARIO_KEYS = {
    "seed", "n_cells", "cell_configs", "grid_dim", "grids", "horizon_hours",
    "traffic_step_hours", "user_step_hours", "counterfactual_peak_fraction",
    "rsrp_floor_dbm", "shadowing_sigma_db", "traffic_base", "traffic_amp",
    "traffic_noise_sigma",
}
_PRESET_KEYS = {
    "preset", "seed", "grid_dim", "horizon_hours", "ring_radius_km", "base_users",
    "counterfactual_peak_fraction", "traffic_base", "traffic_amp",
    "traffic_noise_sigma", "rsrp_floor_dbm", "shadowing_sigma_db",
    "traffic_step_hours", "user_step_hours",
}


def scenario_to_dict(config: ScenarioConfig) -> dict:
    d = asdict(config)
    d["cell_configs"] = [asdict(c) for c in config.cell_configs]
    d["grids"] = [asdict(g) for g in config.grids]
    return d


def scenario_from_dict(data: dict) -> ScenarioConfig:
    """Strict scenario parser; accepts either the full form or a hex preset."""
    if not isinstance(data, dict):
        raise ConfigError("scenario must be a JSON object")
    if "preset" in data:
        unknown = set(data) - _PRESET_KEYS
        if unknown:
            raise ConfigError(f"unknown scenario key {sorted(unknown)[0]!r}")
        if data["preset"] != "hex7":
            raise ConfigError(f"unknown scenario preset {data['preset']!r}")
        kwargs = {k: v for k, v in data.items() if k != "preset"}
        return make_hex_scenario(**kwargs)
    unknown = set(data) - _SCENARIO_KEYS
    if unknown:
        raise ConfigError(f"unknown scenario key {sorted(unknown)[0]!r}")
    missing = {"seed", "n_cells", "cell_configs", "grid_dim", "grids", "horizon_hours"} - set(data)
    if missing:
        raise ConfigError(f"scenario missing key {sorted(missing)[0]!r}")
    try:
        cells = tuple(
            CellConfig(
                **{**c, "position": tuple(c["position"]), "neighbors": tuple(c["neighbors"])}
            )
            for c in data["cell_configs"]
        )
        grids = tuple(GridCell(**{**g, "position": tuple(g["position"])}) for g in data["grids"])
    except TypeError as exc:
        raise ConfigError(f"bad cell or grid entry: {exc}") from None
    kwargs = {k: v for k, v in data.items() if k not in ("cell_configs", "grids")}
    return ScenarioConfig(cell_configs=cells, grids=grids, **kwargs)


def load_scenario(path: str) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario file {path}: {exc}") from None
    return scenario_from_dict(data)


def save_scenario(config: ScenarioConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
