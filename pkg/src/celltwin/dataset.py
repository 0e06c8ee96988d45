"""Training-sample construction: oracle rollouts -> normalized series + conditions.

Every sample pairs one series window with a fixed-layout condition vector
covering three families: spatio-temporal context (POI class, clock features,
grid density), a behavioral demand scalar, and network configuration
(tx power, carrier frequency, user-to-cell distance, sleep context). The
layout is positionally frozen; models and datasets carry a fingerprint of it
and refuse to mix when the fingerprints differ.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, FormatError
from .scenario import Oracle, POI_PROFILES

DATASET_VERSION = 1
KINDS = ("traffic", "users", "rsrp")

CONDITION_FIELDS = (
    ("poi", 4),
    ("hour_sin", 1),
    ("hour_cos", 1),
    ("day_phase", 1),
    ("grid_density", 1),
    ("demand", 1),
    ("tx_power_dbm", 1),
    ("carrier_freq_mhz", 1),
    ("distance_km", 1),
    ("sleep_frac", 1),
)
COND_DIM = sum(size for _, size in CONDITION_FIELDS)

_OFFSETS = {}
_pos = 0
for _name, _size in CONDITION_FIELDS:
    _OFFSETS[_name] = (_pos, _pos + _size)
    _pos += _size

STD_FLOOR = 1e-6
COND_CLIP = 5.0

# Collection policy for RSRP measurements: randomized sleep/offload exploration
# so the (tx, freq, distance) conditions cover re-attachment, not just the
# nearest cell.
_RSRP_SLEEP_PROB = 0.35
_RSRP_USERS_PER_STEP = 24
_BIAS_CHOICES = (0.0, 3.0, 6.0)


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.std + self.mean


def fit_stats(values: np.ndarray) -> NormalizationStats:
    v = np.asarray(values, dtype=float).ravel()
    return NormalizationStats(mean=float(v.mean()), std=float(max(v.std(), STD_FLOOR)))


def normalize(series: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return stats.normalize(series)


def denormalize(series: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return stats.denormalize(series)


class ConditionLayout:
    """Frozen field order plus per-dimension train-split statistics."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        mean = np.asarray(mean, dtype=float)
        std = np.maximum(np.asarray(std, dtype=float), STD_FLOOR)
        if mean.shape != (COND_DIM,) or std.shape != (COND_DIM,):
            raise ConfigError(f"condition stats must have dimension {COND_DIM}")
        self.mean = mean
        self.std = std

    @property
    def dim(self) -> int:
        return COND_DIM

    @staticmethod
    def fingerprint() -> str:
        blob = json.dumps([[n, s] for n, s in CONDITION_FIELDS]).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def fit(cls, raw_conditions: np.ndarray) -> "ConditionLayout":
        raw = np.asarray(raw_conditions, dtype=float)
        return cls(mean=raw.mean(axis=0), std=raw.std(axis=0))

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        z = (np.asarray(raw, dtype=float) - self.mean) / self.std
        return np.clip(z, -COND_CLIP, COND_CLIP)

    def normalize_partial(self, fields: dict[str, float | np.ndarray]) -> np.ndarray:
        """Normalized condition with unspecified fields held at the train mean."""
        raw = self.mean.copy()
        for name, value in fields.items():
            if name not in _OFFSETS:
                raise ConfigError(f"unknown condition field {name!r}")
            lo, hi = _OFFSETS[name]
            raw[lo:hi] = value
        return self.normalize(raw)

    @staticmethod
    def field_slice(name: str) -> slice:
        lo, hi = _OFFSETS[name]
        return slice(lo, hi)


@dataclass(frozen=True)
class Sample:
    series: np.ndarray
    condition: np.ndarray
    mask: np.ndarray
    kind: str


@dataclass
class SampleSet:
    """All samples of one kind plus split indices and train-split statistics."""

    kind: str
    series: np.ndarray       # (N, L) raw units
    conditions: np.ndarray   # (N, COND_DIM) raw units
    masks: np.ndarray        # (N, L) bool, True = generate
    stats: NormalizationStats
    layout: ConditionLayout
    split: dict[str, np.ndarray]

    def __len__(self) -> int:
        return self.series.shape[0]

    @property
    def series_len(self) -> int:
        return self.series.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.series[i], self.conditions[i], self.masks[i], self.kind)

    def normalized_series(self, idx: np.ndarray | None = None) -> np.ndarray:
        sel = self.series if idx is None else self.series[idx]
        return self.stats.normalize(sel)

    def normalized_conditions(self, idx: np.ndarray | None = None) -> np.ndarray:
        sel = self.conditions if idx is None else self.conditions[idx]
        return self.layout.normalize(sel)


def make_mask(task: str, length: int, horizon_h: int = 0) -> np.ndarray:
    """Generation mask: full for long_term_generation, suffix for short_term_prediction."""
    if task == "long_term_generation":
        return np.ones(length, dtype=bool)
    if task == "short_term_prediction":
        if not 0 < horizon_h <= length:
            raise DomainError(f"horizon_h must be in (0, {length}], got {horizon_h}")
        mask = np.zeros(length, dtype=bool)
        mask[length - horizon_h:] = True
        return mask
    raise ConfigError(f"unknown task {task!r}")


def split_dataset(
    n: int, fractions: tuple[float, float, float], seed: int
) -> dict[str, np.ndarray]:
    """Seed-deterministic disjoint covering split by largest-remainder rounding."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ConfigError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    perm = np.random.default_rng(np.random.SeedSequence((seed, 815))).permutation(n)
    exact = [f * n for f in fractions]
    sizes = [int(np.floor(e)) for e in exact]
    remainders = np.argsort([-(e - s) for e, s in zip(exact, sizes)], kind="stable")
    for i in range(n - sum(sizes)):
        sizes[remainders[i % 3]] += 1
    a, b = sizes[0], sizes[0] + sizes[1]
    return {
        "train": np.sort(perm[:a]),
        "val": np.sort(perm[a:b]),
        "test": np.sort(perm[b:]),
    }


# -- raw condition builders ----------------------------------------------------


def _poi_onehot(profile: str) -> np.ndarray:
    v = np.zeros(len(POI_PROFILES))
    v[POI_PROFILES.index(profile)] = 1.0
    return v


def _clock(hour: float) -> tuple[float, float, float]:
    h = hour % 24.0
    angle = 2.0 * np.pi * h / 24.0
    return float(np.sin(angle)), float(np.cos(angle)), h / 24.0


def _cell_density(oracle: Oracle, cell_index: int) -> float:
    mine = [
        g.poi_weight * g.base_users
        for i, g in enumerate(oracle.config.grids)
        if oracle.nearest_cell_of_grid(i) == cell_index
    ]
    return float(np.mean(mine)) if mine else 0.0


def condition_for_traffic(oracle: Oracle, cell_id: int, start_hour: int) -> np.ndarray:
    cell = oracle.cell(cell_id)
    idx = oracle.cell_pos_index(cell_id)
    s, c, phase = _clock(start_hour)
    return np.concatenate([
        _poi_onehot(cell.poi_profile),
        [s, c, phase, _cell_density(oracle, idx), cell.capacity_mbps,
         cell.tx_power_dbm, cell.carrier_freq_mhz, 0.0, 0.0],
    ])


def condition_for_users(oracle: Oracle, grid_index: int, start_hour: int) -> np.ndarray:
    g = oracle.config.grids[grid_index]
    near = oracle.nearest_cell_of_grid(grid_index)
    cell = oracle.cells[near]
    s, c, phase = _clock(start_hour)
    return np.concatenate([
        _poi_onehot(cell.poi_profile),
        [s, c, phase, g.poi_weight * g.base_users, cell.capacity_mbps,
         cell.tx_power_dbm, cell.carrier_freq_mhz,
         oracle.grid_cell_distance_km(grid_index, near), 0.0],
    ])


def condition_for_rsrp(
    oracle: Oracle,
    cell_index: int,
    distance_km: float,
    hour: int,
    sleep_frac: float,
) -> np.ndarray:
    """Link-level condition: the (tx power, frequency, distance) triple drives it.

    Fields tied to cell identity (POI class, density, demand) are zeroed so the
    head cannot shortcut around the link parameters and stays queryable on
    arbitrary off-topology triples.
    """
    cell = oracle.cells[cell_index]
    s, c, phase = _clock(hour)
    return np.concatenate([
        np.zeros(len(POI_PROFILES)),
        [s, c, phase, 0.0, 0.0,
         cell.tx_power_dbm, cell.carrier_freq_mhz, distance_km, sleep_frac],
    ])


# -- collection -----------------------------------------------------------------


def _window_mask(rng: np.random.Generator, length: int) -> np.ndarray:
    """Task mix for one window: half long-term, half short-term with random horizon."""
    if rng.random() < 0.5:
        return make_mask("long_term_generation", length)
    horizon = int(rng.integers(1, length))
    return make_mask("short_term_prediction", length, horizon)


def _collect_traffic(oracle: Oracle, n_days: int, rng: np.random.Generator):
    step = oracle.config.traffic_step_hours
    length = 24 // step
    series, conds, masks = [], [], []
    for day in range(n_days):
        start = day * 24
        for cell in oracle.cells:
            series.append([oracle.traffic_at(cell.id, start + k * step) for k in range(length)])
            conds.append(condition_for_traffic(oracle, cell.id, start % 24))
            masks.append(_window_mask(rng, length))
    return np.array(series), np.array(conds), np.array(masks)


def _collect_users(oracle: Oracle, n_days: int, rng: np.random.Generator):
    step = oracle.config.user_step_hours
    length = 24 // step
    series, conds, masks = [], [], []
    for day in range(n_days):
        start = day * 24
        for g in range(oracle.n_grids):
            series.append([float(oracle.users_at(g, start + k * step)) for k in range(length)])
            conds.append(condition_for_users(oracle, g, start % 24))
            masks.append(_window_mask(rng, length))
    return np.array(series), np.array(conds), np.array(masks)


def _collect_rsrp(oracle: Oracle, n_days: int, rng: np.random.Generator):
    from .scenario import associate_users  # local import keeps module load cheap

    series, conds = [], []
    n_cells = oracle.n_cells
    for t in range(0, n_days * 24, oracle.config.user_step_hours):
        sleep = rng.random(n_cells) < _RSRP_SLEEP_PROB
        if sleep.sum() > n_cells - 2:
            sleep[:] = False
        bias = rng.choice(_BIAS_CHOICES, size=n_cells)
        _, user_grid, positions, shadowing = oracle._users_and_shadowing(t)
        if positions.shape[0] == 0:
            continue
        rsrp = oracle.rsrp_matrix(positions, shadowing)
        # Measure the cell each user targets regardless of the drop floor, so
        # the learned conditional keeps its below-floor tail (no survivor bias).
        serving, user_rsrp, _ = associate_users(rsrp, sleep, bias, -np.inf)
        pick = rng.permutation(positions.shape[0])[:_RSRP_USERS_PER_STEP]
        sleep_frac = float(sleep.mean())
        for u in pick:
            c = int(serving[u])
            dist = float(np.linalg.norm(positions[u] - oracle.cells[c].position))
            series.append([user_rsrp[u]])
            conds.append(condition_for_rsrp(oracle, c, dist, t % 24, sleep_frac))
    masks = np.ones((len(series), 1), dtype=bool)
    return np.array(series), np.array(conds), masks


def collect_dataset(
    oracle: Oracle,
    n_days: int,
    kinds: tuple[str, ...] = KINDS,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> dict[str, SampleSet]:
    """Roll the oracle forward and package one SampleSet per requested kind.

    Normalization statistics (series channel and every condition dimension)
    come from the training split only.
    """
    if n_days < 1:
        raise ConfigError(f"n_days must be >= 1, got {n_days}")
    if n_days * 24 > oracle.config.horizon_hours:
        raise ConfigError(
            f"n_days {n_days} exceeds scenario horizon {oracle.config.horizon_hours} hours"
        )
    if not kinds:
        raise ConfigError("kinds must be nonempty")
    for kind in kinds:
        if kind not in KINDS:
            raise ConfigError(f"unknown kind {kind!r}")
    out: dict[str, SampleSet] = {}
    collectors = {"traffic": _collect_traffic, "users": _collect_users, "rsrp": _collect_rsrp}
    for kind in kinds:
        rng = np.random.default_rng(np.random.SeedSequence((oracle.config.seed, 90, KINDS.index(kind))))
        series, conds, masks = collectors[kind](oracle, n_days, rng)
        split = split_dataset(len(series), split_fractions, seed=oracle.config.seed)
        train = split["train"]
        out[kind] = SampleSet(
            kind=kind,
            series=series,
            conditions=conds,
            masks=masks,
            stats=fit_stats(series[train]),
            layout=ConditionLayout.fit(conds[train]),
            split=split,
        )
    return out


# -- persistence ------------------------------------------------------------------


def write_dataset(sample_set: SampleSet, path: str) -> None:
    header = {
        "version": DATASET_VERSION,
        "kind": sample_set.kind,
        "series_len": sample_set.series_len,
        "cond_dim": COND_DIM,
        "layout_fingerprint": ConditionLayout.fingerprint(),
        "series_mean": sample_set.stats.mean,
        "series_std": sample_set.stats.std,
    }
    np.savez(
        path,
        header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        series=sample_set.series,
        conditions=sample_set.conditions,
        masks=sample_set.masks,
        cond_mean=sample_set.layout.mean,
        cond_std=sample_set.layout.std,
        split_train=sample_set.split["train"],
        split_val=sample_set.split["val"],
        split_test=sample_set.split["test"],
    )


def read_dataset(path: str) -> SampleSet:
    try:
        with np.load(path) as data:
            payload = {k: data[k] for k in data.files}
    except (zipfile.BadZipFile, OSError, ValueError, EOFError) as exc:
        raise FormatError(f"unreadable dataset file {path}: {exc}") from None
    required = {"header", "series", "conditions", "masks", "cond_mean", "cond_std",
                "split_train", "split_val", "split_test"}
    missing = required - set(payload)
    if missing:
        raise FormatError(f"dataset file {path} missing field {sorted(missing)[0]!r}")
    try:
        header = json.loads(bytes(payload["header"]).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt dataset header in {path}: {exc}") from None
    if header.get("version") != DATASET_VERSION:
        raise FormatError(
            f"dataset version mismatch: expected {DATASET_VERSION}, found {header.get('version')}"
        )
    if header.get("cond_dim") != COND_DIM or header.get("layout_fingerprint") != ConditionLayout.fingerprint():
        raise FormatError(
            f"condition layout mismatch: expected {ConditionLayout.fingerprint()} "
            f"(D_c={COND_DIM}), found {header.get('layout_fingerprint')} (D_c={header.get('cond_dim')})"
        )
    return SampleSet(
        kind=header["kind"],
        series=payload["series"],
        conditions=payload["conditions"],
        masks=payload["masks"].astype(bool),
        stats=NormalizationStats(mean=header["series_mean"], std=header["series_std"]),
        layout=ConditionLayout(mean=payload["cond_mean"], std=payload["cond_std"]),
        split={"train": payload["split_train"], "val": payload["split_val"], "test": payload["split_test"]},
    )
