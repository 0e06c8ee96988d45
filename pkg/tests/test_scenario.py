import math

import numpy as np
import pytest

from celltwin.errors import CellAsleepError, ConfigError, DomainError, UnknownIdError
from celltwin.scenario import (
    CellConfig,
    GridCell,
    ScenarioConfig,
    build_scenario,
    cell_power_watts,
    make_hex_scenario,
    path_loss_db,
    rsrp_dbm,
    scenario_from_dict,
    scenario_to_dict,
)


def two_cell_config(**overrides) -> ScenarioConfig:
    cells = (
        CellConfig(id=0, position=(0.0, 0.0), tx_power_dbm=46.0, carrier_freq_mhz=2100.0,
                   capacity_mbps=100.0, poi_profile="office", neighbors=(1,)),
        CellConfig(id=1, position=(1.0, 0.0), tx_power_dbm=46.0, carrier_freq_mhz=2100.0,
                   capacity_mbps=100.0, poi_profile="residential", neighbors=(0,)),
    )
    grids = tuple(
        GridCell(position=(float(x), float(y)), poi_weight=1.0, base_users=5)
        for y in (0.0, 1.0) for x in (0.0, 1.0)
    )
    base = dict(seed=0, n_cells=2, cell_configs=cells, grid_dim=2, grids=grids, horizon_hours=48)
    base.update(overrides)
    return ScenarioConfig(**base)


class TestValidation:
    def test_unknown_neighbor_id_rejected(self):
        cells = (
            CellConfig(id=0, position=(0.0, 0.0), tx_power_dbm=46.0, carrier_freq_mhz=2100.0,
                       capacity_mbps=100.0, poi_profile="office", neighbors=(99,)),
            CellConfig(id=1, position=(1.0, 0.0), tx_power_dbm=46.0, carrier_freq_mhz=2100.0,
                       capacity_mbps=100.0, poi_profile="office", neighbors=(0,)),
        )
        with pytest.raises(ConfigError, match="neighbor id 99"):
            build_scenario(two_cell_config(cell_configs=cells))

    def test_self_neighbor_rejected(self):
        cells = (
            CellConfig(id=0, position=(0.0, 0.0), tx_power_dbm=46.0, carrier_freq_mhz=2100.0,
                       capacity_mbps=100.0, poi_profile="office", neighbors=(0,)),
            CellConfig(id=1, position=(1.0, 0.0), tx_power_dbm=46.0, carrier_freq_mhz=2100.0,
                       capacity_mbps=100.0, poi_profile="office", neighbors=(0,)),
        )
        with pytest.raises(ConfigError, match="exclude self"):
            build_scenario(two_cell_config(cell_configs=cells))

    def test_step_must_divide_horizon(self):
        with pytest.raises(ConfigError, match="traffic_step_hours"):
            build_scenario(two_cell_config(horizon_hours=23))

    def test_sleep_power_below_idle_power(self):
        cells = list(two_cell_config().cell_configs)
        cells[0] = CellConfig(id=0, position=(0.0, 0.0), tx_power_dbm=46.0, carrier_freq_mhz=2100.0,
                              capacity_mbps=100.0, poi_profile="office", neighbors=(1,),
                              p_sleep_watts=200.0)
        with pytest.raises(ConfigError, match="p_sleep"):
            build_scenario(two_cell_config(cell_configs=tuple(cells)))

    def test_counterfactual_fraction_bounds(self):
        with pytest.raises(ConfigError, match="counterfactual"):
            build_scenario(two_cell_config(counterfactual_peak_fraction=1.5))

    def test_hex_layout_has_seven_cells_with_neighbors(self):
        oracle = build_scenario(make_hex_scenario(seed=3))
        assert oracle.n_cells == 7
        for cell in oracle.cells:
            assert len(cell.neighbors) >= 2


class TestTraffic:
    def test_constant_profile(self):
        cfg = two_cell_config(traffic_base=0.1, traffic_amp=0.0, traffic_noise_sigma=0.0)
        oracle = build_scenario(cfg)
        for t in range(0, 48, 2):
            assert oracle.traffic_at(0, t) == pytest.approx(10.0, abs=1e-12)

    def test_counterfactual_peak_hits_fraction_of_capacity(self):
        cfg = two_cell_config(traffic_noise_sigma=0.0, counterfactual_peak_fraction=0.8)
        oracle = build_scenario(cfg)
        peak = max(oracle.traffic_at(0, t) for t in range(0, 24))
        assert peak == pytest.approx(80.0, rel=1e-9)

    @pytest.mark.parametrize("phi", [0.5, 0.6, 0.8])
    def test_counterfactual_scaling_invariant(self, phi):
        cfg = make_hex_scenario(seed=1, counterfactual_peak_fraction=phi, traffic_noise_sigma=0.0)
        oracle = build_scenario(cfg)
        for cell in oracle.cells:
            peak = max(oracle.traffic_at(cell.id, t) for t in range(0, 24))
            assert abs(peak - phi * cell.capacity_mbps) <= 1e-9 * phi * cell.capacity_mbps

    def test_office_beats_residential_at_midday(self):
        cfg = two_cell_config(traffic_noise_sigma=0.0)
        oracle = build_scenario(cfg)
        assert oracle.traffic_at(0, 14) > oracle.traffic_at(1, 14)

    def test_determinism_across_constructions(self):
        cfg = make_hex_scenario(seed=11)
        a, b = build_scenario(cfg), build_scenario(cfg)
        for t in range(0, 48, 2):
            for cell in a.cells:
                assert a.traffic_at(cell.id, t) == b.traffic_at(cell.id, t)

    def test_unknown_cell(self):
        oracle = build_scenario(two_cell_config())
        with pytest.raises(UnknownIdError):
            oracle.traffic_at(99, 0)

    def test_time_out_of_horizon(self):
        oracle = build_scenario(two_cell_config())
        with pytest.raises(DomainError):
            oracle.traffic_at(0, 48)


class TestUsers:
    def test_zero_base_users(self):
        grids = tuple(GridCell(position=g.position, poi_weight=g.poi_weight, base_users=0)
                      for g in two_cell_config().grids)
        oracle = build_scenario(two_cell_config(grids=grids))
        assert all(oracle.users_at(g, t) == 0 for g in range(4) for t in range(0, 24))

    def test_repeat_query_is_identical(self):
        oracle = build_scenario(two_cell_config())
        assert oracle.users_at(2, 19) == oracle.users_at(2, 19)

    def test_monte_carlo_mean_matches_rate(self):
        cfg = two_cell_config()
        rate = build_scenario(cfg).user_rate(1, 20)
        draws = [
            build_scenario(two_cell_config(seed=s)).users_at(1, 20) for s in range(1000)
        ]
        assert rate > 1.0
        assert abs(np.mean(draws) - rate) <= 0.05 * rate

    def test_bad_grid_index(self):
        oracle = build_scenario(two_cell_config())
        with pytest.raises(UnknownIdError):
            oracle.users_at(4, 0)


class TestPropagation:
    def test_reference_point(self):
        assert path_loss_db(1.0, 1.0) == pytest.approx(32.45, abs=1e-12)

    def test_one_km_one_ghz(self):
        assert path_loss_db(1.0, 1000.0) == pytest.approx(92.45, abs=1e-9)

    def test_two_km_two_ghz(self):
        assert path_loss_db(2.0, 2000.0) == pytest.approx(104.49, abs=0.01)

    def test_monotone_in_distance_and_frequency(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            d = rng.uniform(0.02, 10.0)
            f = rng.uniform(100.0, 6000.0)
            assert path_loss_db(d * 1.5, f) > path_loss_db(d, f)
            assert path_loss_db(d, f * 1.5) > path_loss_db(d, f)

    def test_distance_clamp(self):
        assert path_loss_db(0.0001, 1000.0) == path_loss_db(0.01, 1000.0)

    def test_nonpositive_frequency(self):
        with pytest.raises(DomainError):
            path_loss_db(1.0, 0.0)


class TestRsrp:
    CELL = CellConfig(id=0, position=(0.0, 0.0), tx_power_dbm=46.0, carrier_freq_mhz=1000.0,
                      capacity_mbps=100.0, poi_profile="office", neighbors=(1,))

    def test_link_budget(self):
        assert rsrp_dbm(self.CELL, (1.0, 0.0)) == pytest.approx(-46.45, abs=1e-9)

    def test_linear_in_tx_power(self):
        boosted = CellConfig(**{**self.CELL.__dict__, "tx_power_dbm": 49.0})
        assert rsrp_dbm(boosted, (1.0, 0.0)) == pytest.approx(rsrp_dbm(self.CELL, (1.0, 0.0)) + 3.0)

    def test_distance_doubling(self):
        drop = rsrp_dbm(self.CELL, (1.0, 0.0)) - rsrp_dbm(self.CELL, (2.0, 0.0))
        assert drop == pytest.approx(20.0 * math.log10(2.0), abs=1e-9)

    def test_sleeping_cell_rejects_query(self):
        with pytest.raises(CellAsleepError):
            rsrp_dbm(self.CELL, (1.0, 0.0), asleep=True)


class TestPower:
    CELL = TestRsrp.CELL

    def test_sleep_power(self):
        assert cell_power_watts(self.CELL, 0.0, asleep=True) == 75.0

    def test_idle_power(self):
        assert cell_power_watts(self.CELL, 0.0, asleep=False) == 130.0

    def test_full_load(self):
        assert cell_power_watts(self.CELL, 1.0, asleep=False) == pytest.approx(224.0)

    def test_domain(self):
        with pytest.raises(DomainError):
            cell_power_watts(self.CELL, 1.2, asleep=False)


class TestStepNetwork:
    def test_single_active_cell_takes_everyone(self):
        oracle = build_scenario(two_cell_config())
        state = oracle.step_network(8, sleep_mask=[False, True])
        served = state.serving_cell[state.serving_cell >= 0]
        assert state.dropped_users == 0
        assert (served == 0).all()

    def test_bias_breaks_ties(self):
        # Users equidistant from two identical cells: +3 dB steers everyone to cell 1.
        cells = (
            CellConfig(id=0, position=(-1.0, 0.0), tx_power_dbm=46.0, carrier_freq_mhz=2100.0,
                       capacity_mbps=100.0, poi_profile="office", neighbors=(1,)),
            CellConfig(id=1, position=(1.0, 0.0), tx_power_dbm=46.0, carrier_freq_mhz=2100.0,
                       capacity_mbps=100.0, poi_profile="office", neighbors=(0,)),
        )
        grids = (
            GridCell(position=(0.0, -0.5), poi_weight=1.0, base_users=8),
            GridCell(position=(0.0, 0.5), poi_weight=1.0, base_users=8),
            GridCell(position=(0.0, 1.5), poi_weight=0.0, base_users=0),
            GridCell(position=(0.0, 2.5), poi_weight=0.0, base_users=0),
        )
        cfg = two_cell_config(cell_configs=cells, grids=grids, shadowing_sigma_db=0.0)
        oracle = build_scenario(cfg)
        # Positions are jittered, so force symmetric RSRP via the matrix directly.
        state = oracle.step_network(12, bias_db=[0.0, 50.0])
        served = state.serving_cell[state.serving_cell >= 0]
        assert (served == 1).all()

    def test_all_asleep_drops_everyone(self):
        oracle = build_scenario(two_cell_config())
        state = oracle.step_network(12, sleep_mask=[True, True])
        assert state.dropped_users == state.total_users > 0
        assert state.rsrp_avg_dbm is None

    def test_sleeping_cell_serves_nothing_at_sleep_power(self):
        oracle = build_scenario(two_cell_config())
        state = oracle.step_network(12, sleep_mask=[True, False])
        assert (state.serving_cell != 0).all()
        assert state.per_cell_load_mbps[0] == 0.0
        assert state.per_cell_power_watts[0] == 75.0

    def test_accounting(self):
        oracle = build_scenario(make_hex_scenario(seed=5))
        for t in (0, 8, 14, 20):
            state = oracle.step_network(t, sleep_mask=[False, True, False, True, False, False, False])
            assert state.served_users + state.dropped_users == state.total_users
            assert state.total_users == state.per_grid_users.sum()

    def test_energy_conservation(self):
        oracle = build_scenario(make_hex_scenario(seed=5))
        state = oracle.step_network(10)
        total = state.energy_wh(2.0)
        assert total == pytest.approx(sum(state.per_cell_power_watts) * 2.0, rel=1e-12)

    def test_all_active_keeps_native_load(self):
        cfg = make_hex_scenario(seed=5)
        oracle = build_scenario(cfg)
        state = oracle.step_network(14)
        native = np.array([oracle.traffic_at(c.id, 14) for c in oracle.cells])
        capped = np.minimum(native, np.array([c.capacity_mbps for c in oracle.cells]))
        assert np.allclose(state.per_cell_load_mbps, capped)

    def test_bit_exact_determinism(self):
        cfg = make_hex_scenario(seed=9)
        a, b = build_scenario(cfg), build_scenario(cfg)
        sa = a.step_network(16, sleep_mask=[False, True, False, False, True, False, False],
                            bias_db=[0, 0, 3, 0, 0, 3, 0])
        sb = b.step_network(16, sleep_mask=[False, True, False, False, True, False, False],
                            bias_db=[0, 0, 3, 0, 0, 3, 0])
        assert np.array_equal(sa.per_user_rsrp_dbm, sb.per_user_rsrp_dbm, equal_nan=True)
        assert np.array_equal(sa.serving_cell, sb.serving_cell)
        assert np.array_equal(sa.per_cell_load_mbps, sb.per_cell_load_mbps)
        assert np.array_equal(sa.per_cell_power_watts, sb.per_cell_power_watts)

    def test_tx_power_monotonicity(self):
        # Raising one cell's tx power never lowers any user's RSRP from it.
        base_cfg = make_hex_scenario(seed=2, shadowing_sigma_db=0.0)
        oracle = build_scenario(base_cfg)
        cells = list(base_cfg.cell_configs)
        cells[3] = CellConfig(**{**cells[3].__dict__, "tx_power_dbm": cells[3].tx_power_dbm + 2.0})
        boosted = build_scenario(
            ScenarioConfig(**{**base_cfg.__dict__, "cell_configs": tuple(cells)})
        )
        _, _, pos, shadow = oracle._users_and_shadowing(12)
        low = oracle.rsrp_matrix(pos, shadow)
        high = boosted.rsrp_matrix(pos, shadow)
        assert (high[:, 3] >= low[:, 3]).all()
        assert np.allclose(high[:, :3], low[:, :3])


class TestScenarioJson:
    def test_roundtrip(self):
        cfg = make_hex_scenario(seed=4)
        again = scenario_from_dict(scenario_to_dict(cfg))
        assert again == cfg

    def test_unknown_key_rejected(self):
        data = scenario_to_dict(make_hex_scenario())
        data["extra"] = 1
        with pytest.raises(ConfigError, match="extra"):
            scenario_from_dict(data)

    def test_preset_form(self):
        cfg = scenario_from_dict({"preset": "hex7", "seed": 12, "grid_dim": 4})
        assert cfg.seed == 12 and cfg.grid_dim == 4 and cfg.n_cells == 7
