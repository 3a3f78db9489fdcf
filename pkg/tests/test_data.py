from datetime import datetime

import numpy as np
import pytest

from stgssm import data
from stgssm.tensor import ContractError


def _toy_dataset(T=30, N=4, d=2, seed=0, interval=15):
    rng = np.random.default_rng(seed)
    return data.STGDataset(
        values=rng.normal(size=(T, N, d)),
        node_ids=[f"s{i}" for i in range(N)],
        interval_minutes=interval,
        start_timestamp=datetime(2024, 1, 1),
    )


class TestMinMax:
    def test_linear_map(self):
        values = np.array([2.0, 4.0, 6.0]).reshape(3, 1, 1)
        state = data.minmax_fit(values)
        out = data.minmax_normalize(values, state)
        assert np.array_equal(out.reshape(-1), [0.0, 0.5, 1.0])

    def test_degenerate_feature_flagged_and_zeroed(self):
        values = np.full((4, 2, 1), 7.0)
        state = data.minmax_fit(values)
        assert state.degenerate[0]
        assert np.array_equal(data.minmax_normalize(values, state), np.zeros((4, 2, 1)))

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        values = rng.normal(size=(20, 3, 2)) * 5 + 3
        state = data.minmax_fit(values)
        back = data.minmax_denormalize(data.minmax_normalize(values, state), state)
        assert np.max(np.abs(back - values)) < 1e-12

    def test_statistics_ignore_other_splits(self):
        ds = _toy_dataset(T=50)
        train, _, _ = data.split_dataset(ds)
        s1 = data.minmax_fit(train.values)
        ds.values[45] += 100.0  # test rows move, training stats must not
        train2, _, _ = data.split_dataset(ds)
        s2 = data.minmax_fit(train2.values)
        assert np.array_equal(s1.feat_min, s2.feat_min)
        assert np.array_equal(s1.feat_max, s2.feat_max)


class TestSplit:
    def test_ratios(self):
        ds = _toy_dataset(T=100)
        tr, va, te = data.split_dataset(ds)
        assert (tr.n_steps, va.n_steps, te.n_steps) == (60, 20, 20)

    def test_too_small_for_window(self):
        ds = _toy_dataset(T=10)
        with pytest.raises(ContractError, match="too small"):
            data.split_dataset(ds, p=12, k=1)

    def test_concatenation_reproduces_cube(self):
        ds = _toy_dataset(T=47)
        tr, va, te = data.split_dataset(ds)
        rebuilt = np.concatenate([tr.values, va.values, te.values], axis=0)
        assert np.array_equal(rebuilt, ds.values)

    def test_bad_ratios(self):
        with pytest.raises(ContractError):
            data.split_dataset(_toy_dataset(), ratios=(0.5, 0.2, 0.2))


class TestWindows:
    def test_count_example(self):
        ds = _toy_dataset(T=15)
        windows = list(data.window_iterator(ds, p=12, k=1))
        assert len(windows) == 3

    def test_zero_horizon_rejected(self):
        with pytest.raises(ContractError):
            list(data.window_iterator(_toy_dataset(), p=12, k=0))

    def test_windows_are_views(self):
        ds = _toy_dataset(T=20)
        x, y, ts = next(iter(data.window_iterator(ds, p=5, k=2)))
        assert np.shares_memory(x, ds.values)
        assert np.shares_memory(y, ds.values)
        assert np.array_equal(x, ds.values[:5])
        assert len(ts) == 7

    def test_count_formula_randomized(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            T = int(rng.integers(5, 60))
            p = int(rng.integers(1, 8))
            k = int(rng.integers(1, 4))
            ds = _toy_dataset(T=T)
            got = len(list(data.window_iterator(ds, p, k)))
            assert got == max(0, T - p - k + 1)


class TestSynthetic:
    def test_dynamics_off_gives_constant_series(self):
        cfg = data.SyntheticConfig(n_nodes=6, t_steps=40, seed=3, noise_sigma=0.0,
                                   amplitude=0.0, diffusion=0.0)
        ds = data.generate_synthetic(cfg)
        assert np.max(np.abs(ds.values - ds.values[0])) == 0.0

    def test_seed_determinism(self):
        cfg = data.SyntheticConfig(n_nodes=8, t_steps=100, seed=11)
        a = data.generate_synthetic(cfg)
        b = data.generate_synthetic(cfg)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.static_adjacency, b.static_adjacency)

    def test_static_adjacency_row_stochastic(self):
        ds = data.generate_synthetic(data.SyntheticConfig(n_nodes=10, t_steps=5, seed=4))
        assert np.allclose(ds.static_adjacency.sum(axis=1), 1.0, atol=1e-12)

    def test_lag1_autocorrelation(self):
        # smooth dynamics: median lag-1 autocorrelation stays high
        highs = []
        for seed in range(30):
            cfg = data.SyntheticConfig(n_nodes=5, t_steps=300, seed=seed,
                                       diffusion=0.3, noise_sigma=0.1)
            ds = data.generate_synthetic(cfg)
            series = ds.values[:, :, 0]
            a = series[:-1] - series[:-1].mean(axis=0)
            b = series[1:] - series[1:].mean(axis=0)
            corr = (a * b).sum(axis=0) / np.sqrt((a * a).sum(axis=0) * (b * b).sum(axis=0))
            highs.append(corr.mean())
        assert np.median(highs) > 0.5

    def test_bounded_over_long_horizon(self):
        cfg = data.SyntheticConfig(n_nodes=6, t_steps=10_000, seed=5,
                                   diffusion=0.5, noise_sigma=0.1)
        ds = data.generate_synthetic(cfg)
        assert np.max(np.abs(ds.values)) < 1e3

    def test_disconnected_graph_raises_after_retries(self):
        cfg = data.SyntheticConfig(n_nodes=40, t_steps=5, seed=6, radius=0.02)
        with pytest.warns(UserWarning, match="disconnected"):
            with pytest.raises(ContractError, match="connected"):
                data.generate_synthetic(cfg)


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = _toy_dataset(T=12, N=3, d=2)
        path = tmp_path / "ds.csv"
        data.save_csv(ds, path)
        back = data.load_csv(path)
        assert np.array_equal(back.values, ds.values)
        assert back.node_ids == ds.node_ids
        assert back.interval_minutes == ds.interval_minutes
        assert back.start_timestamp == ds.start_timestamp

    def test_handcrafted_fixture(self, tmp_path):
        text = (
            "timestamp,node_id,feature_0\n"
            "2024-01-01T00:00:00,a,1.0\n"
            "2024-01-01T00:00:00,b,2.0\n"
            "2024-01-01T00:15:00,a,3.0\n"
            "2024-01-01T00:15:00,b,4.0\n"
            "2024-01-01T00:30:00,a,5.0\n"
            "2024-01-01T00:30:00,b,6.0\n"
        )
        path = tmp_path / "fixture.csv"
        path.write_text(text)
        ds = data.load_csv(path)
        assert ds.values.shape == (3, 2, 1)
        assert np.array_equal(ds.values[:, :, 0], [[1, 2], [3, 4], [5, 6]])
        assert ds.interval_minutes == 15

    def test_missing_cell_named(self, tmp_path):
        ds = _toy_dataset(T=4, N=2, d=1)
        path = tmp_path / "ds.csv"
        data.save_csv(ds, path)
        lines = path.read_text().splitlines()
        del lines[3]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ContractError, match=r"missing cells \(2024-01-01T00:15:00, s0\)"):
            data.load_csv(path)

    def test_unparseable_row_reports_line(self, tmp_path):
        ds = _toy_dataset(T=3, N=2, d=1)
        path = tmp_path / "ds.csv"
        data.save_csv(ds, path)
        lines = path.read_text().splitlines()
        lines[2] = lines[2].replace(lines[2].split(",")[2], "not-a-number")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ContractError, match=":3:"):
            data.load_csv(path)


def test_binary_round_trip(tmp_path):
    ds = data.generate_synthetic(data.SyntheticConfig(n_nodes=5, t_steps=20, seed=7))
    path = tmp_path / "cube.stgt"
    data.save_binary(ds, path)
    back = data.load_binary(path)
    assert np.array_equal(back.values, ds.values)
    assert back.node_ids == ds.node_ids
    assert np.array_equal(back.static_adjacency, ds.static_adjacency)
    assert back.start_timestamp == ds.start_timestamp


class TestScenarioMask:
    def test_weekday_rush(self):
        ts = [datetime(2024, 1, 2, 9, 30)]  # a Tuesday
        assert data.scenario_mask(ts, "rush")[0]
        assert not data.scenario_mask(ts, "weekend")[0]

    def test_saturday(self):
        ts = [datetime(2024, 1, 6, 9, 30)]
        assert not data.scenario_mask(ts, "rush")[0]
        assert data.scenario_mask(ts, "weekend")[0]

    def test_half_open_boundaries(self):
        on = datetime(2024, 1, 2, 8, 0)
        off = datetime(2024, 1, 2, 11, 0)
        assert data.scenario_mask([on], "rush")[0]
        assert not data.scenario_mask([off], "rush")[0]

    def test_partitions(self):
        ds = _toy_dataset(T=400, interval=37)  # awkward interval, all weekdays+weekends
        ts = ds.timestamps()
        rush = data.scenario_mask(ts, "rush")
        non_rush = data.scenario_mask(ts, "non_rush")
        weekend = data.scenario_mask(ts, "weekend")
        weekday = data.scenario_mask(ts, "non_weekend")
        assert not np.any(rush & non_rush)
        assert np.array_equal(rush | non_rush, weekday)
        assert np.array_equal(weekend | weekday, np.ones(len(ts), dtype=bool))
        assert not np.any(weekend & weekday)

    def test_unknown_scenario(self):
        with pytest.raises(ContractError):
            data.scenario_mask([datetime(2024, 1, 1)], "lunch")
