"""Preprocessing primitives, splitting, windowing, ingestion."""

import numpy as np
import pytest

from driftcast import data as dt


# -- column primitives -------------------------------------------------------

def test_impute_numeric_mean():
    out = dt.impute_numeric(np.array([1.0, np.nan, 3.0]))
    assert np.array_equal(out, [1.0, 2.0, 3.0])


def test_impute_numeric_passthrough_and_single():
    x = np.array([4.0, 5.0])
    assert np.array_equal(dt.impute_numeric(x), x)
    assert np.array_equal(dt.impute_numeric(np.array([5.0, np.nan])), [5.0, 5.0])
    with pytest.raises(dt.DataError, match="fully-missing"):
        dt.impute_numeric(np.array([np.nan, np.nan]))


def test_impute_categorical_mode_and_tie():
    assert dt.impute_categorical(["A", "A", None, "B"]) == ["A", "A", "A", "B"]
    # tie between A and B broken lexicographically
    assert dt.impute_categorical(["A", "B", None]) == ["A", "B", "A"]
    assert dt.impute_categorical(["A", "B"]) == ["A", "B"]
    with pytest.raises(dt.DataError):
        dt.impute_categorical([None, None])


def test_one_hot():
    cats = ["A", "B", "C"]
    out = dt.one_hot(["A", "B"], cats)
    assert np.array_equal(out, [[1, 0, 0], [0, 1, 0]])
    assert np.all(out.sum(axis=1) == 1)
    with pytest.raises(dt.DataError, match="unseen"):
        dt.one_hot(["D"], cats)


def test_one_hot_single_category_warns(caplog):
    with caplog.at_level("WARNING"):
        out = dt.one_hot(["X", "X"], ["X"])
    assert "constant" in caplog.text
    assert np.all(out == 1.0)


def test_normalize_timestamps():
    ts = np.array([10.0, 20.0, 30.0])
    out = dt.normalize_timestamps(ts, 10.0, 30.0)
    assert np.array_equal(out, [0.0, 0.5, 1.0])
    # streaming values beyond the fitted range exceed 1 by design
    assert dt.normalize_timestamps(np.array([40.0]), 10.0, 30.0)[0] == pytest.approx(1.5)
    with pytest.raises(dt.DataError, match="constant"):
        dt.normalize_timestamps(ts, 5.0, 5.0)


# -- dataset helpers ---------------------------------------------------------

def toy_dataset(t=20, n=2, d=2, segments=None):
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(t, n, d))
    return dt.Dataset(
        timestamps=np.arange(t, dtype=float) * 3600,
        features=feats,
        targets=rng.uniform(1.0, 2.0, size=(t, n)),
        feature_names=[f"f{i}" for i in range(d)],
        feature_kinds=["numeric"] * d,
        site_names=[f"s{i}" for i in range(n)],
        segments=segments or [(0, t)],
    )


def test_split_80_20():
    ds = toy_dataset(t=100)
    train, test = dt.split(ds, 0.8)
    assert train.n_steps == 80 and test.n_steps == 20
    assert train.timestamps[-1] < test.timestamps[0]


def test_split_rejects_degenerate_ratio():
    ds = toy_dataset()
    with pytest.raises(dt.DataError):
        dt.split(ds, 1.0)
    with pytest.raises(dt.DataError):
        dt.split(ds, 0.0)
    with pytest.raises(dt.DataError, match="too few"):
        dt.split(toy_dataset(t=10), 0.8, min_rows=5)


def test_windows_count_formula():
    ds = toy_dataset(t=10)
    wins = dt.make_windows(ds, w=3, h=1)
    assert len(wins) == 7  # T - w - h + 1
    assert [w.anchor_index for w in wins] == list(range(2, 9))


def test_windows_boundary_single():
    ds = toy_dataset(t=4)
    wins = dt.make_windows(ds, w=3, h=1)
    assert len(wins) == 1
    assert wins[0].inputs.shape == (3, 2, 2)
    assert wins[0].target.shape == (2,)


def test_windows_stride_nonoverlapping():
    ds = toy_dataset(t=20)
    wins = dt.make_windows(ds, w=4, h=1, stride=4)
    anchors = [w.anchor_index for w in wins]
    assert anchors == [3, 7, 11, 15]


def test_windows_respect_segments():
    ds = toy_dataset(t=20, segments=[(0, 8), (8, 20)])
    wins = dt.make_windows(ds, w=3, h=2)
    # no window may straddle row 8
    for w in wins:
        lo = w.anchor_index - 2
        hi = w.anchor_index + 2
        assert (hi < 8) or (lo >= 8)


def test_windows_never_straddle_split_with_target():
    ds = toy_dataset(t=100)
    train, _ = dt.split(ds, 0.8)
    wins = dt.make_windows(train, w=5, h=3)
    assert max(w.anchor_index + 3 for w in wins) <= 79


def test_window_errors():
    ds = toy_dataset(t=5)
    with pytest.raises(dt.DataError):
        dt.make_windows(ds, w=0, h=1)
    with pytest.raises(dt.DataError):
        dt.make_windows(ds, w=3, h=-1)
    with pytest.raises(dt.DataError, match="at least"):
        dt.make_windows(toy_dataset(t=3), w=3, h=1)


# -- preprocessor ------------------------------------------------------------

def test_preprocessor_fits_train_only_and_is_idempotent():
    ds = toy_dataset(t=50)
    ds.features[5, 0, 1] = np.nan
    train, test = dt.split(ds, 0.8)
    pre = dt.Preprocessor().fit(train)
    ptrain = pre.transform(train)
    ptest = pre.transform(test)
    ptrain.validate_processed()
    ptest.validate_processed()
    # stats from train only: scaled train features are centered, test need not be
    numeric = [i for i, k in enumerate(ptrain.feature_kinds) if k == "numeric"]
    assert abs(ptrain.features[:, :, numeric].mean()) < 1e-9
    # idempotent. transforming a processed dataset is a no-op
    again = pre.transform(ptrain)
    assert again is ptrain
    # targets min-max scaled from train stats
    assert ptrain.targets.min() == pytest.approx(0.0)
    assert ptrain.targets.max() == pytest.approx(1.0)
    # time feature appended, may exceed 1 on the test side
    ti = ptrain.feature_names.index("time")
    assert ptest.features[:, :, ti].max() > 1.0


def test_preprocessor_categorical_flow():
    ds = toy_dataset(t=20)
    ds.categorical = {"flag": [["on", None] for _ in range(20)]}
    ds.categorical["flag"][3] = ["off", "off"]
    train, test = dt.split(ds, 0.8)
    pre = dt.Preprocessor(add_time_feature=False).fit(train)
    out = pre.transform(train)
    assert "flag=off" in out.feature_names and "flag=on" in out.feature_names
    hot = out.features[:, :, [out.feature_names.index("flag=off"), out.feature_names.index("flag=on")]]
    assert np.all(hot.sum(axis=-1) == 1.0)
    pre.transform(test)


def test_denormalize_roundtrip():
    ds = toy_dataset(t=40)
    train, _ = dt.split(ds, 0.8)
    pre = dt.Preprocessor().fit(train)
    out = pre.transform(train)
    back = out.denormalize_targets(out.targets)
    assert np.allclose(back, train.targets)


def test_dataset_save_load_roundtrip(tmp_path):
    ds = toy_dataset(t=15)
    ds.categorical = {"kind": [["a", "b"] for _ in range(15)]}
    path = tmp_path / "ds.bin"
    ds.save(path)
    loaded = dt.Dataset.load(path)
    assert np.array_equal(loaded.features, ds.features)
    assert np.array_equal(loaded.targets, ds.targets)
    assert loaded.site_names == ds.site_names
    assert loaded.segments == ds.segments
    assert loaded.categorical == ds.categorical


# -- csv ingestion -----------------------------------------------------------

def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_ingest_long_schema(tmp_path):
    csv_path = _write(tmp_path / "x.csv", (
        "ts,site,power,temp\n"
        "0,a,1.0,10\n0,b,2.0,11\n"
        "3600,a,1.5,12\n3600,b,2.5,13\n"
        "7200,a,1.8,\n7200,b,2.8,15\n"
    ))
    schema = {"format": "long", "timestamp": "ts", "timestamp_format": "epoch",
              "site": "site", "target": "power", "numeric": ["temp"], "categorical": []}
    ds = dt.ingest_csv(csv_path, schema)
    assert ds.site_names == ["a", "b"]
    assert ds.n_steps == 3
    assert ds.feature_names == ["power", "temp"]
    assert np.isnan(ds.features[2, 0, 1])  # missing temp kept as NaN for later imputation
    assert ds.targets[0, 1] == 2.0


def test_ingest_duplicate_row_kept_once(tmp_path):
    csv_path = _write(tmp_path / "x.csv", (
        "ts,site,power\n0,a,1.0\n0,a,99.0\n3600,a,2.0\n"
    ))
    schema = {"format": "long", "timestamp": "ts", "timestamp_format": "epoch",
              "site": "site", "target": "power", "numeric": []}
    ds = dt.ingest_csv(csv_path, schema)
    assert ds.n_steps == 2
    assert ds.targets[0, 0] == 1.0  # first record wins


def test_ingest_missing_target_row_dropped(tmp_path):
    csv_path = _write(tmp_path / "x.csv", (
        "ts,site,power\n0,a,1.0\n3600,a,\n7200,a,3.0\n10800,a,4.0\n"
    ))
    schema = {"format": "long", "timestamp": "ts", "timestamp_format": "epoch",
              "site": "site", "target": "power", "numeric": []}
    ds = dt.ingest_csv(csv_path, schema)
    # dropped row becomes a 1-step gap, re-gridded with an imputed target row
    assert ds.n_steps == 4
    assert ds.segments == [(0, 4)]
    assert ds.targets[1, 0] == pytest.approx(np.mean([1.0, 3.0, 4.0]))


def test_ingest_long_gap_splits_segments(tmp_path):
    rows = ["ts,site,power"]
    for i in range(5):
        rows.append(f"{i * 3600},a,{i}.0")
    for i in range(10, 15):
        rows.append(f"{i * 3600},a,{i}.0")
    csv_path = _write(tmp_path / "x.csv", "\n".join(rows) + "\n")
    schema = {"format": "long", "timestamp": "ts", "timestamp_format": "epoch",
              "site": "site", "target": "power", "numeric": []}
    ds = dt.ingest_csv(csv_path, schema)
    assert len(ds.segments) == 2
    assert ds.segments == [(0, 5), (5, 10)]


def test_ingest_nonmonotone_rejected(tmp_path):
    csv_path = _write(tmp_path / "x.csv", "ts,site,power\n3600,a,1.0\n0,a,2.0\n")
    schema = {"format": "long", "timestamp": "ts", "timestamp_format": "epoch",
              "site": "site", "target": "power", "numeric": []}
    with pytest.raises(dt.DataError, match="non-monotone"):
        dt.ingest_csv(csv_path, schema)


def test_ingest_unparseable_threshold(tmp_path):
    rows = ["ts,site,power"] + [f"{i * 3600},a,{i}" for i in range(50)]
    rows.insert(5, "garbage,a,xx")
    rows.insert(9, "junk,a,yy")
    csv_path = _write(tmp_path / "x.csv", "\n".join(rows) + "\n")
    schema = {"format": "long", "timestamp": "ts", "timestamp_format": "epoch",
              "site": "site", "target": "power", "numeric": []}
    with pytest.raises(dt.DataError, match="unparseable"):
        dt.ingest_csv(csv_path, schema)


def test_ingest_wide_gefcom_layout(tmp_path):
    header = "date," + ",".join(f"wp{i}" for i in range(1, 8))
    rows = [header]
    for hour in range(6):
        vals = ",".join(f"0.{hour}{i}" for i in range(1, 8))
        rows.append(f"200907{hour + 10:02d}00,{vals}".replace("0000,", f"01{hour:02d},", 1))
    # simpler: hourly stamps 2009070100..2009070105
    rows = [header] + [
        f"20090701{h:02d}," + ",".join(f"0.{h}{i}" for i in range(1, 8)) for h in range(6)
    ]
    csv_path = _write(tmp_path / "gef.csv", "\n".join(rows) + "\n")
    ds = dt.ingest_csv(csv_path, "gefcom2012-wind")
    assert ds.n_sites == 7
    assert ds.site_names[0] == "wf1"
    assert ds.n_steps == 6
    assert ds.feature_names == ["power"]


def test_ingest_solar_aggregates_inverters(tmp_path):
    csv_path = _write(tmp_path / "solar.csv", (
        "DATE_TIME,PLANT_ID,SOURCE_KEY,DC_POWER,AC_POWER\n"
        "15-05-2020 00:00,4135001,inv1,10,1.0\n"
        "15-05-2020 00:00,4135001,inv2,20,3.0\n"
        "15-05-2020 00:15,4135001,inv1,30,5.0\n"
        "15-05-2020 00:15,4135001,inv2,40,7.0\n"
    ))
    ds = dt.ingest_csv(csv_path, "solar-pv")
    assert ds.n_sites == 1
    assert ds.targets[0, 0] == pytest.approx(2.0)  # mean of inverters
    assert ds.targets[1, 0] == pytest.approx(6.0)


def test_ingest_wind_scada_single_site(tmp_path):
    csv_path = _write(tmp_path / "scada.csv", (
        "Date/Time,LV ActivePower (kW),Wind Speed (m/s),Theoretical_Power_Curve (KWh),Wind Direction (°)\n"
        "01 01 2018 00:00,380.0,5.3,416.0,260.0\n"
        "01 01 2018 00:10,453.0,5.7,519.0,268.0\n"
        "01 01 2018 00:20,306.0,5.2,391.0,272.0\n"
    ))
    ds = dt.ingest_csv(csv_path, "wind-scada")
    assert ds.n_sites == 1
    assert ds.n_features == 3  # power + speed + direction
    assert ds.feature_names[1] == "Wind Speed (m/s)"


def test_ingest_unknown_schema():
    with pytest.raises(dt.DataError, match="unknown schema"):
        dt.ingest_csv("nofile.csv", "mystery")
