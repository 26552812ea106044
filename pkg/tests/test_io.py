import json

import numpy as np
import pytest

from mlsaem.io import (
    CONFIG_SCHEMA,
    ConfigError,
    DatasetFormatError,
    atomic_write_text,
    dataset_to_csv,
    demo_paths,
    load_config,
    parse_config,
    parse_dataset,
    read_dataset,
    write_dataset,
)
from mlsaem.trial import TrialDesign, simulate_trial

GOOD = """subject_id,unit,time,dv,dose,tau
1,1,0.5,2.0,4,
1,1,1.0,3.0,4,
1,2,0.5,2.5,4,
1,2,1.0,3.5,4,
2,1,0.5,1.0,4,
2,1,1.0,1.5,4,
2,2,0.5,1.2,4,
2,2,1.0,1.8,4,
"""


def minimal_config(**extra):
    cfg = {"format_version": 1, "model": {"structural": "theophylline_1cpt_oral"}}
    cfg.update(extra)
    return cfg


class TestDatasetCsv:
    def test_well_formed(self):
        d = parse_dataset(GOOD)
        assert (d.n, d.K) == (2, 2)
        np.testing.assert_array_equal(d.n_obs, 2)
        assert d.y[1, 1, 1] == 1.8

    def test_rows_normalised(self):
        lines = GOOD.strip().split("\n")
        shuffled = "\n".join([lines[0]] + lines[5:] + lines[1:5]) + "\n"
        assert dataset_to_csv(parse_dataset(shuffled)) == dataset_to_csv(parse_dataset(GOOD))

    def test_duplicate_row_names_line(self):
        text = GOOD + "2,2,1.0,1.9,4,\n"
        with pytest.raises(DatasetFormatError, match="line 10: duplicate.*line 9"):
            parse_dataset(text)

    def test_missing_column(self):
        with pytest.raises(DatasetFormatError, match="line 1: missing columns \\['dose'\\]"):
            parse_dataset("subject_id,unit,time,dv\n1,1,0.5,2\n")

    def test_non_monotone_times(self):
        text = GOOD.replace("1,1,1.0,3.0,4,", "1,1,0.25,3.0,4,")
        with pytest.raises(DatasetFormatError, match="line 3: .*not increasing"):
            parse_dataset(text)

    def test_differing_unit_counts(self):
        text = "\n".join(l for l in GOOD.split("\n") if not l.startswith("2,2")) + "\n"
        with pytest.raises(DatasetFormatError, match="line 6: subject 2 has 1 units"):
            parse_dataset(text)

    def test_bad_number(self):
        with pytest.raises(DatasetFormatError, match="line 4: column 'dv'"):
            parse_dataset(GOOD.replace("1,2,0.5,2.5,4,", "1,2,0.5,abc,4,"))

    def test_dose_constant_within_unit(self):
        with pytest.raises(DatasetFormatError, match="line 3: dose"):
            parse_dataset(GOOD.replace("1,1,1.0,3.0,4,", "1,1,1.0,3.0,5,"))

    def test_round_trip_byte_identical(self, tmp_path):
        data = simulate_trial(TrialDesign(), 3)
        a = tmp_path / "a.csv"
        write_dataset(a, data)
        b = tmp_path / "b.csv"
        write_dataset(b, read_dataset(a))
        assert a.read_bytes() == b.read_bytes()
        np.testing.assert_array_equal(read_dataset(a).y, data.y)

    def test_bundled_demo_is_canonical(self, tmp_path):
        path = demo_paths()["data"]
        out = tmp_path / "demo.csv"
        write_dataset(out, read_dataset(path))
        assert out.read_bytes() == path.read_bytes()


class TestConfig:
    def test_demo_config_valid(self):
        cfg = load_config(demo_paths()["config"])
        assert cfg.structural == "theophylline_1cpt_oral" and cfg.error == "combined"
        sc = cfg.saem_config(2)
        assert sc.theta_init.mu[2] == 4.0 and sc.n_iterations == 500
        design = cfg.trial_design()
        assert design.n == 24 and design.theta_true.sigma2 == 0.01

    def test_unknown_model(self):
        with pytest.raises(ConfigError, match="unknown structural model"):
            parse_config({"format_version": 1, "model": {"structural": "nope"}})

    @pytest.mark.parametrize("bad", [
        {"saem": {"n_iterations": 0}},
        {"kernel": {"rho": -1}},
        {"covariance_structure": "banded"},
        {"extra_field": 1},
        {"inference": {"T": 10}},
    ])
    def test_schema_violations(self, bad):
        with pytest.raises(ConfigError, match="config"):
            parse_config(minimal_config(**bad))

    def test_version_required(self):
        with pytest.raises(ConfigError):
            parse_config({"model": {"structural": "theophylline_1cpt_oral"}})

    def test_burn_in_bound(self):
        with pytest.raises(ConfigError, match="burn_in"):
            parse_config(minimal_config(saem={"n_iterations": 10, "burn_in": 10}))

    def test_bad_unit_effect_name(self):
        with pytest.raises(ConfigError, match="unit-effect"):
            parse_config(minimal_config(fixed_beta=["beta.logCl"]))

    def test_theta_init_dimension(self):
        cfg = parse_config(minimal_config(theta_init={"mu": [0.0, 1.0], "sigma2": 0.1}))
        with pytest.raises(ConfigError, match="mu has 2"):
            cfg.saem_config(2)

    def test_invalid_json_reports_line(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{\n "format_version": 1,\n oops\n}')
        with pytest.raises(ConfigError, match="line 3"):
            load_config(p)

    def test_schema_is_valid_json(self):
        assert json.loads(json.dumps(CONFIG_SCHEMA))["title"]


def test_atomic_write_leaves_no_temp(tmp_path):
    atomic_write_text(tmp_path / "x.txt", "hello")
    assert [p.name for p in tmp_path.iterdir()] == ["x.txt"]
