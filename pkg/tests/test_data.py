import numpy as np
import pytest

from lrtwostage.data import (
    DatasetSchema,
    Outcome,
    SchemaError,
    TrialDataset,
    load_with_schema,
    reference_code,
)

SCHEMA = {
    "outcome": "binary",
    "columns": [
        {"name": "age", "role": "covariate"},
        {"name": "site", "role": "confounder", "kind": "categorical", "reference": "B"},
        {"name": "arm", "role": "treatment"},
        {"name": "event", "role": "outcome"},
    ],
}


def write(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    return p


def test_dataset_validation():
    with pytest.raises(ValueError):
        TrialDataset(np.zeros((3, 2)), [0, 1, 2], [0, 1, 0], "binary")
    with pytest.raises(ValueError):
        TrialDataset(np.zeros((3, 2)), [0, 1, 1], [0, 1, 0.5], "binary")
    with pytest.raises(ValueError):
        TrialDataset(np.zeros((3, 2)), [0, 1], [0, 1, 0], "binary")


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    d = TrialDataset(rng.normal(size=(20, 3)), rng.integers(0, 2, 20), rng.normal(size=20),
                     Outcome.CONTINUOUS)
    d.to_csv(tmp_path / "x.csv")
    back = TrialDataset.from_csv(tmp_path / "x.csv", "continuous")
    np.testing.assert_array_equal(back.X, d.X)
    np.testing.assert_array_equal(back.y, d.y)
    assert back.feature_names == ["x1", "x2", "x3"]


def test_schema_load_and_encoding(tmp_path):
    p = write(tmp_path, "age,site,arm,event,ignored\n30,A,1,0,z\n40,B,0,1,z\n,C,1,1,z\n50,C,1,1,z\n")
    ld = load_with_schema(p, DatasetSchema.from_dict(SCHEMA))
    assert ld.n_read == 4 and ld.n_dropped == 1 and ld.data.n == 3
    assert ld.data.feature_names == ["age", "site[A]", "site[C]"]
    assert ld.adjust_columns == ["site[A]", "site[C]"]
    assert ld.standardize_at == {"site[A]": 0.0, "site[C]": 0.0}
    np.testing.assert_array_equal(ld.data.X[:, 1:], [[1, 0], [0, 0], [0, 1]])


def test_bad_treatment_names_row(tmp_path):
    p = write(tmp_path, "age,site,arm,event\n30,A,1,0\n40,B,2,1\n")
    with pytest.raises(SchemaError, match=r"row 3.*treatment"):
        load_with_schema(p, DatasetSchema.from_dict(SCHEMA))


def test_missing_column(tmp_path):
    p = write(tmp_path, "age,arm,event\n30,1,0\n")
    with pytest.raises(SchemaError, match="site"):
        load_with_schema(p, DatasetSchema.from_dict(SCHEMA))


def test_schema_validation():
    with pytest.raises(SchemaError):
        DatasetSchema.from_dict({**SCHEMA, "extra": 1})
    bad = {"columns": [c for c in SCHEMA["columns"] if c["role"] != "treatment"]}
    with pytest.raises(SchemaError, match="treatment"):
        DatasetSchema.from_dict(bad)
    with pytest.raises(SchemaError):
        DatasetSchema.from_dict({"columns": [{"name": "a", "role": "weird"}]})


def test_reference_code():
    Z, levels = reference_code(["a", "b", "a", "c"])
    assert levels == ["b", "c"]
    np.testing.assert_array_equal(Z, [[0, 0], [1, 0], [0, 0], [0, 1]])
    with pytest.raises(ValueError):
        reference_code(["a"], reference="z")
