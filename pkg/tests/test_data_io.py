import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abstention.consistency import BoundCheckReport, DiscreteProblem, deterministic_gap_report
from abstention.data_io import (
    ChecksumError,
    FormatVersionError,
    SyntheticRecipe,
    Table,
    TabularDataset,
    format_problem_spec,
    generate,
    load_csv,
    load_model,
    load_problem_spec,
    pairwise_margin,
    parse_problem_spec,
    read_report,
    save_csv,
    save_model,
    save_problem_spec,
    write_report,
)
from abstention.models import init_model, Metrics


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# ----------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------


def test_load_csv_basic(tmp_path):
    p = write(tmp_path / "d.csv", "f1,f2,y\n1,2,a\n3,4,b\n5,6,a\n")
    data = load_csv(p, "y")
    assert (data.m, data.d, data.n) == (3, 2, 2)
    assert data.label_names == ["a", "b"]
    assert data.original_labels() == ["a", "b", "a"]
    np.testing.assert_array_equal(data.features, [[1, 2], [3, 4], [5, 6]])


def test_load_csv_label_column_anywhere(tmp_path):
    p = write(tmp_path / "d.csv", "y,f1\n2,0.5\n10,1.5\n")
    data = load_csv(p, "y")
    assert data.label_names == ["2", "10"]
    assert data.feature_names == ["f1"]


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("f1,f2,y\n", "no data rows"),
        ("f1,f2,y\n1,nan,a\n2,3,b\n", "row 2"),
        ("f1,f2,y\n1,2,a\n1,x,b\n", "row 3"),
        ("f1,f2,z\n1,2,a\n", "no column"),
        ("f1,f2,y\n1,2\n", "row 2"),
    ],
)
def test_load_csv_errors(tmp_path, text, fragment):
    p = write(tmp_path / "d.csv", text)
    with pytest.raises(ValueError, match=fragment):
        load_csv(p, "y")


def test_unseen_label_is_an_error(tmp_path):
    p = write(tmp_path / "d.csv", "f1,y\n1,a\n2,c\n")
    with pytest.raises(ValueError, match="row 3"):
        load_csv(p, "y", label_names=["a", "b"])


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = TabularDataset(rng.normal(size=(10, 3)), rng.integers(0, 3, 10), 3, ["a", "b", "c"], ["x", "y", "z"])
    save_csv(tmp_path / "d.csv", data, "label")
    back = load_csv(tmp_path / "d.csv", "label")
    np.testing.assert_array_equal(back.features, data.features)
    assert back.original_labels() == data.original_labels()


def test_dataset_invariants():
    with pytest.raises(ValueError):
        TabularDataset(np.zeros((0, 2)), np.zeros(0), 2)
    with pytest.raises(ValueError):
        TabularDataset(np.array([[np.nan]]), [0], 2)
    with pytest.raises(ValueError):
        TabularDataset(np.zeros((1, 2)), [2], 2)


# ----------------------------------------------------------------------
# Problem files
# ----------------------------------------------------------------------


def test_problem_spec_valid():
    prob = parse_problem_spec("# two atoms\nn=2 c=0.2\n0.5 1 0\n0.5 0 1  # second\n")
    assert prob.size == 2 and prob.c == 0.2 and prob.deterministic


@pytest.mark.parametrize(
    "text",
    [
        "n=2 c=0.2\n1.0 0.5 0.48\n",
        "n=2 c=1.0\n1.0 1 0\n",
        "n=2 c=0.2\n0.5 1 0\n0.4 0 1\n",
        "c=0.2\n1 1 0\n",
        "n=2 c=0.2\n0.5 1 0 | 1 2\n0.5 0 1 | 1 2\n",
        "n=2 c=0.2\n0.5 1 0 | 1 2\n0.5 0 1\n",
    ],
)
def test_problem_spec_errors(text):
    with pytest.raises(ValueError):
        parse_problem_spec(text)


def test_problem_spec_round_trip_is_byte_stable(tmp_path):
    problem, _, _ = generate(SyntheticRecipe("label_noise", rho=0.1, seed=3))
    save_problem_spec(tmp_path / "a.txt", problem)
    back = load_problem_spec(tmp_path / "a.txt")
    np.testing.assert_array_equal(back.probs, problem.probs)
    np.testing.assert_array_equal(back.features, problem.features)
    assert format_problem_spec(back) == (tmp_path / "a.txt").read_text()


# ----------------------------------------------------------------------
# Synthetic recipes
# ----------------------------------------------------------------------


def test_separable_recipe_certificate():
    problem, _, info = generate(SyntheticRecipe("separable_margin", n=3, d=2, margin=0.5, atoms=60, seed=7))
    assert info["certified_margin"] >= 0.5
    assert problem.deterministic and problem.size == 60
    W, b = info["separator_W"], info["separator_b"]
    assert pairwise_margin(W, b, problem.features, info["clean_labels"]) == info["certified_margin"]
    assert np.all(np.argmax(problem.features @ W.T + b, axis=1) == info["clean_labels"])


def test_zero_noise_equals_separable():
    a, _, _ = generate(SyntheticRecipe("separable_margin", seed=2))
    b, _, _ = generate(SyntheticRecipe("label_noise", rho=0.0, seed=2))
    np.testing.assert_array_equal(a.probs, b.probs)
    np.testing.assert_array_equal(a.features, b.features)


def test_label_noise_rows():
    problem, _, info = generate(SyntheticRecipe("label_noise", rho=0.1, seed=1))
    np.testing.assert_allclose(problem.probs.max(axis=1), 0.9)
    np.testing.assert_array_equal(problem.probs.argmax(axis=1), info["clean_labels"])


@pytest.mark.parametrize("seed", range(5))
def test_chow_stress_audit(seed):
    problem, _, info = generate(SyntheticRecipe("chow_stress", n=3, d=4, c=0.3, atoms=20, seed=seed))
    near = np.abs(problem.probs.max(axis=1) - 0.7) <= 0.05
    assert near.sum() == 10
    np.testing.assert_array_equal(near, info["stressed"])


def test_recipe_validation():
    with pytest.raises(ValueError):
        SyntheticRecipe("separable_margin", margin=0.0)
    with pytest.raises(ValueError):
        SyntheticRecipe("label_noise", rho=0.6)
    with pytest.raises(ValueError):
        generate(SyntheticRecipe("separable_margin", margin=5.0, radius=2.0))


def test_sampler_is_deterministic_and_matches_distribution():
    problem, sampler, _ = generate(SyntheticRecipe("label_noise", rho=0.2, atoms=10, seed=0))
    a = sampler.sample(2000)
    b = sampler.sample(2000)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(sampler.sample(2000, stream=1).labels, a.labels)
    # empirical label-noise rate close to 0.2
    clean = problem.probs.argmax(axis=1)
    atom = [int(np.flatnonzero((problem.features == x).all(axis=1))[0]) for x in a.features]
    assert abs(np.mean(a.labels != clean[atom]) - 0.2) < 0.03


# ----------------------------------------------------------------------
# Model files
# ----------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_model_round_trip(tmp_path, kind):
    m = init_model(kind, 3, 4, width=5, seed=2, clamp=2.0)
    m.params = {k: v + np.random.default_rng(0).normal(size=v.shape) / 3 for k, v in m.params.items()}
    m.meta = {"loss": "comp_sum", "mu": 1.5, "cost": 0.3, "seed": 2}
    save_model(tmp_path / "m.model", m)
    back = load_model(tmp_path / "m.model")
    assert back.param_hash() == m.param_hash()
    assert (back.kind, back.clamp, back.meta) == (m.kind, m.clamp, m.meta)
    for k, v in m.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    save_model(tmp_path / "m2.model", back)
    assert (tmp_path / "m.model").read_bytes() == (tmp_path / "m2.model").read_bytes()


def test_truncated_model_fails_checksum(tmp_path):
    m = init_model("mlp", 2, 3, width=4, seed=0)
    save_model(tmp_path / "m.model", m)
    text = (tmp_path / "m.model").read_text()
    write(tmp_path / "t.model", text[: len(text) - 20])
    with pytest.raises(ChecksumError):
        load_model(tmp_path / "t.model")


def test_future_model_version(tmp_path):
    save_model(tmp_path / "m.model", init_model("linear", 2, 3))
    head, _, block = (tmp_path / "m.model").read_text().partition("\n")
    h = json.loads(head)
    h["format_version"] = 99
    write(tmp_path / "f.model", json.dumps(h) + "\n" + block)
    with pytest.raises(FormatVersionError):
        load_model(tmp_path / "f.model")


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------


def test_gap_report_json(tmp_path):
    rep = deterministic_gap_report(1.0, 0.5)
    jpath, cpath = write_report(tmp_path / "gap.json", rep)
    doc = json.loads(jpath.read_text())
    assert doc["schema_version"] == 1
    for key in ("mu", "c", "closed_form_V", "numeric_V", "gap_estimate", "optimal_softmax"):
        assert key in doc["report"]
    assert read_report(jpath) == rep
    header = cpath.read_text().splitlines()[0].split(",")
    assert "closed_form_V" in header and "optimal_softmax.0" in header


def test_bound_report_with_violations(tmp_path):
    rep = BoundCheckReport().record([1.0, 0.0], [0.5, 1.0], 1e-9, inputs=[{"p": [1, 0]}, {"p": [0, 1]}])
    jpath, _ = write_report(tmp_path / "b.json", rep)
    doc = json.loads(jpath.read_text())
    assert doc["report"]["violations"] and doc["report"]["passed"] is False
    back = read_report(jpath)
    assert back == rep
    write_report(tmp_path / "b2.json", back)
    assert (tmp_path / "b.json").read_bytes() == (tmp_path / "b2.json").read_bytes()


def test_table_and_metrics_reports(tmp_path):
    t = Table("sweep", [{"mu": 0.0, "V": 1.0}, {"mu": 1.0, "V": 0.5}], {"c": 0.5})
    _, cpath = write_report(tmp_path / "t.json", t)
    assert cpath.read_text().splitlines() == ["mu,V", "0.0,1.0", "1.0,0.5"]
    m = Metrics(0.1, 0.2, None, 0.3, 10, 0.2)
    jpath, _ = write_report(tmp_path / "m.json", m)
    assert read_report(jpath) == m


def test_unknown_report_type(tmp_path):
    with pytest.raises(TypeError):
        write_report(tmp_path / "x.json", {"a": 1})


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 4), st.floats(0.01, 0.99), st.integers(0, 10**6))
def test_problem_spec_round_trip_property(atoms, n, c, seed):
    rng = np.random.default_rng(seed)
    w = rng.exponential(size=atoms)
    p = rng.exponential(size=(atoms, n))
    prob = DiscreteProblem(w / w.sum(), p / p.sum(axis=1, keepdims=True), c, rng.normal(size=(atoms, 2)))
    text = format_problem_spec(prob)
    back = parse_problem_spec(text)
    assert format_problem_spec(back) == format_problem_spec(parse_problem_spec(format_problem_spec(back)))
    np.testing.assert_allclose(back.probs, prob.probs, rtol=0, atol=1e-15)
