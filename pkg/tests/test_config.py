import pytest
from hypothesis import given
from hypothesis import strategies as st

from makd.config import (
    ConfigError,
    build_run_config,
    format_layers,
    parse_config_text,
    parse_layers,
    parse_overrides,
    parse_rank_map,
    read_config,
    write_config,
)


@pytest.mark.parametrize("text,expected", [
    ("1-3,6", {1, 2, 3, 6}),
    ("4", {4}),
    ("none", set()),
    ("", set()),
    (" 2 - 3 , 5 ", {2, 3, 5}),
    (7, {7}),
    ([1, 2], {1, 2}),
])
def test_parse_layers(text, expected):
    assert parse_layers(text) == expected


@pytest.mark.parametrize("bad", ["3-1", "a", "1-b", "1,,2"])
def test_parse_layers_rejects(bad):
    with pytest.raises(ConfigError):
        parse_layers(bad)


@given(st.sets(st.integers(1, 40)))
def test_layers_round_trip(layers):
    assert parse_layers(format_layers(layers)) == layers


def test_format_layers_merges_runs():
    assert format_layers({1, 2, 3, 5, 7, 8}) == "1-3,5,7-8"
    assert format_layers(set()) == "none"


def test_parse_rank_map():
    assert parse_rank_map("query:8, up:4") == {"query": 8, "up": 4}
    assert parse_rank_map({"key": "3"}) == {"key": 3}
    with pytest.raises(ConfigError):
        parse_rank_map("attention:8")


def test_config_text_parsing():
    text = """
    # comment line
    train.steps = 100   # trailing comment
    train.lr = 1e-3
    data.corpus = toy_grammar
    plan.matrix_layers = 1-2
    data.dedupe = false
    train.steps = 200
    """
    values = parse_config_text(text)
    assert values == {"train.steps": 200, "train.lr": 1e-3, "data.corpus": "toy_grammar",
                      "plan.matrix_layers": "1-2", "data.dedupe": False}


def test_config_text_errors():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("a = 1\nnot a pair\n")
    with pytest.raises(ConfigError):
        parse_config_text("= 3")


def test_overrides():
    assert parse_overrides(["train.steps=5", "out=a=b"]) == {"train.steps": 5, "out": "a=b"}
    with pytest.raises(ConfigError):
        parse_overrides(["train.steps"])


def test_build_run_config_groups():
    rc = build_run_config({"train.steps": 10, "plan.matrix_layers": "1", "plan.layer_layers": "2-4",
                           "factorize.rank": 8, "model.d_model": 64, "teacher": "t.ckpt"},
                          {"train.steps": 20})
    assert rc.train.steps == 20 and rc.teacher == "t.ckpt"
    assert rc.model["d_model"] == 64
    plan = rc.distill_plan(4)
    assert plan.matrix_layers == {1} and plan.layer_layers == {2, 3, 4}
    assert rc.factorization().rank == 8


@pytest.mark.parametrize("key", ["train.stepz", "plan.n_layers", "model.vocab_size", "bogus", "optim.lr"])
def test_unknown_keys_rejected(key):
    with pytest.raises(ConfigError, match="unknown key"):
        build_run_config({key: 1})


@pytest.mark.parametrize("values", [{"student_init": "zeros"}, {"model.model_kind": "seq2seq"},
                                    {"train.mode": "finetune"}, {"data.bogus_field": 1}])
def test_bad_values_rejected(values):
    with pytest.raises(ConfigError):
        build_run_config(values)


def test_factorization_needs_a_target():
    with pytest.raises(ConfigError):
        build_run_config({}).factorization()


def test_rank_map_and_roles_parsed():
    rc = build_run_config({"factorize.rank_map": "query:4,key:4", "factorize.roles": "query,key"})
    assert rc.factorize["rank_map"] == {"query": 4, "key": 4}
    assert rc.factorize["roles"] == ("query", "key")


def test_flat_round_trips_through_file(tmp_path):
    rc = build_run_config({"train.steps": 7, "plan.matrix_layers": "1-2", "plan.layer_layers": "3-4",
                           "factorize.rank": 8, "student_init": "random"})
    write_config(tmp_path / "c.cfg", rc.flat())
    again = build_run_config(read_config(tmp_path / "c.cfg"))
    assert again.flat() == rc.flat()


def test_bundled_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.cfg")):
        rc = build_run_config(read_config(path))
        assert rc.train.steps > 0
