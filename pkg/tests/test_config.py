import os

import pytest

from conftest import write_tiny_config
from taipan.config import ABLATIONS, ConfigError, ExperimentConfig, Variant, load_config


def _write(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    return str(p)


def test_tiny_config_parses(tmp_path):
    cfg = load_config(write_tiny_config(tmp_path, seeds="0, 4", extra="eval_nodes = all"))
    assert cfg.seeds == [0, 4]
    assert cfg.out == os.path.join(str(tmp_path), "out")
    assert cfg.synthetic.node_count == 160
    assert cfg.synthetic.inter_attribute_correlation[0] == [1.0, 0.8, 0.0]
    assert cfg.encoder.hidden_dim == 6 and cfg.encoder.dropout == 0.0
    assert cfg.adapt.steps == 3 and cfg.eval_nodes == "all"


def test_hash_ignores_output_location(tmp_path):
    cfg = load_config(write_tiny_config(tmp_path))
    other = load_config(write_tiny_config(tmp_path))
    other.out, other.jobs = "/elsewhere", 4
    assert cfg.hash() == other.hash()
    other.seeds = [9]
    assert cfg.hash() != other.hash()


@pytest.mark.parametrize(
    "text",
    [
        "[experiment]\nbogus = 1\n[synthetic]\n",
        "[experiment]\n[synthetic]\nwidth = 3\n",
        "[mystery]\n[synthetic]\n",
        "[experiment]\nscenario = sideways\n[synthetic]\n",
        "[experiment]\nseeds =\n[synthetic]\n",
        "[experiment]\nmethods = Rand, Oracle\n[synthetic]\n",
        "[experiment]\nablations = wo_everything\n[synthetic]\n",
        "[experiment]\n",
        "[experiment]\n[synthetic]\nnode_count = -5\n",
        "[experiment]\nvictim = maybe\n[synthetic]\n",
    ],
)
def test_invalid_configs(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, text))


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/exp.ini")


def test_out_of_distribution_needs_two_files(tmp_path):
    text = (
        "[experiment]\nscenario = out-of-distribution\n"
        "[aux_data]\nnode_table = a.csv\nedge_file = e.txt\nsensitive = Gender\n"
        "[target_data]\nnode_table = a.csv\nedge_file = e.txt\nsensitive = Gender\n"
    )
    with pytest.raises(ConfigError, match="distinct"):
        load_config(_write(tmp_path, text))


def test_cross_graph_needs_both_sides(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "[experiment]\nscenario = similar-distribution\n[aux_synthetic]\n"))


def test_all_ablations_expressible():
    assert len(ABLATIONS) == 8
    flags = {tuple(vars(Variant.named(a)).values()) for a in ABLATIONS}
    assert len(flags) == 8
    assert (True, True, True, True) not in flags
    with pytest.raises(ConfigError):
        Variant.named("wo_nothing")


def test_programmatic_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig().validate()
