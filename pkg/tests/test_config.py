import json
import logging

import pytest

from wbft.config import (ConfigError, config_schema, load_config, parse_config,
                         reference_config_path)
from wbft.consensus import ConsensusMode


def test_minimal_config_applies_defaults(caplog):
    with caplog.at_level(logging.INFO, logger="wbft.config"):
        cfg = parse_config({"nodes": {"count": 10}, "consensus": {"mode": "PBFT"}})
    assert cfg.consensus.mode is ConsensusMode.PBFT
    assert cfg.consensus.alpha == 0.5 and cfg.consensus.retry_max == 16
    assert cfg.node_count() == 10
    assert any("default consensus.alpha" in m for m in caplog.messages)


def test_alpha_beta_mismatch_names_rule():
    with pytest.raises(ConfigError, match="alpha\\+beta≠1"):
        parse_config({"consensus": {"alpha": 0.7, "beta": 0.5}})


def test_validation_error_names_field():
    with pytest.raises(ConfigError, match="channel.target_pl"):
        parse_config({"channel": {"target_pl": 1.5}})
    with pytest.raises(ConfigError, match="consensus.bogus"):
        parse_config({"consensus": {"bogus": 1}})


def test_yaml_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("nodes:\n  count: 10\n  scores_file: [unclosed\n")
    with pytest.raises(ConfigError, match="line \\d+"):
        load_config(p)


def test_reference_file_matches_documented_parameters():
    cfg = load_config(reference_config_path())
    assert cfg.node_count() == 10 and cfg.byzantine_count() == 3
    assert (cfg.trust.mean, cfg.trust.variance) == (0.1, 0.6)
    assert (cfg.consensus.alpha, cfg.consensus.beta) == (0.5, 0.5)
    c = cfg.channel
    assert (c.bandwidth, c.capacity, c.rate, c.subcarriers) == (15000, 15000, 10000, 1)
    assert c.grid[0] == 0.6 and c.grid[-1] == 0.95
    assert len(cfg.seeds) == 20
    assert {m.value for m in cfg.consensus.mode_list()} == {
        "WBFT", "ABC-PBFT", "PBFT", "VaaP", "WBFT-no-HSC", "WBFT-unweighted"}


def test_unsafe_byzantine_count_needs_flag():
    with pytest.raises(ConfigError, match="exceed"):
        parse_config({"nodes": {"count": 10, "byzantine": {"count": 4}}})
    cfg = parse_config({"nodes": {"count": 10, "unsafe": True, "byzantine": {"count": 4}}})
    assert cfg.byzantine_count() == 4


def test_too_few_nodes_and_k_max():
    with pytest.raises(ConfigError, match="at least 4"):
        parse_config({"nodes": {"count": 3}})
    with pytest.raises(ConfigError, match="k_max"):
        parse_config({"nodes": {"count": 4}})


def test_schema_is_json():
    schema = json.loads(config_schema())
    assert "consensus" in schema["properties"]
