import pytest

from charadapter.config import (
    RunConfig,
    config_hash,
    config_to_text,
    load_config,
    parse_config_text,
)
from charadapter.errors import DataError


def test_desk_default_is_valid():
    config = RunConfig.desk_default()
    config.validate()
    assert config.encoder_resolution == 32
    assert config.toy_high_resolution == 2 * config.toy_low_resolution


def test_schema_default_encoder_resolution():
    # the schema default mirrors full-size encoders; only the desk preset
    # lowers it
    assert RunConfig().encoder_resolution == 384


def test_parse_roundtrip():
    config = RunConfig.desk_default()
    config.seed = 123
    config.stage(2).steps = 77
    parsed = parse_config_text(config_to_text(config))
    assert parsed == config
    assert config_hash(parsed) == config_hash(config)


def test_unknown_top_level_key_is_hard_error():
    with pytest.raises(DataError, match="unknown key 'sead'"):
        parse_config_text("sead = 7")


def test_unknown_section_key_is_hard_error():
    with pytest.raises(DataError, match="unknown key 'widht'"):
        parse_config_text("adapter.widht = 96")


def test_unknown_section_is_hard_error():
    with pytest.raises(DataError, match="unknown section"):
        parse_config_text("adaptor.width = 96")


def test_duplicate_key_rejected():
    with pytest.raises(DataError, match="duplicate"):
        parse_config_text("seed = 1\nseed = 2")


def test_malformed_line_rejected():
    with pytest.raises(DataError, match="expected 'key = value'"):
        parse_config_text("seed: 7")


def test_bad_value_type_rejected():
    with pytest.raises(DataError, match="cannot parse"):
        parse_config_text("seed = seven")


def test_stage_resolution_invariants():
    with pytest.raises(DataError, match="toy_high_resolution"):
        parse_config_text("toy_high_resolution = 96")


def test_stage_mix_invariants():
    with pytest.raises(DataError, match="stage 1"):
        parse_config_text("stage1.unpaired_weight = 0.5")
    with pytest.raises(DataError, match="stage 3"):
        parse_config_text("stage3.paired_weight = 0.0")


def test_stage_id_not_settable_from_file():
    with pytest.raises(DataError, match="unknown key 'stage_id'"):
        parse_config_text("stage1.stage_id = 2")


def test_comments_and_blank_lines_ignored():
    config = parse_config_text("# a comment\n\nseed = 5\n")
    assert config.seed == 5


def test_load_config_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_config(tmp_path / "nope.cfg")


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 9\nstage1.steps = 5\n")
    config = load_config(path)
    assert config.seed == 9
    assert config.stage(1).steps == 5
