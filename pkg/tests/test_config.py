import pytest

from edgeped.config import (
    ConfigParseError,
    GraphValidationError,
    InvertedResidualSpec,
    MINI_CONFIG_TEXT,
    REFERENCE_CONFIG_TEXT,
    mini_config,
    parse_model_config,
    reference_config,
)

VALID = """
input_size 64
classes 1
anchors32 10x10 20x20 30x30
anchors16 4x4 8x8 12x12

backbone:
conv 8 3 2
block 8 3 2 1
block 16 3 2 6
block 16 3 2 6 tap16
block 24 3 2 6 tap32

neck32:
conv 16 1 1 branch
conv 32 3 1

neck16:
conv 8 1 1
upsample
concat tap16
conv 16 3 1
"""


def test_valid_config_parses():
    cfg = parse_model_config(VALID)
    assert cfg.input_size == 64
    assert len(cfg.blocks) == 4
    assert cfg.tap16_index == 2
    assert cfg.tap32_index == 3
    assert cfg.branch_index == 0
    assert cfg.head32.out_channels == 18
    assert len(cfg.heads) == 2
    assert {h.stride for h in cfg.heads} == {32, 16}


def test_comments_and_blank_lines_ignored():
    text = VALID.replace("conv 8 3 2", "conv 8 3 2  # stem\n\n# standalone comment")
    assert parse_model_config(text).stem.out_ch == 8


def test_unknown_kind_reports_line_number():
    text = VALID.replace("block 16 3 2 6\n", "blocc 16 3 2 6\n", 1)
    with pytest.raises(ConfigParseError) as err:
        parse_model_config(text)
    assert "blocc" in str(err.value)
    assert err.value.line_no == 10


def test_unknown_header_key():
    with pytest.raises(ConfigParseError):
        parse_model_config("wat 5\n" + VALID)


def test_unknown_section():
    with pytest.raises(ConfigParseError) as err:
        parse_model_config(VALID + "\nneck8:\nconv 4 1 1\n")
    assert "neck8" in str(err.value)


def test_block_not_allowed_in_neck():
    with pytest.raises(ConfigParseError):
        parse_model_config(VALID + "\nneck16:\nblock 4 3 1 6\n")


def test_missing_header_key():
    text = VALID.replace("classes 1\n", "")
    with pytest.raises(ConfigParseError):
        parse_model_config(text)


def test_duplicate_section_rejected():
    with pytest.raises(ConfigParseError):
        parse_model_config(VALID + "\nbackbone:\nconv 8 3 2\n")


def test_non_integer_field():
    with pytest.raises(ConfigParseError):
        parse_model_config(VALID.replace("conv 8 3 2", "conv eight 3 2"))


def test_tap_stride_mismatch_rejected():
    # tap16 moved onto the stride-8 layer.
    text = VALID.replace("block 16 3 2 6\n", "block 16 3 2 6 tap16\n", 1).replace(
        "block 16 3 2 6 tap16\nblock 24", "block 16 3 2 6\nblock 24"
    )
    with pytest.raises(GraphValidationError):
        parse_model_config(text)


def test_input_size_must_be_multiple_of_32():
    with pytest.raises(GraphValidationError):
        parse_model_config(VALID.replace("input_size 64", "input_size 50"))


def test_concat_requires_stride_16():
    text = VALID.replace("upsample\nconcat tap16", "concat tap16\nupsample")
    with pytest.raises(GraphValidationError):
        parse_model_config(text)


def test_tap32_must_be_last_block():
    text = VALID.replace(
        "block 24 3 2 6 tap32",
        "block 24 3 2 6 tap32\nblock 24 3 1 6",
    )
    with pytest.raises(GraphValidationError):
        parse_model_config(text)


def test_shortcut_rule():
    assert InvertedResidualSpec(16, 16, 6, 1).has_shortcut
    assert not InvertedResidualSpec(16, 24, 6, 1).has_shortcut
    assert not InvertedResidualSpec(16, 16, 6, 2).has_shortcut


def test_expanded_channels():
    assert InvertedResidualSpec(16, 16, 6, 1).expanded == 96


def test_reference_config_valid():
    cfg = reference_config()
    assert cfg.input_size == 416
    assert cfg.blocks[cfg.tap16_index].c_out == 96
    assert cfg.blocks[cfg.tap32_index].c_out == 320


def test_mini_config_valid():
    assert mini_config().input_size == 160


def test_shipped_config_files_match_embedded(repo_root):
    import os

    with open(os.path.join(repo_root, "configs", "reference.cfg")) as fh:
        assert fh.read() == REFERENCE_CONFIG_TEXT
    with open(os.path.join(repo_root, "configs", "mini.cfg")) as fh:
        assert fh.read() == MINI_CONFIG_TEXT
