import pytest

from sparsemerge.config import (
    DEFAULTS,
    ConfigError,
    desk_config,
    dump_config,
    load_config,
    merge_spec,
    model_config,
    parse_config,
    train_config,
)


def test_defaults_roundtrip():
    cfg = parse_config(dump_config(DEFAULTS))
    assert cfg == DEFAULTS


def test_parse_values_and_comments():
    cfg = parse_config(
        """
        # comment
        seed = 7
        train.kr = 0.5      # inline comment
        train.layer_drop = yes
        train.block_size = 8
        model.adapt_targets = QKV, O
        sweep.layer_grid = QKV;O,MLP
        sweep.n_grid = 2,4
        """
    )
    assert cfg["seed"] == 7 and cfg["train.kr"] == 0.5 and cfg["train.layer_drop"] is True
    assert cfg["model.adapt_targets"] == ("QKV", "O")
    assert cfg["sweep.layer_grid"] == (("QKV",), ("O", "MLP"))
    assert cfg["sweep.n_grid"] == (2, 4)
    tc = train_config(cfg, epochs=2)
    assert tc.kr == 0.5 and tc.block_size == 8 and tc.seed == 7 and tc.epochs == 2
    assert train_config(DEFAULTS).block_size is None
    assert model_config(cfg).adapt_targets == ("QKV", "O")
    assert desk_config(cfg).kr == 0.5


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError) as err:
        parse_config("seed = 1\ntrain.kappa = 3\n", "x.cfg")
    assert err.value.key == "train.kappa"
    assert "x.cfg:2" in str(err.value)


@pytest.mark.parametrize("text", ["seed = one", "train.layer_drop = maybe", "just words"])
def test_bad_lines(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


def test_merge_spec_overrides():
    spec = merge_spec(DEFAULTS, method="ties", lam=1.0, trim=None)
    assert spec.method == "ties" and spec.lam == 1.0 and spec.trim == 0.2
