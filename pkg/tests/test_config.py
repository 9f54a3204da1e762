import pytest

from refixmatch import config as C


def test_defaults_match_reference_regime():
    cfg = C.RunConfig.build({}, env={})
    assert (cfg["threshold"], cfg["temperature"], cfg["lambda_u"]) == (0.95, 0.5, 1.0)
    assert (cfg["mu"], cfg["batch_size"], cfg["momentum"], cfg["ema_momentum"]) == (7, 64, 0.9, 0.999)
    assert cfg["lr"] == 0.03 and cfg["iterations"] == 20000


def test_every_key_documented_with_default():
    text = C.defaults_text()
    for k, key in C.KEYS.items():
        assert key.doc
        assert f"\n{k}=" in "\n" + text
    assert C.parse_lines(text).keys() == C.KEYS.keys()


def test_unknown_key_rejected():
    with pytest.raises(C.ConfigError, match="bogus"):
        C.RunConfig.build({"bogus": "1"}, env={})
    with pytest.raises(C.ConfigError, match="bogus"):
        C.RunConfig.build({}, ["bogus=2"], env={})


@pytest.mark.parametrize("raw", [{"mu": "seven"}, {"cutout": "maybe"}, {"ablation": "mixup"},
                                 {"arch": "resnet"}, {"batch_size": "0"}, {"threshold_mode": "flex"}])
def test_bad_values_are_config_errors(raw):
    with pytest.raises(C.ConfigError):
        C.RunConfig.build(raw, env={})


def test_parse_lines():
    raw = C.parse_lines("# comment\n\n lr = 0.1 \nwidths=64,32\n")
    assert raw == {"lr": "0.1", "widths": "64,32"}
    with pytest.raises(C.ConfigError, match=":2:"):
        C.parse_lines("lr=1\nnonsense\n", "f")


def test_override_and_seed_env_precedence():
    cfg = C.RunConfig.build({"seed": "1", "lr": "0.1"}, ["seed=2", "lr=0.2"], env={})
    assert cfg["seed"] == 2 and cfg["lr"] == 0.2
    cfg = C.RunConfig.build({"seed": "1"}, ["seed=2"], env={C.SEED_ENV: "9"})
    assert cfg["seed"] == 9
    assert C.RunConfig.build({"seed": "1"}, env={C.SEED_ENV: " "})["seed"] == 1


def test_resolved_roundtrip():
    cfg = C.RunConfig.build({"widths": "32,16", "lr": "0.01", "cutout": "no", "ablation": "HARD_ONLY"}, env={})
    again = C.RunConfig.build(C.parse_lines(cfg.resolved()), env={})
    assert again.values == cfg.values
    assert again.resolved() == cfg.resolved()
    assert again.train_config().ablation == "hard_only"


def test_model_spec_from_config():
    cfg = C.RunConfig.build({"arch": "mlp", "widths": "12"}, env={})
    spec = cfg.model_spec((1, 8, 8), 3)
    assert spec.widths == (12,) and spec.num_classes == 3


def test_load_missing_file(tmp_path):
    with pytest.raises(C.ConfigError, match="nope.cfg"):
        C.RunConfig.load(tmp_path / "nope.cfg", env={})
