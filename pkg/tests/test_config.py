import pytest

from s2me.config import (
    PRESETS,
    TrainConfig,
    load_config_file,
    parse_overrides,
    resolve_config,
    write_config_file,
)
from s2me.errors import ConfigError


def test_defaults():
    config = TrainConfig()
    assert (config.iterations, config.batch_size, config.ramp_iters) == (3000, 8, 2500)
    assert config.loss_terms == ("scrib", "mt", "el")
    assert config.el_max == config.lambda_max == 5.0


def test_loss_terms_are_canonicalised():
    assert TrainConfig(loss_terms=("el", "scrib")).loss_terms == ("scrib", "el")


def test_validation_lists_every_problem():
    with pytest.raises(ConfigError) as info:
        TrainConfig(batch_size=0, momentum=1.5, fusion="max")
    message = str(info.value)
    assert "batch_size" in message and "momentum" in message and "fusion" in message


def test_scrib_term_is_required():
    with pytest.raises(ConfigError, match="scrib"):
        TrainConfig(loss_terms=("mt", "el"))


def test_every_preset_resolves():
    for name in PRESETS:
        config = resolve_config(name)
        for key, value in PRESETS[name].fixed.items():
            got = getattr(config, key)
            assert (set(got) == set(value)) if isinstance(value, tuple) else got == value


def test_fully_supervised_preset():
    config = resolve_config("fully-ce")
    assert config.supervision == "dense"
    assert config.loss_terms == ("scrib",)


def test_preset_defaults_can_be_overridden():
    config = resolve_config("s2me", overrides=["fusion=random"])
    assert config.fusion == "random"
    assert config.model_spe == "ynet"


def test_preset_clash_names_every_key():
    with pytest.raises(ConfigError) as info:
        resolve_config("s2me", overrides=["model_spe=unet", "loss_terms=scrib"])
    assert "model_spe" in str(info.value)
    assert "loss_terms" in str(info.value)


def test_agreeing_override_is_not_a_clash():
    config = resolve_config("s2me-mt", overrides={"loss_terms": "mt,scrib"})
    assert config.loss_terms == ("scrib", "mt")


def test_unknown_preset_and_keys():
    with pytest.raises(ConfigError):
        resolve_config("nope")
    with pytest.raises(ConfigError):
        resolve_config(overrides=["learning_rate=0.1"])
    with pytest.raises(ConfigError):
        parse_overrides(["iterations"])
    with pytest.raises(ConfigError, match="iterations"):
        parse_overrides(["iterations=many"])


def test_override_coercion():
    parsed = parse_overrides(["iterations=10", "lr0=0.5", "loss_terms=scrib+mt", "grad_clip=none"])
    assert parsed == {"iterations": 10, "lr0": 0.5, "loss_terms": ("scrib", "mt"), "grad_clip": None}


def test_config_file_roundtrip(tmp_path):
    config = TrainConfig(iterations=12, fusion="equal", loss_terms=("scrib", "el"), lambda_el_max=2.0)
    path = tmp_path / "run.env"
    write_config_file(path, config)
    assert TrainConfig.from_dict(load_config_file(path)) == config


def test_layering(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("iterations=50\nfusion=random\nmodel_spe=unet\n")
    config = resolve_config("s2me", config_path=path, overrides=["iterations=7"])
    assert config.iterations == 7          # override beats file
    assert config.fusion == "random"       # file beats preset default
    assert config.model_spe == "ynet"      # fixed preset key beats file


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "missing.env")
    path = tmp_path / "bad.env"
    path.write_text("colour=blue\n")
    with pytest.raises(ConfigError, match="colour"):
        load_config_file(path)


def test_config_hash():
    base = TrainConfig()
    assert base.config_hash() == TrainConfig().config_hash()
    assert base.config_hash() == TrainConfig(iterations=10, eval_every=5).config_hash()
    assert base.config_hash() != TrainConfig(lr0=0.01).config_hash()
    assert base.config_hash() != base.with_seed(1).config_hash()
    assert len(base.config_hash()) == 64
