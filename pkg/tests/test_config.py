import pytest

from gaittake.config import ConfigError, RunConfig, desk_config, micro_config, rng_stream


def test_ini_roundtrip():
    for cfg in (RunConfig(), micro_config(), desk_config()):
        back = RunConfig.from_ini(cfg.to_ini())
        assert back == cfg
        assert back.to_ini() == cfg.to_ini()


def test_unknown_key():
    with pytest.raises(ConfigError, match="unknown key 'depth'"):
        RunConfig.from_ini("[backbone]\ndepth = 3\n")


def test_unknown_section():
    with pytest.raises(ConfigError, match="optimizer"):
        RunConfig.from_ini("[optimizer]\nlr = 1\n")


def test_bad_value():
    with pytest.raises(ConfigError, match=r"\[batch\] crop"):
        RunConfig.from_ini("[batch]\ncrop = thirty\n")


@pytest.mark.parametrize("section,key,value,match", [
    ("batch", "per_identity", 1, "K"),
    ("batch", "crop", 5, "clip_length"),
    ("triplet", "margin", -0.1, "margin"),
    ("triplet", "weighting", "mean", "weighting"),
    ("head", "clip_p", 0.5, "clip_p"),
    ("run", "workers", 0, "workers"),
])
def test_validation(section, key, value, match):
    cfg = RunConfig()
    setattr(getattr(cfg, section), key, value)
    with pytest.raises(ConfigError, match=match):
        cfg.validate()


def test_shipped_configs_match(pytestconfig):
    root = pytestconfig.rootpath / "configs"
    assert RunConfig.from_file(root / "desk.ini") == desk_config()
    assert RunConfig.from_file(root / "micro.ini") == micro_config()


def test_rng_streams_independent():
    a = rng_stream(0, "init").standard_normal(4)
    assert (a == rng_stream(0, "init").standard_normal(4)).all()
    assert not (a == rng_stream(0, "sampling").standard_normal(4)).any()
    assert not (a == rng_stream(1, "init").standard_normal(4)).any()
