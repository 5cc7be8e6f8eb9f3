import pytest

from drpc import config
from drpc.errors import ConfigError


def test_defaults_parse_and_validate():
    cfg = config.load(env={})
    assert cfg.get("trainer", "mode") == "full"
    assert cfg.get("loss", "lambdas") == (0.2, 0.4, 0.6, 0.8, 1.0)
    assert len(cfg.registry().train) == 15
    assert cfg.train_config().batch_images == 16


def test_unknown_key_names_the_line():
    text = "[trainer]\nsteps = 5\nstepz = 3\n"
    with pytest.raises(ConfigError, match=r"x\.ini:3: unknown key 'stepz'"):
        config.parse(text, "x.ini", env={})
    with pytest.raises(ConfigError, match=r"x\.ini:1: unknown section"):
        config.parse("[nope]\na = 1\n", "x.ini", env={})


def test_bad_values_rejected():
    with pytest.raises(ConfigError, match="trainer.steps"):
        config.parse("[trainer]\nsteps = many\n", env={})
    with pytest.raises(ConfigError):
        config.parse("[trainer]\nbatch_images = 15\n", env={})
    with pytest.raises(ConfigError):
        config.parse("[registry]\nk = 99\n", env={})
    with pytest.raises(ConfigError):
        config.parse("[loss]\nrho_min = 0.95\n", env={})


def test_env_seed_override():
    cfg = config.parse("", env={"DRPC_SEED": "7"})
    t = cfg.train_config()
    assert (t.init_seed, t.data_seed, t.crop_seed) == (7, 7, 7)
    assert cfg.get("eval", "seeds") == (7,)
    with pytest.raises(ConfigError, match="DRPC_SEED"):
        config.parse("", env={"DRPC_SEED": "x"})


def test_hash_tracks_content_not_formatting():
    a = config.parse("[trainer]\nsteps = 10\n", env={})
    b = config.parse("# comment\n[trainer]\nsteps=10   ; inline\n", env={})
    c = config.parse("[trainer]\nsteps = 11\n", env={})
    assert a.hash() == b.hash() != c.hash()
    assert config.parse(a.canonical(), env={}).hash() == a.hash()


def test_overrides_and_views():
    cfg = config.defaults().with_values(loss__beta=0.5, trainer__steps=3, network__channels_base=4)
    t = cfg.train_config("dr")
    assert t.mode == "dr" and t.steps == 3 and t.loss.beta == 0.5 and t.network.channels_base == 4
    with pytest.raises(ConfigError):
        cfg.with_values(trainer__nope=1)


def test_custom_registry_blocks():
    text = "[registry]\nk = 1\ntrain =\n    a: brightness=0.1\n    b: contrast=1.2\n"
    reg = config.parse(text, env={}).registry()
    assert [s.id for s in reg.train] == ["a"]


def test_schema_lists_every_key():
    text = config.describe_schema()
    for section, keys in config.SCHEMA.items():
        assert f"[{section}]" in text
        for key in keys:
            assert f"  {key} = " in text
