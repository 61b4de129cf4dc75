import pytest

from dialograph.config import ConfigError, RunConfig, load_config, parse_config_text


def test_defaults_validate():
    cfg = load_config(env={})
    assert cfg["run"]["threads"] == 1 and cfg["model"]["num_heads"] == 8


def test_file_grammar(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\n[model]\nd_model = 32\nnum_heads = 4\n\ntrain.epochs = 3\n[synth]\nutterance_count_range = [2, 5]\n")
    cfg = load_config(p, env={})
    assert cfg["model"]["d_model"] == 32 and cfg["train"]["epochs"] == 3
    assert cfg["synth"]["utterance_count_range"] == [2, 5]


def test_precedence_file_env_flags(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("[train]\nepochs = 3\nbase_lr = 0.01\nbatch_size = 4\n")
    env = {"DIALOGRAPH_CONFIG": str(p), "DIALOGRAPH__TRAIN__EPOCHS": "5", "DIALOGRAPH__TRAIN__BASE_LR": "0.02"}
    cfg = load_config(None, env=env, overrides={"train.epochs": 7})
    assert cfg["train"]["epochs"] == 7  # flag beats env
    assert cfg["train"]["base_lr"] == 0.02  # env beats file
    assert cfg["train"]["batch_size"] == 4  # file beats default


@pytest.mark.parametrize(
    "text",
    ["[nosuch]\n", "[model]\nbogus = 1\n", "[model]\nnum_heads = many\n", "epochs = 3\n", "[model]\nd_model\n"],
)
def test_rejects_bad_files(text):
    with pytest.raises(ConfigError):
        parse_config_text(text, RunConfig())


def test_invariant_violations_are_config_errors():
    with pytest.raises(ConfigError):
        load_config(env={}, overrides={"model.num_heads": 6})
    with pytest.raises(ConfigError):
        load_config(env={}, overrides={"ssl.threshold_mode": "sometimes"})


def test_dumps_round_trips():
    cfg = load_config(env={}, overrides={"graph.similarity_threshold": 0.7})
    again = parse_config_text(cfg.dumps(), RunConfig())
    assert again.to_json() == cfg.to_json()


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="absent.cfg"):
        load_config(tmp_path / "absent.cfg", env={})
