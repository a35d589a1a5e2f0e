import pytest

from btm.config import DEFAULTS, ConfigError, config_hash, int_list, load_config


def test_defaults_are_full_scale():
    cfg = load_config(environ={})
    assert cfg["condense"]["max_iters"] == 40_000
    assert cfg["condense"]["meta_lr"] == 100.0
    assert cfg["expert"]["n_experts"] == 50
    assert cfg["bezier"]["max_iters"] == 300


def test_desk_profile():
    cfg = load_config(profile="desk", environ={})
    assert cfg["condense"]["max_iters"] == 2000
    assert cfg["expert"]["n_experts"] == 10
    with pytest.raises(ConfigError, match="profile"):
        load_config(profile="huge", environ={})


def test_precedence(tmp_path):
    f = tmp_path / "run.ini"
    f.write_text("[condense]\nipc = 20\nstudent_steps = 40\nmax_iters = 5\n")
    env = {"BTM_CONDENSE__STUDENT_STEPS": "50", "BTM_CONDENSE__META_LR": "10", "OTHER": "x"}
    cfg = load_config(f, profile="desk", overrides=["condense.meta_lr=1.5"], environ=env)
    assert cfg["condense"]["ipc"] == 20
    assert cfg["condense"]["max_iters"] == 5  # file beats profile
    assert cfg["condense"]["student_steps"] == 50  # env beats file
    assert cfg["condense"]["meta_lr"] == 1.5  # --set beats env


@pytest.mark.parametrize("text,match", [
    ("[condense]\nipc = many\n", "condense.ipc: expected int"),
    ("[condense]\nbogus = 1\n", "condense.bogus: unknown key"),
    ("[nowhere]\nx = 1\n", "unknown section"),
    ("[data]\nbalance_train = maybe\n", "data.balance_train"),
    ("not an ini", "run.ini"),
])
def test_errors_name_the_key(tmp_path, text, match):
    f = tmp_path / "run.ini"
    f.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(f, environ={})


def test_override_syntax_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="section.key=value"):
        load_config(overrides=["ipc=3"], environ={})
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.ini", environ={})


def test_types_follow_defaults():
    cfg = load_config(overrides=["data.balance_train=yes", "bezier.lr=2e-3", "expert.seeds=1, 2"], environ={})
    assert cfg["data"]["balance_train"] is True
    assert cfg["bezier"]["lr"] == 2e-3
    assert int_list(cfg, "expert", "seeds") == [1, 2]
    with pytest.raises(ConfigError):
        int_list({"x": {"y": "1,a"}}, "x", "y")


def test_hash_stable():
    a = load_config(environ={})
    b = load_config(environ={})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(load_config(overrides=["condense.ipc=7"], environ={}))
    assert set(DEFAULTS) == set(a)
