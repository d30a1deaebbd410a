import pytest
from tests.util import INPUTS_DIR, OUTPUTS_DIR
from relstack._parameters import RUN_CONTROL_KEYS, RunConfig


def test_presets():
    paper = RunConfig.preset("paper")
    desk = RunConfig.preset("desk")
    assert paper == RunConfig()
    assert paper.workers == 35
    assert paper.replay_capacity == 100_000
    assert paper.learning_rate == 3e-4
    assert desk.workers == 4
    assert desk.total_steps < paper.total_steps
    with pytest.raises(ValueError):
        RunConfig.preset("laptop")


def test_text_round_trip():
    config = RunConfig(workers=3, architecture="mlp", serial=True, learning_rate=1e-3)
    assert RunConfig.from_text(config.to_text()) == config


def test_save_load():
    config = RunConfig.preset("desk").replace(seed=11)
    config.save(f"{OUTPUTS_DIR}/config.txt")
    assert RunConfig.load(f"{OUTPUTS_DIR}/config.txt") == config


def test_from_text_comments_and_base():
    text = "# header\n\nrounds = 1  # one round\nauto_entropy = no\nreplay_capacity = 1_000\n"
    config = RunConfig.from_text(text, RunConfig.preset("desk"))
    assert config.rounds == 1
    assert config.auto_entropy is False
    assert config.replay_capacity == 1000
    assert config.workers == 4


def test_from_text_scientific_int():
    assert RunConfig.from_text("total_steps = 4e7").total_steps == 40_000_000


def test_from_text_unknown_key():
    with pytest.raises(KeyError):
        RunConfig.from_text("learning_rat = 0.1")


@pytest.mark.parametrize("text", ["serial = maybe", "workers = many", "gamma = high", "just some words"])
def test_from_text_bad_value(text):
    with pytest.raises(ValueError):
        RunConfig.from_text(text)


def test_replace_unknown_key():
    with pytest.raises(KeyError):
        RunConfig().replace(colour="red")


def test_config_hash_ignores_run_control_keys():
    base = RunConfig()
    assert set(RUN_CONTROL_KEYS) == {"output_dir", "total_steps", "checkpoint_interval"}
    moved = base.replace(output_dir="elsewhere", total_steps=5, checkpoint_interval=7)
    assert moved.config_hash() == base.config_hash()
    assert base.replace(seed=1).config_hash() != base.config_hash()
    assert len(base.config_hash()) == 64


@pytest.mark.parametrize(
    "changes",
    [
        {"workers": 0},
        {"architecture": "transformer"},
        {"rounds": 0},
        {"relabel_fraction": 1.5},
        {"gamma": 1.0},
    ],
)
def test_validate(changes):
    with pytest.raises(ValueError):
        RunConfig().replace(**changes).validate()


def test_derived_settings():
    config = RunConfig.load(f"{INPUTS_DIR}/tiny_config.txt")
    assert config.agent_config().batch_size == 16
    assert config.network_shape().embed_dim == 8
    assert config.env_params().penalty_when_far is False
    assert config.copy() == config
    assert config.as_dict()["seed"] == 7
