import numpy as np
import pytest
from tests.util import OUTPUTS_DIR, random_observation
from relstack._env import BlockWorld
from relstack._renn import (
    InputNormalizer,
    MLPActor,
    MLPCritic,
    NetInputs,
    NetworkShape,
    ObsBatch,
    ReNNActor,
    ReNNCritic,
    attention_heatmap,
    attention_load,
    attention_record,
    attention_save,
    build_actor,
    build_twin_critic,
    flat_inputs,
    model_summary,
)
from relstack._tensor import Tape
from relstack.error import NoAttentionError, ShapeMismatchError


def small_actor(rounds: int = 2) -> ReNNActor:
    return ReNNActor(np.random.default_rng(0), embed_dim=16, rounds=rounds, readout_layers=2, readout_dim=16)


def small_critic(rounds: int = 2) -> ReNNCritic:
    return ReNNCritic(np.random.default_rng(1), embed_dim=16, rounds=rounds, readout_layers=2, readout_dim=16)


def inputs_of(obs) -> NetInputs:
    return InputNormalizer().normalize(ObsBatch.from_observation(obs))


@pytest.mark.parametrize("n", [1, 3, 9])
def test_actor_output_shapes(n):
    actor = small_actor()
    obs = random_observation(np.random.default_rng(n), n)
    out = actor.forward(Tape(enabled=False), inputs_of(obs))
    assert out.mean.shape == (1, 4)
    assert out.log_std.shape == (1, 4)
    assert len(out.attention) == 2
    assert out.attention[0].shape == (1, n, n)
    assert np.all(out.log_std.data >= -20.0) and np.all(out.log_std.data <= 2.0)


def test_same_weights_any_block_count():
    actor = small_actor()
    n_params = actor.n_params
    rng = np.random.default_rng(0)
    for n in range(1, 10):
        actor.forward(Tape(enabled=False), inputs_of(random_observation(rng, n)))
    assert actor.n_params == n_params


def test_permutation_invariance():
    actor, critic = small_actor(), small_critic()
    rng = np.random.default_rng(2)
    for _ in range(25):
        n = int(rng.integers(2, 8))
        obs = random_observation(rng, n)
        order = rng.permutation(n)
        action = rng.uniform(-1, 1, size=(1, 4))
        a = actor.forward(Tape(enabled=False), inputs_of(obs))
        b = actor.forward(Tape(enabled=False), inputs_of(obs.permute(order)))
        assert np.allclose(a.mean.data, b.mean.data, atol=1e-9, rtol=0)
        assert np.allclose(a.log_std.data, b.log_std.data, atol=1e-9, rtol=0)
        for wa, wb in zip(a.attention, b.attention):
            assert np.allclose(wa[0][np.ix_(order, order)], wb[0], atol=1e-9, rtol=0)
        qa = critic.forward(Tape(enabled=False), inputs_of(obs), action)
        qb = critic.forward(Tape(enabled=False), inputs_of(obs.permute(order)), action)
        assert np.allclose(qa.data, qb.data, atol=1e-9, rtol=0)


@pytest.mark.parametrize("n", range(1, 10))
def test_attention_rows_are_distributions(n):
    actor = small_actor(rounds=3)
    obs = random_observation(np.random.default_rng(10 + n), n)
    out = actor.forward(Tape(enabled=False), inputs_of(obs))
    for w in out.attention:
        assert np.all(w >= 0)
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-9, rtol=0)


def test_single_block_attends_to_itself():
    out = small_actor().forward(Tape(enabled=False), inputs_of(random_observation(np.random.default_rng(0), 1)))
    assert out.attention[0][0, 0, 0] == pytest.approx(1.0)


def test_empty_vertex_set():
    actor = small_actor()
    inputs = NetInputs(np.zeros((1, 8)), np.zeros((1, 0, 21)))
    with pytest.raises(ShapeMismatchError):
        actor.forward(Tape(enabled=False), inputs)


def test_obs_batch_validation():
    batch = ObsBatch(np.zeros((2, 8)), np.zeros((2, 3, 15)), np.zeros((2, 4, 3)))
    with pytest.raises(ShapeMismatchError):
        batch.validate()


def test_critic_action_gradient_exists():
    critic = small_critic()
    obs = random_observation(np.random.default_rng(3), 3)
    tape = Tape()
    action = tape.variable(np.full((1, 4), 0.3))
    q = critic.forward(tape, inputs_of(obs), action)
    (g,) = tape.backward(q, [action])
    assert g.shape == (1, 4)
    assert np.any(g != 0)


def test_rounds_have_independent_weights():
    actor = small_actor(rounds=3)
    names = [p.name for p in actor.parameters()]
    assert len(names) == len(set(names))
    assert any("round2" in name for name in names)


def test_twin_critics_are_independent():
    twin = build_twin_critic(NetworkShape("renn", 8, 1, 1, 8), np.random.default_rng(0))
    w1 = twin.q1.parameters()[0].value
    w2 = twin.q2.parameters()[0].value
    assert not np.array_equal(w1, w2)
    assert twin.architecture == "renn"


def test_mlp_pads_to_nine_blocks():
    inputs = NetInputs(np.zeros((2, 8)), np.ones((2, 3, 21)))
    x = flat_inputs(inputs).data
    assert x.shape == (2, 8 + 9 * 21)
    assert x[:, 8 : 8 + 63].sum() == pytest.approx(2 * 63)
    assert not x[:, 8 + 63 :].any()


def test_mlp_networks():
    rng = np.random.default_rng(0)
    actor = MLPActor(rng, width=32, depth=2)
    critic = MLPCritic(rng, width=32, depth=2)
    inputs = inputs_of(random_observation(rng, 4))
    out = actor.forward(Tape(enabled=False), inputs)
    assert out.attention == []
    assert critic.forward(Tape(enabled=False), inputs, np.zeros((1, 4))).shape == (1,)
    with pytest.raises(ShapeMismatchError):
        actor.forward(Tape(enabled=False), NetInputs(np.zeros((1, 8)), np.zeros((1, 10, 21))))


def test_build_actor_unknown():
    with pytest.raises(ValueError):
        build_actor(NetworkShape("transformer"), np.random.default_rng(0))


def test_normalizer_fresh_is_identity():
    obs = random_observation(np.random.default_rng(0), 2)
    batch = ObsBatch.from_observation(obs)
    inputs = InputNormalizer().normalize(batch)
    assert np.allclose(inputs.ee, np.clip(batch.ee, -5, 5))
    assert np.allclose(inputs.blocks, np.clip(batch.block_inputs(), -5, 5))


def test_normalizer_statistics():
    rng = np.random.default_rng(0)
    norm = InputNormalizer()
    ee = rng.normal(3.0, 2.0, size=(5000, 8))
    batch = ObsBatch(ee, rng.normal(size=(5000, 2, 15)), rng.normal(size=(5000, 2, 3)))
    norm.update(batch)
    assert norm.ee.mean == pytest.approx(np.full(8, 3.0), abs=0.1)
    assert norm.ee.std == pytest.approx(np.full(8, 2.0), abs=0.1)
    out = norm.normalize(batch)
    assert np.abs(out.ee).max() <= 5.0


def test_normalizer_state_round_trip():
    rng = np.random.default_rng(0)
    norm = InputNormalizer()
    norm.update(ObsBatch(rng.normal(size=(10, 8)), rng.normal(size=(10, 3, 15)), rng.normal(size=(10, 3, 3))))
    other = InputNormalizer()
    other.load_state_dict(norm.state_dict())
    assert np.array_equal(other.block.mean, norm.block.mean)
    assert other.ee.count == norm.ee.count


def test_attention_heatmap_and_export():
    actor = small_actor()
    env = BlockWorld()
    obs = env.reset(3, np.zeros((3, 3)), seed=0)
    heat = attention_heatmap(actor, InputNormalizer(), obs)
    assert heat.shape == (3, 3)
    record = attention_record(0, 5, [heat, heat])
    attention_save([record], f"{OUTPUTS_DIR}/attention.jsonl")
    (loaded,) = attention_load(f"{OUTPUTS_DIR}/attention.jsonl")
    assert loaded["step"] == 5
    assert np.allclose(loaded["rounds"][1], heat)


def test_attention_heatmap_mlp():
    actor = MLPActor(np.random.default_rng(0), width=16, depth=1)
    obs = random_observation(np.random.default_rng(0), 2)
    with pytest.raises(NoAttentionError):
        attention_heatmap(actor, InputNormalizer(), obs)


def test_model_summary():
    summary = model_summary(small_actor())
    assert list(summary.columns) == ["name", "shape", "count"]
    assert summary["count"].sum() == small_actor().n_params
    assert summary.attrs["total"] == small_actor().n_params
