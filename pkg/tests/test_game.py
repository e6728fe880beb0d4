import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from numgame import game
from numgame.agents import message_from_tokens
from numgame.errors import InsufficientClasses, InsufficientInstances
from numgame.game import GameConfig, ImageBank
from numgame.stimuli import DatasetSpec, build_dataset


@pytest.fixture(scope="module")
def small_ds():
    return build_dataset(DatasetSpec([1, 2, 3, 4, 5], [12] * 5, canvas_side=32, seed=3, min_radius=1.5))


def hand_hinge(scores, t, margin):
    return sum(max(0.0, margin - scores[t] + s) for j, s in enumerate(scores) if j != t)


def test_hinge_examples():
    assert float(game.hinge_loss(torch.tensor([5.0, 0, 0, 0, 0]), 0, 1.0)) == 0.0
    assert float(game.hinge_loss(torch.tensor([0.0, 0.0]), 0, 1.0)) == 1.0
    assert float(game.hinge_loss(torch.tensor([0.5, 1.0, -0.2], dtype=torch.float64), 0, 1.0)) == pytest.approx(1.8)
    with pytest.raises(IndexError):
        game.hinge_loss(torch.zeros(3), 3)
    with pytest.raises(ValueError):
        game.hinge_loss(torch.zeros(3), 0, margin=0.0)


def test_hinge_matches_hand_formula_on_random_vectors():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(2, 8))
        s = rng.normal(scale=2.0, size=c)
        t = int(rng.integers(c))
        m = float(rng.uniform(0.1, 2.0))
        worst = max(worst, abs(float(game.hinge_loss(torch.as_tensor(s), t, m)) - hand_hinge(s, t, m)))
    assert worst <= 1e-6


def test_hinge_batched_equals_rowwise():
    rng = np.random.default_rng(0)
    s = torch.as_tensor(rng.normal(size=(6, 5)))
    t = torch.as_tensor(rng.integers(0, 5, size=6))
    batched = game.hinge_loss(s, t)
    for b in range(6):
        assert float(batched[b]) == pytest.approx(float(game.hinge_loss(s[b], int(t[b]))))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.data())
def test_hinge_nonnegative_and_zero_iff_margins_met(scores, data):
    t = data.draw(st.integers(0, len(scores) - 1))
    loss = float(game.hinge_loss(torch.tensor(scores, dtype=torch.float64), t, 1.0))
    assert loss >= 0
    met = all(1.0 - scores[t] + s <= 0 for j, s in enumerate(scores) if j != t)
    assert (loss == 0) == met


def test_length_penalty_examples():
    msg = message_from_tokens([[1, 2, 1, 2, 1]], 3, use_terminator=True)
    assert float(game.length_penalty(msg, 0.0)[0]) == 0.0
    assert float(game.length_penalty(msg, 0.005)[0]) == pytest.approx(0.025)
    short = message_from_tokens([[1, 0, 1, 2, 1]], 3, use_terminator=True)
    assert float(game.length_penalty(short, 0.005)[0]) == pytest.approx(0.005)
    with pytest.raises(ValueError):
        game.length_penalty(msg, -1.0)


def test_expected_length_relaxation():
    # terminator probabilities 0.5 at every position: sum_t 0.5^t for t=1..3
    probs = torch.full((1, 3, 3), 0.25)
    probs[:, :, 0] = 0.5
    msg = message_from_tokens([[1, 1, 1]], 3)
    msg.probs = probs
    assert float(game.expected_length(msg)[0]) == pytest.approx(0.5 + 0.25 + 0.125)
    certain = torch.zeros(1, 3, 3)
    certain[:, :, 1] = 1.0
    msg.probs = certain
    assert float(game.expected_length(msg)[0]) == pytest.approx(3.0)


@pytest.mark.parametrize("condition", ["same", "diff"])
def test_episode_invariants(small_ds, condition, rng):
    for _ in range(30):
        ep = game.assemble_episode(small_ds, condition, [1, 2, 3, 4, 5], 5, rng)
        nums = [c.numerosity for c in ep.candidates]
        assert sorted(nums) == [1, 2, 3, 4, 5]
        assert ep.target.numerosity == ep.sender_image.numerosity
        if condition == "same":
            assert ep.target is ep.sender_image
            assert np.array_equal(ep.target.canvas, ep.sender_image.canvas)
        else:
            assert ep.target.instance != ep.sender_image.instance


def test_episode_distractors_and_order_are_uniform(small_ds):
    rng = np.random.default_rng(0)
    pos = np.zeros(5)
    present = {c: 0 for c in [2, 3, 4, 5]}
    n = 2000
    for _ in range(n):
        ep = game.assemble_episode(small_ds, "diff", [1, 2, 3, 4, 5], 3, rng, target_class=1)
        pos[ep.target_index] += 1
        for c in ep.candidates:
            if c.numerosity != 1:
                present[c.numerosity] += 1
    np.testing.assert_allclose(pos[:3] / n, 1 / 3, atol=0.04)
    assert pos[3:].sum() == 0
    for c in present:
        assert present[c] / n == pytest.approx(0.5, abs=0.05)


def test_episode_errors(small_ds, rng):
    with pytest.raises(InsufficientClasses):
        game.assemble_episode(small_ds, "diff", [1, 2], 3, rng)
    one = build_dataset(DatasetSpec([1, 2], [1, 1], canvas_side=32, min_radius=1.5))
    with pytest.raises(InsufficientInstances):
        game.assemble_episode(one, "diff", [1, 2], 2, rng, split="all", target_class=1)
    with pytest.raises(InsufficientClasses):
        GameConfig(classes=[1, 2, 3], candidates=5)
    with pytest.raises(ValueError):
        GameConfig(length_coef=-0.1)


def test_candidate_order_invariance(small_ds):
    torch.manual_seed(0)
    cfg = GameConfig(classes=[1, 2, 3, 4, 5], epochs=1)
    agents = game.build_agents(cfg, 32).eval()
    bank = ImageBank([small_ds], "all")
    rng = np.random.default_rng(1)
    s_cls, s_inst, c_cls, c_inst, tgt = bank.sample([1, 2, 3, 4, 5], "diff", 5, rng, target_classes=[1, 2, 3, 4, 5] * 4)
    with torch.no_grad():
        scores, _ = game.play_batch(agents, bank, cfg, s_cls, s_inst, c_cls, c_inst)
        perm = rng.permutation(5)
        scores_p, _ = game.play_batch(agents, bank, cfg, s_cls, s_inst, c_cls[:, perm], c_inst[:, perm])
    pred = c_cls[np.arange(20), scores.argmax(1).numpy()]
    pred_p = c_cls[:, perm][np.arange(20), scores_p.argmax(1).numpy()]
    np.testing.assert_array_equal(pred, pred_p)


def test_transcript_accuracy_matches_records(small_ds):
    cfg = GameConfig(classes=[1, 2, 3, 4, 5], epochs=1)
    agents = game.build_agents(cfg, 32)
    t = game.evaluate(agents, small_ds, [1, 2, 3, 4, 5], "diff", 5, 97, np.random.default_rng(0), split="all")
    assert len(t) == 97
    from numgame.metrics import accuracy
    assert accuracy(t) == sum(r["correct"] for r in t.records) / 97
    counts = np.bincount([r["sender_n"] for r in t.records], minlength=6)[1:]
    assert counts.max() - counts.min() <= 1


@pytest.mark.parametrize("channel", ["discrete", "sketch"])
def test_training_is_deterministic(small_ds, channel):
    cfg = GameConfig(channel=channel, epochs=2, eval_episodes=40, batch_size=16, episodes_per_epoch=None,
                     length_coef=0.005, variable_length=True)
    a = game.train(cfg, small_ds)
    b = game.train(cfg, small_ds)
    assert a.history == b.history
    assert a.transcript.records == b.transcript.records
    assert len(a.history) == 2
    assert {"epoch", "accuracy", "cond_entropy", "mean_len", "loss"} <= set(a.history[0])
    for k, v in a.agents.state_dict().items():
        assert torch.equal(v, b.agents.state_dict()[k])


def test_train_rejects_missing_classes(small_ds):
    with pytest.raises(InsufficientClasses):
        game.train(GameConfig(classes=[1, 2, 3, 4, 6]), small_ds)


def test_tau_schedule():
    cfg = GameConfig(epochs=4)
    assert [cfg.tau(e) for e in range(4)] == pytest.approx([2.0, 1.5, 1.0, 0.5])


def test_sender_entropy():
    msg = message_from_tokens([[1, 1]], 3)
    msg.probs = torch.tensor([[[1 / 3, 1 / 3, 1 / 3], [1.0, 0.0, 0.0]]])
    assert float(game.sender_entropy(msg)[0]) == pytest.approx(np.log(3) / 2)
    with pytest.raises(ValueError):
        game.sender_entropy(message_from_tokens([[1, 1]], 3))


def test_config_rejects_bad_optimiser_settings():
    with pytest.raises(ValueError):
        GameConfig(lr_decay="step")
    with pytest.raises(ValueError):
        GameConfig(entropy_coef=-0.1)


def test_lr_schedule():
    cfg = GameConfig(epochs=3, lr=1e-3, lr_floor=0.1)
    assert [cfg.lr_at(e) for e in range(3)] == pytest.approx([1e-3, 5.5e-4, 1e-4])
    assert GameConfig(epochs=3, lr=1e-3, lr_decay="none").lr_at(2) == 1e-3


def test_epoch_order_fixed_episode_count():
    rng = np.random.default_rng(0)
    order = game.epoch_order(7, 17, rng)
    assert len(order) == 17
    # two full shuffled passes, then part of a third
    assert sorted(order[:7]) == list(range(7)) and sorted(order[7:14]) == list(range(7))
    assert sorted(game.epoch_order(7, None, rng)) == list(range(7))


def test_default_learning_rate_depends_on_channel():
    assert GameConfig().lr == 5e-4
    assert GameConfig(channel="sketch").lr == 1e-3
    assert GameConfig(channel="sketch", lr=0.01).lr == 0.01
    with pytest.raises(ValueError):
        GameConfig(episodes_per_epoch=0)
