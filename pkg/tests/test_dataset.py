import json

import numpy as np
import pytest

from gavebid.dataset import (DatasetError, Trajectory, episodes_to_trajectories, fit_normalization, load_corpus,
                             make_windows, save_corpus, stack_windows, variant_corpus)
from gavebid.score import ScoreConfig, Variant
from gavebid.sim import NUM_FEATURES, EnvConfig, collect_episodes


def _traj(rewards, costs, variant=Variant.S2, states=None):
    T = len(rewards)
    rewards, costs = np.asarray(rewards, float), np.asarray(costs, float)
    from gavebid.dataset import trajectory_rtg

    return Trajectory(np.zeros((T, NUM_FEATURES)) if states is None else states, np.linspace(0.5, 1.5, T),
                      rewards, costs, trajectory_rtg(rewards, costs, ScoreConfig(1.0, variant)), 100.0)


def test_trajectory_rtg_examples(tiny_logs):
    s1 = episodes_to_trajectories(tiny_logs, ScoreConfig(1.0, Variant.S1))
    for log, tr in zip(tiny_logs, s1):
        assert tr.rtgs[0] == pytest.approx(log.total_value, abs=1e-9)
    zero = _traj([0, 0, 0], [0, 0, 0])
    assert zero.rtgs.tolist() == [0, 0, 0]
    t = _traj([1, 2, 3], [0.5, 0.5, 9.0])
    from gavebid.score import score_arrays

    s = score_arrays(np.cumsum(t.costs), np.cumsum(t.rewards), ScoreConfig(1.0, Variant.S2))
    assert t.rtgs[-1] == pytest.approx(s[-1] - s[-2])


def test_incomplete_episode_rejected(tiny_logs):
    with pytest.raises(ValueError):
        episodes_to_trajectories(tiny_logs, ScoreConfig(1.0), num_steps=48)


def test_windows_shape_and_padding():
    T, M = 48, 19
    t = _traj(np.ones(T), np.ones(T) * 0.5)
    wins = make_windows(t, M)
    assert len(wins) == T
    assert (~wins[0].mask).sum() == M
    assert wins[-1].label_rtgs[-1] == 0.0
    for w in wins:
        assert len(w.rtgs) == len(w.actions) == len(w.states) == M + 1
        assert np.all(np.diff(w.timesteps) == 1)


def test_window_label_consistency(tiny_corpus):
    b = tiny_corpus.windows()
    both = b.mask[:, :-1] & b.mask[:, 1:]
    np.testing.assert_array_equal(b.label_rtgs[:, :-1][both], b.rtgs[:, 1:][both])
    assert len(b) == sum(t.num_steps for t in tiny_corpus.trajectories)


def test_normalization_roundtrip_and_constant_channel(tiny_corpus):
    norm = tiny_corpus.normalization
    tr = tiny_corpus.trajectories[0]
    np.testing.assert_allclose(norm.invert_states(norm.states(tr.states)), tr.states, atol=1e-9)
    np.testing.assert_allclose(norm.invert_rtg(norm.rtg(tr.rtgs)), tr.rtgs, atol=1e-9)
    np.testing.assert_allclose(norm.invert_actions(norm.actions(tr.actions)), tr.actions, atol=1e-9)
    const = [_traj([1, 2], [1, 1]), _traj([3, 1], [1, 1])]
    n = fit_normalization(const)
    assert n.state_scale[0] == 1.0
    assert np.all(n.states(const[0].states)[:, 0] == 0)
    all_actions = np.concatenate([t.actions for t in tiny_corpus.trajectories])
    assert norm.actions(all_actions).max() <= 1.0


def test_padded_positions_stay_zero(tiny_corpus):
    b = tiny_corpus.normalization.apply(tiny_corpus.windows())
    pad = ~b.mask
    assert np.all(b.rtgs[pad] == 0) and np.all(b.states[pad] == 0) and np.all(b.actions[pad] == 0)


def test_variant_switch_changes_only_rtg(tiny_corpus):
    s1 = variant_corpus(tiny_corpus, Variant.S1)
    for a, b in zip(tiny_corpus.trajectories, s1.trajectories):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
    assert variant_corpus(tiny_corpus, Variant.S2) is tiny_corpus


def test_save_load_roundtrip(tmp_path, tiny_corpus):
    save_corpus(tiny_corpus, tmp_path / "ds")
    back = load_corpus(tmp_path / "ds")
    assert back.context == tiny_corpus.context
    assert back.score_config == tiny_corpus.score_config
    assert back.env_seed == tiny_corpus.env_seed
    for a, b in zip(tiny_corpus.trajectories, back.trajectories):
        for name in ("states", "actions", "rewards", "costs", "rtgs"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    np.testing.assert_array_equal(back.normalization.state_mean, tiny_corpus.normalization.state_mean)


def test_load_errors(tmp_path, tiny_corpus):
    path = save_corpus(tiny_corpus, tmp_path / "ds")
    with pytest.raises(DatasetError):
        load_corpus(path, expect_context=tiny_corpus.context + 1)
    (path / "manifest.json").write_text("{not json")
    with pytest.raises(DatasetError):
        load_corpus(path)
    save_corpus(tiny_corpus, path)
    m = json.loads((path / "manifest.json").read_text())
    m["format_version"] = 99
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetError):
        load_corpus(path)
    save_corpus(tiny_corpus, path)
    with (path / "trajectories.jsonl").open("a") as fh:
        fh.write("{}\n")
    with pytest.raises(DatasetError):
        load_corpus(path)
    with pytest.raises(DatasetError):
        load_corpus(tmp_path / "missing")


def test_default_config_gives_48_steps():
    logs = collect_episodes(EnvConfig(impressions_mean=20, num_agents=2), 1, seed=0)
    assert all(t.num_steps == 48 for t in episodes_to_trajectories(logs, ScoreConfig(1.0)))
