from __future__ import annotations

import numpy as np
import pytest

from guided_attack import demos, nn
from guided_attack.adversary import ADV_OBS_DIM, AdvConfig, make_adversary
from guided_attack.demos import DemoDataset, RawEpisode
from guided_attack.env import OBS_DIM, ScenarioConfig
from guided_attack.errors import FormatError, UsageError
from guided_attack.perturb import PerturbConfig
from guided_attack.ppo import GaussianPolicy


def _raw(eid, success, n=4, n_attack=1, scenario="left_turn", seed=0):
    rng = np.random.default_rng([eid, seed])
    x = np.where(np.arange(n) < n_attack, 1.0, -1.0)
    actions = np.stack([x, rng.uniform(-1, 1, n)], axis=1)
    return RawEpisode(eid, scenario, success, rng.uniform(-1, 1, (n, ADV_OBS_DIM)), actions)


def _dataset(n_attack, n_non, seed=0, scenario="left_turn"):
    ep = _raw(0, True, n_attack + n_non, n_attack, scenario, seed)
    return demos.to_dataset([ep], source="adv.ckpt", seed=seed)


# -- collection ------------------------------------------------------------------

@pytest.fixture(scope="module")
def policies():
    victim = GaussianPolicy.create(OBS_DIM, (16,), 1, 0)
    adv, _ = make_adversary(AdvConfig(hidden=(8,)), 0)
    nn.layers(adv.mlp_params, adv.spec)[-1][1][0] = 5.0  # always attack
    return victim, adv


def test_collect_tags_success_and_is_deterministic(policies):
    victim, adv = policies
    cfg = ScenarioConfig()
    bim = PerturbConfig(iterations=10)
    a = demos.collect(adv, victim, cfg, 8, seed=0, perturb_cfg=bim)
    b = demos.collect(adv, victim, cfg, 8, seed=0, perturb_cfg=bim)
    assert len(a) == 8
    for x, y in zip(a, b):
        assert x.success == y.success
        assert np.array_equal(x.states, y.states) and np.array_equal(x.actions, y.actions)
    for ep in a:
        assert set(np.unique(ep.actions[:, 0])) <= {-1.0, 1.0}
        assert np.all(np.abs(ep.actions[:, 1]) <= 1.0)
        assert np.all(np.abs(ep.states) <= 1.0)
        assert (ep.actions[:, 0] > 0).sum() <= 4


def test_collision_without_attack_is_not_a_success():
    victim = GaussianPolicy.create(OBS_DIM, (16,), 1, 0)
    adv, _ = make_adversary(AdvConfig(hidden=(8,)), 0)
    nn.layers(adv.mlp_params, adv.spec)[-1][1][0] = -5.0  # never attack
    raw = demos.collect(adv, victim, ScenarioConfig(), 30, seed=0, perturb_cfg=PerturbConfig(iterations=5))
    assert not any(ep.success for ep in raw)
    assert np.all(np.concatenate([ep.actions[:, 0] for ep in raw]) == -1.0)


def test_collect_rejects_non_positive_count(policies):
    with pytest.raises(UsageError):
        demos.collect(policies[1], policies[0], ScenarioConfig(), 0, seed=0)


# -- filtering and balancing ---------------------------------------------------------

def test_filter_keeps_only_successes_and_is_idempotent():
    raw = [_raw(i, i in (0, 2, 3)) for i in range(5)]
    kept = demos.filter_successful(raw)
    assert [e.episode_id for e in kept] == [0, 2, 3]
    assert demos.filter_successful(kept) == kept
    ds = demos.to_dataset(kept)
    assert set(ds.episode_ids.tolist()) == {0, 2, 3}
    assert ds.success.all()


def test_filter_all_failed_warns():
    with pytest.warns(UserWarning):
        assert demos.filter_successful([_raw(0, False)]) == []
    assert len(demos.to_dataset([])) == 0


def test_undersample_counts():
    ds = _dataset(100, 900)
    bal = demos.undersample_non_attack(ds, 1.0, seed=0)
    assert bal.counts == {"attack": 100, "non_attack": 100}
    again = demos.undersample_non_attack(ds, 1.0, seed=0)
    assert bal.equals(again)
    assert not bal.equals(demos.undersample_non_attack(ds, 1.0, seed=1))


def test_undersample_leaves_balanced_data_alone():
    ds = _dataset(50, 30)
    assert demos.undersample_non_attack(ds, 1.0, seed=0).equals(ds)
    with pytest.raises(UsageError):
        demos.undersample_non_attack(_dataset(0, 10), 1.0)


# -- merging ---------------------------------------------------------------------

def test_merge_identity_counts_and_provenance():
    a = _dataset(5, 7, seed=0, scenario="left_turn")
    b = _dataset(3, 2, seed=1, scenario="merge")
    assert demos.merge_scenarios(a, DemoDataset.empty()).equals(a)
    m = demos.merge_scenarios(a, b)
    assert m.counts == {"attack": 8, "non_attack": 9}
    assert m.provenance["scenarios"] == ["left_turn", "merge"]
    assert m.provenance["seeds"] == [0, 1]


# -- persistence -------------------------------------------------------------------

def test_round_trip(tmp_path):
    ds = _dataset(10, 15)
    demos.save(tmp_path / "d.jsonl", ds)
    assert demos.load(tmp_path / "d.jsonl").equals(ds)


def test_truncated_file_is_a_format_error(tmp_path):
    path = tmp_path / "d.jsonl"
    demos.save(path, _dataset(10, 15))
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:-3]))
    with pytest.raises(FormatError, match="truncated"):
        demos.load(path)
    path.write_text("".join(lines[:-1]) + lines[-1][:20])
    with pytest.raises(FormatError):
        demos.load(path)


def test_wrong_header_is_a_format_error(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"format": "other", "version": 1}\n')
    with pytest.raises(FormatError):
        demos.load(path)


def test_large_dataset_round_trip(tmp_path):
    n = 250_000
    rng = np.random.default_rng(0)
    x = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    ds = DemoDataset(rng.uniform(-1, 1, (n, ADV_OBS_DIM)), np.stack([x, rng.uniform(-1, 1, n)], axis=1),
                     np.arange(n) // 30, ["left_turn"] * n, np.ones(n, dtype=bool))
    demos.save(tmp_path / "big.jsonl", ds)
    assert demos.load(tmp_path / "big.jsonl").equals(ds)
