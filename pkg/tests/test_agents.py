import numpy as np
import pytest
from scipy import stats

from trireward.adversarial import AdvConfig, train_adversarial
from trireward.agents import (CURVE_HEADER, DqnConfig, PpoAgent, PpoConfig, QAgent,
                              RandomPolicy, ReplayBuffer, _gae, _ppo_update, _q_update,
                              dqn_train, evaluate_policy, linear_epsilon, load_agent,
                              load_curve, ppo_train, save_agent, save_curve,
                              scheduled_lr, wdqn_train)
from trireward.checkpoint import params_sha256, save_checkpoint
from trireward.dae import DaeConfig, train_dae
from trireward.dialogenv import (DialogEnv, ExpertPolicy, episode_goal_seed,
                                 episode_reward, generate_expert_corpus)
from trireward.errors import ConfigError, ContractViolation, TrainingError
from trireward.nn import Adam, Mlp
from trireward.ontology import default_ontology, micro_ontology
from trireward.shaping import estimate, make_estimator

MICRO = micro_ontology()


def micro_factory():
    return DialogEnv(MICRO)


@pytest.fixture(scope="module")
def micro_corpus():
    return generate_expert_corpus(200, seed=5, ontology=MICRO)


@pytest.fixture(scope="module")
def micro_est(micro_corpus):
    dae = train_dae(micro_corpus,
                    DaeConfig(latent_width=16, max_epochs=40, lr=3e-3, batch_size=32, seed=2),
                    MICRO)
    adv = AdvConfig(z_dim=8, batch_size=32, lr=1e-3, d_lr=1e-3, mismatch_weight=1.0,
                    stage_max_g_steps=600, min_g_steps=100, check_every_d_steps=5,
                    stable_checks=3, probe_batch=64, seed=6)
    disc = train_adversarial(dae, micro_corpus, adv)
    return make_estimator(dae, disc, combination="SeqAvg")


def short_dqn(**kw):
    base = dict(total_frames=4000, update_every=200, updates_per_round=100,
                decay_frames=2000, eval_every=2000, eval_dialogs=50, seed=3)
    base.update(kw)
    return DqnConfig(**base)


def short_ppo(**kw):
    base = dict(total_frames=3000, update_frames=300, minibatch=64, bc_batch=16,
                eval_every=1500, eval_dialogs=50, seed=3)
    base.update(kw)
    return PpoConfig(**base)


# ---------------------------------------------------------------------------
# schedules and configs


def test_epsilon_schedule_pointwise():
    cfg = DqnConfig()
    assert linear_epsilon(0, cfg) == pytest.approx(0.1)
    assert linear_epsilon(cfg.decay_frames, cfg) == pytest.approx(0.01)
    assert linear_epsilon(cfg.decay_frames // 2, cfg) == pytest.approx(0.055)
    assert linear_epsilon(2 * cfg.decay_frames, cfg) == pytest.approx(0.01)
    quarter = linear_epsilon(cfg.decay_frames // 4, cfg)
    assert quarter == pytest.approx(0.1 + 0.25 * (0.01 - 0.1))


def test_lr_schedule_steps_after_decay_window():
    cfg = DqnConfig()
    assert scheduled_lr(0, cfg) == cfg.lr
    assert scheduled_lr(cfg.decay_frames, cfg) == cfg.lr
    assert scheduled_lr(cfg.decay_frames + 1, cfg) == cfg.lr_end


def test_config_validation():
    with pytest.raises(ConfigError):
        DqnConfig(eps_start=0.01, eps_end=0.1)
    with pytest.raises(ConfigError):
        DqnConfig(gamma=0.0)
    with pytest.raises(ConfigError):
        DqnConfig(lr_end=0.0)
    with pytest.raises(ConfigError):
        DqnConfig(buffer_capacity=0)
    with pytest.raises(ConfigError):
        PpoConfig(clip=-0.1)
    with pytest.raises(ConfigError):
        PpoConfig(explore_eps=1.5)
    with pytest.raises(ConfigError):
        PpoConfig(gae_lambda=1.2)


# ---------------------------------------------------------------------------
# replay buffer


def filled_buffer(capacity, n, state_dim=4):
    buf = ReplayBuffer(capacity, state_dim)
    for i in range(n):
        s = np.full(state_dim, i % 2)
        buf.push(s, i, float(i), s, False)
    return buf


def test_buffer_fifo_eviction():
    buf = filled_buffer(5, 8)
    assert len(buf) == 5
    # oldest three were overwritten in ring order
    assert sorted(buf.actions.tolist()) == [3, 4, 5, 6, 7]


def test_buffer_never_exceeds_capacity():
    buf = filled_buffer(7, 30)
    assert len(buf) == 7


def test_buffer_take_types():
    buf = filled_buffer(5, 2)
    s, a, r, s2, done = buf.take(np.array([1]))
    assert s.dtype == np.float64 and done.dtype == np.float64
    assert a[0] == 1 and r[0] == 1.0


def test_buffer_empty_sample_raises():
    buf = ReplayBuffer(4, 3)
    with pytest.raises(ContractViolation):
        buf.sample_indices(2, np.random.default_rng(0))


def test_buffer_sampling_uniform_chisquare():
    buf = filled_buffer(40, 40)
    rng = np.random.default_rng(12)
    counts = np.zeros(40)
    for _ in range(200):
        idx = buf.sample_indices(40, rng)
        np.add.at(counts, idx, 1)
    # uniform sampling over contents at 1% significance
    _, p = stats.chisquare(counts)
    assert p > 0.01


def test_buffer_push_many_caps_at_capacity():
    buf = ReplayBuffer(10, 3)
    s = np.zeros((25, 3))
    buf.push_many(s, np.arange(25), np.zeros(25), s, np.zeros(25, bool))
    assert len(buf) == 10
    assert sorted(buf.actions.tolist()) == list(range(15, 25))


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_expert_and_score_consistency():
    env = micro_factory()
    expert = ExpertPolicy(MICRO, max_turns=20)
    success, score, avg_turn = evaluate_policy(expert, env, 100, seed=11)
    assert success >= 0.95
    # reward_score must equal the closed-form episode return on the same goals
    total = 0.0
    turns = 0
    wins = 0
    env2 = micro_factory()
    for i in range(100):
        state = env2.reset(goal_seed=episode_goal_seed(11, i))
        done = False
        while not done:
            state, _, done = env2.step(expert.action(state))
        total += episode_reward(env2.turns, env2.success)
        turns += env2.turns
        wins += 1 if env2.success else 0
    assert score == pytest.approx(total / 100, abs=1e-12)
    assert avg_turn == pytest.approx(turns / 100, abs=1e-12)
    assert success == pytest.approx(wins / 100, abs=1e-12)


def test_random_policy_bounds_and_determinism():
    pol = RandomPolicy(MICRO, seed=4)
    acts = [pol.action(np.zeros(MICRO.state_dim)) for _ in range(50)]
    assert all(0 <= a < MICRO.action_dim for a in acts)
    pol2 = RandomPolicy(MICRO, seed=4)
    assert acts == [pol2.action(np.zeros(MICRO.state_dim)) for _ in range(50)]


def test_random_policy_weak_on_default_ontology():
    onto = default_ontology()
    env = DialogEnv(onto)
    success, _, _ = evaluate_policy(RandomPolicy(onto, seed=1), env, 200, seed=7)
    assert success <= 0.05


def test_evaluate_rejects_zero_dialogs():
    with pytest.raises(ContractViolation):
        evaluate_policy(RandomPolicy(MICRO, 0), micro_factory(), 0, seed=1)


# ---------------------------------------------------------------------------
# DQN


def test_dqn_learns_micro_env():
    agent, curve = dqn_train(micro_factory, None, short_dqn())
    assert [r["frames"] for r in curve] == [0, 2000, 4000]
    assert curve[-1]["success_rate"] >= 0.8
    assert all(0.0 <= r["success_rate"] <= 1.0 for r in curve)
    assert all(r["seed"] == 3 for r in curve)


def test_dqn_deterministic_curves_and_params(tmp_path):
    a1, c1 = dqn_train(micro_factory, None, short_dqn(total_frames=2000))
    a2, c2 = dqn_train(micro_factory, None, short_dqn(total_frames=2000))
    assert c1 == c2
    assert params_sha256(a1.q.named_params()) == params_sha256(a2.q.named_params())
    p1, p2 = tmp_path / "c1.csv", tmp_path / "c2.csv"
    save_curve(p1, c1)
    save_curve(p2, c2)
    assert p1.read_bytes() == p2.read_bytes()


def test_dqn_shaped_rewards_enter_buffer(micro_est):
    from trireward.agents import _flush_staged
    buf = ReplayBuffer(8, MICRO.state_dim)
    env = micro_factory()
    s = env.reset(goal_seed=1)
    s2, r, done = env.step(3)
    staged = [(s, 3, r, s2, done)]
    _flush_staged(staged, buf, micro_est)
    want = r + micro_est.alpha * estimate(micro_est, s, 3)
    assert buf.rewards[0] == pytest.approx(want, abs=1e-12)
    assert staged == []
    # vanilla path stores the raw reward
    buf2 = ReplayBuffer(8, MICRO.state_dim)
    _flush_staged([(s, 3, r, s2, done)], buf2, None)
    assert buf2.rewards[0] == r


def test_dqn_shaped_run_differs_from_vanilla(micro_est):
    av, cv = dqn_train(micro_factory, None, short_dqn(total_frames=1000, eval_every=500))
    as_, cs = dqn_train(micro_factory, micro_est, short_dqn(total_frames=1000, eval_every=500))
    assert [r["frames"] for r in cv] == [r["frames"] for r in cs]
    # the shaped reward stream produces a different Q function
    assert params_sha256(av.q.named_params()) != params_sha256(as_.q.named_params())


def test_dqn_rejects_mismatched_estimator(micro_est):
    onto = default_ontology()
    with pytest.raises(ConfigError):
        dqn_train(lambda: DialogEnv(onto), micro_est, short_dqn(total_frames=0))


def test_q_update_nan_raises():
    rng = np.random.default_rng(0)
    agent = QAgent(MICRO, 16, rng)
    for arr in agent.q.named_params().values():
        arr.fill(np.inf)
    buf = filled_buffer(4, 4, state_dim=MICRO.state_dim)
    opt = Adam(agent.q.named_params(), lr=1e-3)
    with np.errstate(invalid="ignore"), pytest.raises(TrainingError):
        _q_update(agent, buf.take(np.array([0, 1])), opt, DqnConfig())


def test_target_updates_only_on_sync():
    rng = np.random.default_rng(1)
    agent = QAgent(MICRO, 8, rng)
    before = {k: v.copy() for k, v in agent.target.named_params().items()}
    cfg = short_dqn(total_frames=400, target_sync_every=10_000, eval_every=400,
                    eval_dialogs=10)
    trained, _ = dqn_train(micro_factory, None, cfg, agent=agent)
    after = trained.target.named_params()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    qp = trained.q.named_params()
    assert any(not np.array_equal(qp[k], after[k]) for k in qp)


# ---------------------------------------------------------------------------
# WDQN


def test_wdqn_warmup_beats_cold_start(micro_corpus):
    cfg = short_dqn(total_frames=0, warm_epochs=10)
    _, warm_curve = wdqn_train(micro_factory, None, micro_corpus, cfg)
    _, cold_curve = dqn_train(micro_factory, None, cfg)
    assert len(warm_curve) == 1 and len(cold_curve) == 1
    assert warm_curve[0]["success_rate"] > cold_curve[0]["success_rate"]


def test_wdqn_deterministic(micro_corpus):
    cfg = short_dqn(total_frames=1000, eval_every=500)
    _, c1 = wdqn_train(micro_factory, None, micro_corpus, cfg)
    _, c2 = wdqn_train(micro_factory, None, micro_corpus, cfg)
    assert c1 == c2


def test_wdqn_handles_capacity_below_corpus(micro_corpus):
    cfg = short_dqn(total_frames=0, buffer_capacity=64)
    _, curve = wdqn_train(micro_factory, None, micro_corpus, cfg)
    assert len(curve) == 1


def test_wdqn_rejects_foreign_corpus(micro_corpus):
    onto = default_ontology()
    with pytest.raises(ConfigError):
        wdqn_train(lambda: DialogEnv(onto), None, micro_corpus, short_dqn(total_frames=0))


# ---------------------------------------------------------------------------
# PPO


def test_ppo_probs_are_distributions():
    agent = PpoAgent(MICRO, 16, np.random.default_rng(2))
    states = np.random.default_rng(3).random((20, MICRO.state_dim))
    probs = agent.probs(states)
    assert probs.shape == (20, MICRO.action_dim)
    assert (probs >= 0).all()
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6


def test_ppo_clip_zero_freezes_policy_in_update():
    rng = np.random.default_rng(4)
    agent = PpoAgent(MICRO, 16, rng)
    old = Mlp("pi", [MICRO.state_dim, 16, MICRO.action_dim], ["relu", "linear"],
              np.random.default_rng(0))
    from trireward.checkpoint import assign_params
    assign_params(old.named_params(), agent.policy.named_params())
    n = 64
    batch_rng = np.random.default_rng(5)
    batch = (
        batch_rng.random((n, MICRO.state_dim)),
        batch_rng.integers(0, MICRO.action_dim, n),
        batch_rng.standard_normal(n),
        batch_rng.standard_normal(n),
    )
    cfg = PpoConfig(clip=0.0, minibatch=16, epochs=2)
    opt_pi = Adam(agent.policy.named_params(), lr=1e-3)
    opt_v = Adam(agent.value.named_params(), lr=1e-3)
    before = params_sha256(agent.policy.named_params())
    value_before = params_sha256(agent.value.named_params())
    _ppo_update(agent, old, batch, cfg, opt_pi, opt_v, np.random.default_rng(6))
    assert params_sha256(agent.policy.named_params()) == before
    # the value net keeps training regardless of the clip range
    assert params_sha256(agent.value.named_params()) != value_before


def test_ppo_positive_clip_moves_policy():
    rng = np.random.default_rng(4)
    agent = PpoAgent(MICRO, 16, rng)
    old = Mlp("pi", [MICRO.state_dim, 16, MICRO.action_dim], ["relu", "linear"],
              np.random.default_rng(0))
    from trireward.checkpoint import assign_params
    assign_params(old.named_params(), agent.policy.named_params())
    n = 64
    batch_rng = np.random.default_rng(5)
    batch = (
        batch_rng.random((n, MICRO.state_dim)),
        batch_rng.integers(0, MICRO.action_dim, n),
        batch_rng.standard_normal(n),
        batch_rng.standard_normal(n),
    )
    cfg = PpoConfig(clip=0.2, minibatch=16, epochs=2)
    opt_pi = Adam(agent.policy.named_params(), lr=1e-3)
    opt_v = Adam(agent.value.named_params(), lr=1e-3)
    before = params_sha256(agent.policy.named_params())
    _ppo_update(agent, old, batch, cfg, opt_pi, opt_v, np.random.default_rng(6))
    assert params_sha256(agent.policy.named_params()) != before


def test_ppo_clip_zero_curve_is_flat(micro_corpus):
    cfg = short_ppo(clip=0.0, total_frames=900, update_frames=300, eval_every=300)
    _, curve = ppo_train(micro_factory, None, micro_corpus, cfg)
    values = {r["success_rate"] for r in curve}
    assert len(values) == 1


def test_ppo_post_imitation_beats_random(micro_corpus):
    agent, _ = ppo_train(micro_factory, None, micro_corpus, short_ppo(total_frames=0))
    env = micro_factory()
    rand, _, _ = evaluate_policy(RandomPolicy(MICRO, seed=9), env, 300, seed=21)
    post_bc, _, _ = evaluate_policy(agent, env, 300, seed=21)
    assert post_bc > rand


def test_ppo_learns_micro_env(micro_corpus):
    _, curve = ppo_train(micro_factory, None, micro_corpus, short_ppo())
    assert curve[-1]["success_rate"] >= 0.8


def test_ppo_deterministic(micro_corpus):
    cfg = short_ppo(total_frames=600, eval_every=300)
    a1, c1 = ppo_train(micro_factory, None, micro_corpus, cfg)
    a2, c2 = ppo_train(micro_factory, None, micro_corpus, cfg)
    assert c1 == c2
    assert params_sha256(a1.policy.named_params()) == params_sha256(a2.policy.named_params())


def test_ppo_entropy_collapse_raises(micro_corpus):
    cfg = short_ppo(total_frames=300, entropy_floor=10.0)
    with pytest.raises(TrainingError):
        ppo_train(micro_factory, None, micro_corpus, cfg)


def test_ppo_rejects_foreign_corpus(micro_corpus):
    onto = default_ontology()
    with pytest.raises(ConfigError):
        ppo_train(lambda: DialogEnv(onto), None, micro_corpus, short_ppo(total_frames=0))


# ---------------------------------------------------------------------------
# GAE


def test_gae_matches_scalar_recursion():
    gamma, lam = 0.9, 0.8
    rewards = np.array([1.0, 0.0, 2.0, -1.0])
    values = np.array([0.5, 1.0, 0.25, 0.3])
    dones = np.array([False, False, False, False])
    bootstrap = 0.7
    adv = _gae(rewards, values, dones, bootstrap, gamma, lam)
    nxt = [values[1], values[2], values[3], bootstrap]
    deltas = [rewards[t] + gamma * nxt[t] - values[t] for t in range(4)]
    want3 = deltas[3]
    want2 = deltas[2] + gamma * lam * want3
    want1 = deltas[1] + gamma * lam * want2
    want0 = deltas[0] + gamma * lam * want1
    assert adv == pytest.approx([want0, want1, want2, want3], abs=1e-12)


def test_gae_stops_credit_at_episode_boundary():
    gamma, lam = 0.99, 0.95
    rewards = np.array([0.0, 5.0, 0.0])
    values = np.array([0.0, 0.0, 0.0])
    dones = np.array([False, True, False])
    adv = _gae(rewards, values, dones, bootstrap=100.0, gamma=gamma, lam=lam)
    # credit from t=1 flows to t=0 but nothing crosses the terminal at t=1
    assert adv[1] == pytest.approx(5.0)
    assert adv[0] == pytest.approx(gamma * lam * 5.0)
    assert adv[2] == pytest.approx(gamma * 100.0)


# ---------------------------------------------------------------------------
# persistence


def test_curve_roundtrip(tmp_path):
    rows = [
        {"frames": 0, "success_rate": 0.0, "reward_score": -43.0, "avg_turn": 3.0, "seed": 7},
        {"frames": 2000, "success_rate": 0.935, "reward_score": 61.25, "avg_turn": 8.51, "seed": 7},
    ]
    path = tmp_path / "curve.csv"
    save_curve(path, rows)
    assert path.read_text().splitlines()[0] == CURVE_HEADER
    assert load_curve(path) == rows


def test_curve_bad_header_raises(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("frames,success\n0,0.5\n")
    with pytest.raises(ConfigError):
        load_curve(path)


def test_agent_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    agent = QAgent(MICRO, 12, rng)
    path = tmp_path / "dqn.npz"
    save_agent(path, agent)
    loaded = load_agent(path, MICRO)
    state = micro_factory().reset(goal_seed=2)
    assert loaded.action(state) == agent.action(state)
    assert np.array_equal(loaded.q.named_params()["q/l0/w"], agent.q.named_params()["q/l0/w"])

    ppo = PpoAgent(MICRO, 12, rng)
    ppath = tmp_path / "ppo.npz"
    save_agent(ppath, ppo)
    ploaded = load_agent(ppath, MICRO)
    assert np.allclose(ploaded.probs(state), ppo.probs(state), atol=1e-12)
    assert np.allclose(ploaded.values(state), ppo.values(state), atol=1e-12)


def test_agent_checkpoint_wrong_ontology(tmp_path):
    agent = QAgent(MICRO, 12, np.random.default_rng(8))
    path = tmp_path / "dqn.npz"
    save_agent(path, agent)
    with pytest.raises(ConfigError):
        load_agent(path, default_ontology())


def test_non_agent_checkpoint_rejected(tmp_path):
    path = tmp_path / "other.npz"
    save_checkpoint(path, {"x": np.zeros(3)}, {"kind": "mystery", "ontology_hash": MICRO.content_hash()})
    with pytest.raises(ConfigError):
        load_agent(path, MICRO)
