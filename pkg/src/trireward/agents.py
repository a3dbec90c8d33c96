"""RL agents over the dialog environment: DQN, warm-started DQN, PPO.

Agents can train on the raw environment reward or on a shaped reward
(environment reward plus a scaled estimate from a frozen RewardEstimator).
Shaping happens when transitions are collected; evaluation rollouts always
score the raw environment reward, so reported curves are never inflated
by the estimator.

Learning curves are lists of per-checkpoint dicts; save_curve writes them
as CSV with a stable format so identical seeds give identical files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import assign_params, load_checkpoint, save_checkpoint
from .dialogenv import episode_goal_seed
from .errors import ConfigError, ContractViolation, TrainingError
from .nn import Adam, Mlp, log_softmax, softmax, softmax_ce_loss
from .ontology import Ontology
from .shaping import RewardEstimator, estimate

CURVE_HEADER = "frames,success_rate,reward_score,avg_turn,seed"


@dataclass(frozen=True)
class DqnConfig:
    total_frames: int = 100_000
    update_every: int = 200  # frames between update rounds
    updates_per_round: int = 500
    batch_size: int = 16
    buffer_capacity: int = 50_000
    eps_start: float = 0.1
    eps_end: float = 0.01
    decay_frames: int = 50_000
    target_sync_every: int = 1_000  # frames
    # at 0.95 one delayed turn costs about what one turn of shaped bonus
    # pays, so stretching dialogs for bonus is never profitable
    gamma: float = 0.95
    lr: float = 1e-3
    lr_end: float = 1e-4  # fine-tuning rate once the epsilon decay window ends
    hidden: int = 100
    # supervised sweeps over the pre-filled buffer before RL (warm start only)
    warm_epochs: int = 2
    eval_every: int = 2_000
    eval_dialogs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.total_frames < 0 or self.buffer_capacity < 1 or self.batch_size < 1:
            raise ConfigError("frame budget, capacity and batch size must be positive")
        if not (0.0 <= self.eps_end <= self.eps_start <= 1.0):
            raise ConfigError("need 0 <= eps_end <= eps_start <= 1")
        if self.decay_frames < 1 or self.gamma <= 0 or self.gamma > 1:
            raise ConfigError("bad decay_frames or gamma")
        if self.lr <= 0 or self.lr_end <= 0:
            raise ConfigError("learning rates must be positive")


@dataclass(frozen=True)
class PpoConfig:
    total_frames: int = 100_000
    update_frames: int = 500  # on-policy segment length per update
    epochs: int = 4
    minibatch: int = 125
    clip: float = 0.2
    gae_lambda: float = 0.95
    # at 0.95 one delayed turn costs about what one turn of shaped bonus
    # pays, so stretching dialogs for bonus is never profitable
    gamma: float = 0.95
    value_coef: float = 1.0
    explore_eps: float = 0.001  # uniform-action mixing, no decay
    lr: float = 1e-3
    hidden: int = 100
    bc_max_epochs: int = 50
    bc_patience: int = 2
    bc_min_improve: float = 1e-3
    bc_batch: int = 64
    bc_holdout: float = 0.1
    entropy_floor: float = 1e-8
    eval_every: int = 2_000
    eval_dialogs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.total_frames < 0 or self.update_frames < 1 or self.minibatch < 1:
            raise ConfigError("frame budgets must be positive")
        if self.clip < 0 or not (0 <= self.gae_lambda <= 1) or not (0 < self.gamma <= 1):
            raise ConfigError("bad clip, gae_lambda or gamma")
        if not (0 <= self.explore_eps <= 1):
            raise ConfigError("explore_eps must be a probability")


def linear_epsilon(frame: int, cfg: DqnConfig) -> float:
    """eps_start at frame 0, linear to eps_end at decay_frames, flat after."""
    t = min(max(frame, 0), cfg.decay_frames) / cfg.decay_frames
    return cfg.eps_start + t * (cfg.eps_end - cfg.eps_start)


def scheduled_lr(frame: int, cfg: DqnConfig) -> float:
    """Full rate through the exploration decay window, lr_end afterwards.

    Late training then only fine-tunes, so the reported final checkpoint
    reflects the converged policy instead of replay-churn wobble.
    """
    return cfg.lr if frame <= cfg.decay_frames else cfg.lr_end


class ReplayBuffer:
    """Fixed-capacity FIFO transition store with uniform sampling.

    States are kept as uint8 (the environment emits binary vectors) and
    widened to float only when a batch is drawn.
    """

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ConfigError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim), dtype=np.uint8)
        self.next_states = np.zeros((capacity, state_dim), dtype=np.uint8)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.dones = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, state, action, reward, next_state, done) -> None:
        i = self._next
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = done
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def push_many(self, states, actions, rewards, next_states, dones) -> None:
        for row in zip(states, actions, rewards, next_states, dones):
            self.push(*row)

    def sample_indices(self, batch: int, rng) -> np.ndarray:
        if self._size == 0:
            raise ContractViolation("cannot sample from an empty buffer")
        return rng.integers(0, self._size, size=batch)

    def sample(self, batch: int, rng):
        return self.take(self.sample_indices(batch, rng))

    def take(self, idx):
        return (
            self.states[idx].astype(np.float64),
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx].astype(np.float64),
            self.dones[idx].astype(np.float64),
        )


class QAgent:
    """Q-network plus a frozen target copy; greedy action via argmax."""

    def __init__(self, ontology: Ontology, hidden: int, rng):
        self.ontology = ontology
        self.hidden = hidden
        dims = [ontology.state_dim, hidden, ontology.action_dim]
        self.q = Mlp("q", dims, ["relu", "linear"], rng)
        self.target = Mlp("q", dims, ["relu", "linear"], rng)
        self.sync_target()

    def sync_target(self) -> None:
        assign_params(self.target.named_params(), self.q.named_params())

    def q_values(self, states) -> np.ndarray:
        return self.q.forward(np.atleast_2d(np.asarray(states, dtype=np.float64)))

    def action(self, state) -> int:
        return int(np.argmax(self.q_values(state)[0]))


class PpoAgent:
    """Softmax policy and value nets with the same hidden spec."""

    def __init__(self, ontology: Ontology, hidden: int, rng):
        self.ontology = ontology
        self.hidden = hidden
        sd, ad = ontology.state_dim, ontology.action_dim
        self.policy = Mlp("pi", [sd, hidden, ad], ["relu", "linear"], rng)
        self.value = Mlp("val", [sd, hidden, 1], ["relu", "linear"], rng)

    def probs(self, states) -> np.ndarray:
        logits = self.policy.forward(np.atleast_2d(np.asarray(states, dtype=np.float64)))
        return softmax(logits)

    def values(self, states) -> np.ndarray:
        return self.value.forward(np.atleast_2d(np.asarray(states, dtype=np.float64)))[:, 0]

    def action(self, state) -> int:
        return int(np.argmax(self.probs(state)[0]))


class RandomPolicy:
    """Uniform-random baseline with its own seeded stream."""

    def __init__(self, ontology: Ontology, seed: int = 0):
        self.ontology = ontology
        self._rng = np.random.default_rng(seed)

    def action(self, state) -> int:
        return int(self._rng.integers(self.ontology.action_dim))


# ---------------------------------------------------------------------------
# evaluation


def evaluate_policy(agent, env, n_dialogs: int, seed: int):
    """Greedy rollouts on fresh seeded goals; raw environment reward only.

    Returns (success_rate, reward_score, avg_turn) where reward_score is
    the mean episode return of the unshaped reward.
    """
    if n_dialogs < 1:
        raise ContractViolation("n_dialogs must be >= 1")
    successes = 0
    returns = 0.0
    turns = 0
    for i in range(n_dialogs):
        state = env.reset(goal_seed=episode_goal_seed(seed, i))
        done = False
        ep_return = 0.0
        while not done:
            state, r, done = env.step(agent.action(state))
            ep_return += r
        successes += 1 if env.success else 0
        returns += ep_return
        turns += env.turns
    n = float(n_dialogs)
    return successes / n, returns / n, turns / n


def _checkpoint_row(agent, env, frames, cfg, eval_seed):
    success, score, avg_turn = evaluate_policy(agent, env, cfg.eval_dialogs, eval_seed)
    return {
        "frames": frames,
        "success_rate": success,
        "reward_score": score,
        "avg_turn": avg_turn,
        "seed": cfg.seed,
    }


# ---------------------------------------------------------------------------
# reward shaping at collection time


def _flush_staged(staged, buffer, est):
    """Push staged transitions, shaping rewards in one batched call."""
    if not staged:
        return
    if est is None or est.alpha == 0.0:
        for row in staged:
            buffer.push(*row)
    else:
        states = np.array([row[0] for row in staged], dtype=np.float64)
        actions = np.array([row[1] for row in staged])
        bonus = est.alpha * np.asarray(estimate(est, states, actions))
        for row, extra in zip(staged, bonus):
            buffer.push(row[0], row[1], row[2] + extra, row[3], row[4])
    staged.clear()


def _shaped_rewards(rewards, states, actions, est):
    if est is None or est.alpha == 0.0:
        return np.asarray(rewards, dtype=np.float64)
    bonus = est.alpha * np.asarray(estimate(est, np.asarray(states, dtype=np.float64), actions))
    return np.asarray(rewards, dtype=np.float64) + bonus


# ---------------------------------------------------------------------------
# DQN


def _q_update(agent, batch, opt, cfg):
    s, a, r, s2, done = batch
    q_next = agent.target.forward(s2).max(axis=1)
    target = r + cfg.gamma * (1.0 - done) * q_next
    q_all = agent.q.forward(s)
    rows = np.arange(len(a))
    diff = q_all[rows, a] - target
    if not np.isfinite(diff).all():
        raise TrainingError("q update produced a non-finite loss")
    grad = np.zeros_like(q_all)
    grad[rows, a] = 2.0 * diff / len(a)
    agent.q.zero_grads()
    agent.q.backward(grad)
    opt.step(agent.q.named_grads())


def _check_est(est, ontology):
    if est is not None and est.dae.ontology.content_hash() != ontology.content_hash():
        raise ConfigError("estimator and environment use different ontologies")


def dqn_train(env_factory, est: RewardEstimator | None, config: DqnConfig | None = None,
              agent: QAgent | None = None, buffer: ReplayBuffer | None = None):
    """eps-greedy DQN; est=None trains on the raw reward (vanilla agent).

    Every update_every frames runs updates_per_round minibatch updates.
    Returns (agent, curve) where curve holds one row per evaluation
    checkpoint, starting at frame 0.
    """
    cfg = config or DqnConfig()
    env = env_factory()
    eval_env = env_factory()
    _check_est(est, env.ontology)
    ss = np.random.SeedSequence([cfg.seed, 0])
    init_rng, act_rng, samp_rng, seed_rng = [np.random.default_rng(s) for s in ss.spawn(4)]
    train_goal_seed = int(seed_rng.integers(2**31))
    eval_goal_seed = int(seed_rng.integers(2**31))

    if agent is None:
        agent = QAgent(env.ontology, cfg.hidden, init_rng)
    if buffer is None:
        buffer = ReplayBuffer(cfg.buffer_capacity, env.ontology.state_dim)
    opt = Adam(agent.q.named_params(), lr=cfg.lr)

    curve = [_checkpoint_row(agent, eval_env, 0, cfg, eval_goal_seed)]
    episode = 0
    staged = []
    state = env.reset(goal_seed=episode_goal_seed(train_goal_seed, episode))
    for frame in range(1, cfg.total_frames + 1):
        if act_rng.random() < linear_epsilon(frame - 1, cfg):
            action = int(act_rng.integers(env.ontology.action_dim))
        else:
            action = agent.action(state)
        nxt, r, done = env.step(action)
        staged.append((state, action, r, nxt, done))
        state = nxt
        if done:
            _flush_staged(staged, buffer, est)
            episode += 1
            state = env.reset(goal_seed=episode_goal_seed(train_goal_seed, episode))
        if frame % cfg.update_every == 0:
            _flush_staged(staged, buffer, est)
            opt.lr = scheduled_lr(frame, cfg)
            # buffer contents are fixed for the whole round, so one batched
            # draw equals the per-update draws while saving the call overhead
            rounds_idx = samp_rng.integers(0, len(buffer),
                                           size=(cfg.updates_per_round, cfg.batch_size))
            for k in range(cfg.updates_per_round):
                _q_update(agent, buffer.take(rounds_idx[k]), opt, cfg)
        if frame % cfg.target_sync_every == 0:
            agent.sync_target()
        if frame % cfg.eval_every == 0:
            curve.append(_checkpoint_row(agent, eval_env, frame, cfg, eval_goal_seed))
    return agent, curve


def wdqn_train(env_factory, est: RewardEstimator | None, corpus,
               config: DqnConfig | None = None):
    """DQN warm-started from expert data before the standard RL loop.

    Warm-up pre-fills the replay buffer with (optionally shaped) expert
    transitions and runs warm_epochs of supervised TD sweeps, so the agent
    starts from an expert-informed Q surface instead of a cold one.
    """
    cfg = config or DqnConfig()
    env = env_factory()
    _check_est(est, env.ontology)
    if corpus.ontology_hash != env.ontology.content_hash():
        raise ConfigError("corpus and environment use different ontologies")
    ss = np.random.SeedSequence([cfg.seed, 1])
    init_rng, sweep_rng = [np.random.default_rng(s) for s in ss.spawn(2)]

    agent = QAgent(env.ontology, cfg.hidden, init_rng)
    buffer = ReplayBuffer(cfg.buffer_capacity, env.ontology.state_dim)
    shaped = _shaped_rewards(corpus.rewards, corpus.states, corpus.actions, est)
    buffer.push_many(corpus.states, corpus.actions, shaped, corpus.next_states, corpus.dones)

    opt = Adam(agent.q.named_params(), lr=cfg.lr)
    n = len(buffer)
    for _ in range(cfg.warm_epochs):
        order = sweep_rng.permutation(n)
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            _q_update(agent, buffer.take(order[start:start + cfg.batch_size]), opt, cfg)
        agent.sync_target()
    return dqn_train(env_factory, est, cfg, agent=agent, buffer=buffer)


# ---------------------------------------------------------------------------
# PPO


def _bc_warmup(agent, corpus, cfg, rng):
    """Behavior-clone the policy until held-out accuracy plateaus."""
    states = np.asarray(corpus.states, dtype=np.float64)
    labels = np.asarray(corpus.actions)
    n = len(labels)
    perm = rng.permutation(n)
    n_hold = max(1, int(round(n * cfg.bc_holdout)))
    hold, train = perm[:n_hold], perm[n_hold:]
    if len(train) == 0:
        raise ConfigError("corpus too small for behavior cloning holdout")
    opt = Adam(agent.policy.named_params(), lr=cfg.lr)
    best = -1.0
    stale = 0
    for _ in range(cfg.bc_max_epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.bc_batch):
            idx = train[order[start:start + cfg.bc_batch]]
            logits = agent.policy.forward(states[idx])
            loss, grad = softmax_ce_loss(logits, labels[idx])
            if not np.isfinite(loss):
                raise TrainingError("behavior cloning produced a non-finite loss")
            agent.policy.zero_grads()
            agent.policy.backward(grad)
            opt.step(agent.policy.named_grads())
        pred = np.argmax(agent.policy.forward(states[hold]), axis=1)
        acc = float((pred == labels[hold]).mean())
        if acc > best + cfg.bc_min_improve:
            best = acc
            stale = 0
        else:
            stale += 1
            if stale >= cfg.bc_patience:
                break
    return best


def _gae(rewards, values, dones, bootstrap, gamma, lam):
    n = len(rewards)
    adv = np.zeros(n)
    nxt = bootstrap
    acc = 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - float(dones[t])
        delta = rewards[t] + gamma * nxt * live - values[t]
        acc = delta + gamma * lam * live * acc
        adv[t] = acc
        nxt = values[t]
    return adv


def _ppo_update(agent, old_policy, batch, cfg, opt_pi, opt_v, shuffle_rng):
    states, actions, advantages, returns = batch
    n = len(actions)
    adv = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            s, a = states[idx], actions[idx]
            rows = np.arange(len(a))
            # old_policy holds the collection-time parameters; running both
            # nets through the same forward puts the first minibatch at a
            # ratio of exactly 1
            lp_old = log_softmax(old_policy.forward(s))[rows, a]
            logp = log_softmax(agent.policy.forward(s))
            lp_a = logp[rows, a]
            ratio = np.exp(lp_a - lp_old)
            unclipped = ratio * adv[idx]
            clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv[idx]
            # ties go to the clipped branch, so a zero clip range means the
            # surrogate term moves nothing
            take_unclipped = unclipped < clipped
            inside = (ratio > 1.0 - cfg.clip) & (ratio < 1.0 + cfg.clip)
            probs = np.exp(logp)
            entropy = float(-(probs * logp).sum(axis=1).mean())
            if not np.isfinite(entropy) or entropy < cfg.entropy_floor:
                raise TrainingError(f"policy entropy collapsed to {entropy:.3g}")
            coef = np.where(take_unclipped | inside, adv[idx] * ratio, 0.0)
            g_lp = -coef / len(a)
            grad = probs * (-g_lp[:, None])
            grad[rows, a] += g_lp
            agent.policy.zero_grads()
            agent.policy.backward(grad)
            opt_pi.step(agent.policy.named_grads())

            v = agent.value.forward(s)[:, 0]
            vdiff = v - returns[idx]
            vloss = float((vdiff * vdiff).mean())
            if not np.isfinite(vloss):
                raise TrainingError("value update produced a non-finite loss")
            vgrad = (cfg.value_coef * 2.0 * vdiff / len(a))[:, None]
            agent.value.zero_grads()
            agent.value.backward(vgrad)
            opt_v.step(agent.value.named_grads())


def ppo_train(env_factory, est: RewardEstimator | None, corpus,
              config: PpoConfig | None = None):
    """Clipped-surrogate PPO with behavior-cloning warm-up.

    The policy is first cloned from the expert corpus, then trained
    on-policy in update_frames segments; a fixed explore_eps fraction of
    actions is drawn uniformly throughout (no decay).
    """
    cfg = config or PpoConfig()
    env = env_factory()
    eval_env = env_factory()
    _check_est(est, env.ontology)
    if corpus.ontology_hash != env.ontology.content_hash():
        raise ConfigError("corpus and environment use different ontologies")
    ss = np.random.SeedSequence([cfg.seed, 2])
    init_rng, bc_rng, act_rng, shuffle_rng, seed_rng = [np.random.default_rng(s) for s in ss.spawn(5)]
    train_goal_seed = int(seed_rng.integers(2**31))
    eval_goal_seed = int(seed_rng.integers(2**31))

    agent = PpoAgent(env.ontology, cfg.hidden, init_rng)
    _bc_warmup(agent, corpus, cfg, bc_rng)
    opt_pi = Adam(agent.policy.named_params(), lr=cfg.lr)
    opt_v = Adam(agent.value.named_params(), lr=cfg.lr)
    sd, action_dim = env.ontology.state_dim, env.ontology.action_dim
    old_policy = Mlp("pi", [sd, cfg.hidden, action_dim], ["relu", "linear"],
                     np.random.default_rng(0))

    curve = [_checkpoint_row(agent, eval_env, 0, cfg, eval_goal_seed)]
    episode = 0
    frame = 0
    next_eval = cfg.eval_every
    state = env.reset(goal_seed=episode_goal_seed(train_goal_seed, episode))
    while frame < cfg.total_frames:
        seg = min(cfg.update_frames, cfg.total_frames - frame)
        S = np.zeros((seg, sd))
        A = np.zeros(seg, dtype=np.int64)
        R = np.zeros(seg)
        D = np.zeros(seg, dtype=bool)
        for t in range(seg):
            probs = agent.probs(state)[0]
            if act_rng.random() < cfg.explore_eps:
                action = int(act_rng.integers(action_dim))
            else:
                action = int(act_rng.choice(action_dim, p=probs))
            S[t] = state
            A[t] = action
            state, r, done = env.step(action)
            R[t] = r
            D[t] = done
            if done:
                episode += 1
                state = env.reset(goal_seed=episode_goal_seed(train_goal_seed, episode))
        frame += seg
        R = _shaped_rewards(R, S, A, est)
        V = agent.values(S)
        bootstrap = 0.0 if D[-1] else float(agent.values(state)[0])
        adv = _gae(R, V, D, bootstrap, cfg.gamma, cfg.gae_lambda)
        returns = adv + V
        assign_params(old_policy.named_params(), agent.policy.named_params())
        _ppo_update(agent, old_policy, (S, A, adv, returns), cfg, opt_pi, opt_v, shuffle_rng)
        if frame >= next_eval:
            curve.append(_checkpoint_row(agent, eval_env, frame, cfg, eval_goal_seed))
            next_eval += cfg.eval_every
    return agent, curve


# ---------------------------------------------------------------------------
# curves and checkpoints


def save_curve(path, rows) -> None:
    """CSV learning curve; fixed field order and float format."""
    with open(path, "w") as f:
        f.write(CURVE_HEADER + "\n")
        for row in rows:
            f.write("%d,%.6f,%.6f,%.6f,%d\n" % (
                row["frames"], row["success_rate"], row["reward_score"],
                row["avg_turn"], row["seed"]))


def load_curve(path) -> list:
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != CURVE_HEADER:
            raise ConfigError(f"{path}: unexpected curve header {header!r}")
        for line in f:
            frames, success, score, turn, seed = line.strip().split(",")
            rows.append({
                "frames": int(frames),
                "success_rate": float(success),
                "reward_score": float(score),
                "avg_turn": float(turn),
                "seed": int(seed),
            })
    return rows


def save_agent(path, agent) -> None:
    if isinstance(agent, QAgent):
        kind, params = "dqn", agent.q.named_params()
    elif isinstance(agent, PpoAgent):
        kind = "ppo"
        params = dict(agent.policy.named_params())
        params.update(agent.value.named_params())
    else:
        raise ConfigError(f"cannot checkpoint {type(agent).__name__}")
    meta = {
        "kind": kind,
        "ontology_hash": agent.ontology.content_hash(),
        "hidden": agent.hidden,
    }
    save_checkpoint(path, params, meta)


def load_agent(path, ontology: Ontology):
    params, meta = load_checkpoint(path)
    if meta.get("ontology_hash") != ontology.content_hash():
        raise ConfigError(f"{path}: agent belongs to a different ontology")
    rng = np.random.default_rng(0)
    if meta.get("kind") == "dqn":
        agent = QAgent(ontology, int(meta["hidden"]), rng)
        assign_params(agent.q.named_params(), params)
        agent.sync_target()
        return agent
    if meta.get("kind") == "ppo":
        agent = PpoAgent(ontology, int(meta["hidden"]), rng)
        merged = dict(agent.policy.named_params())
        merged.update(agent.value.named_params())
        assign_params(merged, params)
        return agent
    raise ConfigError(f"{path}: not an agent checkpoint")
