"""Synthetic multi-domain task-oriented dialog environment.

A sampled user goal (constraints to tell, slots to ask about) drives an
agenda-based simulated user. The system picks (domain, act, slot) actions;
informing a pending request satisfies it, booking closes out a domain's
reference request, and anything else is unhelpful. Episodes end in success
when every goal request is satisfied, or in failure when the user runs out
of patience or the turn cap hits.

Rewards are sparse: -1 per system turn plus a terminal bonus, equivalent to
the closed-form episode_reward (tested). The environment itself is fully
deterministic once the goal is sampled; all randomness lives in sample_goal.

Ontologies used here must provide "inform" and "book" acts and a "ref" slot
(the booking handle); see default_ontology / micro_ontology.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractViolation
from .ontology import AssignmentMatrix, Ontology, build_assignment_matrix

N_TURN_BITS = 6
_USER_ACTS = ("none", "inform", "request")


@dataclass(frozen=True)
class EnvConfig:
    """Knobs for goal sampling and user behavior."""

    two_domain_prob: float = 0.45
    n_constraints: tuple[int, int] = (1, 2)  # inclusive range per domain
    n_extra_requests: tuple[int, int] = (4, 4)  # plus the ref request, clamped to available slots
    user_pops_per_turn: int = 2
    patience: int = 3  # consecutive unhelpful system turns before abandon
    max_turns: int = 20


@dataclass(frozen=True)
class UserGoal:
    active_domains: tuple[int, ...]
    constraints: dict  # domain -> tuple of slot indices the user will volunteer
    requests: dict  # domain -> tuple of slot indices the user wants answered (ref last)

    def n_requests(self) -> int:
        return sum(len(v) for v in self.requests.values())


@dataclass
class Transition:
    state: np.ndarray
    action: int
    r_ori: float
    next_state: np.ndarray
    done: bool
    r_shaped: float | None = None
    success: bool | None = None

    def __post_init__(self):
        if self.r_shaped is None:
            self.r_shaped = self.r_ori


class StateLayout:
    """Bit layout of the dialog state: one fixed-size block per domain.

    Block fields, in order: constraint-informed flags (S), request-pending
    flags (S), request-satisfied flags (S), last-user-act one-hot (3),
    last-system-act one-hot (A+1, leading "none"), turn-count unary bucket.
    """

    def __init__(self, ontology: Ontology, max_turns: int = 20):
        s, a = ontology.n_slots, ontology.n_acts
        self.ontology = ontology
        self.block = 3 * s + len(_USER_ACTS) + (a + 1) + N_TURN_BITS
        self.state_dim = ontology.n_domains * self.block
        if self.state_dim != ontology.state_dim:
            raise ConfigError(
                f"ontology declares state_dim {ontology.state_dim}, layout needs {self.state_dim}"
            )
        # unary turn thresholds: bit i set once turn count reaches them
        self.turn_thresholds = tuple(
            int(np.ceil((i + 1) * max_turns / (N_TURN_BITS + 1))) for i in range(N_TURN_BITS)
        )
        self._s = s
        self._a = a

    def _base(self, d: int) -> int:
        return d * self.block

    def informed(self, d: int) -> slice:
        b = self._base(d)
        return slice(b, b + self._s)

    def pending(self, d: int) -> slice:
        b = self._base(d) + self._s
        return slice(b, b + self._s)

    def satisfied(self, d: int) -> slice:
        b = self._base(d) + 2 * self._s
        return slice(b, b + self._s)

    def user_act(self, d: int) -> slice:
        b = self._base(d) + 3 * self._s
        return slice(b, b + len(_USER_ACTS))

    def system_act(self, d: int) -> slice:
        b = self._base(d) + 3 * self._s + len(_USER_ACTS)
        return slice(b, b + self._a + 1)

    def turn_bits(self, d: int) -> slice:
        b = self._base(d) + 3 * self._s + len(_USER_ACTS) + self._a + 1
        return slice(b, b + N_TURN_BITS)

    def initial_state(self) -> np.ndarray:
        state = np.zeros(self.state_dim)
        for d in range(self.ontology.n_domains):
            state[self.user_act(d).start] = 1.0  # "none"
            state[self.system_act(d).start] = 1.0
        return state

    def domain_touched(self, state: np.ndarray, d: int) -> bool:
        """True once the user has produced any act in this domain."""
        return state[self.user_act(d).start] == 0.0


def episode_reward(turns: int, success: bool) -> float:
    """Closed-form episode score: -T plus +80 on success, -40 on failure."""
    if turns < 1:
        raise ContractViolation("episode must have at least one turn")
    return float(-turns + 80 if success else -turns - 40)


def _require_env_ontology(ontology: Ontology) -> tuple[int, int, int]:
    """Returns (inform_act, book_act, ref_slot) indices, validating presence."""
    try:
        inform = ontology.acts.index("inform")
        book = ontology.acts.index("book")
        ref = ontology.slots.index("ref")
    except ValueError as e:
        raise ConfigError("environment ontologies need inform/book acts and a ref slot") from e
    return inform, book, ref


def sample_goal(rng_seed: int, ontology: Ontology, config: EnvConfig | None = None) -> UserGoal:
    """Sample a user goal: 1-2 active domains, constraints plus requests (+ref) each."""
    cfg = config or EnvConfig()
    _, _, ref = _require_env_ontology(ontology)
    rng = np.random.default_rng(rng_seed)
    n_active = 1
    if ontology.n_domains >= 2 and rng.random() < cfg.two_domain_prob:
        n_active = 2
    active = tuple(sorted(int(d) for d in rng.choice(ontology.n_domains, n_active, replace=False)))
    eligible = [s for s in range(ontology.n_slots) if s != ref]
    if not eligible:
        raise ConfigError("ontology needs at least one non-ref slot")
    constraints = {}
    requests = {}
    for d in active:
        lo, hi = cfg.n_constraints
        nc = int(rng.integers(lo, min(hi, len(eligible)) + 1))
        cons = sorted(int(s) for s in rng.choice(eligible, nc, replace=False))
        rest = [s for s in eligible if s not in cons]
        lo, hi = cfg.n_extra_requests
        nr = min(int(rng.integers(lo, hi + 1)), len(rest))
        reqs = sorted(int(s) for s in rng.choice(rest, nr, replace=False)) if nr else []
        constraints[d] = tuple(cons)
        requests[d] = tuple(reqs) + (ref,)
    return UserGoal(active_domains=active, constraints=constraints, requests=requests)


def build_agenda(goal: UserGoal) -> list[tuple[str, int, int]]:
    """User agenda in reveal order: per domain, constraints first, ref request last."""
    items = []
    for d in goal.active_domains:
        for s in goal.constraints[d]:
            items.append(("inform", d, s))
        for s in goal.requests[d]:
            items.append(("request", d, s))
    return items


class DialogEnv:
    """One episode at a time; reset(goal_seed) then step(action) until done."""

    def __init__(self, ontology: Ontology, config: EnvConfig | None = None, record_trace: bool = False):
        self.ontology = ontology
        self.config = config or EnvConfig()
        self.layout = StateLayout(ontology, self.config.max_turns)
        self.matrix = build_assignment_matrix(ontology)
        self._inform, self._book, self._ref = _require_env_ontology(ontology)
        self.record_trace = record_trace
        self.trace: list[str] = []
        self._state = None
        self.done = True
        self.success = None
        self.turns = 0

    # -- episode control ----------------------------------------------------

    def reset(self, goal_seed: int | None = None, goal: UserGoal | None = None) -> np.ndarray:
        if goal is None:
            if goal_seed is None:
                raise ContractViolation("reset needs a goal_seed or an explicit goal")
            goal = sample_goal(goal_seed, self.ontology, self.config)
        self.goal = goal
        self._agenda = list(reversed(build_agenda(goal)))  # stack, pop() reveals next
        self._remaining = goal.n_requests()
        self._pending_count = {d: 0 for d in goal.active_domains}
        self._unhelpful_streak = 0
        self.turns = 0
        self.done = False
        self.success = None
        self._state = self.layout.initial_state()
        self.trace = []
        if self.record_trace:
            self.trace.append(
                "goal domains=%s constraints=%s requests=%s"
                % (list(goal.active_domains), goal.constraints, goal.requests)
            )
        self._user_turn()
        return self._state.copy()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise ContractViolation("step() on a finished episode")
        if not 0 <= action < self.matrix.action_dim:
            raise ContractViolation(f"action index {action} out of range")
        self.turns += 1
        helpful = self._apply_system_action(action)
        self._set_turn_bits()
        reward = -1.0
        if self._remaining == 0:
            self.done, self.success = True, True
            reward += 80.0
        else:
            self._unhelpful_streak = 0 if helpful else self._unhelpful_streak + 1
            if self._unhelpful_streak >= self.config.patience or self.turns >= self.config.max_turns:
                self.done, self.success = True, False
                reward += -40.0
            else:
                self._user_turn()
        if self.record_trace:
            d, a, s = self.matrix.rows[action]
            self.trace.append(
                "t=%d sys %s(%s,%s) helpful=%s r=%g done=%s"
                % (self.turns, self.ontology.acts[a], self.ontology.domains[d],
                   self.ontology.slots[s], helpful, reward, self.done)
            )
        return self._state.copy(), reward, self.done

    # -- internals ----------------------------------------------------------

    def _set_one_hot(self, sl: slice, index: int) -> None:
        self._state[sl] = 0.0
        self._state[sl.start + index] = 1.0

    def _set_turn_bits(self) -> None:
        bits = [1.0 if self.turns >= thr else 0.0 for thr in self.layout.turn_thresholds]
        for d in range(self.ontology.n_domains):
            self._state[self.layout.turn_bits(d)] = bits

    def _user_turn(self) -> None:
        for _ in range(self.config.user_pops_per_turn):
            if not self._agenda:
                break
            kind, d, s = self._agenda.pop()
            if kind == "inform":
                self._state[self.layout.informed(d).start + s] = 1.0
                self._set_one_hot(self.layout.user_act(d), _USER_ACTS.index("inform"))
            else:
                self._state[self.layout.pending(d).start + s] = 1.0
                self._pending_count[d] += 1
                self._set_one_hot(self.layout.user_act(d), _USER_ACTS.index("request"))
            if self.record_trace:
                self.trace.append(
                    "t=%d user %s(%s.%s)"
                    % (self.turns, kind, self.ontology.domains[d], self.ontology.slots[s])
                )

    def _apply_system_action(self, action: int) -> bool:
        d, a, s = (int(v) for v in self.matrix.rows[action])
        self._set_one_hot(self.layout.system_act(d), a + 1)  # slot 0 is "none"
        lay = self.layout
        pending = self._state[lay.pending(d)]
        if a == self._inform and s != self._ref and pending[s] == 1.0:
            pending[s] = 0.0
            self._state[lay.satisfied(d).start + s] = 1.0
            self._pending_count[d] -= 1
            self._remaining -= 1
            return True
        if a == self._book and s == self._ref and pending[s] == 1.0 and self._pending_count[d] == 1:
            pending[s] = 0.0
            self._state[lay.satisfied(d).start + s] = 1.0
            self._pending_count[d] = 0
            self._remaining -= 1
            return True
        if (
            a == self._acts_index_request
            and s != self._ref
            and d in self._pending_count  # active domain
            and self._state[lay.informed(d).start + s] == 0.0
        ):
            # user answers a system request right away (dontcare if not in the goal)
            self._state[lay.informed(d).start + s] = 1.0
            return True
        return False

    @property
    def _acts_index_request(self) -> int:
        try:
            return self.ontology.acts.index("request")
        except ValueError:
            return -1

    def write_trace(self, path) -> None:
        with open(path, "w") as f:
            f.write("\n".join(self.trace) + "\n")


class ExpertPolicy:
    """Scripted optimum: answer the lowest-index pending request, book when only
    the ref request is left, otherwise ask the user for an un-informed slot.

    A pure function of the state vector (no goal access)."""

    def __init__(self, ontology: Ontology, max_turns: int = 20):
        self.ontology = ontology
        self.layout = StateLayout(ontology, max_turns)
        self.matrix = build_assignment_matrix(ontology)
        self._inform, self._book, self._ref = _require_env_ontology(ontology)
        self._index_of = {tuple(t): i for i, t in enumerate(self.matrix.rows.tolist())}

    def _action(self, d: int, a: int, s: int) -> int | None:
        return self._index_of.get((d, a, s))

    def action(self, state: np.ndarray) -> int:
        lay = self.layout
        ont = self.ontology
        try:
            request_act = ont.acts.index("request")
        except ValueError:
            request_act = None
        for d in range(ont.n_domains):
            pend = np.flatnonzero(state[lay.pending(d)])
            if pend.size == 0:
                continue
            non_ref = [int(s) for s in pend if s != self._ref]
            if non_ref:
                idx = self._action(d, self._inform, min(non_ref))
            else:
                idx = self._action(d, self._book, self._ref)
            if idx is not None:
                return idx
        if request_act is not None:
            for d in range(ont.n_domains):
                if not lay.domain_touched(state, d):
                    continue
                informed = state[lay.informed(d)]
                for s in range(ont.n_slots):
                    if s != self._ref and informed[s] == 0.0:
                        idx = self._action(d, request_act, s)
                        if idx is not None:
                            return idx
        # nothing useful to do; emit the first action of the first touched domain
        for d in range(ont.n_domains):
            if lay.domain_touched(state, d):
                candidates = np.flatnonzero(self.matrix.rows[:, 0] == d)
                if candidates.size:
                    return int(candidates[0])
        return 0

    __call__ = action


def expert_policy(state: np.ndarray, view: ExpertPolicy) -> int:
    """Functional form of ExpertPolicy.action (view carries ontology + layout)."""
    return view.action(state)


# ---------------------------------------------------------------------------
# expert corpus


@dataclass
class ExpertCorpus:
    """Expert transitions; `pairs` is the (state, action) view most consumers need."""

    states: np.ndarray  # (N, state_dim) float64, binary values
    actions: np.ndarray  # (N,) int64
    rewards: np.ndarray  # (N,) float64, unshaped
    next_states: np.ndarray
    dones: np.ndarray  # (N,) bool
    episode_ids: np.ndarray  # (N,) int64
    seed: int
    ontology_hash: str
    n_dialogs: int
    n_success: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.states) == 0:
            raise ContractViolation("corpus must be non-empty")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def pairs(self):
        return list(zip(self.states, self.actions))


def episode_goal_seed(seed: int, episode: int) -> int:
    """Stable per-episode goal seed derived from the corpus/run seed."""
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def generate_expert_corpus(
    n_dialogs: int,
    seed: int,
    ontology: Ontology | None = None,
    config: EnvConfig | None = None,
) -> ExpertCorpus:
    """Run the scripted expert for n_dialogs seeded goals, recording every turn."""
    if n_dialogs < 1:
        raise ContractViolation("n_dialogs must be >= 1")
    from .ontology import default_ontology

    ont = ontology or default_ontology()
    cfg = config or EnvConfig()
    env = DialogEnv(ont, cfg)
    expert = ExpertPolicy(ont, cfg.max_turns)
    states, actions, rewards, nexts, dones, eps = [], [], [], [], [], []
    n_success = 0
    for ep in range(n_dialogs):
        state = env.reset(goal_seed=episode_goal_seed(seed, ep))
        done = False
        while not done:
            a = expert.action(state)
            nxt, r, done = env.step(a)
            states.append(state)
            actions.append(a)
            rewards.append(r)
            nexts.append(nxt)
            dones.append(done)
            eps.append(ep)
            state = nxt
        if env.success:
            n_success += 1
    return ExpertCorpus(
        states=np.array(states),
        actions=np.array(actions, dtype=np.int64),
        rewards=np.array(rewards),
        next_states=np.array(nexts),
        dones=np.array(dones, dtype=bool),
        episode_ids=np.array(eps, dtype=np.int64),
        seed=seed,
        ontology_hash=ont.content_hash(),
        n_dialogs=n_dialogs,
        n_success=n_success,
    )


def save_corpus(path, corpus: ExpertCorpus) -> None:
    arrays = {
        "states": corpus.states.astype(np.uint8),
        "actions": corpus.actions,
        "rewards": corpus.rewards,
        "next_states": corpus.next_states.astype(np.uint8),
        "dones": corpus.dones.astype(np.uint8),
        "episode_ids": corpus.episode_ids,
    }
    meta = {
        "kind": "expert-corpus",
        "seed": corpus.seed,
        "ontology_hash": corpus.ontology_hash,
        "n_dialogs": corpus.n_dialogs,
        "n_success": corpus.n_success,
    }
    save_checkpoint(path, arrays, meta)


def load_corpus(path) -> ExpertCorpus:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "expert-corpus":
        raise ConfigError(f"{path}: not an expert corpus file")
    return ExpertCorpus(
        states=arrays["states"].astype(np.float64),
        actions=arrays["actions"],
        rewards=arrays["rewards"],
        next_states=arrays["next_states"].astype(np.float64),
        dones=arrays["dones"].astype(bool),
        episode_ids=arrays["episode_ids"],
        seed=meta["seed"],
        ontology_hash=meta["ontology_hash"],
        n_dialogs=meta["n_dialogs"],
        n_success=meta["n_success"],
        meta=meta,
    )
