"""Domain/act/slot ontology, action encodings, and the rule-based action decomposer.

An action is an index into the list of valid (domain, act, slot) triples; the
assignment matrix maps each index back to its triple so an action can be split
into three per-level one-hot sub-actions. The state is a flat binary vector
whose length the ontology fixes; the bit layout itself is owned by the
environment.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

ONTOLOGY_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Ontology:
    """Action-space definition: index spaces plus the set of valid triples."""

    domains: tuple[str, ...]
    acts: tuple[str, ...]
    slots: tuple[str, ...]
    valid_triples: tuple[tuple[int, int, int], ...]
    state_dim: int

    def __post_init__(self):
        if not self.valid_triples:
            raise ContractViolation("ontology needs at least one valid triple")
        if self.state_dim <= 0:
            raise ContractViolation("state_dim must be positive")
        seen = set()
        for d, a, s in self.valid_triples:
            if not (0 <= d < len(self.domains) and 0 <= a < len(self.acts) and 0 <= s < len(self.slots)):
                raise ContractViolation(f"triple ({d},{a},{s}) out of bounds")
            if (d, a, s) in seen:
                raise ContractViolation(f"duplicate triple ({d},{a},{s})")
            seen.add((d, a, s))

    @property
    def action_dim(self) -> int:
        return len(self.valid_triples)

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @property
    def n_acts(self) -> int:
        return len(self.acts)

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    def to_dict(self) -> dict:
        return {
            "format_version": ONTOLOGY_FORMAT_VERSION,
            "domains": list(self.domains),
            "acts": list(self.acts),
            "slots": list(self.slots),
            "state_dim": self.state_dim,
            "valid_triples": [list(t) for t in sorted(self.valid_triples)],
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Ontology":
        with open(path) as f:
            raw = json.load(f)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "Ontology":
        try:
            return cls(
                domains=tuple(raw["domains"]),
                acts=tuple(raw["acts"]),
                slots=tuple(raw["slots"]),
                valid_triples=tuple(tuple(t) for t in raw["valid_triples"]),
                state_dim=int(raw["state_dim"]),
            )
        except KeyError as e:
            raise ContractViolation(f"ontology config missing key {e}") from e


@dataclass
class SubActions:
    """Per-level one-hot projections of a single action."""

    a_d: np.ndarray
    a_a: np.ndarray
    a_s: np.ndarray

    def triple(self) -> tuple[int, int, int]:
        return (int(np.argmax(self.a_d)), int(np.argmax(self.a_a)), int(np.argmax(self.a_s)))


@dataclass
class AssignmentMatrix:
    """Maps action index -> (domain, act, slot); rows in lexicographic triple order."""

    rows: np.ndarray  # (action_dim, 3) int
    n_domains: int
    n_acts: int
    n_slots: int
    _index_of: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._index_of:
            self._index_of = {tuple(t): i for i, t in enumerate(self.rows.tolist())}

    @property
    def action_dim(self) -> int:
        return self.rows.shape[0]

    def level_projection(self, level: int) -> np.ndarray:
        """Binary matrix P (action_dim x level_size): one_hot_action @ P = level one-hot."""
        size = (self.n_domains, self.n_acts, self.n_slots)[level]
        p = np.zeros((self.action_dim, size))
        p[np.arange(self.action_dim), self.rows[:, level]] = 1.0
        return p


def build_assignment_matrix(ontology: Ontology) -> AssignmentMatrix:
    rows = np.array(sorted(ontology.valid_triples), dtype=np.int64)
    return AssignmentMatrix(
        rows=rows,
        n_domains=ontology.n_domains,
        n_acts=ontology.n_acts,
        n_slots=ontology.n_slots,
    )


def one_hot(index: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[index] = 1.0
    return v


def decompose_action(action: int, m: AssignmentMatrix) -> SubActions:
    """Split an action index into its domain/act/slot one-hots."""
    if not 0 <= action < m.action_dim:
        raise ContractViolation(f"action index {action} out of range [0, {m.action_dim})")
    d, a, s = m.rows[action]
    return SubActions(
        a_d=one_hot(d, m.n_domains),
        a_a=one_hot(a, m.n_acts),
        a_s=one_hot(s, m.n_slots),
    )


def decompose_batch(actions: np.ndarray, m: AssignmentMatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized decompose: (n,) int action indices -> three (n, K_level) one-hot arrays."""
    actions = np.asarray(actions, dtype=np.int64)
    if actions.size and (actions.min() < 0 or actions.max() >= m.action_dim):
        raise ContractViolation("action index out of range in batch")
    triples = m.rows[actions]
    out = []
    for level, size in enumerate((m.n_domains, m.n_acts, m.n_slots)):
        oh = np.zeros((len(actions), size))
        oh[np.arange(len(actions)), triples[:, level]] = 1.0
        out.append(oh)
    return tuple(out)


def compose_action(sub: SubActions, m: AssignmentMatrix) -> int:
    """Inverse of decompose_action: one-hot triple -> action index."""
    triple = sub.triple()
    idx = m._index_of.get(triple)
    if idx is None:
        raise ContractViolation(f"triple {triple} is not in the valid action space")
    return idx


def default_ontology() -> Ontology:
    """Desk-scale 3x4x6 ontology with 48 valid triples.

    Per domain: inform and request over every slot, book over day/time/ref,
    select over name only (16 triples each). state_dim matches the standard
    per-domain state layout of the dialog environment (validated there).
    """
    domains = ("booking", "dining", "transit")
    acts = ("inform", "request", "book", "select")
    slots = ("area", "price", "day", "time", "name", "ref")
    act_slots = {
        "inform": ("area", "price", "day", "time", "name", "ref"),
        "request": ("area", "price", "day", "time", "name", "ref"),
        "book": ("day", "time", "ref"),
        "select": ("name",),
    }
    triples = []
    for d in range(len(domains)):
        for a, act in enumerate(acts):
            for slot in act_slots[act]:
                triples.append((d, a, slots.index(slot)))
    return Ontology(
        domains=domains,
        acts=acts,
        slots=slots,
        valid_triples=tuple(sorted(triples)),
        state_dim=96,
    )


def micro_ontology() -> Ontology:
    """1x2x2 ontology (4 actions) for fast end-to-end pipeline smoke runs."""
    return Ontology(
        domains=("booking",),
        acts=("inform", "book"),
        slots=("day", "ref"),
        valid_triples=((0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)),
        state_dim=18,
    )
