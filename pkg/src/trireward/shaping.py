"""Reward estimation and shaping from frozen discriminators.

A RewardEstimator bundles a trained autoencoder with trained per-level
discriminators and turns (state, action) pairs into a scalar reward:
per-level scores, Markov-gated sequential rewards, then either the final
gated value (SeqPrd) or the mean of the three (SeqAvg).  Shaped rewards
add the scaled estimate to the environment's own per-turn reward.

Nothing here mutates model parameters; estimators are safe to share.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .adversarial import DiscriminatorSet, load_adversarial
from .checkpoint import file_sha256, params_sha256
from .dae import LEVELS, DaeModel, dae_encode, load_dae
from .errors import ConfigError, ContractViolation
from .nn import sigmoid
from .ontology import AssignmentMatrix, Ontology, build_assignment_matrix, decompose_batch

COMBINATIONS = ("SeqPrd", "SeqAvg")

MANIFEST_VERSION = 1


def gated_rewards(y_d, y_a, y_s, tau: float = 10.0, b: float = -0.5):
    """Per-level rewards with each level gated by the one above it.

    R_d passes through; R_a and R_s are the raw scores scaled by a
    sigmoid gate on the previous reward, so a wrong domain suppresses
    act and slot rewards no matter how plausible they look alone.
    Accepts scalars or equally-shaped arrays.
    """
    if tau <= 0:
        raise ConfigError("tau must be positive")
    single = np.ndim(y_d) == 0 and np.ndim(y_a) == 0 and np.ndim(y_s) == 0
    r_d = np.asarray(y_d, dtype=np.float64)
    r_a = np.asarray(y_a, dtype=np.float64) * sigmoid(tau * (r_d + b))
    r_s = np.asarray(y_s, dtype=np.float64) * sigmoid(tau * (r_a + b))
    if single:
        return float(r_d), float(r_a), float(r_s)
    return r_d, r_a, r_s


def combine(combination: str, r_d, r_a, r_s):
    if combination == "SeqPrd":
        return r_s
    if combination == "SeqAvg":
        return (r_d + r_a + r_s) / 3.0
    raise ConfigError(f"unknown combination {combination!r}, expected one of {COMBINATIONS}")


@dataclass(frozen=True)
class RewardEstimator:
    dae: DaeModel
    disc: DiscriminatorSet
    matrix: AssignmentMatrix
    tau: float = 10.0
    b: float = -0.5
    alpha: float = 5.0
    combination: str = "SeqPrd"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.combination not in COMBINATIONS:
            raise ConfigError(f"unknown combination {self.combination!r}")
        if self.dae.ontology.content_hash() != self.disc.ontology.content_hash():
            raise ConfigError("autoencoder and discriminators use different ontologies")
        if self.disc.dae_hash is not None:
            if self.disc.dae_hash != params_sha256(self.dae.named_params()):
                raise ConfigError("discriminators were trained against a different autoencoder")


def make_estimator(dae: DaeModel, disc: DiscriminatorSet, tau: float = 10.0,
                   b: float = -0.5, alpha: float = 5.0,
                   combination: str = "SeqPrd") -> RewardEstimator:
    matrix = build_assignment_matrix(dae.ontology)
    return RewardEstimator(dae, disc, matrix, tau, b, alpha, combination)


def score_levels(est: RewardEstimator, state, action):
    """Raw per-level discriminator scores (y_d, y_a, y_s).

    Deterministic: states are encoded without sampling noise.  Accepts a
    single state vector with an integer action, or a batch of each.
    """
    latents = dae_encode(est.dae, state, sample=False)
    single = np.asarray(state).ndim == 1
    acts = np.atleast_1d(np.asarray(action, dtype=np.int64))
    if acts.min() < 0 or acts.max() >= est.dae.ontology.action_dim:
        raise ContractViolation("action index out of range")
    n = 1 if single else np.asarray(state).shape[0]
    if acts.shape[0] != n:
        raise ContractViolation(f"{n} states but {acts.shape[0]} actions")
    subs = decompose_batch(acts, est.matrix)
    ys = [est.disc.score(lv, np.atleast_2d(latents[i]), subs[i]) for i, lv in enumerate(LEVELS)]
    if single and np.ndim(action) == 0:
        return tuple(float(y[0]) for y in ys)
    return tuple(ys)


def estimate(est: RewardEstimator, state, action):
    """Combined reward estimate in (0, 1) for (state, action)."""
    y_d, y_a, y_s = score_levels(est, state, action)
    r_d, r_a, r_s = gated_rewards(y_d, y_a, y_s, est.tau, est.b)
    return combine(est.combination, r_d, r_a, r_s)


def shape(est: RewardEstimator, r_ori: float, state, action) -> float:
    """Environment reward augmented with the scaled estimate.

    Meant for per-turn rewards during training only; terminal bonuses
    and evaluation returns stay unshaped.
    """
    if est.alpha == 0.0:
        return r_ori
    return r_ori + est.alpha * estimate(est, state, action)


def save_estimator_manifest(path, est: RewardEstimator, dae_path, disc_path) -> None:
    """Write a manifest tying the estimator to its exact checkpoint files.

    Paths are stored relative to the manifest location so the bundle can
    be moved as a directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    def rel(p):
        return os.path.relpath(os.path.abspath(p), base)
    doc = {
        "kind": "reward_estimator",
        "format_version": MANIFEST_VERSION,
        "ontology_hash": est.dae.ontology.content_hash(),
        "dae": {"path": rel(dae_path), "sha256": file_sha256(dae_path)},
        "discriminators": {"path": rel(disc_path), "sha256": file_sha256(disc_path)},
        "tau": est.tau,
        "b": est.b,
        "alpha": est.alpha,
        "combination": est.combination,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_estimator(path, ontology: Ontology, tau=None, b=None, alpha=None,
                   combination=None) -> RewardEstimator:
    """Rebuild an estimator from its manifest, verifying every hash link.

    The four scoring knobs can be overridden per load; omitted ones come
    from the manifest.
    """
    with open(path) as f:
        doc = json.load(f)
    if doc.get("kind") != "reward_estimator":
        raise ConfigError(f"{path}: not an estimator manifest")
    if doc["ontology_hash"] != ontology.content_hash():
        raise ConfigError(f"{path}: manifest belongs to a different ontology")
    base = os.path.dirname(os.path.abspath(path))
    dae_path = os.path.join(base, doc["dae"]["path"])
    disc_path = os.path.join(base, doc["discriminators"]["path"])
    for p, want in ((dae_path, doc["dae"]["sha256"]),
                    (disc_path, doc["discriminators"]["sha256"])):
        if not os.path.exists(p):
            raise ConfigError(f"missing checkpoint {p}")
        got = file_sha256(p)
        if got != want:
            raise ConfigError(f"checksum mismatch for {p}: manifest has {want[:12]}, file is {got[:12]}")
    dae = load_dae(dae_path, ontology)
    disc = load_adversarial(disc_path, ontology, dae=dae)
    return make_estimator(
        dae,
        disc,
        tau=doc["tau"] if tau is None else tau,
        b=doc["b"] if b is None else b,
        alpha=doc["alpha"] if alpha is None else alpha,
        combination=doc["combination"] if combination is None else combination,
    )
