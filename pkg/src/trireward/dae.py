"""Disentangled autoencoder over dialog states.

Three parallel encoders produce 64-wide latent blocks (domain / act / slot
views of the state), a shared noise net predicts per-dimension log-variance
for reparameterized sampling, a sigmoid decoder reconstructs the state from
the concatenated blocks, and one bias-free linear classifier per block
predicts the matching level of the paired expert action. Training loss is
reconstruction BCE plus the three classifier cross-entropies, unweighted.

Inference (reward scoring) uses the deterministic latent means (sample=False)
so downstream scores are reproducible; training samples with noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .checkpoint import assign_params, load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractViolation, TrainingError
from .ontology import Ontology, SubActions, build_assignment_matrix

LEVELS = ("d", "a", "s")


@dataclass(frozen=True)
class DaeConfig:
    latent_width: int = 64
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 5  # epochs without val improvement before stopping
    min_improve: float = 1e-4
    lr: float = 1e-3
    l2: float = 0.0
    val_fraction: float = 0.1
    seed: int = 0


class DaeModel:
    def __init__(self, ontology: Ontology, config: DaeConfig | None = None, rng=None):
        cfg = config or DaeConfig()
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        w = cfg.latent_width
        sd = ontology.state_dim
        self.ontology = ontology
        self.config = cfg
        self.latent_width = w
        self.enc = {lv: nn.Dense(f"enc_{lv}", sd, w, "relu", rng) for lv in LEVELS}
        self.noise = nn.Dense("noise", sd, 3 * w, "linear", rng)
        self.dec = nn.Dense("dec", 3 * w, sd, "sigmoid", rng)
        sizes = dict(zip(LEVELS, (ontology.n_domains, ontology.n_acts, ontology.n_slots)))
        # zero-init heads: uniform class logits at init, no symmetry issue for linear heads
        self.cls = {
            lv: nn.Dense(f"cls_{lv}", w, sizes[lv], "linear", rng, bias=False, w_scale=0.0)
            for lv in LEVELS
        }
        self.training_log: list[dict] = []

    def _components(self):
        return [*self.enc.values(), self.noise, self.dec, *self.cls.values()]

    def named_params(self):
        return nn.merge_params(*(c.named_params() for c in self._components()))

    def named_grads(self):
        return nn.merge_params(*(c.named_grads() for c in self._components()))

    def zero_grads(self):
        for c in self._components():
            c.zero_grads()

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        w = self.latent_width
        return z[:, :w], z[:, w : 2 * w], z[:, 2 * w :]

    def log_var(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Clamped log-variance and the in-range mask (for gradient masking)."""
        raw = self.noise.forward(states)
        mask = (raw > nn.LOGVAR_MIN) & (raw < nn.LOGVAR_MAX)
        return np.clip(raw, nn.LOGVAR_MIN, nn.LOGVAR_MAX), mask


def _as_batch(state: np.ndarray, state_dim: int) -> tuple[np.ndarray, bool]:
    state = np.asarray(state, dtype=np.float64)
    single = state.ndim == 1
    batch = state[None, :] if single else state
    if batch.ndim != 2 or batch.shape[1] != state_dim:
        raise ContractViolation(f"state width {batch.shape[-1]} != state_dim {state_dim}")
    return batch, single


def dae_encode(model: DaeModel, state: np.ndarray, rng=None, sample: bool = False):
    """Encode state(s) into the three latent blocks (s_d, s_a, s_s)."""
    batch, single = _as_batch(state, model.ontology.state_dim)
    h = [model.enc[lv].forward(batch) for lv in LEVELS]
    if sample:
        if rng is None:
            raise ContractViolation("sample=True needs an rng")
        logvar, _ = model.log_var(batch)
        parts = model.split(logvar)
        h = [nn.reparameterize(hi, lv, rng)[0] for hi, lv in zip(h, parts)]
    if single:
        h = [x[0] for x in h]
    return tuple(h)


def dae_reconstruct(model: DaeModel, latents) -> np.ndarray:
    """Per-bit state probabilities from the three latent blocks."""
    z = np.concatenate([np.atleast_2d(x) for x in latents], axis=1)
    if z.shape[1] != 3 * model.latent_width:
        raise ContractViolation("concatenated latent width mismatch")
    out = model.dec.forward(z)
    return out[0] if np.asarray(latents[0]).ndim == 1 else out


def _batch_losses(model: DaeModel, states: np.ndarray, labels: np.ndarray, rng, backward: bool):
    """Shared forward (and optional backward) pass over a batch.

    labels: (B, 3) int array of (domain, act, slot) indices.
    Returns (total, recon, cls_d, cls_a, cls_s).
    """
    h = [model.enc[lv].forward(states) for lv in LEVELS]
    logvar, mask = model.log_var(states)
    lv_parts = model.split(logvar)
    samples, caches = [], []
    for hi, lvp in zip(h, lv_parts):
        s, cache = nn.reparameterize(hi, lvp, rng)
        samples.append(s)
        caches.append(cache)
    z = np.concatenate(samples, axis=1)
    probs = model.dec.forward(z)
    recon, g_probs = nn.bce_loss(probs, states)
    cls_losses, g_logits = [], []
    for i, lv in enumerate(LEVELS):
        logits = model.cls[lv].forward(samples[i])
        loss, grad = nn.softmax_ce_loss(logits, labels[:, i])
        cls_losses.append(loss)
        g_logits.append(grad)
    total = recon + sum(cls_losses)
    if backward:
        g_z = model.dec.backward(g_probs)
        g_samples = model.split(g_z)
        g_lv_parts = []
        for i, lv in enumerate(LEVELS):
            g_s = g_samples[i] + model.cls[lv].backward(g_logits[i])
            g_h, g_logvar = nn.reparameterize_backward(caches[i], g_s)
            model.enc[lv].backward(g_h)
            g_lv_parts.append(g_logvar)
        model.noise.backward(np.concatenate(g_lv_parts, axis=1) * mask)
    return (total, recon, *cls_losses)


def dae_loss(model: DaeModel, state: np.ndarray, sub_actions: SubActions, rng):
    """Training loss for one (state, action) pair: (total, recon, cls_d, cls_a, cls_s)."""
    batch, _ = _as_batch(state, model.ontology.state_dim)
    labels = np.array([sub_actions.triple()], dtype=np.int64)
    return _batch_losses(model, batch, labels, rng, backward=False)


def train_dae(corpus, config: DaeConfig | None = None, ontology: Ontology | None = None) -> DaeModel:
    """Mini-batch training with a held-out split and best-validation early stopping."""
    from .ontology import default_ontology

    cfg = config or DaeConfig()
    ont = ontology or default_ontology()
    if ont.content_hash() != corpus.ontology_hash:
        raise ConfigError("corpus was generated under a different ontology")
    matrix = build_assignment_matrix(ont)
    labels = matrix.rows[corpus.actions]
    states = corpus.states

    ss = np.random.SeedSequence(cfg.seed)
    init_rng, shuffle_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    model = DaeModel(ont, cfg, init_rng)
    opt = nn.Adam(model.named_params(), lr=cfg.lr, l2=cfg.l2)

    n = len(states)
    order = shuffle_rng.permutation(n)
    n_val = max(1, int(round(n * cfg.val_fraction)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    xv, yv = states[val_idx], labels[val_idx]

    best_val = np.inf
    best_params = None
    stale = 0
    for epoch in range(cfg.max_epochs):
        perm = shuffle_rng.permutation(len(train_idx))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = train_idx[perm[start : start + cfg.batch_size]]
            model.zero_grads()
            losses = _batch_losses(model, states[idx], labels[idx], noise_rng, backward=True)
            if not np.isfinite(losses[0]):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            opt.step(model.named_grads())
            epoch_loss += losses[0]
            n_batches += 1
        val = _batch_losses(model, xv, yv, noise_rng, backward=False)[0]
        model.training_log.append(
            {"epoch": epoch, "train_loss": epoch_loss / n_batches, "val_loss": float(val)}
        )
        if val < best_val - cfg.min_improve:
            best_val = val
            best_params = {k: v.copy() for k, v in model.named_params().items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_params is not None:
        assign_params(model.named_params(), best_params)
    model.best_val_loss = float(best_val)
    return model


# ---------------------------------------------------------------------------
# evaluation helpers


def reconstruction_accuracy(model: DaeModel, states: np.ndarray) -> float:
    """Bitwise accuracy of thresholded reconstructions from mean latents."""
    latents = dae_encode(model, states, sample=False)
    probs = dae_reconstruct(model, latents)
    return float(((probs >= 0.5) == (states >= 0.5)).mean())


def classifier_accuracy(model: DaeModel, states: np.ndarray, labels: np.ndarray, level: str) -> float:
    """Held-out accuracy of the level's auxiliary classifier (mean latents)."""
    i = LEVELS.index(level)
    latents = dae_encode(model, states, sample=False)
    logits = model.cls[level].forward(latents[i])
    return float((logits.argmax(axis=1) == labels).mean())


def linear_probe_accuracy(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    n_classes: int,
    seed: int = 0,
    epochs: int = 150,
    lr: float = 0.05,
) -> float:
    """Train a softmax linear probe on features and report test accuracy."""
    rng = np.random.default_rng(seed)
    probe = nn.Dense("probe", train_x.shape[1], n_classes, "linear", rng)
    opt = nn.Adam(probe.named_params(), lr=lr)
    y = np.asarray(train_y, dtype=np.int64)
    for _ in range(epochs):
        probe.zero_grads()
        logits = probe.forward(train_x)
        _, grad = nn.softmax_ce_loss(logits, y)
        probe.backward(grad)
        opt.step(probe.named_grads())
    pred = probe.forward(test_x).argmax(axis=1)
    return float((pred == np.asarray(test_y)).mean())


def random_projection(features: np.ndarray, width: int, seed: int = 0) -> np.ndarray:
    """Fixed Gaussian projection; capacity-matched baseline for latent probes."""
    rng = np.random.default_rng(seed)
    proj = rng.normal(0.0, 1.0 / np.sqrt(features.shape[1]), size=(features.shape[1], width))
    return features @ proj


# ---------------------------------------------------------------------------
# persistence


def save_dae(path, model: DaeModel) -> None:
    meta = {
        "kind": "dae",
        "ontology_hash": model.ontology.content_hash(),
        "latent_width": model.latent_width,
        "state_dim": model.ontology.state_dim,
        "seed": model.config.seed,
        "val_loss": getattr(model, "best_val_loss", None),
    }
    save_checkpoint(path, model.named_params(), meta)


def load_dae(path, ontology: Ontology) -> DaeModel:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "dae":
        raise ConfigError(f"{path}: not an autoencoder checkpoint")
    if meta["ontology_hash"] != ontology.content_hash():
        raise ConfigError(f"{path}: checkpoint belongs to a different ontology")
    model = DaeModel(ontology, DaeConfig(latent_width=meta["latent_width"], seed=meta.get("seed", 0)))
    assign_params(model.named_params(), params)
    return model
