"""Offline adversarial training of per-level reward discriminators.

Three generator/discriminator pairs, one per action level, are trained
against expert (latent state, sub-action) pairs produced by a trained
disentangling autoencoder.  Training is staged: the domain pair first,
then domain+act, then all three.  The discriminators are the product;
once trained they are frozen and used as reward estimators.  No
environment interaction happens anywhere in this module.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractViolation, TrainingError
from .ontology import Ontology, build_assignment_matrix, decompose_batch
from .nn import (
    Dense,
    Mlp,
    merge_params,
    sigmoid,
    reparameterize,
    reparameterize_backward,
    st_gumbel_softmax,
    st_gumbel_backward,
    Adam,
    P_EPS,
    LOGVAR_MIN,
    LOGVAR_MAX,
)
from .checkpoint import save_checkpoint, load_checkpoint, assign_params, params_sha256
from .dae import LEVELS, DaeModel, dae_encode


@dataclass(frozen=True)
class AdvConfig:
    z_dim: int = 32
    batch_size: int = 64
    g_per_d: int = 5
    lr: float = 2e-3
    # discriminators learn on a smaller rate so the generators can keep up
    d_lr: float = 1e-3
    gen_l2: float = 1e-4
    # weight on mismatch negatives: expert latents paired with a wrong
    # sub-action, folded into the fake side of each discriminator update.
    # Without them the discriminators can win on the latent marginal alone
    # and never learn to rank actions, which is their whole purpose here.
    mismatch_weight: float = 2.0
    # gaussian jitter on the latent half of every discriminator input during
    # updates and probes; keeps the real and generated supports overlapping
    # so neither side can win outright.  Inference-time scores are clean.
    instance_noise: float = 0.1
    disc_hidden: int = 64
    gumbel_temperature: float = 1.0
    stage_max_g_steps: int = 20000
    # no stage-stop checks before this many generator steps.  Scalar, or one
    # entry per stage (last entry reused past its end): the domain pair
    # separates fast and must be allowed to stop early, while the slot pair
    # only becomes confident deep into its stage.  Earlier pairs keep
    # training in every later stage, so early stops cost them nothing.
    min_g_steps: object = (500, 3000, 8000)
    check_every_d_steps: int = 25
    band: tuple = (0.55, 0.95)
    stable_checks: int = 10
    # collapse means literally stuck at chance or certainty, not merely
    # outside the band
    pin_low: float = 0.51
    pin_high: float = 0.995
    probe_batch: int = 256
    holdout_fraction: float = 0.1
    stages: tuple = (("d",), ("d", "a"), ("d", "a", "s"))
    seed: int = 0

    def __post_init__(self):
        # normalize sequence fields so configs loaded from JSON compare equal
        object.__setattr__(self, "band", tuple(self.band))
        object.__setattr__(self, "stages", tuple(tuple(s) for s in self.stages))
        if isinstance(self.min_g_steps, list):
            object.__setattr__(self, "min_g_steps", tuple(self.min_g_steps))
        if self.z_dim < 1 or self.batch_size < 1 or self.g_per_d < 1:
            raise ConfigError("z_dim, batch_size and g_per_d must be positive")
        mg = self.min_g_steps if isinstance(self.min_g_steps, (tuple, list)) else (self.min_g_steps,)
        if len(mg) == 0 or any(int(m) < 0 for m in mg):
            raise ConfigError(f"bad min_g_steps {self.min_g_steps!r}")
        lo, hi = self.band
        if not (0.5 <= lo < hi <= 1.0):
            raise ConfigError(f"bad stability band {self.band}")
        seen = []
        for stage in self.stages:
            for lv in stage:
                if lv not in LEVELS:
                    raise ConfigError(f"unknown level {lv!r} in stages")
            if seen and not set(seen[-1]).issubset(stage):
                raise ConfigError("stages must be cumulative")
            seen.append(stage)


class GeneratorSet:
    """One latent generator per level plus a shared action generator.

    Every sub-generator consumes the same noise draw: a single z batch
    feeds the three latent trunks and the action generator, so the four
    outputs of one draw are jointly distributed.
    """

    def __init__(self, ontology: Ontology, latent_width: int, config: AdvConfig, rng):
        self.ontology = ontology
        self.latent_width = latent_width
        self.config = config
        z = config.z_dim
        self.trunks = {}
        self.mean_heads = {}
        self.logvar_heads = {}
        for lv in LEVELS:
            self.trunks[lv] = Dense(f"gen_{lv}_trunk", z, latent_width, activation="relu", rng=rng)
            self.mean_heads[lv] = Dense(f"gen_{lv}_mean", latent_width, latent_width, rng=rng)
            self.logvar_heads[lv] = Dense(f"gen_{lv}_logvar", latent_width, latent_width, rng=rng)
        self.act_net = Mlp(
            "gen_act",
            [z, latent_width, ontology.action_dim],
            ["relu", "linear"],
            rng=rng,
        )
        self.matrix = build_assignment_matrix(ontology)
        self._projections = {lv: self.matrix.level_projection(i) for i, lv in enumerate(LEVELS)}

    def level_layers(self, lv):
        return [self.trunks[lv], self.mean_heads[lv], self.logvar_heads[lv]]

    def named_params(self):
        dicts = [l.named_params() for lv in LEVELS for l in self.level_layers(lv)]
        dicts.append(self.act_net.named_params())
        return merge_params(*dicts)

    def named_grads(self):
        out = {}
        for lv in LEVELS:
            for l in self.level_layers(lv):
                out.update(l.named_grads())
        out.update(self.act_net.named_grads())
        return out

    def zero_grads(self):
        for lv in LEVELS:
            for l in self.level_layers(lv):
                l.zero_grads()
        self.act_net.zero_grads()


@dataclass
class FakeBatch:
    """One generator draw: per-level latents and decomposed sub-actions."""

    sub_states: dict
    sub_actions: dict
    action_onehot: np.ndarray
    reparam_caches: dict = field(default_factory=dict)
    logvar_masks: dict = field(default_factory=dict)
    gumbel_cache: tuple = None

    def level_input(self, lv):
        return np.concatenate([self.sub_states[lv], self.sub_actions[lv]], axis=1)


@dataclass
class RealBatch:
    sub_states: dict
    sub_actions: dict

    def level_input(self, lv):
        return np.concatenate([self.sub_states[lv], self.sub_actions[lv]], axis=1)


def generate_fake(gen: GeneratorSet, z, rng, hard=True, levels=LEVELS) -> FakeBatch:
    """Run every generator on one shared noise batch.

    z: (n, z_dim).  Latent heads are sampled with the reparameterization
    trick; the action generator emits logits pushed through straight-through
    Gumbel-softmax and decomposed into per-level one-hots with the same
    projection matrices used for real actions.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != gen.config.z_dim:
        raise ContractViolation(f"noise must be (n, {gen.config.z_dim}), got {z.shape}")
    sub_states = {}
    caches = {}
    masks = {}
    for lv in levels:
        h = gen.trunks[lv].forward(z)
        mean = gen.mean_heads[lv].forward(h)
        logvar_raw = gen.logvar_heads[lv].forward(h)
        logvar = np.clip(logvar_raw, LOGVAR_MIN, LOGVAR_MAX)
        masks[lv] = (logvar_raw > LOGVAR_MIN) & (logvar_raw < LOGVAR_MAX)
        sample, cache = reparameterize(mean, logvar, rng)
        sub_states[lv] = sample
        caches[lv] = cache
    logits = gen.act_net.forward(z)
    onehot, gcache = st_gumbel_softmax(logits, gen.config.gumbel_temperature, rng, hard=hard)
    sub_actions = {lv: onehot @ gen._projections[lv] for lv in LEVELS}
    return FakeBatch(
        sub_states=sub_states,
        sub_actions=sub_actions,
        action_onehot=onehot,
        reparam_caches=caches,
        logvar_masks=masks,
        gumbel_cache=gcache,
    )


def sample_real(dae: DaeModel, corpus, batch, rng, indices=None, matrix=None) -> RealBatch:
    """Draw expert pairs: noisy latent encodings plus decomposed actions."""
    pool = np.arange(len(corpus.actions)) if indices is None else np.asarray(indices)
    if len(pool) == 0:
        raise ContractViolation("empty expert pool")
    pick = pool[rng.integers(0, len(pool), size=batch)]
    states = corpus.states[pick].astype(np.float64)
    latents = dae_encode(dae, states, rng=rng, sample=True)
    matrix = matrix or build_assignment_matrix(dae.ontology)
    sub = decompose_batch(corpus.actions[pick], matrix)
    sub_states = dict(zip(LEVELS, latents))
    sub_actions = dict(zip(LEVELS, sub))
    return RealBatch(sub_states=sub_states, sub_actions=sub_actions)


class DiscriminatorSet:
    """Per-level discriminators over (sub-state, sub-action) pairs.

    The nets produce logits; score() exposes sigmoid probabilities
    clamped away from {0, 1}.  Losses are computed in logit space so
    gradients survive even when a side is fully saturated.
    """

    def __init__(self, ontology: Ontology, latent_width: int, config: AdvConfig, rng):
        self.ontology = ontology
        self.latent_width = latent_width
        self.config = config
        sizes = dict(zip(LEVELS, (ontology.n_domains, ontology.n_acts, ontology.n_slots)))
        self.nets = {
            lv: Mlp(
                f"disc_{lv}",
                [latent_width + sizes[lv], config.disc_hidden, 1],
                ["relu", "linear"],
                rng=rng,
            )
            for lv in LEVELS
        }
        self.generators: Optional[GeneratorSet] = None
        self.training_log: list = []
        self.dae_hash: Optional[str] = None

    def score(self, lv, sub_states, sub_actions):
        """Clamped probabilities strictly inside (0, 1); shape (n,)."""
        p = sigmoid(self.logits(lv, sub_states, sub_actions))
        return np.clip(p, P_EPS, 1.0 - P_EPS)

    def logits(self, lv, sub_states, sub_actions):
        x = np.concatenate([np.asarray(sub_states, dtype=np.float64),
                            np.asarray(sub_actions, dtype=np.float64)], axis=1)
        return self.nets[lv].forward(x)[:, 0]

    def named_params(self):
        return merge_params(*[n.named_params() for n in self.nets.values()])

    def named_grads(self):
        out = {}
        for n in self.nets.values():
            out.update(n.named_grads())
        return out

    def zero_grads(self):
        for n in self.nets.values():
            n.zero_grads()


def _softplus(z):
    return np.logaddexp(0.0, z)


def discriminator_loss(disc: DiscriminatorSet, real: RealBatch, fake: FakeBatch,
                       levels=LEVELS, backward=False):
    """Mean per-level loss -[E log D(real) + E log(1 - D(fake))].

    Evaluated in logit space: softplus(-z_real) + softplus(z_fake).
    With backward=True the gradients for the listed levels are
    accumulated into the discriminator layers (generator side ignored).
    """
    losses = {}
    for lv in levels:
        zr = disc.logits(lv, real.sub_states[lv], real.sub_actions[lv])
        n = zr.shape[0]
        loss = _softplus(-zr).mean()
        if backward:
            g = (sigmoid(zr) - 1.0) / n
            disc.nets[lv].backward(g[:, None])
        zf = disc.logits(lv, fake.sub_states[lv], fake.sub_actions[lv])
        loss += _softplus(zf).mean()
        if backward:
            g = sigmoid(zf) / zf.shape[0]
            disc.nets[lv].backward(g[:, None])
        losses[lv] = float(loss)
    return losses


def _gen_weight_params(gen: GeneratorSet, levels):
    params = {}
    for lv in levels:
        for layer in gen.level_layers(lv):
            params.update(layer.named_params())
    params.update(gen.act_net.named_params())
    return {k: v for k, v in params.items() if k.endswith("/w")}


def generator_loss(gen: GeneratorSet, disc: DiscriminatorSet, fake: FakeBatch,
                   levels=LEVELS, l2=0.0, backward=False):
    """Sum over live levels of E_z log(1 - D(G(z))) plus an l2 weight penalty.

    The generator minimizes this, driving D's fake scores toward 1.
    With backward=True, gradients flow through the discriminators (whose
    own accumulators are scratch here), the reparameterized latents and
    the straight-through action sample into the generator layers.
    """
    total = 0.0
    onehot_grad = np.zeros_like(fake.action_onehot)
    for lv in levels:
        zf = disc.logits(lv, fake.sub_states[lv], fake.sub_actions[lv])
        n = zf.shape[0]
        total += float(-_softplus(zf).mean())   # == E log(1 - D(fake))
        if backward:
            g = -sigmoid(zf) / n
            gx = disc.nets[lv].backward(g[:, None])
            gs = gx[:, :gen.latent_width]
            ga = gx[:, gen.latent_width:]
            g_mean, g_logvar = reparameterize_backward(fake.reparam_caches[lv], gs)
            g_logvar = g_logvar * fake.logvar_masks[lv]
            gt = gen.mean_heads[lv].backward(g_mean)
            gt = gt + gen.logvar_heads[lv].backward(g_logvar)
            gen.trunks[lv].backward(gt)
            onehot_grad += ga @ gen._projections[lv].T
    if backward:
        g_logits = st_gumbel_backward(fake.gumbel_cache, onehot_grad)
        gen.act_net.backward(g_logits)
    if l2 > 0.0:
        weights = _gen_weight_params(gen, levels)
        total += 0.5 * l2 * sum(float((w * w).sum()) for w in weights.values())
        if backward:
            grads = gen.named_grads()
            for k, w in weights.items():
                grads[k] += l2 * w
    return total


def _wrong_onehots(onehots, rng):
    """Uniformly different values per row; None when only one value exists."""
    n, k = onehots.shape
    if k < 2:
        return None
    wrong = (np.argmax(onehots, axis=1) + rng.integers(1, k, size=n)) % k
    out = np.zeros_like(onehots)
    out[np.arange(n), wrong] = 1.0
    return out


def _probe_accuracy(disc, lv, real_states, real_actions, fake_states, fake_actions,
                    mismatch=None):
    pr = disc.score(lv, real_states, real_actions)
    pf = disc.score(lv, fake_states, fake_actions)
    fake_acc = float((pf < 0.5).mean())
    if mismatch is not None:
        pm = disc.score(lv, real_states, mismatch)
        fake_acc = 0.5 * (fake_acc + float((pm < 0.5).mean()))
    return 0.5 * (float((pr >= 0.5).mean()) + fake_acc)


def train_adversarial(dae: DaeModel, corpus, config: Optional[AdvConfig] = None) -> DiscriminatorSet:
    """Staged offline adversarial training; returns frozen discriminators.

    Only expert pairs are consumed: the function never touches an
    environment.  Each stage trains the schedule's live pairs with
    config.g_per_d generator updates per discriminator update and stops
    once a held-out real/fake probe accuracy for the newest level sits
    inside config.band for config.stable_checks consecutive checks, or
    at the step cap.  A probe pinned at chance or at certainty when the
    cap is hit raises TrainingError naming the stage.
    """
    config = config or AdvConfig()
    if corpus.ontology_hash != dae.ontology.content_hash():
        raise ConfigError("corpus was generated for a different ontology")
    ss = np.random.SeedSequence(config.seed)
    init_rng, z_rng, real_rng, probe_rng = [np.random.default_rng(s) for s in ss.spawn(4)]

    gen = GeneratorSet(dae.ontology, dae.latent_width, config, init_rng)
    disc = DiscriminatorSet(dae.ontology, dae.latent_width, config, init_rng)
    matrix = gen.matrix

    n = len(corpus.actions)
    perm = real_rng.permutation(n)
    n_hold = max(1, int(round(n * config.holdout_fraction)))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if len(train_idx) == 0:
        raise ConfigError("corpus too small for the requested holdout")

    opt_act = Adam(gen.act_net.named_params(), lr=config.lr)
    opt_gen = {lv: Adam(merge_params(*[l.named_params() for l in gen.level_layers(lv)]),
                        lr=config.lr) for lv in LEVELS}
    opt_disc = {lv: Adam(disc.nets[lv].named_params(), lr=config.d_lr) for lv in LEVELS}

    B = config.batch_size
    for stage_no, live in enumerate(config.stages, start=1):
        newest = live[-1]
        min_g = config.min_g_steps
        if isinstance(min_g, (tuple, list)):
            min_g = int(min_g[min(stage_no - 1, len(min_g) - 1)])
        probe_real = sample_real(dae, corpus, min(config.probe_batch, n_hold * 4),
                                 probe_rng, indices=hold_idx, matrix=matrix)
        probe_mismatch = None
        if config.mismatch_weight > 0.0:
            probe_mismatch = _wrong_onehots(probe_real.sub_actions[newest], probe_rng)
        in_band = 0
        g_steps = d_steps = 0
        last_acc = None
        stage_checks = []
        def jitter(batch, rng):
            if config.instance_noise <= 0.0:
                return
            for lv in live:
                batch.sub_states[lv] = (batch.sub_states[lv]
                                        + config.instance_noise
                                        * rng.standard_normal(batch.sub_states[lv].shape))

        while g_steps < config.stage_max_g_steps:
            for _ in range(config.g_per_d):
                z = z_rng.standard_normal((B, config.z_dim))
                fake = generate_fake(gen, z, z_rng, levels=live)
                jitter(fake, z_rng)
                gen.zero_grads()
                disc.zero_grads()
                generator_loss(gen, disc, fake, levels=live, l2=config.gen_l2, backward=True)
                grads = gen.named_grads()
                opt_act.step(grads)
                for lv in live:
                    opt_gen[lv].step(grads)
                g_steps += 1
            real = sample_real(dae, corpus, B, real_rng, indices=train_idx, matrix=matrix)
            jitter(real, real_rng)
            z = z_rng.standard_normal((B, config.z_dim))
            fake = generate_fake(gen, z, z_rng, levels=live)
            jitter(fake, z_rng)
            disc.zero_grads()
            discriminator_loss(disc, real, fake, levels=live, backward=True)
            if config.mismatch_weight > 0.0:
                for lv in live:
                    wrong = _wrong_onehots(real.sub_actions[lv], real_rng)
                    if wrong is None:
                        continue
                    zm = disc.logits(lv, real.sub_states[lv], wrong)
                    g = config.mismatch_weight * sigmoid(zm) / zm.shape[0]
                    disc.nets[lv].backward(g[:, None])
            dgrads = disc.named_grads()
            for lv in live:
                opt_disc[lv].step(dgrads)
            d_steps += 1

            if d_steps % config.check_every_d_steps == 0 and g_steps >= min_g:
                zp = probe_rng.standard_normal((probe_real.sub_states[newest].shape[0],
                                                config.z_dim))
                probe_fake = generate_fake(gen, zp, probe_rng, levels=live)
                # probe under the training-time noise model: fresh jitter per
                # check, so the reading reflects the regime the discriminator
                # actually has to separate and never saturates spuriously
                ps_real = probe_real.sub_states[newest]
                ps_fake = probe_fake.sub_states[newest]
                if config.instance_noise > 0.0:
                    ps_real = ps_real + config.instance_noise * probe_rng.standard_normal(ps_real.shape)
                    ps_fake = ps_fake + config.instance_noise * probe_rng.standard_normal(ps_fake.shape)
                last_acc = _probe_accuracy(disc, newest,
                                           ps_real, probe_real.sub_actions[newest],
                                           ps_fake, probe_fake.sub_actions[newest],
                                           mismatch=probe_mismatch)
                stage_checks.append(round(last_acc, 4))
                lo, hi = config.band
                in_band = in_band + 1 if lo <= last_acc <= hi else 0
                if in_band >= config.stable_checks:
                    break
        if in_band < config.stable_checks and last_acc is not None:
            # pinned means stuck for the whole observed window, not merely
            # ending confident: a stage that climbed through intermediate
            # readings converged, one that never left chance or certainty
            # learned nothing measurable
            if (all(a <= config.pin_low for a in stage_checks)
                    or all(a >= config.pin_high for a in stage_checks)):
                raise TrainingError(
                    f"discriminator collapse in stage {stage_no} ({'+'.join(live)}): "
                    f"probe accuracy pinned at {last_acc:.3f}"
                )
        disc.training_log.append({
            "stage": stage_no,
            "levels": "+".join(live),
            "g_steps": g_steps,
            "d_steps": d_steps,
            "probe_accuracy": last_acc,
            "checks": stage_checks,
        })

    disc.generators = gen
    disc.dae_hash = params_sha256(dae.named_params())
    return disc


def save_adversarial(path, disc: DiscriminatorSet, meta=None):
    """Checkpoint discriminators (and generators when attached).

    The manifest records the ontology hash and the hash of the exact
    autoencoder parameters the estimator was trained against; loading
    verifies both so rewards are never computed from a mismatched pair.
    """
    params = dict(disc.named_params())
    has_gen = disc.generators is not None
    if has_gen:
        params = merge_params(params, disc.generators.named_params())
    info = {
        "kind": "adversarial",
        "ontology_hash": disc.ontology.content_hash(),
        "dae_hash": disc.dae_hash,
        "latent_width": disc.latent_width,
        "z_dim": disc.config.z_dim,
        "disc_hidden": disc.config.disc_hidden,
        "gumbel_temperature": disc.config.gumbel_temperature,
        "has_generators": has_gen,
        "training_log": disc.training_log,
    }
    info.update(meta or {})
    return save_checkpoint(path, params, info)


def load_adversarial(path, ontology: Ontology, dae: Optional[DaeModel] = None) -> DiscriminatorSet:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "adversarial":
        raise ConfigError(f"not an adversarial checkpoint: kind={meta.get('kind')!r}")
    if meta["ontology_hash"] != ontology.content_hash():
        raise ConfigError("checkpoint ontology hash does not match the given ontology")
    if dae is not None and meta.get("dae_hash") != params_sha256(dae.named_params()):
        raise ConfigError("checkpoint was trained against a different autoencoder")
    config = AdvConfig(
        z_dim=int(meta["z_dim"]),
        disc_hidden=int(meta["disc_hidden"]),
        gumbel_temperature=float(meta["gumbel_temperature"]),
    )
    rng = np.random.default_rng(0)
    disc = DiscriminatorSet(ontology, int(meta["latent_width"]), config, rng)
    disc.dae_hash = meta.get("dae_hash")
    disc.training_log = meta.get("training_log", [])
    disc_params = {k: v for k, v in params.items() if k.startswith("disc_")}
    assign_params(disc.named_params(), disc_params)
    if meta.get("has_generators"):
        gen = GeneratorSet(ontology, int(meta["latent_width"]), config, rng)
        gen_params = {k: v for k, v in params.items() if k.startswith("gen_")}
        assign_params(gen.named_params(), gen_params)
        disc.generators = gen
    return disc
