import math

import numpy as np
import pytest

from trireward import adversarial as adv
from trireward.checkpoint import params_sha256
from trireward.dae import DaeConfig, DaeModel, train_dae
from trireward.dialogenv import ExpertCorpus
from trireward.errors import ConfigError, ContractViolation, TrainingError
from trireward.ontology import Ontology

TINY = Ontology(
    domains=("left", "right"),
    acts=("ask", "tell"),
    slots=("thing",),
    valid_triples=frozenset({(0, 0, 0), (0, 1, 0), (1, 0, 0), (1, 1, 0)}),
    state_dim=8,
)


def synthetic_corpus(n=400, seed=0):
    # expert rule: first four state bits pick the action, rest is noise
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=n)
    states = np.zeros((n, TINY.state_dim))
    states[np.arange(n), labels] = 1.0
    states[:, 4:] = rng.integers(0, 2, size=(n, TINY.state_dim - 4))
    return ExpertCorpus(
        states=states.astype(np.uint8),
        actions=labels.astype(np.int64),
        rewards=np.zeros(n),
        next_states=states.astype(np.uint8),
        dones=np.ones(n, dtype=bool),
        episode_ids=np.arange(n),
        seed=seed,
        ontology_hash=TINY.content_hash(),
        n_dialogs=n,
        n_success=n,
        meta={},
    )


@pytest.fixture(scope="module")
def tiny_corpus():
    return synthetic_corpus()


@pytest.fixture(scope="module")
def tiny_dae(tiny_corpus):
    cfg = DaeConfig(latent_width=8, max_epochs=60, lr=3e-3, batch_size=32, seed=1)
    return train_dae(tiny_corpus, cfg, TINY)


def short_config(**kw):
    base = dict(
        z_dim=8,
        batch_size=32,
        lr=1e-3,
        d_lr=1e-3,
        mismatch_weight=1.0,
        stage_max_g_steps=600,
        min_g_steps=100,
        check_every_d_steps=5,
        stable_checks=3,
        probe_batch=64,
        seed=4,
    )
    base.update(kw)
    return adv.AdvConfig(**base)


def zeroed(model_like):
    for v in model_like.named_params().values():
        v[...] = 0.0
    return model_like


def test_config_rejects_non_cumulative_stages():
    with pytest.raises(ConfigError):
        adv.AdvConfig(stages=(("d",), ("a",)))


def test_config_rejects_unknown_level():
    with pytest.raises(ConfigError):
        adv.AdvConfig(stages=(("q",),))


def test_config_rejects_bad_band():
    with pytest.raises(ConfigError):
        adv.AdvConfig(band=(0.95, 0.55))


def test_generate_fake_shapes_and_onehots():
    cfg = adv.AdvConfig(z_dim=6)
    rng = np.random.default_rng(0)
    gen = adv.GeneratorSet(TINY, 8, cfg, rng)
    z = rng.standard_normal((17, 6))
    fake = adv.generate_fake(gen, z, rng)
    assert fake.action_onehot.shape == (17, TINY.action_dim)
    assert np.array_equal(fake.action_onehot.sum(axis=1), np.ones(17))
    assert set(np.unique(fake.action_onehot)) <= {0.0, 1.0}
    for lv, size in zip(("d", "a", "s"), (2, 2, 1)):
        assert fake.sub_states[lv].shape == (17, 8)
        assert fake.sub_actions[lv].shape == (17, size)
        assert np.array_equal(fake.sub_actions[lv].sum(axis=1), np.ones(17))


def test_generate_fake_decomposition_consistent():
    # each level one-hot must be the projection of the sampled action
    cfg = adv.AdvConfig(z_dim=6)
    rng = np.random.default_rng(3)
    gen = adv.GeneratorSet(TINY, 8, cfg, rng)
    fake = adv.generate_fake(gen, rng.standard_normal((25, 6)), rng)
    rows = gen.matrix.rows[np.argmax(fake.action_onehot, axis=1)]
    assert np.array_equal(np.argmax(fake.sub_actions["d"], axis=1), rows[:, 0])
    assert np.array_equal(np.argmax(fake.sub_actions["a"], axis=1), rows[:, 1])
    assert np.array_equal(np.argmax(fake.sub_actions["s"], axis=1), rows[:, 2])


def test_generate_fake_rejects_bad_noise_width():
    cfg = adv.AdvConfig(z_dim=6)
    rng = np.random.default_rng(0)
    gen = adv.GeneratorSet(TINY, 8, cfg, rng)
    with pytest.raises(ContractViolation):
        adv.generate_fake(gen, rng.standard_normal((4, 5)), rng)


def test_sample_real_shapes(tiny_dae, tiny_corpus):
    rng = np.random.default_rng(11)
    real = adv.sample_real(tiny_dae, tiny_corpus, 20, rng)
    for lv, size in zip(("d", "a", "s"), (2, 2, 1)):
        assert real.sub_states[lv].shape == (20, tiny_dae.latent_width)
        assert real.sub_actions[lv].shape == (20, size)
        assert np.array_equal(real.sub_actions[lv].sum(axis=1), np.ones(20))


def test_sample_real_uses_noise(tiny_dae, tiny_corpus):
    a = adv.sample_real(tiny_dae, tiny_corpus, 20, np.random.default_rng(1))
    b = adv.sample_real(tiny_dae, tiny_corpus, 20, np.random.default_rng(1))
    c = adv.sample_real(tiny_dae, tiny_corpus, 20, np.random.default_rng(2))
    assert np.array_equal(a.sub_states["d"], b.sub_states["d"])
    assert not np.array_equal(a.sub_states["d"], c.sub_states["d"])


def make_real_fake(seed=0, batch=16):
    rng = np.random.default_rng(seed)
    cfg = adv.AdvConfig(z_dim=4)
    gen = adv.GeneratorSet(TINY, 8, cfg, rng)
    disc = adv.DiscriminatorSet(TINY, 8, cfg, rng)
    fake = adv.generate_fake(gen, rng.standard_normal((batch, 4)), rng)
    real = adv.RealBatch(
        sub_states={lv: rng.standard_normal((batch, 8)) for lv in ("d", "a", "s")},
        sub_actions={lv: fake.sub_actions[lv][rng.permutation(batch)]
                     for lv in ("d", "a", "s")},
    )
    return gen, disc, real, fake


def test_discriminator_loss_at_half_is_two_log_two():
    _, disc, real, fake = make_real_fake()
    zeroed(disc)
    losses = adv.discriminator_loss(disc, real, fake)
    for lv in ("d", "a", "s"):
        assert abs(losses[lv] - 2.0 * math.log(2.0)) < 1e-12


def test_generator_loss_at_half_is_log_half_per_level():
    gen, disc, _, fake = make_real_fake()
    zeroed(disc)
    loss = adv.generator_loss(gen, disc, fake, levels=("d", "a"), l2=0.0)
    assert abs(loss - 2.0 * math.log(0.5)) < 1e-12


def test_generator_l2_penalty_zero_cases():
    gen, disc, _, fake = make_real_fake()
    zeroed(disc)
    base = adv.generator_loss(gen, disc, fake, levels=("d",), l2=0.0)
    zeroed(gen)
    fake0 = adv.generate_fake(gen, np.zeros((16, 4)), np.random.default_rng(0))
    with_l2 = adv.generator_loss(gen, disc, fake0, levels=("d",), l2=0.7)
    # zero weights make the penalty vanish regardless of coefficient
    assert abs(with_l2 - math.log(0.5)) < 1e-12
    assert abs(base - math.log(0.5)) < 1e-12


def test_generator_l2_penalty_value():
    gen, disc, _, fake = make_real_fake()
    zeroed(disc)
    l2 = 0.3
    loss = adv.generator_loss(gen, disc, fake, levels=("d",), l2=l2)
    weights = adv._gen_weight_params(gen, ("d",))
    expect = math.log(0.5) + 0.5 * l2 * sum(float((w * w).sum()) for w in weights.values())
    assert abs(loss - expect) < 1e-10


def test_discriminator_loss_matches_scalar_loop():
    _, disc, real, fake = make_real_fake(seed=7)
    losses = adv.discriminator_loss(disc, real, fake)
    for lv in ("d", "a", "s"):
        pr = disc.score(lv, real.sub_states[lv], real.sub_actions[lv])
        pf = disc.score(lv, fake.sub_states[lv], fake.sub_actions[lv])
        acc = 0.0
        for p in pr:
            acc -= math.log(p) / len(pr)
        for p in pf:
            acc -= math.log(1.0 - p) / len(pf)
        assert abs(losses[lv] - acc) < 1e-10


def test_perfect_discriminator_loss_near_zero():
    _, disc, real, fake = make_real_fake(seed=5)
    # rig one net: hidden unit reads the first latent channel, output saturates
    net = disc.nets["d"]
    for v in net.named_params().values():
        v[...] = 0.0
    p = net.named_params()
    p["disc_d/l0/w"][0, 0] = 1.0
    p["disc_d/l1/w"][0, 0] = 10.0
    p["disc_d/l1/b"][0] = -25.0
    real.sub_states["d"][:, 0] = 10.0
    fake.sub_states["d"][:, 0] = -10.0
    losses = adv.discriminator_loss(disc, real, fake)
    assert losses["d"] < 1e-6


def test_scores_strictly_inside_unit_interval():
    _, disc, real, _ = make_real_fake(seed=2)
    net = disc.nets["a"]
    for v in net.named_params().values():
        v[...] = 0.0
    net.named_params()["disc_a/l1/b"][0] = 60.0   # sigmoid would round to 1.0
    p = disc.score("a", real.sub_states["a"], real.sub_actions["a"])
    assert np.all(p > 0.0) and np.all(p < 1.0)
    assert np.all(p <= 1.0 - 1e-8)


def replay_rng(seed=77):
    return np.random.default_rng(seed)


def test_generator_gradients_match_finite_differences():
    # soft relaxation throughout so the finite-difference path is smooth
    live = ("d", "a")
    l2 = 0.05
    rng = np.random.default_rng(12)
    cfg = adv.AdvConfig(z_dim=4)
    gen = adv.GeneratorSet(TINY, 8, cfg, rng)
    disc = adv.DiscriminatorSet(TINY, 8, cfg, rng)
    z = rng.standard_normal((6, 4))

    def loss_value():
        fake = adv.generate_fake(gen, z, replay_rng(), hard=False, levels=live)
        return adv.generator_loss(gen, disc, fake, levels=live, l2=l2)

    gen.zero_grads()
    fake = adv.generate_fake(gen, z, replay_rng(), hard=False, levels=live)
    adv.generator_loss(gen, disc, fake, levels=live, l2=l2, backward=True)
    grads = {k: v.copy() for k, v in gen.named_grads().items()}
    params = gen.named_params()

    probes = [
        ("gen_d_trunk/w", (1, 2)),
        ("gen_d_mean/w", (3, 4)),
        ("gen_d_logvar/w", (0, 5)),
        ("gen_a_trunk/b", (2,)),
        ("gen_act/l0/w", (1, 3)),
        ("gen_act/l1/w", (4, 1)),
        ("gen_act/l1/b", (0,)),
    ]
    eps = 1e-6
    for name, idx in probes:
        w = params[name]
        keep = w[idx]
        w[idx] = keep + eps
        up = loss_value()
        w[idx] = keep - eps
        down = loss_value()
        w[idx] = keep
        fd = (up - down) / (2 * eps)
        g = grads[name][idx]
        rel = abs(g - fd) / max(abs(g) + abs(fd), 1e-8)
        assert rel < 1e-3, f"{name}{idx}: analytic {g} vs fd {fd}"


def test_frozen_levels_never_contribute_gradients():
    rng = np.random.default_rng(8)
    cfg = adv.AdvConfig(z_dim=4)
    gen = adv.GeneratorSet(TINY, 8, cfg, rng)
    disc = adv.DiscriminatorSet(TINY, 8, cfg, rng)
    gen.zero_grads()
    fake = adv.generate_fake(gen, rng.standard_normal((10, 4)), rng, levels=("d",))
    adv.generator_loss(gen, disc, fake, levels=("d",), l2=0.1, backward=True)
    grads = gen.named_grads()
    for name, g in grads.items():
        if name.startswith(("gen_a_", "gen_s_")):
            assert not g.any(), name
        if name.startswith(("gen_d_", "gen_act")):
            assert np.isfinite(g).all()
    assert grads["gen_act/l0/w"].any()
    assert grads["gen_d_trunk/w"].any()


def test_training_five_to_one_and_logs(tiny_dae, tiny_corpus):
    disc = adv.train_adversarial(tiny_dae, tiny_corpus, short_config())
    assert len(disc.training_log) == 3
    for row in disc.training_log:
        assert row["g_steps"] == 5 * row["d_steps"]
        assert row["g_steps"] <= 600 + 4
    assert disc.generators is not None
    assert disc.dae_hash == params_sha256(tiny_dae.named_params())


def test_training_is_deterministic(tiny_dae, tiny_corpus):
    a = adv.train_adversarial(tiny_dae, tiny_corpus, short_config())
    b = adv.train_adversarial(tiny_dae, tiny_corpus, short_config())
    pa, pb = a.named_params(), b.named_params()
    assert sorted(pa) == sorted(pb)
    for k in pa:
        assert np.array_equal(pa[k], pb[k]), k
    c = adv.train_adversarial(tiny_dae, tiny_corpus, short_config(seed=5))
    assert any(not np.array_equal(pa[k], c.named_params()[k]) for k in pa)


def test_training_freezes_pairs_outside_stage(tiny_dae, tiny_corpus):
    cfg = short_config(stages=(("d",),))
    disc = adv.train_adversarial(tiny_dae, tiny_corpus, cfg)
    # reconstruct the untouched initialization with the same seed
    ss = np.random.SeedSequence(cfg.seed)
    init_rng = np.random.default_rng(ss.spawn(4)[0])
    gen0 = adv.GeneratorSet(TINY, tiny_dae.latent_width, cfg, init_rng)
    disc0 = adv.DiscriminatorSet(TINY, tiny_dae.latent_width, cfg, init_rng)
    trained = {**disc.named_params(), **disc.generators.named_params()}
    initial = {**disc0.named_params(), **gen0.named_params()}
    frozen = [k for k in trained
              if k.startswith(("gen_a_", "gen_s_", "disc_a/", "disc_s/"))]
    live = [k for k in trained
            if k.startswith(("gen_d_", "gen_act", "disc_d/"))]
    assert frozen and live
    for k in frozen:
        assert np.array_equal(trained[k], initial[k]), k
    assert any(not np.array_equal(trained[k], initial[k]) for k in live)


def test_training_rejects_mismatched_corpus(tiny_dae, tiny_corpus):
    import dataclasses
    bad = dataclasses.replace(tiny_corpus, ontology_hash="0" * 64)
    with pytest.raises(ConfigError):
        adv.train_adversarial(tiny_dae, bad, short_config())


def test_collapse_raises_named_stage(tiny_dae, tiny_corpus):
    # frozen discriminator stays at chance; cap hits with the probe pinned
    cfg = short_config(lr=0.0, d_lr=0.0, stage_max_g_steps=200, min_g_steps=0,
                      check_every_d_steps=2, stable_checks=3)
    with pytest.raises(TrainingError, match="stage 1"):
        adv.train_adversarial(tiny_dae, tiny_corpus, cfg)


def test_checkpoint_roundtrip(tmp_path, tiny_dae, tiny_corpus):
    disc = adv.train_adversarial(tiny_dae, tiny_corpus, short_config())
    path = tmp_path / "adv.ckpt"
    adv.save_adversarial(path, disc)
    back = adv.load_adversarial(path, TINY, dae=tiny_dae)
    for k, v in disc.named_params().items():
        assert np.array_equal(back.named_params()[k], v)
    assert back.generators is not None
    for k, v in disc.generators.named_params().items():
        assert np.array_equal(back.generators.named_params()[k], v)
    assert back.training_log == disc.training_log


def test_checkpoint_rejects_wrong_dae(tmp_path, tiny_dae, tiny_corpus):
    disc = adv.train_adversarial(tiny_dae, tiny_corpus, short_config())
    path = tmp_path / "adv.ckpt"
    adv.save_adversarial(path, disc)
    other = DaeModel(TINY, DaeConfig(latent_width=8), rng=np.random.default_rng(99))
    with pytest.raises(ConfigError):
        adv.load_adversarial(path, TINY, dae=other)


def test_checkpoint_rejects_wrong_ontology(tmp_path, tiny_dae, tiny_corpus):
    from trireward.ontology import micro_ontology
    disc = adv.train_adversarial(tiny_dae, tiny_corpus, short_config())
    path = tmp_path / "adv.ckpt"
    adv.save_adversarial(path, disc)
    with pytest.raises(ConfigError):
        adv.load_adversarial(path, micro_ontology())
