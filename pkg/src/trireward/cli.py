"""Pipeline orchestration: staged commands over hash-linked artifacts.

Each stage writes its outputs under the configured directory and records
them in `manifest.json` together with the hashes of the artifacts it
consumed.  A stage refuses to run on stale upstream artifacts and skips
itself when its own outputs are already current, so reruns are cheap and
byte-identical.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

from .adversarial import load_adversarial, save_adversarial, train_adversarial
from .agents import dqn_train, load_curve, ppo_train, save_agent, save_curve, wdqn_train
from .checkpoint import file_sha256
from .config import ExperimentConfig, load_config, resolve_ontology, save_config, with_overrides
from .dae import load_dae, save_dae, train_dae
from .dialogenv import DialogEnv, generate_expert_corpus, load_corpus, save_corpus
from .errors import ConfigError, ContractViolation, TrainingError
from .evalharness import (
    aggregate_runs,
    build_testset,
    classification_metrics,
    format_final_table,
    js_divergence,
    render_histograms_svg,
    score_histograms,
)
from .ontology import Ontology, build_assignment_matrix
from .shaping import make_estimator

MANIFEST_VERSION = 1

# ---------------------------------------------------------------------------
# manifest plumbing


def _manifest_path(out_dir):
    return os.path.join(out_dir, "manifest.json")


def _load_manifest(out_dir) -> dict:
    path = _manifest_path(out_dir)
    if not os.path.exists(path):
        return {"format_version": MANIFEST_VERSION, "stages": {}}
    with open(path) as f:
        m = json.load(f)
    if m.get("format_version") != MANIFEST_VERSION:
        raise ConfigError(f"{path}: unsupported manifest version")
    return m


def _save_manifest(out_dir, manifest: dict) -> None:
    with open(_manifest_path(out_dir), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _stage_sha(entry: dict) -> str:
    """Content identity of a stage: hash of its recorded file hashes."""
    blob = json.dumps(entry["files"], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _require(manifest: dict, stage: str, out_dir: str) -> dict:
    """Return the stage entry after verifying its files still match."""
    entry = manifest["stages"].get(stage)
    if entry is None:
        raise ConfigError(f"missing upstream stage {stage!r}, run it first")
    for rel, recorded in entry["files"].items():
        path = os.path.join(out_dir, rel)
        if not os.path.exists(path):
            raise ConfigError(f"stage {stage!r}: artifact {rel} is missing")
        found = file_sha256(path)
        if found != recorded:
            raise ConfigError(
                f"stage {stage!r}: artifact {rel} hash {found[:12]} does not match "
                f"recorded {recorded[:12]} (stale), rerun the stage")
    return entry


def _upstream_of(manifest: dict, names, out_dir) -> dict:
    return {n: _stage_sha(_require(manifest, n, out_dir)) for n in names}


def _up_to_date(manifest, stage, upstream, cfg_sha, out_dir) -> bool:
    entry = manifest["stages"].get(stage)
    if entry is None or entry.get("config_sha256") != cfg_sha or entry.get("upstream") != upstream:
        return False
    for rel, recorded in entry["files"].items():
        path = os.path.join(out_dir, rel)
        if not os.path.exists(path) or file_sha256(path) != recorded:
            return False
    return True


def _record(manifest, stage, rel_paths, upstream, cfg_sha, out_dir) -> None:
    manifest["stages"][stage] = {
        "files": {rel: file_sha256(os.path.join(out_dir, rel)) for rel in rel_paths},
        "upstream": upstream,
        "config_sha256": cfg_sha,
    }
    _save_manifest(out_dir, manifest)


def _prepare(cfg: ExperimentConfig):
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_config(os.path.join(cfg.out_dir, "config.json"), cfg)
    return _load_manifest(cfg.out_dir), cfg.content_hash()


def _say(stage, msg):
    print(f"{stage}: {msg}")


# ---------------------------------------------------------------------------
# stages


def cmd_gen_corpus(cfg: ExperimentConfig) -> None:
    """Generate the expert corpus and resolved action ontology."""
    manifest, cfg_sha = _prepare(cfg)
    if _up_to_date(manifest, "corpus", {}, cfg_sha, cfg.out_dir):
        _say("gen-corpus", "up to date")
        return
    onto = resolve_ontology(cfg)
    onto.save(os.path.join(cfg.out_dir, "ontology.json"))
    corpus = generate_expert_corpus(cfg.n_dialogs, seed=cfg.corpus_seed, ontology=onto)
    save_corpus(os.path.join(cfg.out_dir, "corpus.ckpt"), corpus)
    _record(manifest, "corpus", ["ontology.json", "corpus.ckpt"], {}, cfg_sha, cfg.out_dir)
    _say("gen-corpus", "wrote corpus.ckpt (%d pairs, %d dialogs, expert success %.3f)" % (
        len(corpus), corpus.n_dialogs, corpus.n_success / corpus.n_dialogs))


def _load_stage_corpus(cfg):
    onto = Ontology.load(os.path.join(cfg.out_dir, "ontology.json"))
    corpus = load_corpus(os.path.join(cfg.out_dir, "corpus.ckpt"))
    if corpus.ontology_hash != onto.content_hash():
        raise ConfigError("corpus and ontology artifacts disagree, regenerate the corpus")
    return onto, corpus


def cmd_train_dae(cfg: ExperimentConfig) -> None:
    """Train the disentangled state autoencoder on the expert corpus."""
    manifest, cfg_sha = _prepare(cfg)
    upstream = _upstream_of(manifest, ["corpus"], cfg.out_dir)
    if _up_to_date(manifest, "dae", upstream, cfg_sha, cfg.out_dir):
        _say("train-dae", "up to date")
        return
    onto, corpus = _load_stage_corpus(cfg)
    model = train_dae(corpus, cfg.dae, onto)
    save_dae(os.path.join(cfg.out_dir, "dae.ckpt"), model)
    _record(manifest, "dae", ["dae.ckpt"], upstream, cfg_sha, cfg.out_dir)
    _say("train-dae", "wrote dae.ckpt")


def cmd_train_gan(cfg: ExperimentConfig) -> None:
    """Train the per-level discriminators against the frozen autoencoder."""
    manifest, cfg_sha = _prepare(cfg)
    upstream = _upstream_of(manifest, ["corpus", "dae"], cfg.out_dir)
    if _up_to_date(manifest, "gan", upstream, cfg_sha, cfg.out_dir):
        _say("train-gan", "up to date")
        return
    onto, corpus = _load_stage_corpus(cfg)
    dae = load_dae(os.path.join(cfg.out_dir, "dae.ckpt"), onto)
    disc = train_adversarial(dae, corpus, cfg.gan)
    save_adversarial(os.path.join(cfg.out_dir, "gan.ckpt"), disc)
    _record(manifest, "gan", ["gan.ckpt"], upstream, cfg_sha, cfg.out_dir)
    _say("train-gan", "wrote gan.ckpt")


def _agent_cells(cfg):
    for kind in cfg.agents:
        for combo in cfg.combinations:
            for seed in cfg.seeds:
                yield kind, combo, int(seed)


def _cell_name(kind, combo, seed) -> str:
    return f"{kind}_{combo}_s{seed}"


def cmd_train_agent(cfg: ExperimentConfig) -> None:
    """Train every configured (agent, reward-variant, seed) cell."""
    manifest, cfg_sha = _prepare(cfg)
    need_est = any(c != "vanilla" for c in cfg.combinations)
    names = ["corpus"] + (["dae", "gan"] if need_est else [])
    upstream = _upstream_of(manifest, names, cfg.out_dir)
    onto, corpus = _load_stage_corpus(cfg)
    dae = disc = None
    if need_est:
        dae = load_dae(os.path.join(cfg.out_dir, "dae.ckpt"), onto)
        disc = load_adversarial(os.path.join(cfg.out_dir, "gan.ckpt"), onto, dae)
    os.makedirs(os.path.join(cfg.out_dir, "agents"), exist_ok=True)
    os.makedirs(os.path.join(cfg.out_dir, "curves"), exist_ok=True)
    factory = lambda: DialogEnv(onto)
    for kind, combo, seed in _agent_cells(cfg):
        cell = _cell_name(kind, combo, seed)
        stage = f"agent:{cell}"
        if _up_to_date(manifest, stage, upstream, cfg_sha, cfg.out_dir):
            _say("train-agent", f"{cell} up to date")
            continue
        est = None
        if combo != "vanilla":
            est = make_estimator(dae, disc, cfg.tau, cfg.b, cfg.alpha, combo)
        t0 = time.time()
        if kind == "dqn":
            agent, curve = dqn_train(factory, est, replace(cfg.dqn, seed=seed))
        elif kind == "wdqn":
            agent, curve = wdqn_train(factory, est, corpus, replace(cfg.dqn, seed=seed))
        else:
            agent, curve = ppo_train(factory, est, corpus, replace(cfg.ppo, seed=seed))
        rels = [f"agents/{cell}.ckpt", f"curves/{cell}.csv"]
        save_agent(os.path.join(cfg.out_dir, rels[0]), agent)
        save_curve(os.path.join(cfg.out_dir, rels[1]), curve)
        _record(manifest, stage, rels, upstream, cfg_sha, cfg.out_dir)
        _say("train-agent", "%s final=%.3f (%.0fs)" % (cell, curve[-1]["success_rate"], time.time() - t0))


METRIC_HEADER = "variant,accuracy,precision,recall,f1,bias_ratio,jsd"


def _write_hist_csv(path, real, fake) -> None:
    with open(path, "w") as f:
        f.write("bin_lo,bin_hi,real,fake\n")
        for i in range(len(real.counts)):
            f.write("%.6f,%.6f,%d,%d\n" % (real.edges[i], real.edges[i + 1],
                                           real.counts[i], fake.counts[i]))


def cmd_eval(cfg: ExperimentConfig) -> None:
    """Classifier analysis of the reward model plus multi-seed curve tables."""
    manifest, cfg_sha = _prepare(cfg)
    cells = [_cell_name(*c) for c in _agent_cells(cfg)]
    names = [f"agent:{c}" for c in cells]
    classify = resolve_ontology(cfg).n_domains >= 2
    if classify:
        names = ["corpus", "dae", "gan"] + names
    else:
        names = ["corpus"] + names
    upstream = _upstream_of(manifest, names, cfg.out_dir)
    out = os.path.join(cfg.out_dir, "eval")
    os.makedirs(out, exist_ok=True)
    rels = []

    # reward-model classification needs wrong-domain negatives, which a
    # single-domain ontology cannot provide; curve tables still apply
    metric_lines = [METRIC_HEADER]
    if classify:
        onto, _ = _load_stage_corpus(cfg)
        dae = load_dae(os.path.join(cfg.out_dir, "dae.ckpt"), onto)
        disc = load_adversarial(os.path.join(cfg.out_dir, "gan.ckpt"), onto, dae)
        held = generate_expert_corpus(cfg.testset_dialogs, seed=cfg.testset_seed, ontology=onto)
        ts = build_testset(held, build_assignment_matrix(onto), cfg.testset_seed)
        for combo in ("SeqAvg", "SeqPrd"):
            est = make_estimator(dae, disc, cfg.tau, cfg.b, cfg.alpha, combo)
            m = classification_metrics(est, ts, cfg.threshold)
            real, fake = score_histograms(est, ts, cfg.n_bins)
            jsd = js_divergence(real, fake)
            metric_lines.append("%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f" % (combo, *m, jsd))
            _write_hist_csv(os.path.join(out, f"hist_{combo}.csv"), real, fake)
            render_histograms_svg(real, fake, os.path.join(out, f"hist_{combo}.svg"),
                                  title=f"{combo} reward scores")
            rels += [f"eval/hist_{combo}.csv", f"eval/hist_{combo}.svg"]
        est = make_estimator(dae, disc, cfg.tau, cfg.b, cfg.alpha, "SeqPrd")
        for level in ("domain", "act", "slot"):
            m = classification_metrics(est, ts, cfg.threshold, level=level)
            metric_lines.append("level_%s,%.6f,%.6f,%.6f,%.6f,%.6f," % (level, *m))
    with open(os.path.join(out, "metrics.csv"), "w") as f:
        f.write("\n".join(metric_lines) + "\n")
    rels.append("eval/metrics.csv")
    if not classify:
        _say("eval", "single-domain ontology, classifier analysis skipped")

    summaries = {}
    for kind, combo in dict.fromkeys((k, c) for k, c, _ in _agent_cells(cfg)):
        curves = [load_curve(os.path.join(cfg.out_dir, f"curves/{_cell_name(kind, combo, s)}.csv"))
                  for s in cfg.seeds]
        variant = f"{kind}_{combo}"
        summary = aggregate_runs(curves)
        summaries[variant] = summary
        rel = f"eval/summary_{variant}.csv"
        with open(os.path.join(cfg.out_dir, rel), "w") as f:
            f.write("frames,srate_mean,srate_std,rscore_mean,rscore_std,aturn_mean,aturn_std\n")
            for i, fr in enumerate(summary.frames):
                f.write("%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n" % (
                    fr,
                    summary.mean["success_rate"][i], summary.std["success_rate"][i],
                    summary.mean["reward_score"][i], summary.std["reward_score"][i],
                    summary.mean["avg_turn"][i], summary.std["avg_turn"][i]))
        rels.append(rel)
    with open(os.path.join(cfg.out_dir, "eval/final_table.csv"), "w") as f:
        f.write(format_final_table(summaries))
    rels.append("eval/final_table.csv")
    _record(manifest, "eval", rels, upstream, cfg_sha, cfg.out_dir)
    _say("eval", f"wrote {len(rels)} files under eval/")


def _read_text(path) -> str:
    with open(path) as f:
        return f.read()


def _markdown_table(csv_text: str) -> str:
    rows = [line.split(",") for line in csv_text.strip().split("\n")]
    out = ["| " + " | ".join(rows[0]) + " |",
           "|" + "---|" * len(rows[0])]
    out += ["| " + " | ".join(r) + " |" for r in rows[1:]]
    return "\n".join(out)


def cmd_reproduce(cfg: ExperimentConfig) -> None:
    """Run every stage in order and write a summary report."""
    for stage, fn in (("gen-corpus", cmd_gen_corpus), ("train-dae", cmd_train_dae),
                      ("train-gan", cmd_train_gan), ("train-agent", cmd_train_agent),
                      ("eval", cmd_eval)):
        try:
            fn(cfg)
        except (ConfigError, ContractViolation, TrainingError) as e:
            raise type(e)(f"stage {stage}: {e}") from e
    manifest = _load_manifest(cfg.out_dir)
    onto = resolve_ontology(cfg)
    corpus = load_corpus(os.path.join(cfg.out_dir, "corpus.ckpt"))
    cells = [_cell_name(*c) for c in _agent_cells(cfg)]
    lines = [
        "# Reproduction report",
        "",
        f"- config hash: `{cfg.content_hash()}`",
        f"- ontology: {cfg.ontology} ({onto.n_domains}x{onto.n_acts}x{onto.n_slots}, "
        f"{onto.action_dim} actions), hash `{onto.content_hash()}`",
        "- expert corpus: %d pairs over %d dialogs, expert success %.3f" % (
            len(corpus), corpus.n_dialogs, corpus.n_success / corpus.n_dialogs),
        f"- agent variants: {len(cells)} ({len(cfg.agents)} agents x "
        f"{len(cfg.combinations)} reward variants x {len(cfg.seeds)} seeds)",
        "",
        "## Final performance (mean over seeds)",
        "",
        _markdown_table(_read_text(os.path.join(cfg.out_dir, "eval/final_table.csv"))),
        "",
        "## Reward-model classification",
        "",
    ]
    metrics = _read_text(os.path.join(cfg.out_dir, "eval/metrics.csv"))
    if metrics.strip() == METRIC_HEADER:
        lines.append("Skipped: the single-domain ontology admits no wrong-domain negatives.")
    else:
        lines.append(_markdown_table(metrics))
    lines += ["", "## Artifacts", "", "| stage | file | sha256 |", "|---|---|---|"]
    for stage in sorted(manifest["stages"]):
        for rel, sha in sorted(manifest["stages"][stage]["files"].items()):
            lines.append(f"| {stage} | {rel} | `{sha}` |")
    with open(os.path.join(cfg.out_dir, "report.md"), "w") as f:
        f.write("\n".join(lines) + "\n")
    _say("reproduce", f"report at {os.path.join(cfg.out_dir, 'report.md')}")


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-dae": cmd_train_dae,
    "train-gan": cmd_train_gan,
    "train-agent": cmd_train_agent,
    "eval": cmd_eval,
    "reproduce": cmd_reproduce,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="trireward",
        description="Multi-level adversarial reward shaping for dialog RL.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, fn in COMMANDS.items():
        s = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        s.add_argument("--config", metavar="PATH", help="JSON experiment config file")
        s.add_argument("--seed", type=int, metavar="N",
                       help="train only this seed (overrides the config seed list)")
        s.add_argument("--out", metavar="DIR", help="output directory override")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = with_overrides(cfg, seed=args.seed, out=args.out)
        COMMANDS[args.command](cfg)
        return 0
    except (ConfigError, ContractViolation, TrainingError) as e:
        print(f"{args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
