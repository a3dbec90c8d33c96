"""Reward-model analysis and multi-seed result aggregation.

Builds constructed-negative test sets from expert pairs, scores them with a
trained estimator as a binary classifier, renders score histograms, measures
the divergence between real and fake score distributions, and averages
learning curves across seeds.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import rel_entr

from .errors import ConfigError, ContractViolation
from .ontology import AssignmentMatrix
from .shaping import RewardEstimator, estimate, score_levels

__all__ = [
    "ClassifierTestSet",
    "ScoreHistogram",
    "Metrics",
    "build_testset",
    "confusion_counts",
    "classification_metrics",
    "score_histograms",
    "render_histograms_svg",
    "js_divergence",
    "RunSummary",
    "aggregate_runs",
    "format_final_table",
]

LEVEL_INDEX = {"domain": 0, "act": 1, "slot": 2}


@dataclass(frozen=True)
class ClassifierTestSet:
    """Balanced binary test set over a shared pool of expert states.

    Positives are the expert (state, action) pairs.  Negatives reuse the
    same states with a uniformly random valid action from a different
    domain, so only the domain assignment is wrong while act and slot
    keep their natural marginals.
    """

    states: np.ndarray        # (N, state_dim)
    pos_actions: np.ndarray   # (N,) int64, expert actions
    neg_actions: np.ndarray   # (N,) int64, wrong-domain actions
    ontology_hash: str
    seed: int

    def __post_init__(self):
        if len(self.pos_actions) != len(self.states) or len(self.neg_actions) != len(self.states):
            raise ContractViolation("positive and negative sides must be balanced")

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class ScoreHistogram:
    """Binned score counts on [0, 1]."""

    edges: np.ndarray   # (n_bins + 1,) strictly increasing
    counts: np.ndarray  # (n_bins,) int64

    def __post_init__(self):
        if np.any(np.diff(self.edges) <= 0):
            raise ContractViolation("bin edges must be strictly increasing")
        if len(self.counts) != len(self.edges) - 1:
            raise ContractViolation("counts length must match bin count")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def mass(self) -> np.ndarray:
        """Normalized bin probabilities."""
        return self.counts / max(self.total, 1)


def build_testset(corpus, m: AssignmentMatrix, seed: int) -> ClassifierTestSet:
    """Pair every expert state with its action and one wrong-domain action.

    Deterministic per seed.  A corpus whose actions all live in one domain
    admits no domain-violating negatives and is rejected.
    """
    actions = np.asarray(corpus.actions, dtype=np.int64)
    domains = m.rows[actions, 0]
    if len(np.unique(domains)) < 2:
        raise ConfigError("corpus spans a single domain, no valid negatives exist")
    # candidate pool per domain: every valid action outside that domain
    others = [np.flatnonzero(m.rows[:, 0] != d) for d in range(m.n_domains)]
    rng = np.random.default_rng(seed)
    neg = np.empty(len(actions), dtype=np.int64)
    for i, d in enumerate(domains):
        pool = others[d]
        neg[i] = pool[rng.integers(len(pool))]
    return ClassifierTestSet(
        states=np.asarray(corpus.states, dtype=np.float64),
        pos_actions=actions,
        neg_actions=neg,
        ontology_hash=corpus.ontology_hash,
        seed=int(seed),
    )


def _scores(est: RewardEstimator, states, actions, level: Optional[str]):
    if level is None:
        return np.asarray(estimate(est, states, actions), dtype=np.float64)
    if level not in LEVEL_INDEX:
        raise ConfigError(f"unknown level {level!r}, expected one of {sorted(LEVEL_INDEX)}")
    ys = score_levels(est, states, actions)
    return np.asarray(ys[LEVEL_INDEX[level]], dtype=np.float64)


def _check_testset(est: RewardEstimator, ts: ClassifierTestSet) -> None:
    if ts.ontology_hash != est.dae.ontology.content_hash():
        raise ConfigError("test set and estimator use different ontologies")


def confusion_counts(est: RewardEstimator, ts: ClassifierTestSet,
                     threshold: float = 0.5, level: Optional[str] = None):
    """(tp, fn, tn, fp) at the given decision threshold.

    Scores >= threshold predict positive, so exact ties side with the
    positive class.  `level` swaps the combined estimate for one raw
    per-level discriminator score.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    _check_testset(est, ts)
    pos = _scores(est, ts.states, ts.pos_actions, level) >= threshold
    negp = _scores(est, ts.states, ts.neg_actions, level) >= threshold
    tp = int(pos.sum())
    fp = int(negp.sum())
    return tp, len(ts) - tp, len(ts) - fp, fp


class Metrics:
    """Classification summary; bias_ratio is true negatives over true positives."""

    __slots__ = ("accuracy", "precision", "recall", "f1", "bias_ratio")

    def __init__(self, accuracy, precision, recall, f1, bias_ratio):
        self.accuracy = accuracy
        self.precision = precision
        self.recall = recall
        self.f1 = f1
        self.bias_ratio = bias_ratio

    def __iter__(self):
        yield from (self.accuracy, self.precision, self.recall, self.f1, self.bias_ratio)

    def __repr__(self):
        return ("Metrics(accuracy={:.4f}, precision={:.4f}, recall={:.4f}, "
                "f1={:.4f}, bias_ratio={:.4f})").format(*self)


def classification_metrics(est: RewardEstimator, ts: ClassifierTestSet,
                           threshold: float = 0.5, level: Optional[str] = None) -> Metrics:
    tp, fn, tn, fp = confusion_counts(est, ts, threshold, level)
    total = tp + fn + tn + fp
    acc = (tp + tn) / total
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    bias = tn / tp if tp else float("inf")
    return Metrics(acc, prec, rec, f1, bias)


def score_histograms(est: RewardEstimator, ts: ClassifierTestSet,
                     n_bins: int = 100) -> tuple[ScoreHistogram, ScoreHistogram]:
    """Histogram the combined scores of real and fake pairs on [0, 1]."""
    if n_bins < 2:
        raise ConfigError(f"need at least 2 bins, got {n_bins}")
    _check_testset(est, ts)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    real = np.histogram(_scores(est, ts.states, ts.pos_actions, None), bins=edges)[0]
    fake = np.histogram(_scores(est, ts.states, ts.neg_actions, None), bins=edges)[0]
    return ScoreHistogram(edges, real), ScoreHistogram(edges, fake)


def render_histograms_svg(real: ScoreHistogram, fake: ScoreHistogram,
                          path, title: str = "reward score distribution") -> None:
    """Write an overlaid real/fake histogram as a static SVG.

    Output is byte-stable for identical inputs: fixed hash salt, no
    timestamp metadata.
    """
    import matplotlib
    matplotlib.use("svg", force=False)
    import matplotlib.pyplot as plt

    if real.edges.shape != fake.edges.shape or not np.array_equal(real.edges, fake.edges):
        raise ContractViolation("histograms use different bin edges")
    with plt.rc_context({"svg.hashsalt": "trireward"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        centers = (real.edges[:-1] + real.edges[1:]) / 2
        width = np.diff(real.edges)
        ax.bar(centers, real.counts, width=width, alpha=0.6, label="real", color="#2b6cb0")
        ax.bar(centers, fake.counts, width=width, alpha=0.6, label="fake", color="#c05621")
        ax.set_xlabel("reward score")
        ax.set_ylabel("count")
        ax.set_title(title)
        ax.legend()
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)


def js_divergence(real: ScoreHistogram, fake: ScoreHistogram) -> float:
    """Jensen-Shannon divergence in nats between two histograms.

    Histograms are smoothed by 1e-10 per bin and renormalized before the
    standard formula, so the value is finite and bounded by ln 2 even for
    disjoint supports.
    """
    if real.edges.shape != fake.edges.shape or not np.array_equal(real.edges, fake.edges):
        raise ContractViolation("histograms use different bin edges")
    eps = 1e-10
    p = real.counts.astype(np.float64) + eps
    q = fake.counts.astype(np.float64) + eps
    p /= p.sum()
    q /= q.sum()
    mid = (p + q) / 2
    return float(0.5 * rel_entr(p, mid).sum() + 0.5 * rel_entr(q, mid).sum())


# ---------------------------------------------------------------------------
# multi-seed aggregation

CURVE_METRICS = ("success_rate", "reward_score", "avg_turn")
TABLE_LABELS = {"success_rate": "SRate", "reward_score": "RScore", "avg_turn": "ATurn"}


@dataclass(frozen=True)
class RunSummary:
    """Per-checkpoint mean and population std across runs."""

    frames: np.ndarray            # (K,)
    mean: dict                    # metric -> (K,)
    std: dict                     # metric -> (K,)
    n_runs: int

    def final_table(self) -> dict:
        """Final-checkpoint row: short label -> (mean, std)."""
        return {
            TABLE_LABELS[k]: (float(self.mean[k][-1]), float(self.std[k][-1]))
            for k in CURVE_METRICS
        }


def aggregate_runs(curves: list) -> RunSummary:
    """Average learning curves that share a checkpoint grid.

    Each curve is a list of row dicts as produced by training (frames,
    success_rate, reward_score, avg_turn, seed).  The seed column is
    ignored; it differs across runs by design.
    """
    if not curves:
        raise ContractViolation("need at least one curve")
    frames = np.array([row["frames"] for row in curves[0]], dtype=np.int64)
    for c in curves[1:]:
        f = np.array([row["frames"] for row in c], dtype=np.int64)
        if f.shape != frames.shape or not np.array_equal(f, frames):
            raise ContractViolation("curves use different checkpoint grids")
    mean, std = {}, {}
    for k in CURVE_METRICS:
        stack = np.array([[row[k] for row in c] for c in curves], dtype=np.float64)
        mean[k] = stack.mean(axis=0)
        std[k] = stack.std(axis=0)  # population std
    return RunSummary(frames=frames, mean=mean, std=std, n_runs=len(curves))


def format_final_table(summaries: dict) -> str:
    """CSV table of final-checkpoint metrics, one row per variant."""
    lines = ["variant,SRate,SRate_std,RScore,RScore_std,ATurn,ATurn_std"]
    for name, summary in summaries.items():
        t = summary.final_table()
        lines.append("%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f" % (
            name,
            t["SRate"][0], t["SRate"][1],
            t["RScore"][0], t["RScore"][1],
            t["ATurn"][0], t["ATurn"][1],
        ))
    return "\n".join(lines) + "\n"
