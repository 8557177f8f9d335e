"""Episodic evaluation campaigns, paired variant comparison, theory
verification sweeps, and embedding export.

Campaign results are deterministic for a fixed (source, config, episode
count, base seed): episode i always uses seed base_seed + i, outcomes are
aggregated in episode order, and reports carry a config echo sufficient to
reproduce the run. Worker count affects wall time only.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .engine import (
    EpisodeFailure,
    TimConfig,
    VARIANTS,
    _pipeline,
    predict_features,
    run_ft_tim,
    transform_active,
)
from .features import (
    Episode,
    FeatureBank,
    class_separation_ratio,
    load_feature_bank,
    sample_episode,
    SyntheticTaskSpec,
    generate_synthetic_episode,
    write_feature_bank,
)

# Standard synthetic suite: moderate noise over mostly irrelevant dimensions,
# baseline accuracy lands mid-range so transform effects are measurable.
STANDARD_SUITE = dict(
    num_classes=5,
    dim=64,
    relevant_dims=10,
    intra_class_stddev=0.5,
    inter_class_separation=3.0,
    queries_per_class=15,
)


@dataclass(frozen=True)
class SyntheticSource:
    """Episode factory backed by the synthetic generator."""

    num_classes: int = 5
    dim: int = 64
    relevant_dims: int = 10
    intra_class_stddev: float = 0.5
    inter_class_separation: float = 3.0
    queries_per_class: int = 15
    heldout_per_class: int = 0

    def episode(self, seed: int) -> Episode:
        return generate_synthetic_episode(
            SyntheticTaskSpec(
                num_classes=self.num_classes,
                dim=self.dim,
                intra_class_stddev=self.intra_class_stddev,
                inter_class_separation=self.inter_class_separation,
                relevant_dims=self.relevant_dims,
                queries_per_class=self.queries_per_class,
                heldout_per_class=self.heldout_per_class,
                seed=seed,
            )
        )

    def echo(self) -> dict:
        return {
            "kind": "synthetic",
            "num_classes": self.num_classes,
            "dim": self.dim,
            "relevant_dims": self.relevant_dims,
            "intra_class_stddev": self.intra_class_stddev,
            "inter_class_separation": self.inter_class_separation,
            "queries_per_class": self.queries_per_class,
            "heldout_per_class": self.heldout_per_class,
        }


_BANK_CACHE: dict[str, FeatureBank] = {}


def _cached_bank(path: str) -> FeatureBank:
    bank = _BANK_CACHE.get(path)
    if bank is None:
        bank = load_feature_bank(path)
        _BANK_CACHE[path] = bank
    return bank


@dataclass(frozen=True)
class BankSource:
    """Episode factory sampling from an on-disk feature bank."""

    path: str
    num_classes: int = 5
    queries_per_class: int = 15
    heldout_per_class: int = 0

    def episode(self, seed: int) -> Episode:
        return sample_episode(
            _cached_bank(self.path),
            num_classes=self.num_classes,
            queries_per_class=self.queries_per_class,
            heldout_per_class=self.heldout_per_class,
            seed=seed,
        )

    def echo(self) -> dict:
        return {
            "kind": "bank",
            "path": self.path,
            "num_classes": self.num_classes,
            "queries_per_class": self.queries_per_class,
            "heldout_per_class": self.heldout_per_class,
        }


@dataclass
class EpisodeOutcome:
    seed: int
    accuracy: float | None
    heldout_accuracy: float | None
    iterations_run: int
    failure_flag: bool
    error: str = ""


def _run_episode(args) -> EpisodeOutcome:
    source, config, seed = args
    episode = source.episode(seed)
    try:
        result = run_ft_tim(episode, config)
    except EpisodeFailure as exc:
        return EpisodeOutcome(seed, None, None, exc.iteration, True, str(exc))
    accuracy = float(np.mean(result.predictions == episode.query_hidden_labels))
    heldout_accuracy = None
    if episode.heldout_vectors is not None:
        preds, _ = predict_features(episode.heldout_vectors, result.state, config)
        heldout_accuracy = float(np.mean(preds == episode.heldout_hidden_labels))
    return EpisodeOutcome(seed, accuracy, heldout_accuracy, result.state.iter, False)


def run_episodes(
    source,
    config: TimConfig,
    episodes: int,
    base_seed: int,
    workers: int = 1,
) -> list[EpisodeOutcome]:
    """Run episodes base_seed .. base_seed+episodes-1, in order."""
    jobs = [(source, config, base_seed + i) for i in range(episodes)]
    if workers <= 1:
        return [_run_episode(j) for j in jobs]
    chunk = max(1, episodes // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_episode, jobs, chunksize=chunk))


@dataclass
class EvalReport:
    variant: str
    episodes: int
    mean_accuracy: float | None
    ci95_halfwidth: float | None
    per_episode: list[EpisodeOutcome]
    config_echo: dict
    wall_time_s: float

    @property
    def failures(self) -> int:
        return sum(1 for o in self.per_episode if o.failure_flag)

    def to_json_dict(self) -> dict:
        return {
            "variant": self.variant,
            "episodes": self.episodes,
            "mean_accuracy": self.mean_accuracy,
            "ci95_halfwidth": self.ci95_halfwidth,
            "per_episode": [
                {
                    "seed": o.seed,
                    "accuracy": o.accuracy,
                    "iterations_run": o.iterations_run,
                    "failure_flag": o.failure_flag,
                }
                for o in self.per_episode
            ],
            "config_echo": self.config_echo,
            "wall_time_s": self.wall_time_s,
        }

    def table(self) -> str:
        mean = "n/a" if self.mean_accuracy is None else f"{self.mean_accuracy:.4f}"
        ci = "n/a" if self.ci95_halfwidth is None else f"{self.ci95_halfwidth:.4f}"
        lines = [
            f"{'variant':<18}{'episodes':>9}{'mean_acc':>10}{'ci95':>8}{'failures':>10}",
            f"{self.variant:<18}{self.episodes:>9}{mean:>10}{ci:>8}{self.failures:>10}",
        ]
        return "\n".join(lines)


def _mean_ci(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(arr))
    if arr.size < 30:
        return mean, None
    halfwidth = 1.96 * float(np.std(arr, ddof=1)) / float(np.sqrt(arr.size))
    return mean, halfwidth


def _config_echo(source, config: TimConfig, episodes: int, base_seed: int,
                 protocol: str) -> dict:
    return {
        "source": source.echo(),
        "protocol": protocol,
        "episodes": episodes,
        "base_seed": base_seed,
        "tim": config.as_dict(),
    }


def evaluate(
    source,
    config: TimConfig,
    episodes: int,
    base_seed: int,
    workers: int = 1,
) -> EvalReport:
    """Run a campaign and aggregate accuracies.

    When the source produces held-out splits the report scores held-out
    accuracy (the semi-supervised protocol); otherwise query accuracy.
    Failed episodes are excluded from the mean, flagged per episode.
    """
    start = time.perf_counter()
    outcomes = run_episodes(source, config, episodes, base_seed, workers)
    wall = time.perf_counter() - start
    semi = getattr(source, "heldout_per_class", 0) > 0
    scored = [
        (o.heldout_accuracy if semi else o.accuracy)
        for o in outcomes
        if not o.failure_flag
    ]
    per_episode = outcomes
    if semi:
        per_episode = [
            dataclasses.replace(o, accuracy=o.heldout_accuracy) for o in outcomes
        ]
    mean, ci = _mean_ci([a for a in scored if a is not None])
    return EvalReport(
        variant=config.variant,
        episodes=episodes,
        mean_accuracy=mean,
        ci95_halfwidth=ci,
        per_episode=per_episode,
        config_echo=_config_echo(
            source, config, episodes, base_seed,
            "semi_supervised" if semi else "standard",
        ),
        wall_time_s=wall,
    )


@dataclass
class PairedStats:
    pair: str
    n: int
    mean_diff: float
    ci95_halfwidth: float | None
    wins: int
    losses: int
    ties: int


@dataclass
class CompareReport:
    episodes: int
    reports: dict[str, EvalReport]
    paired: list[PairedStats]

    def to_json_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "variants": {k: v.to_json_dict() for k, v in self.reports.items()},
            "paired": [
                {
                    "pair": p.pair,
                    "n": p.n,
                    "mean_diff": p.mean_diff,
                    "ci95_halfwidth": p.ci95_halfwidth,
                    "wins": p.wins,
                    "losses": p.losses,
                    "ties": p.ties,
                }
                for p in self.paired
            ],
        }

    def table(self) -> str:
        lines = [f"{'variant':<20}{'mean_acc':>10}{'ci95':>8}{'failures':>10}"]
        for name, rep in self.reports.items():
            mean = "n/a" if rep.mean_accuracy is None else f"{rep.mean_accuracy:.4f}"
            ci = "n/a" if rep.ci95_halfwidth is None else f"{rep.ci95_halfwidth:.4f}"
            lines.append(f"{name:<20}{mean:>10}{ci:>8}{rep.failures:>10}")
        lines.append("")
        lines.append(f"{'pair':<34}{'mean_diff':>10}{'ci95':>8}"
                     f"{'wins':>6}{'losses':>8}{'ties':>6}")
        for p in self.paired:
            ci = "n/a" if p.ci95_halfwidth is None else f"{p.ci95_halfwidth:.4f}"
            lines.append(
                f"{p.pair:<34}{p.mean_diff:>+10.4f}{ci:>8}"
                f"{p.wins:>6}{p.losses:>8}{p.ties:>6}"
            )
        return "\n".join(lines)


def _paired_stats(name_a, rep_a, name_b, rep_b) -> PairedStats:
    diffs = []
    wins = losses = ties = 0
    for oa, ob in zip(rep_a.per_episode, rep_b.per_episode):
        if oa.seed != ob.seed:
            raise RuntimeError("paired comparison lost seed alignment")
        if oa.failure_flag or ob.failure_flag:
            continue
        d = oa.accuracy - ob.accuracy
        diffs.append(d)
        if d > 0:
            wins += 1
        elif d < 0:
            losses += 1
        else:
            ties += 1
    mean, ci = _mean_ci(diffs)
    return PairedStats(
        pair=f"{name_a}-{name_b}",
        n=len(diffs),
        mean_diff=mean if mean is not None else float("nan"),
        ci95_halfwidth=ci,
        wins=wins,
        losses=losses,
        ties=ties,
    )


def compare(
    source,
    config: TimConfig,
    episodes: int,
    base_seed: int,
    workers: int = 1,
    variants: tuple[str, ...] = VARIANTS,
) -> CompareReport:
    """Evaluate several variants on identical episodes (shared seeds) and
    report per-variant means plus paired differences against ft_tim."""
    reports: dict[str, EvalReport] = {}
    for variant in variants:
        cfg = dataclasses.replace(config, variant=variant)
        reports[variant] = evaluate(source, cfg, episodes, base_seed, workers)
    seeds = [[o.seed for o in r.per_episode] for r in reports.values()]
    if any(s != seeds[0] for s in seeds[1:]):
        raise RuntimeError("variants were not run on identical seeds")
    paired = []
    if "ft_tim" in reports:
        for other in variants:
            if other == "ft_tim":
                continue
            paired.append(_paired_stats("ft_tim", reports["ft_tim"],
                                        other, reports[other]))
    return CompareReport(episodes=episodes, reports=reports, paired=paired)


# ---------------------------------------------------------------------------
# theory verification harness
# ---------------------------------------------------------------------------

@dataclass
class PropertyResult:
    name: str
    passed: int
    total: int
    ok: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name}: {self.passed}/{self.total}{extra}"


def _brute_force_best_j(F: np.ndarray, num_classes: int) -> float:
    best = np.inf
    n = F.shape[0]
    for labels in itertools.product(range(num_classes), repeat=n):
        labels = np.asarray(labels)
        j = 0.0
        for c in range(num_classes):
            members = F[labels == c]
            if members.shape[0] == 0:
                continue
            mu = members.mean(axis=0)
            j += float(np.sum((members - mu) ** 2))
        if j < best:
            best = j
    return best


def run_theory_suite(
    decomposition_instances: int = 1000,
    kkt_instances: int = 100,
    lloyd_instances: int = 200,
    mm_instances: int = 500,
    sweep_instances: int = 100,
    base_seed: int = 0,
) -> list[PropertyResult]:
    """Numeric verification sweeps over seeded random instances.

    Covers the entropy decomposition identity, the closed-form soft
    assignments against a projected-gradient oracle, Lloyd monotonicity plus
    a brute-force micro-instance oracle, majorize-minimize descent at small
    temperature, and gap shrinkage across a temperature sweep.
    """
    results: list[PropertyResult] = []

    passed = 0
    worst = 0.0
    for i in range(decomposition_instances):
        episode, W, theta = analysis.make_random_instance(base_seed + i)
        r = analysis.decomposition_residual(episode, W, theta, tau=15.0)
        worst = max(worst, r)
        if r <= 1e-10:
            passed += 1
    results.append(PropertyResult(
        "decomposition identity (rel residual <= 1e-10)",
        passed, decomposition_instances,
        passed == decomposition_instances, f"worst {worst:.2e}",
    ))

    passed = 0
    worst = 0.0
    for i in range(kkt_instances):
        episode, W, theta = analysis.make_random_instance(base_seed + 10_000 + i)
        F = analysis.transformed_query_features(episode, W)
        d2 = analysis.squared_distances(F, theta)
        closed = analysis.kkt_soft_assignments(episode, W, theta, tau=0.01).rows
        numeric = analysis.minimize_soft_assignment_rows(d2, tau=0.01)
        dev = float(np.max(np.abs(closed - numeric)))
        worst = max(worst, dev)
        if dev <= 1e-6:
            passed += 1
    results.append(PropertyResult(
        "closed-form soft assignments vs projected-gradient oracle (<= 1e-6)",
        passed, kkt_instances, passed == kkt_instances, f"worst {worst:.2e}",
    ))

    passed = 0
    for i in range(lloyd_instances):
        # micro instances are well separated so the support-derived start
        # lands in the optimum's Lloyd basin (loose clouds have true local
        # minima unreachable by any single-start Lloyd run)
        episode, W, _ = analysis.make_random_instance(
            base_seed + 20_000 + i, num_classes=2, queries_per_class=2,
            dim=2, separation=3.0, stddev=0.3,
        )
        result = analysis.alternate_kmeans(
            episode, max_rounds=50, w_steps_per_round=0, init_W=W,
        )
        F = analysis.transformed_query_features(episode, result.W)
        target = _brute_force_best_j(F, 2)
        final_j = result.trace[-1][1]
        values = [v for _, v in result.trace]
        monotone = all(values[k + 1] <= values[k] + 1e-9 for k in range(len(values) - 1))
        if monotone and abs(final_j - target) <= 1e-9 * max(1.0, target):
            passed += 1
    results.append(PropertyResult(
        "Lloyd monotone + brute-force optimum on micro instances",
        passed, lloyd_instances, passed == lloyd_instances,
    ))

    passed = 0
    for i in range(mm_instances):
        episode, W, theta = analysis.make_random_instance(base_seed + 30_000 + i)
        h0 = analysis.clustering_term(episode, W, theta, tau=1e-3)
        trace = analysis.mm_iteration(episode, W, theta, tau=1e-3, rounds=5)
        series = [h0] + [h for h, _ in trace]
        if all(series[k + 1] <= series[k] + 1e-6 for k in range(len(series) - 1)):
            passed += 1
    results.append(PropertyResult(
        "majorize-minimize descent at tau=1e-3 (>= 99% of instances)",
        passed, mm_instances, passed >= int(np.ceil(0.99 * mm_instances)),
    ))

    passed = 0
    for i in range(sweep_instances):
        episode, W, theta = analysis.make_random_instance(base_seed + 40_000 + i)
        q = analysis.kkt_soft_assignments(episode, W, theta, tau=1.0)
        check = analysis.bound_check(episode, W, theta, tau=1.0, assignments=q)
        if check.tight_at_kkt:
            passed += 1
    results.append(PropertyResult(
        "gap at closed-form assignments shrinks across tau sweep (>= 95%)",
        passed, sweep_instances, passed >= int(np.ceil(0.95 * sweep_instances)),
    ))

    return results


def write_gap_trace(
    path: str | Path,
    instances: int = 100,
    taus: tuple[float, ...] = (1.0, 0.1, 0.01, 0.001),
    base_seed: int = 0,
) -> None:
    """Emit the per-instance, per-temperature gap table as CSV."""
    lines = ["instance_id,tau,H,bound,gap"]
    for i in range(instances):
        episode, W, theta = analysis.make_random_instance(base_seed + i)
        for tau in taus:
            q = analysis.kkt_soft_assignments(episode, W, theta, tau)
            check = analysis.bound_check(episode, W, theta, tau, q)
            lines.append(
                f"{i},{repr(float(tau))},{repr(check.H_value)},"
                f"{repr(check.bound_value)},{repr(check.gap)}"
            )
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------

@dataclass
class ExportResult:
    paths: dict[str, str]
    separation_before: float
    separation_after: float
    accuracy: float


def export_embeddings(
    source,
    config: TimConfig,
    seed: int,
    out_dir: str | Path,
) -> ExportResult:
    """Fit one episode and dump re-loadable feature tables.

    Writes the normalized input features, the features after the fitted
    pipeline, the prototypes, and the per-query predictions (class id column
    is the predicted label, the 1-dim vector is the query row index).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    episode = source.episode(seed)
    result = run_ft_tim(episode, config)
    state = result.state

    X = np.vstack([episode.support_vectors, episode.query_vectors])
    labels = np.concatenate([episode.support_labels, episode.query_hidden_labels])
    z, _, _ = _pipeline(X, state.W, transform_active(state.iter, config),
                        config.variant)
    nq = episode.num_queries
    paths = {}

    def dump(name: str, class_ids, vectors) -> None:
        p = out_dir / name
        write_feature_bank(
            FeatureBank(dim=vectors.shape[1], class_ids=class_ids, vectors=vectors), p
        )
        paths[name] = str(p)

    dump("raw_features.csv", labels, X)
    dump("transformed_features.csv", labels, z)
    dump("prototypes.csv", np.arange(episode.num_classes), state.prototypes)
    dump(
        "predicted_labels.csv",
        result.predictions,
        np.arange(nq, dtype=np.float64)[:, None],
    )
    before = class_separation_ratio(episode.query_vectors, episode.query_hidden_labels)
    after = class_separation_ratio(z[-nq:], episode.query_hidden_labels)
    accuracy = float(np.mean(result.predictions == episode.query_hidden_labels))
    return ExportResult(paths, before, after, accuracy)


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)


def write_json(payload: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
