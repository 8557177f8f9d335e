"""Campaign runner, report schema, CLI flags, theory harness, export."""

import json
import re
from dataclasses import dataclass

import numpy as np
import pytest

import fttim.bench as bench
from fttim import (
    Episode,
    FeatureBank,
    TimConfig,
    load_feature_bank,
    write_feature_bank,
)
from fttim.cli import main


def _fast_args(episodes=12, extra=()):
    return [
        "evaluate", "--synthetic", "--episodes", str(episodes),
        "--queries", "5", "--dim", "16", "--relevant-dims", "5",
        "--tim-iterations", "60", "--tim-transform-start", "20",
        "--workers", "1", "--seed", "7",
        *extra,
    ]


def _strip_wall_time(text: str) -> str:
    return re.sub(r'"wall_time_s": [0-9.e+-]+', '"wall_time_s": X', text)


# --- evaluate ---------------------------------------------------------------

def test_evaluate_report_schema(tmp_path, capsys):
    out = tmp_path / "report.json"
    code = main(_fast_args(extra=["--out", str(out)]))
    assert code == 0
    payload = json.loads(out.read_text())
    assert list(payload) == ["variant", "episodes", "mean_accuracy",
                             "ci95_halfwidth", "per_episode", "config_echo",
                             "wall_time_s"]
    assert payload["variant"] == "ft_tim"
    assert payload["episodes"] == 12
    assert 0.0 <= payload["mean_accuracy"] <= 1.0
    assert payload["ci95_halfwidth"] is None  # fewer than 30 episodes
    assert len(payload["per_episode"]) == 12
    entry = payload["per_episode"][0]
    assert list(entry) == ["seed", "accuracy", "iterations_run", "failure_flag"]
    assert entry["seed"] == 7
    echo = payload["config_echo"]
    assert echo["base_seed"] == 7
    assert echo["tim"]["iterations"] == 60
    table = capsys.readouterr().out
    assert "ft_tim" in table


def test_evaluate_deterministic_across_runs_and_workers(tmp_path):
    outs = []
    for name, workers in (("a", "1"), ("b", "1"), ("c", "2")):
        out = tmp_path / f"{name}.json"
        args = _fast_args(episodes=8)
        args[args.index("--workers") + 1] = workers
        assert main(args + ["--out", str(out)]) == 0
        outs.append(_strip_wall_time(out.read_text()))
    assert outs[0] == outs[1] == outs[2]


def test_config_echo_round_trips_into_identical_run(tmp_path):
    out = tmp_path / "r.json"
    assert main(_fast_args(episodes=6, extra=["--out", str(out)])) == 0
    payload = json.loads(out.read_text())
    echo = payload["config_echo"]
    source_args = {k: v for k, v in echo["source"].items() if k != "kind"}
    rebuilt = bench.evaluate(
        bench.SyntheticSource(**source_args),
        TimConfig(**echo["tim"]),
        episodes=echo["episodes"],
        base_seed=echo["base_seed"],
        workers=1,
    )
    original = [e["accuracy"] for e in payload["per_episode"]]
    assert [o.accuracy for o in rebuilt.per_episode] == original
    assert rebuilt.mean_accuracy == payload["mean_accuracy"]


def test_evaluate_reports_ci_at_30_episodes(tmp_path):
    out = tmp_path / "r.json"
    assert main(_fast_args(episodes=30, extra=["--out", str(out)])) == 0
    payload = json.loads(out.read_text())
    assert payload["ci95_halfwidth"] > 0.0


def test_episodes_zero_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(_fast_args(episodes=0))
    assert exc.value.code == 2
    assert "--episodes" in capsys.readouterr().err


def test_source_flags_are_exclusive(tmp_path, capsys):
    bank = tmp_path / "bank.csv"
    bank.write_text("d=2 n=1\n0,1.0,0.0\n")
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--synthetic", "--features", str(bank)])
    assert exc.value.code == 2
    assert "--features or --synthetic" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["evaluate", "--episodes", "3"])  # neither source


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("FTTIM_SEED", "321")
    out = tmp_path / "r.json"
    args = _fast_args(episodes=3, extra=["--out", str(out)])
    del args[args.index("--seed") + 1]
    args.remove("--seed")
    assert main(args) == 0
    assert json.loads(out.read_text())["config_echo"]["base_seed"] == 321


def test_config_file_merging_and_flag_priority(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "episodes=5\n"
        "tim-iterations=40\n"
        "seed=99\n"
        "# comment line\n"
        "tim_transform_start=10\n"
    )
    out = tmp_path / "r.json"
    code = main([
        "evaluate", "--synthetic", "--queries", "4", "--dim", "12",
        "--relevant-dims", "4", "--workers", "1",
        "--config", str(cfg), "--episodes", "6", "--out", str(out),
    ])
    assert code == 0
    payload = json.loads(out.read_text())
    assert payload["episodes"] == 6  # explicit flag beats the file
    assert payload["config_echo"]["tim"]["iterations"] == 40
    assert payload["config_echo"]["tim"]["transform_start"] == 10
    assert payload["config_echo"]["base_seed"] == 99


def test_config_file_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("bogus-key=3\n")
    with pytest.raises(SystemExit) as exc:
        main(_fast_args(extra=["--config", str(cfg)]))
    assert exc.value.code == 2
    assert "bogus-key" in capsys.readouterr().err


# --- failure propagation -----------------------------------------------------

@dataclass(frozen=True)
class _FixedSource:
    episode_obj: Episode

    def episode(self, seed):
        return self.episode_obj

    def echo(self):
        return {"kind": "fixed"}


def _degenerate_episode():
    eye = np.eye(6)
    return Episode(
        num_classes=5,
        dim=6,
        support_labels=np.arange(5),
        support_vectors=eye[:5],
        query_vectors=eye[5:6],
        query_hidden_labels=np.array([0]),
    )


def test_failed_episode_is_flagged_not_swallowed():
    cfg = TimConfig(variant="linear_transform", iterations=10, transform_start=3)
    report = bench.evaluate(_FixedSource(_degenerate_episode()), cfg,
                            episodes=2, base_seed=0, workers=1)
    assert report.failures == 2
    assert report.mean_accuracy is None
    for entry in report.per_episode:
        assert entry.failure_flag
        assert entry.accuracy is None
        assert entry.iterations_run == 3


def test_cli_exit_nonzero_on_failed_episode(tmp_path):
    # class 0 holds a vector orthogonal to every support: whenever it lands
    # in the query split, the linear variant maps it to zero at activation
    eye = np.eye(6)
    ids = [0, 0] + [c for c in range(1, 5) for _ in range(2)]
    vecs = np.vstack([eye[0], eye[5]] + [eye[c] for c in range(1, 5)
                                         for _ in range(2)])
    bank_path = tmp_path / "bank.csv"
    write_feature_bank(FeatureBank(dim=6, class_ids=np.array(ids), vectors=vecs),
                       bank_path)
    seed = next(
        s for s in range(50)
        if np.array_equal(
            bench.BankSource(str(bank_path), 5, 1, 0).episode(s).support_vectors[0],
            eye[0],
        )
    )
    out = tmp_path / "r.json"
    code = main([
        "evaluate", "--features", str(bank_path), "--episodes", "1",
        "--queries", "1", "--variant", "linear_transform",
        "--tim-iterations", "10", "--tim-transform-start", "3",
        "--seed", str(seed), "--workers", "1", "--out", str(out),
    ])
    assert code == 1
    payload = json.loads(out.read_text())
    assert payload["per_episode"][0]["failure_flag"] is True


# --- compare ------------------------------------------------------------------

def test_compare_pairs_identical_seeds_and_orders_variants(tmp_path):
    report = bench.compare(bench.SyntheticSource(), TimConfig(),
                           episodes=24, base_seed=0, workers=2)
    seeds = {v: [o.seed for o in r.per_episode] for v, r in report.reports.items()}
    assert seeds["ft_tim"] == seeds["tim_baseline"] == seeds["linear_transform"]
    ft = report.reports["ft_tim"].mean_accuracy
    base = report.reports["tim_baseline"].mean_accuracy
    lin = report.reports["linear_transform"].mean_accuracy
    assert ft > base
    assert ft > lin
    diff = {p.pair: p for p in report.paired}
    assert diff["ft_tim-tim_baseline"].mean_diff > 0
    assert (diff["ft_tim-tim_baseline"].wins
            > diff["ft_tim-tim_baseline"].losses)
    payload = report.to_json_dict()
    assert list(payload) == ["episodes", "variants", "paired"]


def test_compare_linear_worst_under_high_noise_dim_ratio():
    # overfitting mirror: with many noise dimensions the unconstrained linear
    # map falls below even the no-transform baseline
    source = bench.SyntheticSource(dim=128, relevant_dims=6)
    report = bench.compare(source, TimConfig(), episodes=24, base_seed=0,
                           workers=2)
    accs = {v: r.mean_accuracy for v, r in report.reports.items()}
    assert accs["linear_transform"] < accs["tim_baseline"]
    assert accs["linear_transform"] < accs["ft_tim"]


def test_compare_cli_writes_report(tmp_path):
    out = tmp_path / "cmp.json"
    code = main([
        "compare", "--synthetic", "--episodes", "4", "--queries", "4",
        "--dim", "16", "--relevant-dims", "5", "--tim-iterations", "40",
        "--tim-transform-start", "10", "--workers", "1", "--seed", "0",
        "--out", str(out),
    ])
    assert code == 0
    payload = json.loads(out.read_text())
    assert set(payload["variants"]) == {"ft_tim", "tim_baseline",
                                        "linear_transform"}


# --- verify-theory ------------------------------------------------------------

_SMALL_THEORY = [
    "verify-theory", "--decomposition-instances", "20", "--kkt-instances", "4",
    "--lloyd-instances", "6", "--mm-instances", "10", "--sweep-instances", "6",
    "--seed", "0",
]


def test_verify_theory_small_run_passes(capsys):
    assert main(list(_SMALL_THEORY)) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5
    assert "decomposition identity" in out


def test_verify_theory_tamper_canary_fails(capsys):
    code = main(list(_SMALL_THEORY) + ["--tamper-scale", "1.0"])
    assert code == 1
    out = capsys.readouterr().out
    assert "FAIL" in out
    # the hook must not leak into later runs
    import fttim.analysis as analysis
    assert analysis._CLUSTERING_SCALE_OVERRIDE is None


def test_verify_theory_gap_csv(tmp_path, capsys):
    out = tmp_path / "gaps.csv"
    code = main(list(_SMALL_THEORY) + [
        "--tau-sweep", "1,0.1,0.01,0.001", "--gap-instances", "5",
        "--out", str(out),
    ])
    assert code == 0
    text = out.read_text()
    lines = text.split("\n")
    assert lines[0] == "instance_id,tau,H,bound,gap"
    assert len(lines) == 1 + 5 * 4 + 1  # header + rows + trailing LF
    assert text.endswith("\n")
    first = lines[1].split(",")
    assert first[0] == "0" and float(first[1]) == 1.0
    # gap column equals bound minus clustering term
    for row in lines[1:-1]:
        _, _, H, bound, gap = row.split(",")
        assert float(gap) == pytest.approx(float(bound) - float(H), abs=1e-12)


# --- export-embeddings ---------------------------------------------------------

def test_export_embeddings_round_trip(tmp_path, capsys):
    out_dir = tmp_path / "dump"
    code = main([
        "export-embeddings", "--synthetic", "--queries", "8",
        "--tim-iterations", "400", "--tim-transform-start", "100",
        "--seed", "3", "--out", str(out_dir), "--workers", "1",
    ])
    assert code == 0
    raw = load_feature_bank(out_dir / "raw_features.csv")
    transformed = load_feature_bank(out_dir / "transformed_features.csv")
    prototypes = load_feature_bank(out_dir / "prototypes.csv")
    predicted = load_feature_bank(out_dir / "predicted_labels.csv")
    assert raw.num_records == transformed.num_records == 5 + 40
    assert prototypes.num_records == 5
    assert predicted.num_records == 40
    np.testing.assert_allclose(
        np.linalg.norm(transformed.vectors, axis=1), 1.0, atol=1e-9
    )
    out = capsys.readouterr().out
    before = float(re.search(r"before transform: ([0-9.]+)", out).group(1))
    after = float(re.search(r"after transform:  ([0-9.]+)", out).group(1))
    assert after > before


def test_export_separation_improves_on_standard_suite(tmp_path):
    res = bench.export_embeddings(bench.SyntheticSource(), TimConfig(),
                                  seed=11, out_dir=tmp_path)
    assert res.separation_after > res.separation_before
