import json
import math

import matplotlib.figure
import pytest

from dreamer_cdp.cli import main
from dreamer_cdp.envs import AchievementTable, crafter_score
from dreamer_cdp.evaluation import RunReport, aggregate

from conftest import tiny_config


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.cfg"
    cfg_path.write_text(tiny_config().to_text())
    runs = []
    for seed in (0, 1):
        run = root / f"run{seed}"
        assert main(["train", "--config", str(cfg_path), "--steps", "30", "--seed", str(seed), "--run-dir", str(run)]) == 0
        runs.append(run)
    return root, cfg_path, runs


def test_train_records_ablation(tmp_path, trained):
    _, cfg_path, _ = trained
    run = tmp_path / "abl"
    code = main(["train", "--config", str(cfg_path), "--steps", "10", "--ablate", "no_reward_grad", "--run-dir", str(run), "--no-eval"])
    assert code == 0
    assert "ablations = no_reward_grad" in (run / "config.txt").read_text().splitlines()
    assert not (run / "report.json").exists()


def test_conflicting_ablations_exit_2(tmp_path, capsys):
    code = main(["train", "--ablate", "no_cdp", "--ablate", "cdp_only", "--run-dir", str(tmp_path / "x")])
    assert code == 2
    assert "conflicting ablations" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_unknown_override_exit_2(tmp_path):
    assert main(["train", "--set", "nonsense=1", "--run-dir", str(tmp_path / "x")]) == 2


def test_unknown_ablation_rejected_by_parser():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--ablate", "no_magic"])
    assert exc.value.code == 2


def test_eval_report_score_recomputable(tmp_path, trained):
    _, _, runs = trained
    out = tmp_path / "eval"
    assert main(["eval", str(runs[0] / "checkpoint.ckpt"), "--episodes", "3", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    table = AchievementTable.from_csv((out / "achievements.csv").read_text())
    assert report["score"] == pytest.approx(crafter_score(table), abs=1e-12)
    assert report["episodes"] == 3
    assert len((out / "eval_episodes.jsonl").read_text().splitlines()) == 3
    assert (out / "achievements.png").stat().st_size > 0


def test_eval_multiple_checkpoints_aggregates(tmp_path, trained):
    _, _, runs = trained
    out = tmp_path / "agg"
    args = ["eval", *[str(r / "checkpoint.ckpt") for r in runs], "--episodes", "2", "--workers", "2", "--out", str(out)]
    assert main(args) == 0
    agg = json.loads((out / "aggregate.json").read_text())
    seeds = [json.loads((out / f"seed{i}" / "report.json").read_text())["score"] for i in range(2)]
    assert agg["n"] == 2
    assert agg["per_seed_score"] == seeds
    assert (out / "achievements.png").is_file()


def test_eval_bad_checkpoint_exit_1(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a zip")
    assert main(["eval", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_aggregate_seven_seeds_by_hand():
    scores = [3.0, 5.0, 4.0, 8.0, 1.0, 6.0, 2.0]
    reports = [RunReport(s, s / 2, 0.0, 10, {"a": s * 2, "b": 0.0}) for s in scores]
    agg = aggregate(reports)
    # sum 29, sum of squares 155, so variance (155 - 29**2/7) / 6 = 122/21
    mean = 29 / 7
    var = sum((s - mean) ** 2 for s in scores) / 6
    assert agg["score_mean"] == pytest.approx(mean, abs=1e-12)
    assert agg["score_std"] == pytest.approx(math.sqrt(var), abs=1e-12)
    assert agg["score_std"] == pytest.approx(math.sqrt(122 / 21), abs=1e-12)
    assert agg["achievements"]["a"]["mean"] == pytest.approx(2 * mean)
    assert agg["achievements"]["b"] == {"mean": 0.0, "std": 0.0}


def test_aggregate_needs_two():
    with pytest.raises(ValueError):
        aggregate([RunReport(1.0, 1.0, 0.0, 1, {"a": 1.0})])


def test_plot_single_run(tmp_path, trained):
    _, _, runs = trained
    out = tmp_path / "fig"
    assert main(["plot", str(runs[0]), "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["achievements.png", "losses_run0.png", "returns.png"]
    assert all((out / n).stat().st_size > 1000 for n in names)


def test_plot_four_runs_has_legend(tmp_path, trained, monkeypatch):
    root, cfg_path, runs = trained
    dirs = list(runs)
    for seed in (2, 3):
        run = root / f"run{seed}"
        if not run.exists():
            main(["train", "--config", str(cfg_path), "--steps", "25", "--seed", str(seed), "--run-dir", str(run), "--no-eval"])
        dirs.append(run)
    legends = {}
    original = matplotlib.figure.Figure.savefig

    def spy(fig, path, *a, **k):
        leg = fig.axes[0].get_legend()
        legends[str(path).rsplit("/", 1)[-1]] = [t.get_text() for t in leg.get_texts()] if leg else []
        return original(fig, path, *a, **k)

    monkeypatch.setattr(matplotlib.figure.Figure, "savefig", spy)
    out = tmp_path / "fig4"
    assert main(["plot", *map(str, dirs), "--out", str(out)]) == 0
    assert legends["returns.png"] == ["run0", "run1", "run2", "run3"]
    assert len(list(out.glob("losses_*.png"))) == 4


def test_plot_empty_metrics_errors(tmp_path, capsys):
    run = tmp_path / "empty"
    run.mkdir()
    (run / "metrics.jsonl").write_text("")
    (run / "episodes.jsonl").write_text("")
    out = tmp_path / "fig"
    assert main(["plot", str(run), "--out", str(out)]) == 1
    assert "empty metrics" in capsys.readouterr().err
    assert not out.exists() or not any(out.iterdir())


def test_score_command(tmp_path, capsys):
    names = [f"a{i}" for i in range(22)]
    table = AchievementTable({n: (50.0 if i % 2 else 0.0) for i, n in enumerate(names)}, 100)
    path = tmp_path / "t.csv"
    path.write_text(table.to_csv())
    assert main(["score", str(path)]) == 0
    expected = math.exp(sum(math.log(1 + table.rates[n]) for n in names) / 22) - 1
    assert float(capsys.readouterr().out) == pytest.approx(expected, abs=1e-6)


def test_sweep_resumes(tmp_path, trained, capsys):
    _, cfg_path, _ = trained
    args = ["sweep", "--config", str(cfg_path), "--steps", "10", "--seeds", "0", "1", "--arms", "full", "no_cdp_no_dyn_rep", "--out", str(tmp_path)]
    assert main(args) == 0
    first = json.loads((tmp_path / "sweep.json").read_text())
    assert set(first["runs"]) == {"full/seed0", "full/seed1", "no_cdp_no_dyn_rep/seed0", "no_cdp_no_dyn_rep/seed1"}
    capsys.readouterr()
    assert main(args) == 0
    assert "seed0: return" not in capsys.readouterr().out
    assert json.loads((tmp_path / "sweep.json").read_text())["means"] == first["means"]


def test_plot_labels_disambiguate_repeated_names(tmp_path, trained):
    root, cfg_path, runs = trained
    dirs = []
    for arm in ("full", "no_cdp"):
        run = tmp_path / arm / "seed0"
        run.mkdir(parents=True)
        for name in ("metrics.jsonl", "episodes.jsonl"):
            (run / name).write_text((runs[0] / name).read_text())
        dirs.append(run)
    out = tmp_path / "fig"
    assert main(["plot", *map(str, dirs), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("losses_*.png")) == ["losses_full_seed0.png", "losses_no_cdp_seed0.png"]
