from __future__ import annotations

import csv
import math
from dataclasses import replace
from pathlib import Path

import pytest
from matplotlib.testing.compare import compare_images

from dandelion.harness import (
    BASELINE_LABEL,
    PROB_COLUMNS,
    RUN_COLUMNS,
    SUMMARY_COLUMNS,
    CsvFormatError,
    ExperimentConfig,
    MetricsSummary,
    main,
    plot,
    prob_table,
    replay,
    run_experiment,
    scalability_sweep,
    tau_from_probability,
    tau_from_saturation,
)
from dandelion.sortition import prob_all_buckets_covered, prob_bucket_covered

GOLDEN = Path(__file__).parent / "golden"
TINY = ExperimentConfig(n_nodes=20, cls=(1, 4), macroblock_sizes=(100_000,), seeds=(1,), rounds_total=4,
                        measure_window=(2, 3))


def test_empty_sweep_is_an_error():
    with pytest.raises(ValueError, match="nothing to run"):
        replace(TINY, seeds=()).points()
    with pytest.raises(ValueError):
        ExperimentConfig(measure_window=(5, 30))
    with pytest.raises(ValueError):
        ExperimentConfig(mode="algorand", cls=(4,))


def test_points_and_labels():
    pts = TINY.points()
    assert [(p.mode, p.Cl, p.label) for p in pts] == [("algorand", 1, BASELINE_LABEL),
                                                      ("dandelion", 4, "dandelion Cl=4")]


def test_config_text_round_trip():
    cfg = replace(TINY, byzantine_fraction=0.2, strategy="silent", tau_proposers=(50, 100))
    assert ExperimentConfig.from_text(cfg.to_text()).points() == cfg.points()
    with pytest.raises(ValueError):
        ExperimentConfig.from_text("colour=blue")


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    summary, results = run_experiment(TINY, out)
    return out, summary, results


def test_run_writes_csvs(tiny_run):
    out, summary, results = tiny_run
    runs = list(csv.DictReader((out / "runs.csv").open()))
    summ = list(csv.DictReader((out / "summary.csv").open()))
    assert list(runs[0]) == RUN_COLUMNS and list(summ[0]) == SUMMARY_COLUMNS
    assert [r["status"] for r in runs] == ["ok", "ok"]
    assert summ[0]["label"] == BASELINE_LABEL
    for s in summary:
        assert s.seeds_ok == 1
        assert s.lat_min_s <= s.lat_p25_s <= s.lat_median_s <= s.lat_p75_s <= s.lat_max_s
        assert 0 < s.fill_ratio <= 1 and s.throughput_kBps > 0
    # Measured rounds 2..3 for every honest node.
    assert all(len(r.latencies_s) == 2 * 20 for r in results)


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    out, _, _ = tiny_run
    run_experiment(TINY, tmp_path)
    assert (tmp_path / "runs.csv").read_bytes() == (out / "runs.csv").read_bytes()
    assert (tmp_path / "summary.csv").read_bytes() == (out / "summary.csv").read_bytes()
    assert all(same for _, same, _ in replay(out, [1]))


def test_prob_table_values(tmp_path):
    rows = prob_table([2, 20], [26, 100], tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == ",".join(PROB_COLUMNS) and len(lines) == 5
    for (cl, tau, one, every), line in zip(rows, lines[1:]):
        assert line == f"{cl},{tau},{prob_bucket_covered(cl, tau):.8f},{prob_all_buckets_covered(cl, tau):.8f}"
    with pytest.raises(ValueError):
        prob_table([], [1])


def test_tau_recipes():
    tau = tau_from_probability(16)
    assert prob_all_buckets_covered(16, tau) >= 0.9 > prob_all_buckets_covered(16, tau - 1)
    assert tau_from_probability(1) == 1

    def s(cl, tau, fill):
        return MetricsSummary("x", "dandelion", 10, cl, 1, tau, 1, *([1.0] * 5), 1.0, 1.0, fill, 0)

    summary = [s(8, 50, 0.80), s(8, 100, 0.995), s(8, 150, 1.0), s(32, 100, 0.5), s(32, 200, 0.7)]
    assert tau_from_saturation(summary) == {8: 100, 32: 200}


def test_scale_needs_ascending_counts():
    with pytest.raises(ValueError):
        scalability_sweep([200, 100])
    with pytest.raises(ValueError):
        scalability_sweep([])


def test_plot_matches_golden(tmp_path):
    out = plot(GOLDEN / "prob_small.csv", tmp_path)
    assert [p.name for p in out] == ["prob_heatmap.png"]
    assert compare_images(str(GOLDEN / "prob_heatmap_golden.png"), str(out[0]), tol=1) is None


def test_plot_one_row_summary(tmp_path):
    src = tmp_path / "one.csv"
    row = ["dandelion Cl=4", "dandelion", "20", "4", "100000", "100", "1"] + ["1.0"] * 9
    src.write_text(",".join(SUMMARY_COLUMNS) + "\n" + ",".join(row) + "\n")
    names = sorted(p.name for p in plot(src, tmp_path))
    assert names == ["latency_vs_size.png", "throughput_vs_size.png"]


def test_plot_missing_column_names_it(tmp_path):
    src = tmp_path / "bad.csv"
    src.write_text("label,Cl,macroblock_size,lat_median_s\nx,1,1,1\n")
    with pytest.raises(CsvFormatError, match="throughput_kBps"):
        plot(src, tmp_path)
    bad = tmp_path / "bad2.csv"
    bad.write_text("label,Cl,macroblock_size,lat_median_s,throughput_kBps\nx,1,1,fast,2\n")
    with pytest.raises(CsvFormatError, match="non-numeric"):
        plot(bad, tmp_path)


def test_cli_prob_table_and_errors(tmp_path, capsys):
    assert main(["prob-table", "--cl", "4", "--tau-proposer", "26,100", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "prob_table.csv").read_text()
    assert capsys.readouterr().out == text and len(text.splitlines()) == 3
    assert main(["plot", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2


def test_cli_run(tmp_path, capsys):
    rc = main(["run", "--nodes", "12", "--cl", "2", "--macroblock-size", "50000", "--seed", "1",
               "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == ",".join(SUMMARY_COLUMNS) and out[1].startswith("dandelion Cl=2,dandelion,12,2,50000")
    assert not math.isnan(float(out[1].split(",")[SUMMARY_COLUMNS.index("lat_median_s")]))
