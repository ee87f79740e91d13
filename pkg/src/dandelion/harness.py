"""Experiment driver: sweeps, metric aggregation, CSV output, plots and the CLI.

Every sweep point is an independent deterministic simulation identified by
(mode, nodes, Cl, macroblock size, tau_proposer, seed). Results are written as
CSV with fixed float formatting so that a replay of the same point yields the
same bytes.

Config files use one ``key=value`` per line (``#`` starts a comment)::

    mode=dandelion            # dandelion | algorand
    profile=desk              # desk | paper
    nodes=100
    cl=1,4,16                 # Cl = 1 runs the single-block path ("algorand baseline")
    macroblock_size=250000,500000
    tau_proposer=100
    seeds=1,2,3
    rounds_total=17
    measure_window=5-15
    bandwidth_mbps=2          # optional, overrides the profile
    byzantine_fraction=0.0    # optional
    strategy=silent           # required when byzantine_fraction > 0
    workers=1
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .netsim import Deadlock, NetConfig, _load_kv
from .node import NodeConfig
from .simulation import Scenario, Simulation
from .sortition import prob_all_buckets_covered, prob_bucket_covered

log = logging.getLogger("dandelion.harness")

BASELINE_LABEL = "algorand baseline"
KB = 1e3


@dataclass(frozen=True)
class Profile:
    n_nodes: int
    bandwidth_bps: float
    cls: tuple[int, ...]
    macroblock_sizes: tuple[int, ...]


PROFILES = {
    # 100 machines at 20 Mbps with 1-24 MB macroblocks.
    "paper": Profile(1000, 20e6, (1, 2, 4, 8, 16, 20, 32),
                     (1_000_000, 2_000_000, 4_000_000, 8_000_000, 12_000_000, 16_000_000, 20_000_000, 24_000_000)),
    # Serialization time relative to latency stays within 2x of the regime above.
    "desk": Profile(100, 2e6, (1, 2, 4, 8, 16, 20),
                    (250_000, 500_000, 750_000, 1_000_000, 1_250_000, 1_500_000)),
}


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "dandelion"
    profile: str = "desk"
    n_nodes: int | None = None
    cls: tuple[int, ...] = ()
    macroblock_sizes: tuple[int, ...] = ()
    tau_proposers: tuple[int, ...] = (100,)
    seeds: tuple[int, ...] = (1, 2, 3)
    rounds_total: int = 17
    measure_window: tuple[int, int] = (5, 15)
    bandwidth_bps: float | None = None
    byzantine_fraction: float = 0.0
    strategy: str | None = None
    workers: int = 1

    def __post_init__(self) -> None:
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; pick one of {sorted(PROFILES)}")
        if self.mode not in ("algorand", "dandelion"):
            raise ValueError(f"unknown mode {self.mode!r}")
        lo, hi = self.measure_window
        if not 1 <= lo <= hi <= self.rounds_total:
            raise ValueError("measure window must lie within [1, rounds_total]")
        if self.mode == "algorand" and any(c != 1 for c in self.resolved_cls()):
            raise ValueError("algorand mode runs Cl = 1 only")

    def resolved_cls(self) -> tuple[int, ...]:
        if self.cls:
            return self.cls
        return (1,) if self.mode == "algorand" else PROFILES[self.profile].cls

    def resolved_sizes(self) -> tuple[int, ...]:
        return self.macroblock_sizes or PROFILES[self.profile].macroblock_sizes

    def nodes(self) -> int:
        return self.n_nodes or PROFILES[self.profile].n_nodes

    def bandwidth(self) -> float:
        return self.bandwidth_bps or PROFILES[self.profile].bandwidth_bps

    def points(self) -> list[SweepPoint]:
        cls, sizes, taus = self.resolved_cls(), self.resolved_sizes(), self.tau_proposers
        if not (cls and sizes and taus and self.seeds):
            raise ValueError("nothing to run: a sweep list is empty")
        return [
            SweepPoint("algorand" if cl == 1 else "dandelion", self.nodes(), cl, size, tau, seed,
                       self.bandwidth(), self.rounds_total, self.measure_window,
                       self.byzantine_fraction, self.strategy)
            for cl in cls for size in sizes for tau in taus for seed in self.seeds
        ]

    @classmethod
    def from_text(cls, text: str) -> ExperimentConfig:
        kv = _load_kv(text)
        ints = lambda v: tuple(int(float(x)) for x in v.split(",") if x.strip())  # noqa: E731
        kw: dict = {}
        for k, v in kv.items():
            if k == "mode":
                kw["mode"] = v
            elif k == "profile":
                kw["profile"] = v
            elif k == "nodes":
                kw["n_nodes"] = int(v)
            elif k == "cl":
                kw["cls"] = ints(v)
            elif k == "macroblock_size":
                kw["macroblock_sizes"] = ints(v)
            elif k == "tau_proposer":
                kw["tau_proposers"] = ints(v)
            elif k == "seeds":
                kw["seeds"] = ints(v)
            elif k == "rounds_total":
                kw["rounds_total"] = int(v)
            elif k == "measure_window":
                lo, hi = v.split("-")
                kw["measure_window"] = (int(lo), int(hi))
            elif k == "bandwidth_mbps":
                kw["bandwidth_bps"] = float(v) * 1e6
            elif k == "byzantine_fraction":
                kw["byzantine_fraction"] = float(v)
            elif k == "strategy":
                kw["strategy"] = v
            elif k == "workers":
                kw["workers"] = int(v)
            else:
                raise ValueError(f"unknown config key {k!r}")
        return cls(**kw)

    def to_text(self) -> str:
        j = lambda xs: ",".join(str(x) for x in xs)  # noqa: E731
        lines = [
            f"mode={self.mode}",
            f"profile={self.profile}",
            f"nodes={self.nodes()}",
            f"cl={j(self.resolved_cls())}",
            f"macroblock_size={j(self.resolved_sizes())}",
            f"tau_proposer={j(self.tau_proposers)}",
            f"seeds={j(self.seeds)}",
            f"rounds_total={self.rounds_total}",
            f"measure_window={self.measure_window[0]}-{self.measure_window[1]}",
            f"bandwidth_mbps={self.bandwidth() / 1e6:g}",
            f"byzantine_fraction={self.byzantine_fraction:g}",
        ]
        if self.strategy:
            lines.append(f"strategy={self.strategy}")
        lines.append(f"workers={self.workers}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SweepPoint:
    mode: str
    n_nodes: int
    Cl: int
    macroblock_size: int
    tau_proposer: int
    seed: int
    bandwidth_bps: float
    rounds_total: int = 17
    measure_window: tuple[int, int] = (5, 15)
    byzantine_fraction: float = 0.0
    strategy: str | None = None

    @property
    def label(self) -> str:
        return BASELINE_LABEL if self.Cl == 1 else f"dandelion Cl={self.Cl}"

    def scenario(self) -> Scenario:
        node = NodeConfig(mode=self.mode, Cl=self.Cl, macroblock_size=self.macroblock_size,
                          tau_proposer=self.tau_proposer)
        return Scenario(n_nodes=self.n_nodes, node=node, net=NetConfig.bundled(bandwidth_bps=self.bandwidth_bps),
                        seed=self.seed, byzantine_fraction=self.byzantine_fraction, strategy=self.strategy)


@dataclass
class PointResult:
    point: SweepPoint
    status: str = "ok"
    diagnostic: str = ""
    latencies_s: list[float] = field(default_factory=list)
    throughput_kBps: float = float("nan")
    fill_ratio: float = float("nan")
    tentative_rounds: int = 0
    chain_digest: str = ""
    final_hashes: dict[int, list[bytes]] = field(default_factory=dict)

    def percentiles(self) -> tuple[float, float, float, float, float]:
        if not self.latencies_s:
            return (float("nan"),) * 5
        a = np.asarray(self.latencies_s)
        return (float(a.min()), float(np.percentile(a, 25)), float(np.median(a)),
                float(np.percentile(a, 75)), float(a.max()))


@dataclass
class MetricsSummary:
    """Per-point statistics; each field is the median of the per-seed values."""

    label: str
    mode: str
    n_nodes: int
    Cl: int
    macroblock_size: int
    tau_proposer: int
    seeds_ok: int
    lat_min_s: float
    lat_p25_s: float
    lat_median_s: float
    lat_p75_s: float
    lat_max_s: float
    throughput_kBps: float
    nominal_kBps: float
    fill_ratio: float
    tentative_rounds: float


def sim_time_cap(p: SweepPoint) -> float:
    """Generous upper bound on simulated seconds for the whole run."""
    per_round = 5 + 5 + 120 + 13 * 20 + 200
    return p.rounds_total * per_round


def run_point(p: SweepPoint, trace_path: Path | None = None) -> PointResult:
    res = PointResult(p)
    try:
        sim = Simulation(p.scenario())
    except ValueError as e:
        res.status, res.diagnostic = "failed", f"config: {e}"
        return res
    if trace_path is not None:
        sim.sim.trace = []
    try:
        sim.run(p.rounds_total, max_sim_seconds=sim_time_cap(p))
    except Deadlock as e:
        res.status, res.diagnostic = "failed", str(e).splitlines()[0]
    if res.status == "ok" and any(nd.chain.height < p.rounds_total for nd in sim.honest):
        res.status, res.diagnostic = "failed", f"not all honest nodes reached round {p.rounds_total}"
    if trace_path is not None:
        trace_path.write_text("time_us,kind,src,dst,bytes,id\n" + "\n".join(sim.sim.trace) + "\n")
    lo, hi = p.measure_window
    recs = [r for r in sim.records if lo <= r.round <= hi]
    res.latencies_s = [r.latency_ms / 1e3 for r in recs]
    # Chain growth as seen network-wide: bytes of the window's macroblocks over the
    # span from the first node starting round lo to the last node appending round hi.
    honest_ids = {nd.id for nd in sim.honest}
    full = [nd.id for nd in sim.honest
            if sum(1 for r in recs if r.node_id == nd.id) == hi - lo + 1]
    if full:
        starts = [r.start_us for r in recs if r.round == lo and r.node_id in honest_ids]
        ends = [r.end_us for r in recs if r.round == hi and r.node_id in honest_ids]
        span = (max(ends) - min(starts)) / 1e6
        appended = statistics.median(sum(r.bytes_appended for r in recs if r.node_id == nid) for nid in full)
        if span > 0:
            res.throughput_kBps = appended / span / KB
    if recs:
        res.fill_ratio = float(np.mean([r.bytes_appended for r in recs]) / p.macroblock_size)
        res.tentative_rounds = len({r.round for r in recs if r.kind == "tentative"})
    res.final_hashes = sim.final_hashes()
    h = hashlib.sha256()
    for nid in sorted(res.final_hashes):
        for mh in res.final_hashes[nid]:
            h.update(mh)
    res.chain_digest = h.hexdigest()[:16]
    return res


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6f}"


RUN_COLUMNS = ["label", "mode", "n_nodes", "Cl", "macroblock_size", "tau_proposer", "seed", "status",
               "lat_min_s", "lat_p25_s", "lat_median_s", "lat_p75_s", "lat_max_s", "throughput_kBps",
               "fill_ratio", "tentative_rounds", "chain_digest", "diagnostic"]
SUMMARY_COLUMNS = ["label", "mode", "n_nodes", "Cl", "macroblock_size", "tau_proposer", "seeds_ok",
                   "lat_min_s", "lat_p25_s", "lat_median_s", "lat_p75_s", "lat_max_s", "throughput_kBps",
                   "nominal_kBps", "fill_ratio", "tentative_rounds"]


def run_row(r: PointResult) -> list[str]:
    p = r.point
    return [p.label, p.mode, str(p.n_nodes), str(p.Cl), str(p.macroblock_size), str(p.tau_proposer), str(p.seed),
            r.status, *(_fmt(x) for x in r.percentiles()), _fmt(r.throughput_kBps), _fmt(r.fill_ratio),
            str(r.tentative_rounds), r.chain_digest, r.diagnostic]


def _csv_text(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def summarize(results: list[PointResult]) -> list[MetricsSummary]:
    groups: dict[tuple, list[PointResult]] = {}
    for r in results:
        p = r.point
        groups.setdefault((p.mode, p.n_nodes, p.Cl, p.macroblock_size, p.tau_proposer), []).append(r)
    out = []
    for (mode, n, cl, size, tau), rs in groups.items():
        ok = [r for r in rs if r.status == "ok"]
        med = lambda xs: float(statistics.median(xs)) if xs else float("nan")  # noqa: E731
        pct = [r.percentiles() for r in ok]
        lat_med = med([q[2] for q in pct])
        out.append(MetricsSummary(
            rs[0].point.label, mode, n, cl, size, tau, len(ok),
            *(med([q[i] for q in pct]) for i in range(5)),
            med([r.throughput_kBps for r in ok]),
            size / lat_med / KB if lat_med == lat_med and lat_med > 0 else float("nan"),
            med([r.fill_ratio for r in ok]),
            med([r.tentative_rounds for r in ok]),
        ))
    return out


def summary_row(s: MetricsSummary) -> list[str]:
    d = asdict(s)
    return [_fmt(d[c]) if isinstance(d[c], float) else str(d[c]) for c in SUMMARY_COLUMNS]


def _run_all(points: list[SweepPoint], workers: int, trace_dir: Path | None) -> list[PointResult]:
    def trace_for(p: SweepPoint) -> Path | None:
        if trace_dir is None:
            return None
        return trace_dir / f"trace_{p.mode}_cl{p.Cl}_size{p.macroblock_size}_tau{p.tau_proposer}_seed{p.seed}.csv"

    if workers <= 1:
        results = []
        for p in points:
            log.info("running %s size=%d tau=%d seed=%d", p.label, p.macroblock_size, p.tau_proposer, p.seed)
            results.append(run_point(p, trace_for(p)))
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(run_point, p, trace_for(p)) for p in points]
        return [f.result() for f in futs]


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None,
                   trace: bool = False) -> tuple[list[MetricsSummary], list[PointResult]]:
    """Run every (Cl, size, tau_proposer, seed) point; optionally write CSVs to ``out_dir``."""
    points = config.points()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results = _run_all(points, config.workers, out if (trace and out is not None) else None)
    summary = summarize(results)
    if out is not None:
        (out / "config.txt").write_text(config.to_text())
        (out / "runs.csv").write_text(_csv_text(RUN_COLUMNS, [run_row(r) for r in results]))
        (out / "summary.csv").write_text(_csv_text(SUMMARY_COLUMNS, [summary_row(s) for s in summary]))
    return summary, results


# ---------------------------------------------------------------- probability


PROB_COLUMNS = ["Cl", "tau_proposer", "prob_bucket_covered", "prob_all_buckets_covered"]


def prob_table(cls: list[int], taus: list[int], out: str | Path | None = None) -> list[tuple[int, int, float, float]]:
    if not cls or not taus:
        raise ValueError("Cl and tau lists must be non-empty")
    rows = [(cl, tau, prob_bucket_covered(cl, tau), prob_all_buckets_covered(cl, tau)) for cl in cls for tau in taus]
    if out is not None:
        Path(out).write_text(_csv_text(PROB_COLUMNS, [[str(a), str(b), f"{c:.8f}", f"{d:.8f}"] for a, b, c, d in rows]))
    return rows


def tau_from_probability(Cl: int, target: float = 0.9, taus=range(1, 1001)) -> int | None:
    """Smallest tau_proposer whose all-buckets coverage reaches ``target``."""
    for tau in taus:
        if prob_all_buckets_covered(Cl, tau) >= target:
            return tau
    return None


def tau_from_saturation(summary: list[MetricsSummary], rel_tol: float = 0.01) -> dict[int, int]:
    """Per Cl, the smallest tau_proposer whose macroblock fill is within ``rel_tol`` of the best fill."""
    out: dict[int, int] = {}
    for cl in sorted({s.Cl for s in summary}):
        rows = sorted((s for s in summary if s.Cl == cl and s.fill_ratio == s.fill_ratio), key=lambda s: s.tau_proposer)
        if not rows:
            continue
        best = max(s.fill_ratio for s in rows)
        out[cl] = next(s.tau_proposer for s in rows if s.fill_ratio >= best * (1 - rel_tol))
    return out


# ---------------------------------------------------------------- scalability


SCALE_COLUMNS = ["n_nodes", "Cl", "macroblock_size", "seeds_ok", "lat_median_s", "throughput_kBps",
                 "latency_increase_pct", "throughput_degradation_pct"]


def scalability_sweep(node_counts: list[int], Cl: int = 20, macroblock_size: int = 1_000_000,
                      base: ExperimentConfig | None = None, out: str | Path | None = None) -> list[dict]:
    if not node_counts:
        raise ValueError("nothing to run: empty node list")
    if list(node_counts) != sorted(node_counts):
        raise ValueError("node counts must be ascending")
    base = base or ExperimentConfig()
    rows = []
    for n in node_counts:
        cfg = replace(base, n_nodes=n, cls=(Cl,), macroblock_sizes=(macroblock_size,), tau_proposers=(base.tau_proposers[0],))
        summary, _ = run_experiment(cfg)
        s = summary[0]
        rows.append({"n_nodes": n, "Cl": Cl, "macroblock_size": macroblock_size, "seeds_ok": s.seeds_ok,
                     "lat_median_s": s.lat_median_s, "throughput_kBps": s.throughput_kBps})
    lat0, thr0 = rows[0]["lat_median_s"], rows[0]["throughput_kBps"]
    for r in rows:
        r["latency_increase_pct"] = 100 * (r["lat_median_s"] / lat0 - 1)
        r["throughput_degradation_pct"] = 100 * (1 - r["throughput_kBps"] / thr0)
    if out is not None:
        Path(out).write_text(_csv_text(SCALE_COLUMNS, [
            [_fmt(r[c]) if isinstance(r[c], float) else str(r[c]) for c in SCALE_COLUMNS] for r in rows]))
    return rows


# ---------------------------------------------------------------------- plots


class CsvFormatError(ValueError):
    pass


def _read_csv(path: str | Path, required: list[str]) -> list[dict[str, str]]:
    text = Path(path).read_text()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise CsvFormatError(f"{path}: empty CSV")
    for c in required:
        if c not in reader.fieldnames:
            raise CsvFormatError(f"{path}: missing column {c!r}")
    rows = list(reader)
    for i, row in enumerate(rows, start=2):
        if None in row or any(row[c] is None for c in required):
            raise CsvFormatError(f"{path}: line {i} has the wrong number of fields")
    return rows


def _num(row: dict[str, str], col: str, path) -> float:
    try:
        return float(row[col])
    except ValueError:
        raise CsvFormatError(f"{path}: column {col!r} holds non-numeric value {row[col]!r}") from None


def plot(csv_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Render the figures matching the CSV kind (summary, probability or scalability)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_path = Path(csv_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = csv_path.read_text().splitlines()[:1]
    cols = header[0].split(",") if header else []
    written: list[Path] = []

    def save(fig, name: str) -> None:
        p = out / name
        fig.savefig(p, dpi=80, metadata={"Software": None})
        plt.close(fig)
        written.append(p)

    if "prob_all_buckets_covered" in cols:
        rows = _read_csv(csv_path, PROB_COLUMNS)
        cls = sorted({int(_num(r, "Cl", csv_path)) for r in rows})
        taus = sorted({int(_num(r, "tau_proposer", csv_path)) for r in rows})
        grid = np.full((len(cls), len(taus)), np.nan)
        for r in rows:
            grid[cls.index(int(_num(r, "Cl", csv_path))), taus.index(int(_num(r, "tau_proposer", csv_path)))] = \
                _num(r, "prob_all_buckets_covered", csv_path)
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis", aspect="auto", origin="lower")
        ax.set_xticks(range(len(taus)), [str(t) for t in taus])
        ax.set_yticks(range(len(cls)), [str(c) for c in cls])
        ax.set_xlabel("tau_proposer")
        ax.set_ylabel("Cl")
        ax.set_title("P(every bucket has a proposer)")
        fig.colorbar(im, ax=ax)
        save(fig, "prob_heatmap.png")
    elif "latency_increase_pct" in cols:
        rows = _read_csv(csv_path, SCALE_COLUMNS)
        n = [_num(r, "n_nodes", csv_path) for r in rows]
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.5))
        a1.plot(n, [_num(r, "lat_median_s", csv_path) for r in rows], "o-")
        a1.set_xlabel("nodes")
        a1.set_ylabel("median round latency (s)")
        a2.plot(n, [_num(r, "throughput_kBps", csv_path) for r in rows], "o-")
        a2.set_xlabel("nodes")
        a2.set_ylabel("throughput (KB/s)")
        fig.tight_layout()
        save(fig, "scalability.png")
    else:
        rows = _read_csv(csv_path, ["label", "Cl", "macroblock_size", "lat_median_s", "throughput_kBps"])
        by_cl: dict[int, list[dict]] = {}
        for r in rows:
            by_cl.setdefault(int(_num(r, "Cl", csv_path)), []).append(r)
        for metric, ylabel, name in (("lat_median_s", "median round latency (s)", "latency_vs_size.png"),
                                     ("throughput_kBps", "effective throughput (KB/s)", "throughput_vs_size.png")):
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for cl in sorted(by_cl):
                rs = sorted(by_cl[cl], key=lambda r: _num(r, "macroblock_size", csv_path))
                x = [_num(r, "macroblock_size", csv_path) / 1e6 for r in rs]
                ax.plot(x, [_num(r, metric, csv_path) for r in rs], "o-", label=rs[0]["label"])
            ax.set_xlabel("macroblock size (MB)")
            ax.set_ylabel(ylabel)
            ax.legend(fontsize=7)
            fig.tight_layout()
            save(fig, name)
    return written


# --------------------------------------------------------------------- replay


def replay(run_dir: str | Path, seeds_rows: list[int] | None = None) -> list[tuple[int, bool, str]]:
    """Re-run rows of ``run_dir/runs.csv`` and compare them byte for byte.

    Returns (row index, identical, detail) per replayed row; all rows when
    ``seeds_rows`` is None.
    """
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.from_text((run_dir / "config.txt").read_text())
    lines = (run_dir / "runs.csv").read_text().splitlines()
    rows = _read_csv(run_dir / "runs.csv", RUN_COLUMNS)
    points = cfg.points()
    if len(points) != len(rows):
        raise ValueError("runs.csv does not match config.txt")
    picks = range(len(rows)) if seeds_rows is None else seeds_rows
    out = []
    for i in picks:
        res = run_point(points[i])
        again = _csv_text(RUN_COLUMNS, [run_row(res)]).splitlines()[1]
        same = again == lines[i + 1]
        out.append((i, same, "identical" if same else f"expected {lines[i + 1]!r}, got {again!r}"))
    return out


# ------------------------------------------------------------------------ CLI


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(float(x)) for x in text.split(",") if x.strip())


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dandelion-sim", description="Multiplexed BA* simulator experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--config", help="key=value experiment file; flags override it")
        p.add_argument("--mode", choices=["algorand", "dandelion"])
        p.add_argument("--profile", choices=sorted(PROFILES))
        p.add_argument("--nodes", type=int)
        p.add_argument("--seed", type=_int_list, help="comma-separated seeds")
        p.add_argument("--out", default="results")

    r = sub.add_parser("run", help="run a sweep of (Cl, size, tau_proposer) points")
    common(r)
    r.add_argument("--cl", type=_int_list)
    r.add_argument("--macroblock-size", type=_int_list)
    r.add_argument("--tau-proposer", type=_int_list)
    r.add_argument("--workers", type=int)
    r.add_argument("--trace", action="store_true", help="write a per-message trace CSV for every run")

    p = sub.add_parser("prob-table", help="bucket coverage probabilities")
    p.add_argument("--cl", type=_int_list, default=(1, 2, 4, 8, 16, 20, 32))
    p.add_argument("--tau-proposer", type=_int_list, default=(26, 50, 100, 200))
    p.add_argument("--out", default="results")

    s = sub.add_parser("scale", help="node-count sweep at fixed Cl and macroblock size")
    common(s)
    s.add_argument("--node-counts", type=_int_list, default=(100, 200, 400))
    s.add_argument("--cl", type=int, default=16)
    s.add_argument("--macroblock-size", type=int, default=1_000_000)
    s.add_argument("--tau-proposer", type=int, default=100)

    pl = sub.add_parser("plot", help="render figures from a CSV")
    pl.add_argument("csv")
    pl.add_argument("--out", default="results")

    rp = sub.add_parser("replay", help="re-run a result directory and compare CSV rows")
    rp.add_argument("run_dir")
    rp.add_argument("--rows", type=_int_list, help="row indices to replay (default all)")
    return ap


def _config_from_args(a) -> ExperimentConfig:
    cfg = ExperimentConfig.from_text(Path(a.config).read_text()) if a.config else ExperimentConfig()
    upd: dict = {}
    if a.mode:
        upd["mode"] = a.mode
    if a.profile:
        upd["profile"] = a.profile
    if a.nodes:
        upd["n_nodes"] = a.nodes
    if a.seed:
        upd["seeds"] = a.seed
    for attr, key in (("cl", "cls"), ("macroblock_size", "macroblock_sizes"), ("tau_proposer", "tau_proposers")):
        v = getattr(a, attr, None)
        if v and isinstance(v, tuple):
            upd[key] = v
    if getattr(a, "workers", None):
        upd["workers"] = a.workers
    if upd.get("mode") == "algorand" and "cls" not in upd:
        upd["cls"] = (1,)
    return replace(cfg, **upd)


def main(argv: list[str] | None = None) -> int:
    a = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        if a.cmd == "run":
            summary, results = run_experiment(_config_from_args(a), a.out, trace=a.trace)
            sys.stdout.write(_csv_text(SUMMARY_COLUMNS, [summary_row(s) for s in summary]))
            failed = [r for r in results if r.status != "ok"]
            for r in failed:
                log.warning("failed: %s seed=%d: %s", r.point.label, r.point.seed, r.diagnostic)
        elif a.cmd == "prob-table":
            Path(a.out).mkdir(parents=True, exist_ok=True)
            dest = Path(a.out) / "prob_table.csv"
            prob_table(list(a.cl), list(a.tau_proposer), dest)
            sys.stdout.write(dest.read_text())
        elif a.cmd == "scale":
            Path(a.out).mkdir(parents=True, exist_ok=True)
            base = replace(_config_from_args(a), tau_proposers=(a.tau_proposer,))
            dest = Path(a.out) / "scale.csv"
            scalability_sweep(list(a.node_counts), a.cl, a.macroblock_size, base, dest)
            sys.stdout.write(dest.read_text())
        elif a.cmd == "plot":
            for p in plot(a.csv, a.out):
                print(p)
        elif a.cmd == "replay":
            bad = 0
            for i, same, detail in replay(a.run_dir, list(a.rows) if a.rows else None):
                print(f"row {i}: {detail}")
                bad += not same
            return 1 if bad else 0
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
