"""Command line: ``pimspec validate|run|sweep``.

Exit status is 0 on success, 1 for configuration problems and 2 for any
other simulation error.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, default_config, load_config
from .errors import ConfigurationError, SimulationError
from .nmc import contention_report, coprocessing_window, dump_trace
from .simloop import MODES, RunConfig, RunReport, aggregate, run_trials, summaries_csv

WORKERS_ENV = "PIMSPEC_WORKERS"


def worker_count(n_tasks: int) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ConfigurationError(f"{WORKERS_ENV} must be >= 1")
    return max(1, min(cap, n_tasks))


def _load(path) -> ExperimentConfig:
    return default_config() if path is None else load_config(path)


def _stem(report: RunReport) -> str:
    c = report.cfg
    return f"{report.model}_{c.mode}_in{c.l_in}_out{c.l_out}_L{c.fixed_l_spec or 0}_s{c.seed}_t{report.trial}"


def _execute(task) -> list[RunReport]:
    exp, preset, cfg = task
    return run_trials(cfg, exp.model_named(preset), exp.system, exp.scheduler, exp.oracle)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _trace(path: str, report: RunReport) -> dict:
    copy_bytes = 4096 if any(r.realloc_bytes > 0 for r in report.records) else 2048
    nmc = coprocessing_window(npu_bursts=64, copy_bytes=copy_bytes, buffer_lines=32, seed=report.cfg.seed)
    dump_trace(nmc.trace, path)
    return contention_report(nmc.timeline)


def cmd_validate(args) -> int:
    exp = load_config(args.path)
    problems = exp.validate()
    if problems:
        for p in problems:
            print(f"{args.path}: {p}")
        print(f"{len(problems)} problem(s)")
        return 1
    print(f"{args.path}: ok")
    return 0


def _checked(exp: ExperimentConfig) -> ExperimentConfig:
    problems = exp.validate()
    if problems:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(problems))
    return exp


def cmd_run(args) -> int:
    exp = _load(args.config)
    preset = args.model or exp.model.name
    sweep = replace(exp.sweep, models=(preset,),
                    l_in_out=((args.l_in or exp.sweep.l_in_out[0][0], args.l_out or exp.sweep.l_in_out[0][1]),))
    exp = _checked(replace(exp, sweep=sweep))
    l_spec = args.l_spec
    if l_spec is None and args.mode != "lp-spec+coproc+sched":
        l_spec = exp.sweep.l_spec[0]
    l_in, l_out = sweep.l_in_out[0]
    cfg = RunConfig(args.mode, l_in, l_out, l_spec, args.seed, exp.sweep.trials, exp.sweep.oracle,
                    exp.sweep.bonus_token)
    reports = _execute((exp, preset, cfg))
    out = Path(args.out or exp.out_dir)
    for rep in reports:
        _write(out / f"{_stem(rep)}.csv", rep.records_csv())
        print(rep.one_line())
    _write(out / f"{_stem(reports[0])}_summary.csv", summaries_csv([r.summary() for r in reports]))
    if args.trace_nmc:
        rep = _trace(args.trace_nmc, reports[0])
        print(f"nmc trace: {args.trace_nmc} (stall cycles {rep['stall_cycles']}, overlaps {rep['overlaps']})")
    return 0


RATIO_FIELDS = ("model", "l_in", "l_out", "l_spec", "mode", "speedup_vs_npu_si", "speedup_vs_pim_si",
                "energy_gain_vs_npu_si", "edp_gain_vs_npu_si")


def ratio_table(reports: list[RunReport]) -> list[dict]:
    """Per-cell ratios against both baselines, then one geomean row per mode."""
    vs_npu = aggregate(reports, "npu-si")
    rows = []
    cells_pim = {}
    if any(r.cfg.mode == "pim-si" for r in reports):
        vs_pim = aggregate(reports, "pim-si")
        cells_pim = {(c[0], c[1]): c[2] for c in vs_pim.cells}
    for key, mode, speed, energy, edp in vs_npu.cells:
        model, l_in, l_out, l_spec, seed, trial = key
        rows.append(dict(model=model, l_in=l_in, l_out=l_out, l_spec=l_spec, mode=mode,
                         speedup_vs_npu_si=speed, speedup_vs_pim_si=cells_pim.get((key, mode), ""),
                         energy_gain_vs_npu_si=energy, edp_gain_vs_npu_si=edp))
    for mode in vs_npu.speedup:
        rows.append(dict(model="geomean", l_in="", l_out="", l_spec="", mode=mode,
                         speedup_vs_npu_si=vs_npu.speedup[mode],
                         speedup_vs_pim_si=vs_pim.speedup.get(mode, "") if cells_pim else "",
                         energy_gain_vs_npu_si=vs_npu.energy_gain[mode],
                         edp_gain_vs_npu_si=vs_npu.edp_gain[mode]))
    return rows


def ratio_csv(rows: list[dict]) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RATIO_FIELDS)
    for row in rows:
        w.writerow(repr(v) if isinstance(v, float) else str(v) for v in (row[f] for f in RATIO_FIELDS))
    return buf.getvalue()


def run_sweep(exp: ExperimentConfig) -> list[RunReport]:
    tasks = [(exp, preset, cfg) for preset, cfg in exp.sweep.points()]
    if not tasks:
        raise ConfigurationError("sweep is empty")
    workers = worker_count(len(tasks))
    if workers == 1:
        results = [_execute(t) for t in tasks]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_execute, tasks))
    return [r for batch in results for r in batch]


def cmd_sweep(args) -> int:
    exp = _checked(_load(args.config))
    reports = run_sweep(exp)
    out = Path(args.out or exp.out_dir)
    for rep in reports:
        _write(out / "runs" / f"{_stem(rep)}.csv", rep.records_csv())
    _write(out / "summary.csv", summaries_csv([r.summary() for r in reports]))
    rows = ratio_table(reports) if any(r.cfg.mode == "npu-si" for r in reports) else []
    if rows:
        _write(out / "ratios.csv", ratio_csv(rows))
        print(f"{'mode':<22} {'vs npu-si':>10} {'vs pim-si':>10}")
        for row in rows:
            if row["model"] == "geomean":
                pim = row["speedup_vs_pim_si"]
                print(f"{row['mode']:<22} {row['speedup_vs_npu_si']:>10.2f} "
                      f"{pim if pim == '' else format(pim, '.2f'):>10}")
    if args.trace_nmc:
        _trace(args.trace_nmc, reports[0])
    print(f"{len(reports)} runs written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pimspec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check every invariant of a config file")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="simulate one configuration")
    p.add_argument("--config", help="YAML config (default: the shipped one)")
    p.add_argument("--mode", required=True, help=" | ".join(MODES))
    p.add_argument("--model", help="model preset, overrides the config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--l-spec", type=int, help="fixed tree size, or node cap for the scheduled mode")
    p.add_argument("--l-in", type=int)
    p.add_argument("--l-out", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--trace-nmc", metavar="PATH", help="write an NMC command trace")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the config's sweep and emit the ratio table")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--trace-nmc", metavar="PATH")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
