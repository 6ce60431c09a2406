"""Command line: enumerate | run | train-predictor | report."""

from __future__ import annotations

import os

# single-threaded BLAS keeps floating-point reductions identical across --jobs
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from datetime import datetime, timezone  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402

log = logging.getLogger("decarbsim")

EXIT_USAGE = 2
CHANNEL_ALIASES = {"ghg": "ghg_er", "nox": "nox_er", "speed": "speed", "ghg_er": "ghg_er", "nox_er": "nox_er"}


class Manifest:
    """Run manifest kept on disk and rewritten atomically after every change."""

    def __init__(self, path: Path, config, scenarios, jobs: int):
        self.path = path
        self.data = {
            "artifact_version": __version__,
            "config_hash": config.source_digest(),
            "effective_config_hash": config.digest(),
            "seeds": sorted({s for sc in scenarios for s in sc.seeds}),
            "jobs": jobs,
            "started": _now(),
            "finished": None,
            "scenarios": {sc.id: {"label": sc.label, "status": "pending"} for sc in scenarios},
        }
        self.write()

    def update(self, scenario_id: str, **fields) -> None:
        self.data["scenarios"][scenario_id].update(fields)
        self.write()

    def write(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=1, sort_keys=True), encoding="utf-8")
        tmp.replace(self.path)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load(args):
    from .scenario import load_config

    overrides = {}
    if getattr(args, "mixes", None):
        overrides["mixes"] = [m.strip() for m in args.mixes.split(",") if m.strip()]
    if getattr(args, "seed", None) is not None:
        overrides["base_seed"] = args.seed
    if getattr(args, "replications", None) is not None:
        overrides["replications"] = args.replications
    return load_config(args.config, overrides)


def cmd_enumerate(args) -> int:
    from .scenario import enumerate_scenarios, filter_scenarios

    cfg = _load(args)
    scenarios = filter_scenarios(enumerate_scenarios(cfg), args.filter)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["scenario_id", "mix", "cav_mpr", "routing", "eco", "seeds"])
    for s in scenarios:
        w.writerow([s.id, s.mix, s.cav_mpr, s.routing, s.eco_driving, f"{s.seeds[0]}-{s.seeds[-1]}"])
    print(f"{len(scenarios)} scenarios")
    return 0


def _summary(results) -> list[str]:
    """GHG/NOx/TT deltas against I100 / UE / NED (the 0% CAV baseline)."""
    base = next((r for r in results if r is not None and r.scenario.key == ("I100", 0.0, "UE", "NED")), None)
    lines = [f"{'scenario':<26}{'WTW GHG kg':>12}{'dGHG%':>8}{'WTW NOx kg':>12}{'dNOx%':>8}{'TT min':>8}"
             f"{'dTT%':>8}  status"]

    def pct(a, b):
        return f"{100 * (a - b) / b:+.1f}" if base is not None and b and math.isfinite(a) else "-"

    for r in results:
        if r is None:
            continue
        m = r.mean
        b = base.mean if base is not None else {}
        lines.append(f"{r.scenario.label:<26}{m['wtw_ghg_kg']:>12.1f}{pct(m['wtw_ghg_kg'], b.get('wtw_ghg_kg')):>8}"
                     f"{m['wtw_nox_kg']:>12.3f}{pct(m['wtw_nox_kg'], b.get('wtw_nox_kg')):>8}"
                     f"{m['mean_tt_min']:>8.2f}{pct(m['mean_tt_min'], b.get('mean_tt_min')):>8}  {r.status}")
    return lines


def cmd_run(args) -> int:
    from .scenario import Workspace, enumerate_scenarios, export, filter_scenarios, prepare_predictor, run_scenarios

    cfg = _load(args)
    out = cfg.output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenarios = filter_scenarios(enumerate_scenarios(cfg), args.filter)
    if not scenarios:
        print("no scenarios match the filter", file=sys.stderr)
        return 1
    manifest = Manifest(out / "manifest.json", cfg, scenarios, args.jobs)
    ws = Workspace(cfg)
    if any(s.routing == "A" for s in scenarios):
        ws.models = prepare_predictor(cfg, ws, out)
    (out / "scenarios").mkdir(exist_ok=True)
    t0 = time.time()

    def done(k, r):
        sc = r.scenario
        manifest.update(sc.id, status=r.status, replications_ok=r.n_ok, finished=_now())
        rec = {"scenario": sc.label, "status": r.status, "mean": r.mean,
               "replications": [{"seed": x.seed, "gridlock": x.gridlock, "message": x.message, **x.metrics}
                                for x in r.replications]}
        (out / "scenarios" / f"{sc.id}.json").write_text(json.dumps(rec, indent=1, sort_keys=True), encoding="utf-8")
        log.info("[%d/%d] %s %s (%.0fs)", k + 1, len(scenarios), sc.label, r.status, time.time() - t0)

    results = run_scenarios(scenarios, ws, args.jobs, done)
    export(results, out, cfg, charts=not args.no_charts)
    manifest.data["finished"] = _now()
    manifest.write()
    print("\n".join(_summary(results)))
    bad = [r for r in results if r is None or r.status != "ok"]
    print(f"{len(scenarios) - len(bad)}/{len(scenarios)} scenarios completed; results in {out}")
    return 0 if not bad else 1


def cmd_train(args) -> int:
    import numpy as np

    from .predictor import PredictorConfig, TrainingError, save_checkpoint
    from .scenario import Workspace, checkpoint_dir, train_channel, warmup_histories

    channel = CHANNEL_ALIASES[args.channel]
    cfg = _load(args)
    out = cfg.output_dir(args.out)
    d = checkpoint_dir(cfg, out) if args.checkpoint is None else Path(args.checkpoint).parent
    d.mkdir(parents=True, exist_ok=True)
    model_cfg = PredictorConfig(**cfg["predictor"]["model"])
    if args.epochs is not None:
        from dataclasses import replace

        model_cfg = replace(model_cfg, epochs=args.epochs)
    if args.trace:
        histories = [_TraceHistory(np.loadtxt(args.trace, delimiter=",", ndmin=2))]
    else:
        histories = warmup_histories(Workspace(cfg))
    try:
        model = train_channel(histories, channel, model_cfg)
    except TrainingError as exc:
        path = d / f"{channel}_loss.json"
        path.write_text(json.dumps({"error": str(exc)}), encoding="utf-8")
        print(f"training diverged: {exc}; see {path}", file=sys.stderr)
        return 1
    path = Path(args.checkpoint) if args.checkpoint else d / f"{channel}.npz"
    save_checkpoint(model, path)
    (d / f"{channel}_loss.json").write_text(json.dumps(model.metrics["loss_history"]), encoding="utf-8")
    m = model.metrics
    print(f"channel {channel}: samples {m['samples']}, train RMSE {m['train_rmse']:.6g}, "
          f"test RMSE {m['test_rmse']:.6g}, persistence RMSE {m['persistence_rmse']:.6g}")
    print(f"checkpoint written to {path}")
    return 0


class _TraceHistory:
    """A recorded (intervals, links) series standing in for a simulation history."""

    def __init__(self, mat):
        self.mat = mat

    def matrix(self, channel):
        return self.mat

    def _default(self, channel):
        return self.mat[0]


def cmd_report(args) -> int:
    from .scenario import ReplicationResult, aggregate, enumerate_scenarios, export

    cfg = _load(args)
    out = cfg.output_dir(args.out)
    sdir = out / "scenarios"
    if not sdir.is_dir():
        print(f"{sdir}: no scenario records", file=sys.stderr)
        return EXIT_USAGE
    by_id = {s.id: s for s in enumerate_scenarios(cfg)}
    results = []
    for sc_id, sc in by_id.items():
        p = sdir / f"{sc_id}.json"
        if not p.exists():
            continue
        rec = json.loads(p.read_text(encoding="utf-8"))
        reps = [ReplicationResult(x.pop("seed"), x.pop("gridlock"), {k: v for k, v in x.items() if k != "message"},
                                  x.get("message", "")) for x in rec["replications"]]
        results.append(aggregate(sc, reps))
    export(results, out, cfg, charts=not args.no_charts)
    print("\n".join(_summary(results)))
    print(f"{len(results)} scenarios reported from {sdir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decarbsim", description=__doc__)
    p.add_argument("--version", action="version", version=f"decarbsim {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="scenario config JSON (defaults when omitted)")
        sp.add_argument("--mixes", help="comma-separated fleet mixes, overriding the config")
        sp.add_argument("--seed", type=int, help="base seed, overriding the config")
        sp.add_argument("--replications", type=int, help="replications per scenario, overriding the config")
        if out:
            sp.add_argument("--out", help="output directory (else $DECARBSIM_OUT, else the config's output_dir)")

    sp = sub.add_parser("enumerate", help="list the scenario matrix")
    common(sp, out=False)
    sp.add_argument("--filter", action="append", default=[], metavar="KEY=VALUE")
    sp.set_defaults(func=cmd_enumerate)

    sp = sub.add_parser("run", help="simulate scenarios and write results")
    common(sp)
    sp.add_argument("--filter", action="append", default=[], metavar="KEY=VALUE",
                    help="keep scenarios with mix, cav_mpr, routing, eco or id equal to VALUE (comma = any of)")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--no-charts", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("train-predictor", help="train one channel of the link-state predictor")
    common(sp)
    sp.add_argument("--channel", required=True, choices=sorted(CHANNEL_ALIASES))
    sp.add_argument("--trace", help="CSV of (intervals, links) values to train on instead of warm-up runs")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--checkpoint", help="checkpoint path (default <out>/predictor/<channel>.npz)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("report", help="rebuild CSVs and charts from per-scenario records")
    common(sp)
    sp.add_argument("--no-charts", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    from .scenario import ConfigError

    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc.filename or exc}: file not found", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
