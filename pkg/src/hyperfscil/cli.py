"""Command-line entry point: ``hyperfscil {gen-data,run,ablate,sweep,report,heatmap}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import hyperbolic
from .data import DataError, EmbeddingDataset, gen_synthetic, load_bundle, make_splits, write_bundle
from .metrics import RunReport, aggregate
from .presets import PRESETS, Preset, get_preset, synthetic_for
from .protocol import TrainConfig, run_full_stream

logger = logging.getLogger("hyperfscil")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "HYPERFSCIL_SEED"

ABLATION_ROWS = [("Base", False, False), ("w/o SSP", False, True), ("w/o Hyp", True, False), ("Ours", True, True)]


class ConfigError(ValueError):
    pass


# --- configuration ---

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_RUN_FIELDS = {"dataset", "preset", "seed", "out"}


def _check_types(cfg: dict) -> None:
    for key, value in cfg.items():
        if key in _TRAIN_FIELDS:
            kind = type(_TRAIN_FIELDS[key].default)
            if kind is bool:
                ok = isinstance(value, bool)
            elif kind is int:
                ok = isinstance(value, int) and not isinstance(value, bool)
            else:
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            if not ok:
                raise ConfigError(f"{key} must be {kind.__name__}, got {value!r}")
        elif key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"seed must be an integer, got {value!r}")
        elif key in ("dataset", "preset", "out"):
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{key} must be a string, got {value!r}")


def load_config_file(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(_TRAIN_FIELDS) - _RUN_FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    _check_types(cfg)
    return cfg


def resolve_config(file_cfg: dict, flags: dict) -> dict:
    """Merge defaults < preset < config file < flags into a complete, validated config."""
    merged = {**file_cfg, **{k: v for k, v in flags.items() if v is not None}}
    preset_name = merged.get("preset")
    if preset_name is None and merged.get("dataset") is None:
        raise ConfigError("need a dataset path or a preset")
    resolved = {f: _TRAIN_FIELDS[f].default for f in _TRAIN_FIELDS}
    if preset_name is not None:
        try:
            resolved.update(get_preset(preset_name).hyper)
        except KeyError as e:
            raise ConfigError(str(e)) from None
    resolved.update({k: v for k, v in merged.items() if k in _TRAIN_FIELDS})
    seed = merged.get("seed")
    if seed is None:
        env = os.environ.get(SEED_ENV)
        try:
            seed = int(env) if env is not None else 0
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    resolved.update(dataset=merged.get("dataset"), preset=preset_name, seed=seed, out=merged.get("out"))
    _check_types(resolved)
    train_config(resolved)
    return resolved


def train_config(resolved: dict) -> TrainConfig:
    try:
        return TrainConfig(**{k: resolved[k] for k in _TRAIN_FIELDS})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def prepare_dataset(resolved: dict) -> EmbeddingDataset:
    preset = get_preset(resolved["preset"]) if resolved.get("preset") else None
    seed = resolved["seed"]
    if resolved.get("dataset"):
        ds = load_bundle(resolved["dataset"])
        if not ds.sessions:
            if preset is None:
                raise ConfigError("bundle has no session assignment and no preset gives a split")
            ds = make_splits(ds, preset.split, seed)
    else:
        if preset is None or preset.synthetic is None:
            raise ConfigError(f"preset {resolved.get('preset')!r} has no synthetic data; pass --dataset")
        ds = make_splits(gen_synthetic(dataclasses.replace(preset.synthetic, seed=seed)), preset.split, seed)
    ds.check()
    return ds


# --- output helpers ---


def _num(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def heatmap_rows(heatmap: dict):
    ids = heatmap["class_ids"]
    header = ["class_id"] + [str(c) for c in ids]
    rows = [[str(c)] + [_num(v) for v in row] for c, row in zip(ids, heatmap["matrix"])]
    return header, rows


def write_run_outputs(report: RunReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({**report.config, "out": str(out)}, indent=2, sort_keys=True) + "\n")
    (out / "report.json").write_text(report.to_json())
    _write_csv(
        out / "metrics.csv",
        ["session", "accuracy", "trainable_params", "lr_final"],
        [
            [t, _num(a), report.trainable_params["base" if t == 0 else "incremental"], _num(lr)]
            for t, (a, lr) in enumerate(zip(report.accuracies, report.lr_final))
        ],
    )
    for hm in report.heatmaps:
        _write_csv(out / f"heatmap_s{hm['session']}.csv", *heatmap_rows(hm))


def execute(resolved: dict) -> RunReport:
    ds = prepare_dataset(resolved)
    # the output location does not affect results, so it stays out of the report
    echo = {k: v for k, v in resolved.items() if k != "out"}
    return run_full_stream(ds, train_config(resolved), resolved["seed"], config_echo=echo)


# --- subcommands ---


def cmd_gen_data(args) -> int:
    preset = _preset_or_fail(args.preset)
    seed = _seed(args.seed)
    cfg = synthetic_for(preset)
    overrides = {k: v for k, v in dict(num_classes=args.num_classes, dim=args.dim, M=args.templates).items() if v is not None}
    try:
        cfg = dataclasses.replace(cfg, seed=seed, **overrides)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    ds = make_splits(gen_synthetic(cfg), preset.split, seed)
    write_bundle(ds, args.out)
    n_train = int(np.sum(ds.image_split == 0))
    print(f"wrote {args.out}: {len(ds.class_ids)} classes, d={ds.d_img}, M={ds.M}, "
          f"{n_train} train / {len(ds.image_split) - n_train} test images, "
          f"{len(ds.sessions)} sessions, k_shot={ds.k_shot}, seed={ds.seed}")
    return EXIT_OK


def _run_flags(args) -> dict:
    flags = {k: getattr(args, k, None) for k in list(_TRAIN_FIELDS) + sorted(_RUN_FIELDS)}
    return flags


def _resolve(args) -> dict:
    file_cfg = load_config_file(args.config) if args.config else {}
    return resolve_config(file_cfg, _run_flags(args))


def cmd_run(args) -> int:
    resolved = _resolve(args)
    if not resolved.get("out"):
        raise ConfigError("run needs --out (or 'out' in the config)")
    report = execute(resolved)
    write_run_outputs(report, Path(resolved["out"]))
    print(f"accuracy per session: {' '.join(f'{a:.1f}' for a in report.accuracies)}")
    print(f"avg {report.avg:.1f}  pd {report.pd:.1f}  ({report.sim_mode}, ssp={report.ablation['ssp']})")
    return EXIT_OK


def _seed_list(args, resolved) -> list[int]:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",")]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    return [resolved["seed"]]


def ablation_table(resolved: dict, seeds: list[int]) -> list[dict]:
    rows = []
    for name, ssp, hyp in ABLATION_ROWS:
        reports = [execute({**resolved, "ssp": ssp, "hyp": hyp, "seed": s}) for s in seeds]
        rows.append(dict(
            name=name, hyp=hyp, ssp=ssp,
            final_accuracy=float(np.mean([r.final_accuracy for r in reports])),
            avg=float(np.mean([r.avg for r in reports])),
            pd=float(np.mean([r.pd for r in reports])),
            seeds=seeds, reports=reports,
        ))
    return rows


def cmd_ablate(args) -> int:
    resolved = _resolve(args)
    out = Path(resolved.get("out") or ".")
    rows = ablation_table(resolved, _seed_list(args, resolved))
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "ablation.csv",
        ["name", "hyp", "ssp", "final_accuracy", "avg", "pd", "n_seeds"],
        [[r["name"], str(r["hyp"]).lower(), str(r["ssp"]).lower(), _num(r["final_accuracy"]), _num(r["avg"]), _num(r["pd"]), len(r["seeds"])] for r in rows],
    )
    for r in rows:
        print(f"{r['name']:8s} final {r['final_accuracy']:.1f}  avg {r['avg']:.1f}  pd {r['pd']:.1f}")
    return EXIT_OK


def curvature_sweep(resolved: dict, c_values: list[float], seeds: list[int]) -> dict[float, list[RunReport]]:
    return {c: [execute({**resolved, "c": c, "hyp": True, "seed": s}) for s in seeds] for c in c_values}


def cmd_sweep(args) -> int:
    resolved = _resolve(args)
    try:
        c_values = [float(c) for c in args.c_values.split(",")]
    except ValueError:
        raise ConfigError(f"--c-values must be comma-separated numbers, got {args.c_values!r}") from None
    out = Path(resolved.get("out") or ".")
    sweep = curvature_sweep(resolved, c_values, _seed_list(args, resolved))
    out.mkdir(parents=True, exist_ok=True)
    header = ["metric"] + [f"c={c:g}" for c in c_values]
    metrics = [
        ("final_accuracy", lambda rs: _num(np.mean([r.final_accuracy for r in rs]))),
        ("avg", lambda rs: _num(np.mean([r.avg for r in rs]))),
        ("pd", lambda rs: _num(np.mean([r.pd for r in rs]))),
        ("sim_mode", lambda rs: rs[0].sim_mode),
    ]
    rows = [[name] + [fn(sweep[c]) for c in c_values] for name, fn in metrics]
    _write_csv(out / "curvature_sweep.csv", header, rows)
    for c in c_values:
        rs = sweep[c]
        print(f"c={c:g}: final {np.mean([r.final_accuracy for r in rs]):.1f} ({rs[0].sim_mode})")
    return EXIT_OK


def _parse_row(text: str) -> list[float]:
    try:
        row = [float(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise ConfigError(f"--row must be comma-separated numbers, got {text!r}") from None
    if not row:
        raise ConfigError("--row is empty")
    return row


def read_report(path) -> RunReport:
    try:
        d = json.loads(Path(path).read_text())
        report = RunReport.from_dict(d)
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as e:
        raise DataError(f"malformed report {path}: {e}") from e
    acc = report.accuracies
    if not acc or not all(isinstance(a, (int, float)) and 0 <= a <= 100 for a in acc):
        raise DataError(f"malformed report {path}: accuracies must be numbers in [0, 100]")
    avg, pd = aggregate(acc)
    for key, value in (("avg", avg), ("pd", pd)):
        if key in d and not math.isclose(d[key], value, rel_tol=0, abs_tol=1e-9):
            raise DataError(f"report {path}: stored {key} {d[key]} disagrees with recomputed {value}")
    return report


def summarize(rows: list[tuple[str, list[float]]]) -> list[list[str]]:
    out = []
    stats = []
    for source, acc in rows:
        avg, pd = aggregate(acc)
        stats.append((avg, pd, acc[-1]))
        out.append([source, str(len(acc)), _num(avg), _num(pd), _num(acc[-1])])
    arr = np.array(stats)
    out.append(["mean", "", *(_num(v) for v in arr.mean(axis=0))])
    out.append(["std", "", *(_num(v) for v in arr.std(axis=0))])
    return out


def cmd_report(args) -> int:
    rows: list[tuple[str, list[float]]] = []
    for text in args.row or []:
        rows.append(("row", _parse_row(text)))
    for path in args.reports:
        rows.append((str(path), read_report(path).accuracies))
    if not rows:
        raise ConfigError("report needs at least one report file or --row")
    table = summarize(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "sessions", "avg", "pd", "final"])
    w.writerows(table)
    sys.stdout.write(buf.getvalue())
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    return EXIT_OK


def cmd_heatmap(args) -> int:
    d = json.loads(Path(args.report).read_text()) if Path(args.report).is_file() else None
    if d is None or "heatmaps" not in d:
        raise DataError(f"{args.report} is not a run report with heatmaps")
    maps = {hm["session"]: hm for hm in d["heatmaps"]}
    sessions = [args.session] if args.session is not None else sorted(maps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in sessions:
        if s not in maps:
            raise ConfigError(f"report has no heatmap for session {s}")
        hm = maps[s]
        _write_csv(out / f"heatmap_s{s}.csv", *heatmap_rows(hm))
        m = np.array(hm["matrix"])
        off = m[~np.eye(len(m), dtype=bool)]
        print(f"session {s}: {len(m)} classes, mean diagonal {np.diag(m).mean():.4f}, mean off-diagonal {off.mean() if off.size else float('nan'):.4f}")
    return EXIT_OK


# --- argument parsing ---


def _preset_or_fail(name: str) -> Preset:
    try:
        return get_preset(name)
    except KeyError as e:
        raise ConfigError(str(e)) from None


def _seed(value):
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    try:
        return int(env) if env is not None else 0
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--dataset", help="FSEB bundle directory")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named hyperparameter/split preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--ssp", dest="ssp", action="store_true", default=None, help="use session-specific text snapshots")
    p.add_argument("--no-ssp", dest="ssp", action="store_false")
    p.add_argument("--hyp", dest="hyp", action="store_true", default=None, help="hyperbolic similarity")
    p.add_argument("--no-hyp", dest="hyp", action="store_false")
    for name in ("c", "tau", "alpha", "beta", "gamma", "base_lr", "inc_lr", "momentum"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)
    for name in ("rank", "base_epochs", "inc_epochs", "base_batch", "inc_batch"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperfscil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic FSEB bundle")
    p.add_argument("--preset", default="synthetic-fine", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--templates", type=int, help="text templates per class (M)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="train and evaluate the full session stream")
    _add_run_options(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run the four ssp/hyp combinations")
    _add_run_options(p)
    p.add_argument("--seeds", help="comma-separated seeds; rows are averaged over them")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="final accuracy across curvature values")
    _add_run_options(p)
    p.add_argument("--c-values", default="0,0.3,0.5,0.8")
    p.add_argument("--seeds")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="recompute Avg and PD from reports or accuracy rows")
    p.add_argument("reports", nargs="*", help="report.json files")
    p.add_argument("--row", action="append", help="comma-separated per-session accuracies")
    p.add_argument("--out", help="also write the table here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("heatmap", help="export prototype-text distance matrices from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--session", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, hyperbolic.GeometryError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
