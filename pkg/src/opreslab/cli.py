"""Command line entry point: ``opreslab generate|derive|train|eval|experiment``.

Exit codes: 0 success, 2 usage error, 3 runtime or data error, 4 numerical
failure. Every option may also come from ``--config FILE`` (JSON object
keyed by option name); an explicit flag wins over the file, which wins over
the built-in default. The resolved values and their sources are logged at
startup.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("opreslab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NUMERICAL = 0, 2, 3, 4
MIN_RES = {"darcy": 16, "burgers": 128}


class UsageError(Exception):
    pass


def _out_root() -> Path:
    return Path(os.environ.get("OPRESLAB_OUT", "opreslab_out"))


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


# options: (flags, dest, default, help, extra argparse kwargs)
COMMON = [
    (("--config",), "config", None, "JSON file of option values (flags override it)", {}),
    (("--seed",), "seed", 0, "root seed; all randomness derives from it via named substreams", {"type": int}),
    (("--out",), "out", None, "output location (default under $OPRESLAB_OUT or ./opreslab_out)", {}),
    (("--no-clobber",), "no_clobber", False, "refuse to overwrite existing outputs", {"action": "store_true"}),
    (("--jobs",), "jobs", None, "parallel workers (default: available cores)", {"type": int}),
]

COMMANDS = {
    "generate": ("generate a master-resolution dataset pack", [
        (("--pde",), "pde", "darcy", "darcy or burgers", {"choices": ["darcy", "burgers"]}),
        (("--res",), "res", None, "master resolution (default 128 for darcy, 1024 for burgers)", {"type": int}),
        (("--n",), "n", 640, "number of samples", {"type": int}),
        (("--T",), "T", 1.0, "Burgers terminal time", {"type": float}),
        (("--flip",), "flip", False, "Darcy: swap the two coefficient levels", {"action": "store_true"}),
    ]),
    "derive": ("filter and resample a pack to other resolutions", [
        (("--in",), "input", None, "master pack (.gpk)", {}),
        (("--limits",), "limits", None, "low-pass limit(s), comma separated; omit for no filter", {}),
        (("--res",), "res", None, "target resolutions, comma separated", {}),
    ]),
    "train": ("train an FNO on one pack or a resolution mix", [
        (("--data",), "data", None, "comma-separated packs (one per resolution) or a mix JSON file", {}),
        (("--mix",), "mix", None, "proportions as 'res:p,...' (default: all data at the first pack's resolution)", {}),
        (("--n-train",), "n_train", None, "training samples drawn (default: all of the smallest pack)", {"type": int}),
        (("--val",), "val", None, "comma-separated validation packs", {}),
        (("--loss",), "loss", "data", "data or physics (dual objective)", {"choices": ["data", "physics"]}),
        (("--w",), "w", None, "physics weight, 0 <= w < 1 (default 0.1 with --loss physics)", {"type": float}),
        (("--epochs",), "epochs", 50, "training epochs (150 for the full-length protocol)", {"type": int}),
        (("--lr",), "lr", None, "learning rate (default: per-dataset preset)", {"type": float}),
        (("--wd",), "weight_decay", None, "weight decay (default: per-dataset preset)", {"type": float}),
        (("--batch",), "batch_size", None, "batch size (default: per-dataset preset)", {"type": int}),
        (("--width",), "width", 32, "FNO channel width", {"type": int}),
        (("--layers",), "layers", 4, "spectral layers", {"type": int}),
        (("--modes",), "max_modes", None, "max modes per axis (default: training resolution / 2)", {"type": int}),
        (("--lift",), "lift_dim", 128, "lifting/projection MLP width", {"type": int}),
    ]),
    "eval": ("evaluate a checkpoint on packs and write spectra", [
        (("--checkpoint",), "checkpoint", None, "checkpoint directory (run_dir/checkpoint)", {}),
        (("--data",), "data", None, "comma-separated test packs", {}),
        (("--bandlimit",), "bandlimit", None, "evaluate through the band-limit wrapper at this anchor resolution", {"type": int}),
        (("--metric",), "metric", "mse", "mse or rel_l2", {"choices": ["mse", "rel_l2"]}),
    ]),
    "experiment": ("run an experiment plan (JSON) and write a report directory", [
        (("--plan",), "plan", None, "plan file", {}),
    ]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opreslab", description=__doc__.split("\n")[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (helptext, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        for flags, dest, default, h, kw in COMMON + opts:
            shown = "" if default is None or kw.get("action") == "store_true" else f" [default: {default}]"
            p.add_argument(*flags, dest=dest, default=None, help=h + shown, **kw)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Apply flag > config file > default, and log each value's source."""
    opts = COMMON + COMMANDS[args.command][1]
    defaults = {dest: default for _, dest, default, _, _ in opts}
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except ValueError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
    cfg, source = {}, {}
    for dest, default in defaults.items():
        flag = getattr(args, dest)
        if flag is not None and flag is not False:
            cfg[dest], source[dest] = flag, "flag"
        elif dest in file_cfg:
            cfg[dest], source[dest] = file_cfg[dest], "config"
        else:
            cfg[dest], source[dest] = default, "default"
    if cfg["jobs"] is None:
        cfg["jobs"] = os.cpu_count() or 1
    log.info("%s: %s", args.command, ", ".join(f"{k}={cfg[k]!r} ({source[k]})" for k in sorted(cfg)))
    return cfg


def _check_clobber(path: Path, cfg: dict) -> None:
    if cfg["no_clobber"] and path.exists():
        raise FileExistsError(f"{path} exists and --no-clobber is set")


def _require(cfg: dict, key: str, flag: str) -> None:
    if cfg.get(key) in (None, ""):
        raise UsageError(f"{flag} is required")


# commands -------------------------------------------------------------------------------

def cmd_generate(cfg: dict) -> int:
    from .generators import burgers_pack, darcy_pack, gen_burgers, gen_darcy
    from .gridpack import save_pack

    pde = cfg["pde"]
    res = cfg["res"] if cfg["res"] is not None else (128 if pde == "darcy" else 1024)
    if res % 2 or res < MIN_RES[pde]:
        raise UsageError(f"--res must be even and >= {MIN_RES[pde]} for {pde}, got {res}")
    if cfg["n"] < 1:
        raise UsageError(f"--n must be >= 1, got {cfg['n']}")
    if cfg["T"] <= 0:
        raise UsageError(f"--T must be positive, got {cfg['T']}")
    out_dir = Path(cfg["out"]) if cfg["out"] else _out_root() / "data"
    name = f"{pde}{'_flip' if cfg['flip'] else ''}_r{res}.gpk"
    path = out_dir / name
    _check_clobber(path, cfg)
    if pde == "darcy":
        pack = darcy_pack(gen_darcy(cfg["n"], res, cfg["seed"], flip=cfg["flip"], workers=cfg["jobs"]),
                          cfg["seed"], cfg["flip"])
    else:
        pack = burgers_pack(gen_burgers(cfg["n"], res, cfg["T"], cfg["seed"], workers=cfg["jobs"]),
                            cfg["seed"], cfg["T"])
    save_pack(pack, path, cfg["no_clobber"])
    log.info("wrote %s (%d samples at %d)", path, pack.count, res)
    print(path)
    return EXIT_OK


def cmd_derive(cfg: dict) -> int:
    from .generators import derive_resolutions
    from .gridpack import load_pack, save_pack

    _require(cfg, "input", "--in")
    _require(cfg, "res", "--res")
    resolutions = _int_list(cfg["res"])
    limits = _int_list(cfg["limits"]) if cfg["limits"] not in (None, "") else [None]
    pack = load_pack(cfg["input"])
    too_big = [r for r in resolutions if r > pack.resolution]
    if too_big:
        raise UsageError(f"--res {too_big} exceeds master resolution {pack.resolution}")
    bad = [lim for lim in limits if lim is not None and (lim < 0 or 2 * lim > pack.resolution)]
    if bad:
        raise UsageError(f"--limits {bad} outside [0, {pack.resolution // 2}]")
    out_dir = Path(cfg["out"]) if cfg["out"] else Path(cfg["input"]).parent
    stem = Path(cfg["input"]).stem.rsplit("_r", 1)[0]
    pack.meta["lineage"] = {**(pack.meta.get("lineage") or {}), "master": str(cfg["input"])}
    for lim in limits:
        for derived in derive_resolutions(pack, resolutions, lim):
            tag = f"_l{lim}" if lim is not None else ""
            path = out_dir / f"{stem}{tag}_r{derived.resolution}.gpk"
            if path.resolve() == Path(cfg["input"]).resolve():
                # unfiltered copy at the master resolution: the master already is that pack
                print(path)
                continue
            _check_clobber(path, cfg)
            save_pack(derived, path, cfg["no_clobber"])
            print(path)
    return EXIT_OK


def _load_packs(spec_text: str) -> dict:
    from .gridpack import load_pack

    packs = {}
    for p in str(spec_text).split(","):
        p = p.strip()
        if not p:
            continue
        pack = load_pack(p)
        if pack.resolution in packs:
            raise UsageError(f"two packs at resolution {pack.resolution}")
        packs[pack.resolution] = pack
    if not packs:
        raise UsageError("no packs given")
    return packs


def cmd_train(cfg: dict) -> int:
    from .models import FnoSpec, init_params
    from .training import MixSpec, TrainConfig, compose_mix, train, write_run

    _require(cfg, "data", "--data")
    mix_text = cfg["mix"]
    data = str(cfg["data"])
    if data.endswith(".json"):
        mixfile = json.loads(Path(data).read_text())
        data = ",".join(mixfile["packs"])
        mix_text = mix_text or mixfile.get("mix")
        if cfg["n_train"] is None and "total" in mixfile:
            cfg["n_train"] = int(mixfile["total"])
    w = cfg["w"] if cfg["w"] is not None else (0.1 if cfg["loss"] == "physics" else 0.0)
    if not 0.0 <= w < 1.0:
        raise UsageError(f"--w must satisfy 0 <= w < 1, got {w}")
    if cfg["loss"] == "data" and w != 0.0:
        raise UsageError("--w needs --loss physics")
    if cfg["loss"] == "physics" and w == 0.0:
        raise UsageError("--loss physics needs --w > 0")
    if cfg["epochs"] < 1:
        raise UsageError(f"--epochs must be >= 1, got {cfg['epochs']}")
    packs = _load_packs(data)
    first = next(iter(packs.values()))
    pool = min(p.count for p in packs.values())
    n_train = cfg["n_train"] if cfg["n_train"] is not None else pool
    try:
        mix = MixSpec.parse(mix_text, n_train) if mix_text else MixSpec.single(first.resolution, n_train)
    except ValueError as exc:
        raise UsageError(f"--mix: {exc}") from None
    pde = first.meta.get("pde") or "darcy"
    loss = "data+physics" if w > 0 else "data"
    overrides = {k: cfg[k] for k in ("lr", "weight_decay", "batch_size") if cfg[k] is not None}
    try:
        config = TrainConfig.preset(pde, loss, epochs=cfg["epochs"], seed=cfg["seed"], w=w, **overrides)
    except ValueError:
        config = TrainConfig(loss=loss, w=w, epochs=cfg["epochs"], seed=cfg["seed"], **overrides)
    tset = compose_mix(packs, mix, cfg["seed"])
    spec = FnoSpec(dims=first.dims, width=cfg["width"], layers=cfg["layers"], lift_dim=cfg["lift_dim"],
                   proj_dim=cfg["lift_dim"], max_modes=cfg["max_modes"] or max(mix.resolutions) // 2)
    val = {}
    if cfg["val"]:
        val = {r: (p.inputs, p.labels) for r, p in _load_packs(cfg["val"]).items()}
    run_dir = Path(cfg["out"]) if cfg["out"] else _out_root() / "runs" / f"{pde}_{mix.label()}_s{cfg['seed']}"
    _check_clobber(run_dir / "log.csv", cfg)

    def progress(row):
        log.info("epoch %d train_loss %.4e", row["epoch"], row["train_loss"])

    result = train(init_params(spec, cfg["seed"]), spec, tset, config, val, progress)
    write_run(run_dir, result, spec, config, mix, {"data": sorted(str(p.meta.get("source")) for p in packs.values())})
    print(run_dir)
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    from .diagnostics import score_predictions
    from .models import BandLimitWrapper, bandlimited_forward, load_checkpoint, predict
    from .spectral import report_from_arrays

    _require(cfg, "checkpoint", "--checkpoint")
    _require(cfg, "data", "--data")
    params, spec, _ = load_checkpoint(cfg["checkpoint"])
    packs = _load_packs(cfg["data"])
    out_dir = Path(cfg["out"]) if cfg["out"] else Path(cfg["checkpoint"]).parent / "eval"
    _check_clobber(out_dir / "report.json", cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for r in sorted(packs):
        pack = packs[r]
        chunk = max(1, (1 << 17) // r ** spec.dims)
        if cfg["bandlimit"]:
            pred = bandlimited_forward(BandLimitWrapper(params, spec, cfg["bandlimit"]), pack.inputs, chunk)
        else:
            pred = predict(params, spec, pack.inputs, chunk)
        if not np.all(np.isfinite(pred)):
            log.error("non-finite predictions at resolution %d", r)
            return EXIT_NUMERICAL
        score = score_predictions(pred, pack.labels, cfg["metric"])
        cell = out_dir / f"r{r}"
        cell.mkdir(exist_ok=True)
        (cell / "spectrum.csv").write_text(report_from_arrays(pred, pack.labels, spec.dims).to_csv())
        (cell / "mse.txt").write_text(repr(score) + "\n")
        summary[str(r)] = score
        log.info("resolution %d: %s %.6e", r, cfg["metric"], score)
    (out_dir / "report.json").write_text(json.dumps(
        {"checkpoint": str(cfg["checkpoint"]), "metric": cfg["metric"], "bandlimit": cfg["bandlimit"],
         "scores": summary}, indent=2, sort_keys=True) + "\n")
    print(out_dir)
    return EXIT_OK


def cmd_experiment(cfg: dict) -> int:
    from .diagnostics import ExperimentPlan, HeatmapReport, run_experiment

    _require(cfg, "plan", "--plan")
    try:
        plan = ExperimentPlan.load(cfg["plan"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid plan {cfg['plan']}: {exc}") from None
    if not Path(plan.master).exists():
        raise FileNotFoundError(f"plan {cfg['plan']} references missing pack {plan.master}")
    out_dir = Path(cfg["out"]) if cfg["out"] else _out_root() / "reports" / Path(cfg["plan"]).stem
    _check_clobber(out_dir / "report.json", cfg)
    reports = run_experiment(plan, out_dir, cfg["jobs"])
    grids = [reports] if isinstance(reports, HeatmapReport) else list(reports.values())
    failed = [msg for g in grids for msg in g.failed.values()]
    print(out_dir)
    if failed:
        log.error("%d cell(s) failed; first: %s", len(failed), failed[0])
        return EXIT_NUMERICAL
    return EXIT_OK


HANDLERS = {
    "generate": cmd_generate,
    "derive": cmd_derive,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    from .generators import SolverError
    from .gridpack import PackFormatError
    from .tensor import ShapeError
    from .training import TrainingError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"opreslab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (FileNotFoundError, FileExistsError, PackFormatError, SolverError, ShapeError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
