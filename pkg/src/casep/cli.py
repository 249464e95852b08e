"""Command-line front end: ``ca gen|train|eval|traverse|report``.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric abort,
5 compatibility error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from casep import __version__
from casep import config as cfgmod
from casep.evaluation import (
    EvalContractError,
    interpolate_salient,
    pca_salient,
    reconstruct_common,
    separation_report,
    swap_score,
    traverse_salient,
)
from casep.nn import NumericError
from casep.regularizers import disc_mi_estimate, knn_mi_estimate, mine_estimate
from casep.separator import io as sep_io
from casep.separator import oracle_separator, split
from casep.trainer import TrainingAborted, train_stage1, write_log
from casep.world import ConfigError, build_world, make_splits
from casep.world import io as wio

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_COMPAT = 0, 2, 3, 4, 5
SPLITS = ("x_train", "y_train", "x_test", "y_test")

log = logging.getLogger("casep")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# helpers ---------------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _out_dir(args, cfg) -> Path:
    out = args.out or cfg.out_dir
    if not out:
        raise CliError(EXIT_CONFIG, "no output directory: pass --out or set out_dir in the config")
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_IO, f"output directory {path} is not writable: {exc}") from None
    return path


def _write_json(path: Path, obj) -> None:
    sep_io.atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


class Manifest:
    """Written first (status "running") and rewritten on completion."""

    def __init__(self, out: Path, command: str, cfg):
        self.path = out / f"manifest_{command}.json"
        self.data = {"command": command, "tool_version": __version__, "config": cfg.to_dict(),
                     "config_hash": cfg.digest(), "seed": cfg.train.seed, "world_seed": cfg.world.seed,
                     "start": _now(), "end": None, "status": "running", "files": []}
        _write_json(self.path, self.data)

    def finish(self, files, status: str = "complete"):
        self.data.update(end=_now(), status=status, files=sorted(str(f) for f in files))
        _write_json(self.path, self.data)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if not isinstance(v, (int, np.integer)) else int(v) for v in r])


def _datasets(cfg, world, data_dir: Path | None, required: bool):
    if data_dir is not None and all((data_dir / f"{n}.caw").exists() for n in SPLITS):
        try:
            return {n: wio.load(data_dir / f"{n}.caw") for n in SPLITS}
        except (OSError, wio.FormatError) as exc:
            raise CliError(EXIT_IO, f"cannot read datasets: {exc}") from None
    if required:
        raise CliError(EXIT_IO, f"datasets not found in {data_dir}")
    return make_splits(world, cfg.data.n_train, cfg.data.n_test)


def _check_compat(sep, world):
    if sep.spec.d_w != world.cfg.d_w or sep.spec.n_salient != world.cfg.n_salient:
        raise CliError(EXIT_COMPAT, f"checkpoint (d_w={sep.spec.d_w}, n_salient={sep.spec.n_salient}) does not "
                                    f"match config (d_w={world.cfg.d_w}, n_salient={world.cfg.n_salient})")


def _load_checkpoint(path):
    try:
        return sep_io.load(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint: {exc}") from None
    except (sep_io.FormatError, KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_COMPAT, f"incompatible checkpoint: {exc}") from None


def _separator(args, cfg, world):
    if getattr(args, "oracle", False):
        return oracle_separator(world), None
    if not args.checkpoint:
        raise CliError(EXIT_CONFIG, "--checkpoint is required (or --oracle)")
    sep, _, _ = _load_checkpoint(args.checkpoint)
    _check_compat(sep, world)
    return sep, hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()


def _data_dir(args, out: Path) -> tuple[Path, bool]:
    if args.data:
        return Path(args.data), True
    return out / "data", False


# commands --------------------------------------------------------------------

def cmd_gen(args, cfg) -> list[Path]:
    out = _out_dir(args, cfg)
    man = Manifest(out, "gen", cfg)
    world = build_world(cfg.world)
    data = out / "data"
    data.mkdir(exist_ok=True)
    files = []
    for name, ds in make_splits(world, cfg.data.n_train, cfg.data.n_test).items():
        wio.save(ds, data / f"{name}.caw")
        wio.save_csv(ds, data / f"{name}.csv", limit=cfg.eval.preview_rows)
        files += [data / f"{name}.caw", data / f"{name}.csv"]
    man.finish(files)
    return files


def cmd_train(args, cfg) -> list[Path]:
    out = _out_dir(args, cfg)
    data_dir, required = _data_dir(args, out)
    world = build_world(cfg.world)
    ds = _datasets(cfg, world, data_dir, required)
    man = Manifest(out, "train", cfg)
    try:
        res = train_stage1(world, cfg.train, ds["x_train"], ds["y_train"])
    except TrainingAborted as exc:
        dump = out / "nan_dump.csv"
        write_log(exc.rows, dump)
        man.finish([dump], status="aborted")
        raise CliError(EXIT_NUMERIC, f"{exc}; last log rows written to {dump}") from None
    ckpt, side, logf = out / "checkpoint.casp", out / "checkpoint.json", out / "train_log.csv"
    meta = {"config_hash": cfg.digest(), "step": cfg.train.total_steps}
    sep_io.save(ckpt, res.separator, res.adversaries.params, meta)
    _write_json(side, meta | {"adversary_mode": res.adversaries.mode})
    write_log(res.log, logf)
    _write_json(out / "train_report.json", res.report)
    files = [ckpt, side, logf, out / "train_report.json"]
    man.finish(files)
    return files


def _mi_block(cfg, sep, y_test) -> list[dict]:
    f = split(y_test.latents, sep)
    c, s = f.c, f.salient
    out = []
    for est in cfg.eval.mi_estimators:
        if est == "knn":
            out.append(knn_mi_estimate(c, s, k=cfg.eval.mi_k).to_json())
        elif est == "disc":
            out.append(disc_mi_estimate(c, s, seed=cfg.train.seed).to_json())
        else:
            out.append(mine_estimate(c, s, seed=cfg.train.seed).to_json())
    return out


def cmd_eval(args, cfg) -> list[Path]:
    out = _out_dir(args, cfg)
    world = build_world(cfg.world)
    sep, ck_hash = _separator(args, cfg, world)
    data_dir, required = _data_dir(args, out)
    ds = _datasets(cfg, world, data_dir, required)
    man = Manifest(out, "eval", cfg)
    xt, yt = ds["x_test"], ds["y_test"]
    rows = separation_report(sep, world, xt, yt, cfg.eval.probe_folds, cfg.eval.probe_seed)
    metrics = {
        "tool_version": __version__,
        "assumption": cfg.assumption,
        "run": {"config_hash": cfg.digest(), "seed": cfg.train.seed, "world_seed": cfg.world.seed,
                "regularizer_mode": "oracle" if ck_hash is None else cfg.train.regularizer_mode,
                "separator": "oracle" if ck_hash is None else "checkpoint", "checkpoint_sha256": ck_hash},
        "separation": [r.to_json() for r in rows],
        "mi": _mi_block(cfg, sep, yt),
    }
    if sep.spec.n_salient == 1:
        n = min(len(xt), len(yt))
        metrics["swap"] = swap_score(sep, world, xt.subset(slice(0, n)), yt.subset(slice(0, n)))
    validate_metrics(metrics)
    files = [out / "metrics.json", out / "reconstruction.csv", out / "interpolation.csv"]
    _write_json(files[0], metrics)
    k = min(cfg.eval.preview_rows, len(xt))
    rec = reconstruct_common(sep, world, xt.latents[:k])
    obs_cols = [f"obs_{i}" for i in range(rec.shape[1])]
    _write_rows(files[1], ["index"] + obs_cols, [[i] + list(r) for i, r in enumerate(rec)])
    alphas = cfgmod.parse_alphas(cfg.eval.interp_grid)
    try:
        inter = interpolate_salient(sep, world, xt.latents[0], yt.latents[0], alphas)
    except EvalContractError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    _write_rows(files[2], ["alpha"] + obs_cols, [[a] + list(r) for a, r in zip(alphas, inter)])
    man.finish(files)
    return files


def cmd_traverse(args, cfg) -> list[Path]:
    out = _out_dir(args, cfg)
    world = build_world(cfg.world)
    sep, _ = _separator(args, cfg, world)
    data_dir, required = _data_dir(args, out)
    ds = _datasets(cfg, world, data_dir, required)
    basis = pca_salient(split(ds["y_test"].latents, sep).salient, cfg.eval.pca_components)
    if not 0 <= args.direction < cfg.eval.pca_components:
        raise CliError(EXIT_COMPAT, f"direction {args.direction} out of range [0, {cfg.eval.pca_components})")
    alphas = cfgmod.parse_alphas(args.alphas if args.alphas is not None else cfg.eval.alpha_grid)
    xt = ds["x_test"]
    if not 0 <= args.sample < len(xt):
        raise CliError(EXIT_COMPAT, f"sample index {args.sample} out of range")
    man = Manifest(out, "traverse", cfg)
    obs = traverse_salient(sep, world, xt.latents[args.sample], basis, args.direction, alphas)
    path = out / "traversal.csv"
    _write_rows(path, ["alpha"] + [f"obs_{i}" for i in range(obs.shape[1])], [[a] + list(r) for a, r in zip(alphas, obs)])
    man.finish([path])
    return [path]


# report ----------------------------------------------------------------------

def _fmt(p: dict) -> str:
    return f"{p['mean']:.2f} ± {p['std']:.2f}"


def _mi_value(m: dict) -> float | None:
    for e in m.get("mi", []):
        if e["estimator"] == "knn":
            return e["value_nats"]
    return None


def build_report(metrics: list[tuple[Path, dict]]) -> str:
    lines = ["# Separation report", ""]
    for path, m in metrics:
        run = m["run"]
        lines += [f"## {path.parent.name or path.parent}",
                  "", f"regularizer: `{run['regularizer_mode']}`, seed {run['seed']}, assumption {m['assumption']}", ""]
        spaces = sorted({k for r in m["separation"] for k in r["probes"]},
                        key=["common", "salient", "salient1", "salient2"].index)
        lines.append("| attribute | " + " | ".join(spaces) + " | Δ |")
        lines.append("|---" * (len(spaces) + 2) + "|")
        for r in m["separation"]:
            delta = "-" if r["delta"] is None else f"{r['delta']['value']:.2f}"
            lines.append(f"| {r['attribute']} | " + " | ".join(_fmt(r["probes"][s]) for s in spaces) + f" | {delta} |")
        mi = _mi_value(m)
        extra = []
        if mi is not None:
            extra.append(f"kNN-MI(c, s) on Y test: {mi:.4f} nats")
        if "swap" in m:
            sw = m["swap"]
            ratio = sw["swap_mse"] / sw["baseline_mse"] if sw["baseline_mse"] > 0 else float("nan")
            extra.append(f"swap/baseline MSE ratio: {ratio:.4f} (swap {sw['swap_mse']:.4g}, baseline {sw['baseline_mse']:.4g})")
        lines += [""] + [f"- {e}" for e in extra] + [""]
    # pair regularizer-free runs with regularized runs sharing seed and world
    by_key: dict = {}
    for _, m in metrics:
        run = m["run"]
        by_key.setdefault((run["seed"], run.get("world_seed"), m["assumption"]), []).append(m)
    pairs = []
    for key, ms in sorted(by_key.items(), key=lambda kv: str(kv[0])):
        off = [m for m in ms if m["run"]["regularizer_mode"] == "none"]
        on = [m for m in ms if m["run"]["regularizer_mode"] not in ("none", "oracle")]
        for a in off:
            for b in on:
                ma, mb = _mi_value(a), _mi_value(b)
                if ma is not None and mb is not None:
                    pairs.append((key[0], b["run"]["regularizer_mode"], ma, mb))
    if pairs:
        lines += ["## MI drop (regularizer off → on)", "", "| seed | regularizer | kNN-MI off → on | drop factor |",
                  "|---|---|---|---|"]
        for seed, mode, ma, mb in pairs:
            factor = ma / mb if mb > 0 else float("inf")
            lines.append(f"| {seed} | {mode} | {ma:.4g} → {mb:.2g} | {factor:.1f}× |")
        lines.append("")
    return "\n".join(lines)


def cmd_report(args, cfg=None) -> list[Path]:
    root = Path(args.out)
    if not root.is_dir():
        raise CliError(EXIT_IO, f"{root} is not a directory")
    found = sorted(root.rglob("metrics.json"))
    if not found:
        raise CliError(EXIT_IO, f"no metrics.json found under {root}")
    metrics = []
    for p in found:
        try:
            metrics.append((p.relative_to(root), json.loads(p.read_text())))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_IO, f"cannot read {p}: {exc}") from None
    path = root / "report.md"
    try:
        sep_io.atomic_write(path, build_report(metrics).encode())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report: {exc}") from None
    return [path]


# schema ----------------------------------------------------------------------

def metrics_schema() -> dict:
    return json.loads(resources.files("casep").joinpath("schemas/metrics.schema.json").read_text())


def validate_metrics(metrics: dict) -> None:
    jsonschema.validate(metrics, metrics_schema())


# entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ca", description="Contrastive analysis toolkit on synthetic worlds.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "eval", "traverse"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", default=None, help="run directory (overrides out_dir)")
        if name != "gen":
            sp.add_argument("--data", default=None, help="directory with *.caw datasets (must exist)")
        if name in ("eval", "traverse"):
            sp.add_argument("--checkpoint", default=None)
            sp.add_argument("--oracle", action="store_true", help="use the ground-truth projector separator")
        if name == "traverse":
            sp.add_argument("--direction", type=int, default=0)
            sp.add_argument("--alphas", default=None, help="grid 'start:stop:step'")
            sp.add_argument("--sample", type=int, default=0, help="index into the X test set")
    rp = sub.add_parser("report")
    rp.add_argument("--out", required=True)
    rp.add_argument("--config", default=None, help="ignored; accepted for a uniform grammar")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "traverse": cmd_traverse}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            files = cmd_report(args)
        else:
            try:
                cfg = cfgmod.load(args.config)
            except OSError as exc:
                raise CliError(EXIT_IO, f"cannot read config: {exc}") from None
            files = COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"ca {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"ca {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"ca {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"ca {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    for f in files:
        print(f)
    return EXIT_OK


def main(argv=None) -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
