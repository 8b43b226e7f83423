"""Command line entry point: ``flowmix {train|generate|reconstruct|interpolate|eval|probe}``.

Exit codes: 0 success, 1 usage or configuration error, 2 input error
(missing or malformed files), 3 numeric failure.  Every command writes a
``manifest.json`` into its output directory.  Without ``--out`` outputs go to
``$FLOWMIX_OUT/<command>`` (default root ``flowmix_runs``).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import training as T
from .exceptions import (
    ConfigurationError,
    FlowmixError,
    InputError,
    NumericError,
    TrainingDiverged,
)
from .io import read_cloud, read_cloud_dir, write_cloud
from .metrics import DEFAULT_TAU, JSD_RESOLUTION, N_EXACT, MetricsReport, evaluate

OUT_ENV = "FLOWMIX_OUT"
DEFAULT_ROOT = "flowmix_runs"

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(FlowmixError):
    """Bad command-line usage."""


@dataclass
class RunManifest:
    """Provenance of one command invocation."""

    command: str
    config: dict
    seed: int | None
    version: str
    started: str = ""
    wall_seconds: float = 0.0
    outputs: list = field(default_factory=list)

    def write(self, out_dir):
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")
        return path


def version_string():
    """Package version plus ``git describe`` when run from a checkout."""
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                              text=True, cwd=Path(__file__).parent, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _progress(msg):
    print(msg, file=sys.stderr, flush=True)


def _out_dir(args, command):
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, DEFAULT_ROOT)) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config_file(path):
    """Read a TOML or JSON config; a run manifest is accepted too."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    else:
        doc = json.loads(path.read_text())
    if "command" in doc and "config" in doc:
        doc = doc["config"]
    return doc


def build_config(args):
    """Preset, then config file, then explicit flags and ``--set`` overrides."""
    values = {}
    if args.config:
        values.update(load_config_file(args.config))
    preset = args.preset or values.pop("preset", None)
    for key in ("m", "seed", "epochs"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = _parse_value(v)
    if preset is not None:
        return T.preset_config(preset, **values)
    return T.TrainConfig.from_dict(values).validate()


# -- commands -------------------------------------------------------------------------


def cmd_train(args):
    cfg = build_config(args)
    out = _out_dir(args, "train")
    _progress(f"training {cfg.preset} m={cfg.m} seed={cfg.seed} epochs={cfg.epochs} -> {out}")

    def report(epoch, model, log):
        rec = log.epochs[-1]
        _progress(f"epoch {epoch + 1}/{cfg.epochs} loss={rec['loss']:.4f} "
                  f"L_D={rec['loss_d']:.4f} L_prior={rec['loss_prior']:.4f} lr={rec['lr']:.3g}")

    t0 = time.perf_counter()
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    try:
        model, log = T.train(cfg, callback=report)
    except TrainingDiverged as exc:
        (out / "checkpoint_last_good.json").write_text(exc.model.dumps())
        (out / "train_log.csv").write_text(exc.log.to_csv())
        RunManifest("train", cfg.to_dict(), cfg.seed, version_string(), started,
                    time.perf_counter() - t0,
                    ["checkpoint_last_good.json", "train_log.csv"]).write(out)
        raise
    files = {
        "checkpoint.json": model.dumps(),
        "train_log.csv": log.to_csv(),
        "train_log.json": log.to_json(),
        "sizing.json": json.dumps(model.sizing_report(), sort_keys=True, indent=2) + "\n",
    }
    for name, text in files.items():
        (out / name).write_text(text)
    (out / "timing.csv").write_text("epoch,wall_time\n" + "".join(
        f"{i},{t!r}\n" for i, t in enumerate(log.wall_time)))
    RunManifest("train", cfg.to_dict(), cfg.seed, version_string(), started,
                time.perf_counter() - t0, sorted(files) + ["timing.csv"]).write(out)
    return EXIT_OK


def _load_model(path):
    return T.FlowMixModel.load(path)


def cmd_generate(args):
    out = _out_dir(args, "generate")
    t0, started = time.perf_counter(), _dt.datetime.now(_dt.timezone.utc).isoformat()
    model = _load_model(args.checkpoint)
    if args.count < 0 or args.points < 1:
        raise UsageError("--count must be >= 0 and --points >= 1")
    shapes = T.generate(model, args.count, args.points, seed=args.seed)
    names = []
    for i, (pts, ids) in enumerate(shapes):
        name = f"sample_{i:04d}.{args.format}"
        write_cloud(out / name, pts, ids)
        names.append(name)
    RunManifest("generate", {"checkpoint": str(args.checkpoint), "count": args.count,
                             "points": args.points, "format": args.format},
                args.seed, version_string(), started, time.perf_counter() - t0,
                names).write(out)
    _progress(f"wrote {len(names)} clouds to {out}")
    return EXIT_OK


def cmd_reconstruct(args):
    out = _out_dir(args, "reconstruct")
    t0, started = time.perf_counter(), _dt.datetime.now(_dt.timezone.utc).isoformat()
    model = _load_model(args.checkpoint)
    X, _ = read_cloud(args.input)
    n_out = args.points or len(X)
    pts, ids = T.reconstruct(model, X, n_out, seed=args.seed)
    name = f"reconstruction.{args.format}"
    write_cloud(out / name, pts, ids)
    RunManifest("reconstruct", {"checkpoint": str(args.checkpoint), "input": str(args.input),
                                "points": n_out, "format": args.format},
                args.seed, version_string(), started, time.perf_counter() - t0,
                [name]).write(out)
    return EXIT_OK


def cmd_interpolate(args):
    out = _out_dir(args, "interpolate")
    t0, started = time.perf_counter(), _dt.datetime.now(_dt.timezone.utc).isoformat()
    model = _load_model(args.checkpoint)
    A, _ = read_cloud(args.a)
    B, _ = read_cloud(args.b)
    comps = None
    if args.components:
        try:
            comps = [int(c) for c in args.components.split(",")]
        except ValueError:
            raise UsageError(f"--components expects integers, got {args.components!r}") from None
    frames = T.interpolate(model, A, B, args.steps, args.points, seed=args.seed,
                           components=comps)
    names = []
    for i, (pts, ids) in enumerate(frames):
        name = f"step_{i:03d}.{args.format}"
        write_cloud(out / name, pts, ids)
        names.append(name)
    RunManifest("interpolate", {"checkpoint": str(args.checkpoint), "a": str(args.a),
                                "b": str(args.b), "steps": args.steps, "points": args.points,
                                "components": comps, "format": args.format},
                args.seed, version_string(), started, time.perf_counter() - t0,
                names).write(out)
    return EXIT_OK


def summarize_reports(reports):
    """Mean and population std of every metric over repeated reports."""
    keys = MetricsReport.METRICS
    vals = np.array([[r.values()[k] for k in keys] for r in reports], dtype=float)
    with np.errstate(invalid="ignore"):
        mean, std = vals.mean(axis=0), vals.std(axis=0)
    return dict(zip(keys, map(float, mean))), dict(zip(keys, map(float, std)))


def run_eval(S_gen, S_ref, tau=DEFAULT_TAU, resolution=JSD_RESOLUTION, n_exact=N_EXACT,
             repeats=1, subsample=None, seed=0):
    """Repeat the metric suite; each repeat may subsample points with its own seed."""
    if repeats < 1:
        raise UsageError("--repeats must be >= 1")
    reports = []
    for r in range(repeats):
        rng = np.random.default_rng(seed + r)
        G, R = S_gen, S_ref
        if subsample:
            G = [c[rng.choice(len(c), min(subsample, len(c)), replace=False)] for c in S_gen]
            R = [c[rng.choice(len(c), min(subsample, len(c)), replace=False)] for c in S_ref]
        reports.append(evaluate(G, R, tau=tau, resolution=resolution, n_exact=n_exact,
                                seed=seed + r))
    mean, std = summarize_reports(reports)
    settings = dict(reports[0].settings)
    settings.update({"repeats": repeats, "subsample": subsample, "seed": seed,
                     "seeds": [seed + r for r in range(repeats)]})
    return {"mean": mean, "std": std, "settings": settings,
            "repeats": [r.values() for r in reports]}


def cmd_eval(args):
    out = _out_dir(args, "eval")
    t0, started = time.perf_counter(), _dt.datetime.now(_dt.timezone.utc).isoformat()
    S_gen, gen_names = read_cloud_dir(args.gen)
    S_ref, ref_names = read_cloud_dir(args.ref)
    if not S_gen or not S_ref:
        raise InputError("both directories must contain at least one cloud")
    if len(S_gen) != len(S_ref):
        raise InputError(f"count mismatch: {len(S_gen)} generated vs {len(S_ref)} reference "
                         "clouds (1-NNA needs equal counts)")
    result = run_eval(S_gen, S_ref, args.tau, args.resolution, args.n_exact, args.repeats,
                      args.subsample, args.seed)
    (out / "metrics.json").write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = MetricsReport.METRICS
    w.writerow([f"{k}_{s}" for k in keys for s in ("mean", "std")])
    w.writerow([repr(result[s][k]) for k in keys for s in ("mean", "std")])
    (out / "metrics.csv").write_text(buf.getvalue())
    RunManifest("eval", {"gen": str(args.gen), "ref": str(args.ref), **result["settings"]},
                args.seed, version_string(), started, time.perf_counter() - t0,
                ["metrics.csv", "metrics.json"]).write(out)
    _progress(" ".join(f"{k}={result['mean'][k]:.4g}" for k in keys))
    return EXIT_OK


def _parse_sizes(text):
    sizes = []
    for tok in text.split(","):
        try:
            n, h = tok.lower().split("x")
            sizes.append((int(n), int(h)))
        except ValueError:
            raise UsageError(f"--sizes expects NxH[,NxH...], got {text!r}") from None
    return sizes


def _write_rows(path, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue())


def cmd_probe(args):
    out = _out_dir(args, "probe")
    t0, started = time.perf_counter(), _dt.datetime.now(_dt.timezone.utc).isoformat()
    try:
        m_list = [int(m) for m in args.m_list.split(",")]
    except ValueError:
        raise UsageError(f"--m-list expects integers, got {args.m_list!r}") from None
    sizes = _parse_sizes(args.sizes)
    base = T.preset_config(args.preset, seed=args.seed)
    if args.epochs is not None:
        base = T.TrainConfig.from_dict({"epochs": args.epochs,
                                        "lr_decay_epochs": [e for e in base.lr_decay_epochs
                                                            if e < args.epochs]}, base=base)
    outputs = []
    if not args.skip_scaling:
        rows = T.scaling_study(base, sizes, m_list, tau=args.tau, seed=args.seed)
        _write_rows(out / "scaling.csv", rows)
        outputs.append("scaling.csv")
    n_ref, h_ref = sizes[-1]
    rt = T.runtime_probe(m_list, n_ref, h_ref, args.runtime_points, d=base.point_dim,
                         seed=args.seed)
    _write_rows(out / "runtime.csv", rt)
    outputs.append("runtime.csv")
    RunManifest("probe", {"preset": args.preset, "sizes": sizes, "m_list": m_list,
                          "runtime_points": args.runtime_points, "tau": args.tau,
                          "base": base.to_dict()},
                args.seed, version_string(), started, time.perf_counter() - t0,
                outputs).write(out)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="flowmix", description="Mixtures of normalizing flows for point sets.")
    p.add_argument("--version", action="version", version=f"flowmix {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=0):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        sp.add_argument("--seed", type=int, default=seed)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--preset", choices=sorted(T.PRESETS))
    tr.add_argument("--config", help="TOML or JSON config (or a previous manifest.json)")
    tr.add_argument("--m", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override any config key (JSON values)")
    common(tr, seed=None)
    tr.set_defaults(func=cmd_train)

    fmt = dict(choices=["ply", "xyz", "csv"], default="ply")
    g = sub.add_parser("generate", help="sample new clouds")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--points", type=int, default=2048)
    g.add_argument("--format", **fmt)
    common(g)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("reconstruct", help="encode and decode one cloud")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--points", type=int, help="output points (default: input size)")
    r.add_argument("--format", **fmt)
    common(r)
    r.set_defaults(func=cmd_reconstruct)

    it = sub.add_parser("interpolate", help="decode latent interpolations")
    it.add_argument("--checkpoint", required=True)
    it.add_argument("--a", required=True)
    it.add_argument("--b", required=True)
    it.add_argument("--steps", type=int, default=5)
    it.add_argument("--points", type=int, default=2048)
    it.add_argument("--components", help="comma separated flow indices to interpolate")
    it.add_argument("--format", **fmt)
    common(it)
    it.set_defaults(func=cmd_interpolate)

    e = sub.add_parser("eval", help="metric suite between two directories of clouds")
    e.add_argument("--gen", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--tau", type=float, default=DEFAULT_TAU)
    e.add_argument("--resolution", type=int, default=JSD_RESOLUTION)
    e.add_argument("--n-exact", type=int, default=N_EXACT)
    e.add_argument("--repeats", type=int, default=1)
    e.add_argument("--subsample", type=int, help="points per cloud drawn in each repeat")
    common(e)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="scaling study and sampling runtime")
    pr.add_argument("--preset", default="two_squares", choices=sorted(T.PRESETS))
    pr.add_argument("--sizes", default="4x8,16x32", help="reference sizes NxH,...")
    pr.add_argument("--m-list", default="1,4")
    pr.add_argument("--epochs", type=int)
    pr.add_argument("--tau", type=float, default=1e-3)
    pr.add_argument("--runtime-points", type=int, default=50000)
    pr.add_argument("--skip-scaling", action="store_true")
    common(pr)
    pr.set_defaults(func=cmd_probe)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"flowmix: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, FileNotFoundError) as exc:
        print(f"flowmix: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"flowmix: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
