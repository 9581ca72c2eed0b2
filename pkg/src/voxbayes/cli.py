"""Command-line driver.

Every subcommand reads an optional ``--config`` file (``key=value`` lines,
dotted ``command.key`` names scoped to one command) or a previous run's
``manifest.json``; explicit flags win over both. Each output directory gets
a ``manifest.json`` echoing the effective configuration, so
``voxbayes CMD --config OUT/manifest.json --out OTHER`` reproduces a run.
"""

from __future__ import annotations

import argparse
import csv
import gzip
import io
import json
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (DEFAULT_THRESHOLDS, bins_csv, calibration_report, reliability_diagram,
                          sweep_csv, threshold_sweep)
from .datasets import load_split, save_split
from .errors import ConfigError, VoxBayesError
from .layers import BAYES_VARIANTS, HEADS, build_reference_model
from .model import Checkpoint
from .nifti import (WINDOWS, AugmentPolicy, LabeledSample, Volume, apply_hu_window,
                    parse_nifti, read_manifest, split_dataset, write_manifest, write_nifti)
from .rng import Rng
from .shap import (MAX_EXACT_PATCHES, exact_shapley, model_fn_for, partition_volume,
                   render_attribution_overlay, sampled_shapley)
from .synth import blob_dataset_hu
from .train import TrainConfig, predict_batch, train
from .uncertainty import (DEFAULT_T, DEFAULT_WIDTH_THRESHOLD, PredictiveSamples, dump_prediction_log,
                          flag_high_uncertainty, log_record, predictive_interval)

# ---------------------------------------------------------------- value types


def _shape(v):
    if isinstance(v, (list, tuple)):
        out = tuple(int(x) for x in v)
    else:
        try:
            out = tuple(int(x) for x in str(v).lower().split("x"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected extents like 32x32x16, got {v!r}") from None
    if len(out) != 3 or min(out) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive extents, got {v!r}")
    return out


def _floats(v):
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    try:
        return tuple(float(x) for x in str(v).split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {v!r}") from None


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _choice(options):
    def conv(v):
        if v not in options:
            raise argparse.ArgumentTypeError(f"{v!r} is not one of {', '.join(options)}")
        return v
    return conv


def _opt_str(v):
    return None if v in (None, "", "none") else str(v)


@dataclass(frozen=True)
class Opt:
    name: str
    type: object
    default: object
    help: str
    required: bool = False


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


COMMON = [
    Opt("seed", int, 0, "master seed"),
    Opt("threads", int, 1, "worker threads for per-volume stages"),
]

MODEL_OPTS = [
    Opt("variant", _choice(BAYES_VARIANTS), "none", "Bayesian layer variant"),
    Opt("head", _choice(HEADS), "sigmoid", "output head"),
    Opt("filters", int, 128, "filters per conv block"),
    Opt("dense_units", int, 256, "width of the hidden dense layer"),
    Opt("dropout", float, 0.2, "dropout rate"),
    Opt("flow_steps", int, 2, "coupling steps per MNF flow"),
]

COMMANDS = {
    "synth": [
        Opt("n", int, 200, "number of volumes"),
        Opt("shape", _shape, (32, 32, 16), "volume extents XxYxZ"),
    ],
    "prepare": [
        Opt("manifest", str, None, "CSV with path,source_class", required=True),
        Opt("window", _choice(tuple(WINDOWS)), "W4", "HU window id"),
        Opt("split", _floats, (0.7, 0.2, 0.1), "train,test,validation ratios"),
        Opt("as_split", _opt_str, None, "write every volume to one split of this name instead"),
    ],
    "train": MODEL_OPTS + [
        Opt("data", str, None, "prepared dataset directory", required=True),
        Opt("train_set", str, "train", "split used for fitting"),
        Opt("val_set", str, "validation", "split used for early stopping"),
        Opt("val_data", _opt_str, None, "directory holding the validation split (default: --data)"),
        Opt("epochs", int, 10, "maximum epochs"),
        Opt("batch_size", int, 2, "batch size"),
        Opt("learning_rate", float, 1e-3, "Adam learning rate"),
        Opt("patience", int, 15, "early-stopping patience in epochs"),
        Opt("augment", _bool, False, "rotate/flip/noise training volumes"),
        Opt("noise_sigma", float, 0.01, "augmentation noise"),
    ],
    "evaluate": [
        Opt("checkpoint", str, None, "checkpoint directory", required=True),
        Opt("data", str, None, "prepared dataset directory", required=True),
        Opt("set", str, "test", "split to score"),
        Opt("thresholds", _floats, DEFAULT_THRESHOLDS, "decision thresholds"),
        Opt("bins", int, 10, "calibration bins for the ECE column"),
        Opt("T", int, DEFAULT_T, "MC passes for the Bernoulli-mean head"),
    ],
    "calibrate": [
        Opt("checkpoint", str, None, "checkpoint directory", required=True),
        Opt("data", str, None, "prepared dataset directory", required=True),
        Opt("set", str, "test", "split to score"),
        Opt("threshold", float, 0.5, "decision threshold"),
        Opt("thresholds", _floats, DEFAULT_THRESHOLDS, "thresholds for the ECE sweep"),
        Opt("bins", int, 10, "number of bins"),
        Opt("T", int, DEFAULT_T, "MC passes for the Bernoulli-mean head"),
    ],
    "uncertainty": [
        Opt("checkpoint", str, None, "checkpoint directory", required=True),
        Opt("data", str, None, "prepared dataset directory", required=True),
        Opt("set", str, "test", "split to sample"),
        Opt("T", int, DEFAULT_T, "stochastic passes per volume"),
        Opt("level", float, 0.95, "interval level"),
        Opt("width_threshold", float, DEFAULT_WIDTH_THRESHOLD, "flag intervals wider than this"),
        Opt("limit", int, 0, "score only the first N volumes (0 = all)"),
    ],
    "explain": [
        Opt("checkpoint", str, None, "checkpoint directory", required=True),
        Opt("data", str, None, "prepared dataset directory", required=True),
        Opt("set", str, "test", "split holding the volume"),
        Opt("index", int, 0, "volume index within the split"),
        Opt("grid", _shape, (8, 8, 4), "patch grid"),
        Opt("method", _choice(("auto", "exact", "sampled")), "auto", "Shapley estimator"),
        Opt("permutations", int, 10, "orderings for the sampled estimator"),
    ],
}

HELP = {
    "synth": "generate the synthetic blob dataset as NIfTI files",
    "prepare": "window and split a NIfTI manifest into arrays",
    "train": "fit the reference network",
    "evaluate": "metrics over a threshold grid",
    "calibrate": "reliability bins, ECE and diagram",
    "uncertainty": "MC predictive intervals and review flags",
    "explain": "patch Shapley attribution for one volume",
}


def _opts(command):
    return COMMON + COMMANDS[command]


# ---------------------------------------------------------------- config resolution


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxbayes", description="Bayesian 3D CNN toolkit")
    parser.add_argument("--version", action="version", version=f"voxbayes {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for cmd in COMMANDS:
        p = sub.add_parser(cmd, help=HELP[cmd], description=HELP[cmd])
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="key=value config file or a previous manifest.json")
        for o in _opts(cmd):
            default = "required" if o.required else _jsonable(o.default)
            p.add_argument(_flag(o.name), dest=o.name, type=o.type, default=None,
                           help=o.help if "(default" in o.help else f"{o.help} (default: {default})")
    return parser


def read_config(path, command: str) -> dict:
    """Values for ``command`` from a key=value file or a manifest.json."""
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".json"):
        doc = json.loads(text)
        if doc.get("command") not in (None, command):
            raise ConfigError(f"{path} records a {doc['command']!r} run, not {command!r}")
        return dict(doc.get("config", {}))
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        scope, _, name = key.rpartition(".")
        if scope and scope != command:
            continue
        out[name.replace("-", "_")] = value
    return out


def resolve(command: str, args: argparse.Namespace, parser) -> dict:
    opts = _opts(command)
    file_cfg = read_config(args.config, command) if args.config else {}
    known = {o.name for o in opts}
    unknown = sorted(set(file_cfg) - known)
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    cfg = {}
    for o in opts:
        v = getattr(args, o.name)
        if v is None and o.name in file_cfg:
            try:
                v = o.type(file_cfg[o.name])
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ConfigError(f"config key {o.name}: {exc}") from None
        if v is None:
            if o.required:
                parser.error(f"{command}: missing required setting '{o.name}' ({_flag(o.name)})")
            v = o.default
        cfg[o.name] = v
    return cfg


def manifest(command: str, cfg: dict, outputs) -> str:
    doc = {
        "command": command,
        "config": {k: _jsonable(v) for k, v in cfg.items()},
        "seed": cfg["seed"],
        "outputs": sorted(outputs),
        "versions": {"voxbayes": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- commands


def _write(out: Path, name: str, content, written: list):
    path = out / name
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(content, bytes):
        path.write_bytes(content)
    else:
        path.write_text(content, encoding="utf-8")
    written.append(name)


def cmd_synth(cfg, out: Path, written):
    vols, labels, classes = blob_dataset_hu(cfg["n"], cfg["shape"], cfg["seed"])
    rows = []
    for i, (v, cls) in enumerate(zip(vols, classes)):
        name = f"volumes/blob_{i:04d}.nii"
        (out / "volumes").mkdir(parents=True, exist_ok=True)
        write_nifti(out / name, Volume(v.astype(np.float64)))
        written.append(name)
        rows.append((name, cls))
    write_manifest(out / "manifest.csv", rows)
    written.append("manifest.csv")


def _load_volume(path: Path) -> tuple:
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return parse_nifti(data, str(path))[1]


def cmd_prepare(cfg, out: Path, written):
    rows = read_manifest(cfg["manifest"])
    if not rows:
        raise ConfigError(f"{cfg['manifest']}: manifest lists no volumes")
    window = WINDOWS[cfg["window"]]
    samples, shape = [], None
    for i, (path, cls) in enumerate(rows):
        vol = apply_hu_window(_load_volume(path), window)
        if shape is None:
            shape = vol.shape
        elif vol.shape != shape:
            raise ConfigError(f"{path}: shape {vol.shape} differs from {shape}; resample first")
        samples.append((f"{i:05d}:{path.name}", LabeledSample.from_class(vol, cls)))
    if cfg["as_split"]:
        parts = {cfg["as_split"]: samples}
    else:
        tr, te, va = split_dataset(samples, cfg["split"], Rng(cfg["seed"], (0x5B,)))
        parts = {"train": tr, "test": te, "validation": va}
    for name, items in parts.items():
        x = np.stack([s.volume.voxels for _, s in items])
        y = np.array([s.label for _, s in items], dtype=np.float64)
        save_split(out, name, x, y, [i for i, _ in items], [s.source_class for _, s in items])
        written += [f"{name}_x.npy", f"{name}_y.npy", f"{name}.json"]


def cmd_train(cfg, out: Path, written):
    xt, yt, _ = load_split(cfg["data"], cfg["train_set"])
    xv, yv, _ = load_split(cfg["val_data"] or cfg["data"], cfg["val_set"])
    spec = build_reference_model(xt.shape[1:], cfg["variant"], cfg["head"], cfg["filters"],
                                 cfg["dense_units"], cfg["dropout"])
    tc = TrainConfig(learning_rate=cfg["learning_rate"], epochs=cfg["epochs"],
                     batch_size=cfg["batch_size"], seed=cfg["seed"],
                     early_stop_patience=cfg["patience"], augment=cfg["augment"],
                     augment_policy=AugmentPolicy(noise_sigma=cfg["noise_sigma"]))
    from .model import Model

    model = Model(spec, seed=cfg["seed"], flow_steps=cfg["flow_steps"])

    def log(rec):
        print(json.dumps(rec, sort_keys=True), file=sys.stderr, flush=True)

    ckpt, history = train(spec, ((xt, yt), (xv, yv)), tc, model=model, log=log)
    ckpt.extra = {"train_config": tc.to_dict()}
    ckpt.save(out / "checkpoint")
    written += ["checkpoint/checkpoint.json", "checkpoint/checkpoint.bin"]
    cols = ["epoch", "train_loss", "val_accuracy", "kl"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in history:
        w.writerow([rec.get(c, "") if c == "epoch" else _num(rec.get(c)) for c in cols])
    _write(out, "history.csv", buf.getvalue(), written)


def _num(v):
    return "" if v is None else format(float(v), ".12g")


def _scored(cfg):
    ckpt = Checkpoint.load(cfg["checkpoint"])
    model = ckpt.to_model()
    x, y, meta = load_split(cfg["data"], cfg["set"])
    return model, x, y, meta


def _probs(model, x, cfg):
    chunks = [x[i:i + 4] for i in range(0, len(x), 4)]
    T = cfg.get("T", DEFAULT_T)

    def run(c):
        return predict_batch(model, c, seed=cfg["seed"], T=T)

    with ThreadPoolExecutor(max(1, cfg["threads"])) as pool:
        return np.concatenate(list(pool.map(run, chunks)))


def cmd_evaluate(cfg, out: Path, written):
    model, x, y, meta = _scored(cfg)
    p = _probs(model, x, cfg)
    _write(out, "metrics.csv", sweep_csv(threshold_sweep(p, y, cfg["thresholds"], cfg["bins"])), written)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "source_class", "label", "probability"])
    for i, cls, lab, pr in zip(meta["ids"], meta["source_classes"], y, p):
        w.writerow([i, cls, int(lab), _num(pr)])
    _write(out, "predictions.csv", buf.getvalue(), written)


def cmd_calibrate(cfg, out: Path, written):
    model, x, y, _ = _scored(cfg)
    p = _probs(model, x, cfg)
    rep = calibration_report(p, y, cfg["threshold"], cfg["bins"])
    _write(out, "calibration.csv", bins_csv(rep), written)
    rows = ["threshold,ece"] + [f"{_num(t)},{_num(e)}" for t, _, e in
                                threshold_sweep(p, y, cfg["thresholds"], cfg["bins"])]
    _write(out, "calibration_sweep.csv", "\n".join(rows) + "\n", written)
    _write(out, "reliability.svg", reliability_diagram(rep), written)


def cmd_uncertainty(cfg, out: Path, written):
    model, x, y, meta = _scored(cfg)
    if not model.is_stochastic:
        raise ConfigError("checkpoint has no Bayesian layers or dropout; MC intervals need a stochastic model")
    n = len(x) if cfg["limit"] <= 0 else min(cfg["limit"], len(x))
    model_id = model.spec.digest()[:12]

    def run(i):
        return PredictiveSamples(model.mc_samples(x[i], cfg["T"], cfg["seed"]), cfg["seed"], model_id)

    with ThreadPoolExecutor(max(1, cfg["threads"])) as pool:
        samples = list(pool.map(run, range(n)))
    records = [log_record(meta["ids"][i], s, int(y[i])) for i, s in enumerate(samples)]
    _write(out, "predictions.json", dump_prediction_log(records), written)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "mean", "class1_lo", "class1_hi", "class0_lo", "class0_hi", "width", "flagged"])
    for i, s in enumerate(samples):
        iv = predictive_interval(s, cfg["level"])
        c0 = iv.class0
        w.writerow([meta["ids"][i], int(y[i]), _num(iv.mean), _num(iv.lo), _num(iv.hi), _num(c0[0]),
                    _num(c0[1]), _num(iv.width), int(flag_high_uncertainty(iv, cfg["width_threshold"]))])
    _write(out, "intervals.csv", buf.getvalue(), written)


def cmd_explain(cfg, out: Path, written):
    model, x, _, meta = _scored(cfg)
    if not 0 <= cfg["index"] < len(x):
        raise ConfigError(f"index {cfg['index']} outside split of {len(x)} volumes")
    vol = x[cfg["index"]]
    part = partition_volume(vol.shape, cfg["grid"])
    fn = model_fn_for(model, seed=cfg["seed"])
    method = cfg["method"]
    if method == "auto":
        method = "exact" if part.n_patches <= MAX_EXACT_PATCHES else "sampled"
    if method == "exact":
        attr = exact_shapley(fn, vol, part)
    else:
        attr = sampled_shapley(fn, vol, part, n_permutations=cfg["permutations"], seed=cfg["seed"])
    _write(out, "attribution.json", attr.to_json(volume_id=meta["ids"][cfg["index"]]), written)
    svg, pngs = render_attribution_overlay(vol, attr, part)
    _write(out, "attribution.svg", svg, written)
    for k, png in pngs.items():
        _write(out, f"attribution_class{k}.png", png, written)


RUNNERS = {"synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate,
           "calibrate": cmd_calibrate, "uncertainty": cmd_uncertainty, "explain": cmd_explain}


def run(argv=None) -> int:
    """Exit status: 0 on success, 2 for usage or config errors, 1 for runtime failures."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        try:
            cfg = resolve(args.command, args, parser)
        except (ConfigError, OSError, json.JSONDecodeError) as exc:
            parser.error(f"config: {exc}")
    except SystemExit as exc:
        return 0 if exc.code is None else int(exc.code)
    out = Path(args.out)
    written: list[str] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        RUNNERS[args.command](cfg, out, written)
        _write(out, "manifest.json", manifest(args.command, cfg, written), [])
    except (VoxBayesError, OSError) as exc:
        print(f"voxbayes: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
