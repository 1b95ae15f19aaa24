"""Command-line entry point: ``beatdiff <command> [--config run.ini] [flags]``.

Every command reads a sectioned INI config (all keys optional, unknown keys
rejected), applies flag overrides, and writes its outputs plus the effective
config (``config.ini``) into a run directory. Passing that echoed file back via
``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

RUNS_ENV = "BEATDIFF_RUNS"

DEFAULTS = {
    "data": {
        "records": "",
        "record_ids": "",
        "channel": "MLII",
        "split": "0.7",
        "seed": "0",
        "pre_ms": "350",
        "post_ms": "400",
        "train_csv": "",
        "test_csv": "",
    },
    "synth-data": {"enabled": "false", "per_class": "200", "beats_per_record": "20", "seed": "0"},
    "spectral": {"n_fft": "64", "hop": "4", "window": "hann"},
    "schedule": {"T": "1000", "beta_min": "0.0001", "beta_max": "0.02", "variance": "beta", "spacing": "linear"},
    "model": {
        "base_channels": "32",
        "channel_mults": "1,2,2,4",
        "subblocks_per_block": "3",
        "convs_per_subblock": "2",
        "kernel_size": "3",
        "d_emb": "32",
        "emb_channels": "1",
        "group_norm": "false",
        "state_skip": "true",
    },
    "train": {
        "learning_rate": "0.001",
        "batch_size": "32",
        "epochs": "10",
        "task_weights": "1,1,1",
        "aux_weight": "1.0",
        "aux_snr_weight": "false",
        "ema_decay": "0",
        "seed": "0",
        "checkpoint_every": "0",
        "dtype": "float32",
    },
    "eval": {"pairing": "auto", "extractor": "statistical", "classifier": ""},
    "classifier": {"epochs": "20", "learning_rate": "0.001", "batch_size": "64", "seed": "0"},
    "run": {
        "checkpoint": "",
        "beats": "",
        "class": "N",
        "count": "10",
        "seed": "0",
        "gap": "",
        "real": "",
        "synth": "",
        "gaps": "",
        "n_synth": "",
        "plot": "true",
    },
}


class CLIError(Exception):
    pass


# ---------------------------------------------------------------- config


def load_config(path=None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_dict(DEFAULTS)
    if path:
        user = configparser.ConfigParser(interpolation=None)
        user.optionxform = str
        if not user.read(path, encoding="utf-8"):
            raise CLIError(f"cannot read config {path}")
        for section in user.sections():
            if section not in DEFAULTS:
                raise CLIError(f"unknown config section [{section}]")
            for key, value in user.items(section):
                if key not in DEFAULTS[section]:
                    raise CLIError(f"unknown config key {section}.{key}")
                cp.set(section, key, value)
    return cp


def config_text(cp: configparser.ConfigParser) -> str:
    lines = []
    for section in DEFAULTS:
        lines.append(f"[{section}]")
        lines += [f"{k} = {cp.get(section, k)}" for k in DEFAULTS[section]]
        lines.append("")
    return "\n".join(lines)


def _get(cp, section, key, kind=str):
    raw = cp.get(section, key)
    try:
        if kind is bool:
            return cp.getboolean(section, key)
        return kind(raw)
    except ValueError as exc:
        raise CLIError(f"bad value for {section}.{key}: {raw!r}") from exc


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def spectral_config(cp):
    from .spectral import SpectralConfig

    return SpectralConfig(_get(cp, "spectral", "n_fft", int), _get(cp, "spectral", "hop", int), cp.get("spectral", "window"))


def denoiser_config(cp):
    from .denoiser import DenoiserConfig

    m = "model"
    return DenoiserConfig(
        base_channels=_get(cp, m, "base_channels", int),
        channel_mults=_ints(cp.get(m, "channel_mults")),
        subblocks_per_block=_get(cp, m, "subblocks_per_block", int),
        convs_per_subblock=_get(cp, m, "convs_per_subblock", int),
        kernel_size=_get(cp, m, "kernel_size", int),
        d_emb=_get(cp, m, "d_emb", int),
        emb_channels=_get(cp, m, "emb_channels", int),
        group_norm=_get(cp, m, "group_norm", bool),
        state_skip=_get(cp, m, "state_skip", bool),
        seed=_get(cp, "train", "seed", int),
    )


def train_config(cp):
    from .engine import TrainConfig

    w = np.array([float(v) for v in cp.get("train", "task_weights").split(",")])
    if w.size != 3 or np.any(w < 0) or w.sum() <= 0:
        raise CLIError("train.task_weights needs three non-negative weights")
    t, s = "train", "schedule"
    return TrainConfig(
        learning_rate=_get(cp, t, "learning_rate", float),
        batch_size=_get(cp, t, "batch_size", int),
        epochs=_get(cp, t, "epochs", int),
        task_weights=tuple(w / w.sum()),
        aux_weight=_get(cp, t, "aux_weight", float),
        aux_snr_weight=_get(cp, t, "aux_snr_weight", bool),
        ema_decay=_get(cp, t, "ema_decay", float),
        T=_get(cp, s, "T", int),
        beta_min=_get(cp, s, "beta_min", float),
        beta_max=_get(cp, s, "beta_max", float),
        spacing=cp.get(s, "spacing"),
        variance=cp.get(s, "variance"),
        seed=_get(cp, t, "seed", int),
        checkpoint_every=_get(cp, t, "checkpoint_every", int),
        dtype=cp.get(t, "dtype"),
    )


# ---------------------------------------------------------------- run directories


def run_dir(cp, command: str, root=None) -> Path:
    text = config_text(cp)
    digest = hashlib.sha256(f"{command}\n{text}".encode()).hexdigest()[:10]
    root = Path(root or os.environ.get(RUNS_ENV) or "runs")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    out = root / f"{command}-{stamp}-{digest}"
    n = 1
    while out.exists():
        n += 1
        out = root / f"{command}-{stamp}-{digest}-{n}"
    out.mkdir(parents=True)
    (out / "config.ini").write_text(text, encoding="utf-8")
    return out


# ---------------------------------------------------------------- plotting


def plot_beats(path, beats, labels, reference=None, title=""):
    """Synthetic beats drawn over the per-class real band (min-max and interquartile)."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    classes = [c for c in ("N", "V", "F") if c in set(labels)]
    fig, axes = plt.subplots(1, len(classes), figsize=(4 * len(classes), 3), squeeze=False)
    for ax, c in zip(axes[0], classes):
        if reference is not None:
            R = reference.X[reference.y == c]
            if len(R):
                t = np.arange(R.shape[1])
                ax.fill_between(t, R.min(0), R.max(0), color="0.85", lw=0)
                ax.fill_between(t, *np.percentile(R, [25, 75], axis=0), color="0.65", lw=0)
        for x in beats[np.asarray(labels) == c][:10]:
            ax.plot(x, lw=0.8)
        ax.set_title(f"{title} {c}".strip())
        ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=80, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------- helpers


def _dataset(path):
    from .ingest import read_beats_csv

    if not path:
        raise CLIError("no beats file given")
    if not Path(path).is_file():
        raise CLIError(f"beats file not found: {path}")
    return read_beats_csv(path)


def _toy_split(cp):
    from .ingest import split_dataset, synth_corpus

    ds = synth_corpus(
        _get(cp, "synth-data", "per_class", int),
        _get(cp, "synth-data", "beats_per_record", int),
        _get(cp, "synth-data", "seed", int),
    )
    return split_dataset(ds, _get(cp, "data", "split", float), _get(cp, "data", "seed", int))


def _train_set(cp):
    if cp.get("data", "train_csv"):
        return _dataset(cp.get("data", "train_csv"))
    if _get(cp, "synth-data", "enabled", bool):
        return _toy_split(cp)[0]
    raise CLIError("no training data: set data.train_csv or enable synth-data")


def _checkpoint(cp):
    from .engine import DiffusionCheckpoint

    path = cp.get("run", "checkpoint")
    if not path:
        raise CLIError("this command needs a checkpoint (--checkpoint)")
    if not Path(path).is_file():
        raise CLIError(f"checkpoint not found: {path}")
    return DiffusionCheckpoint.load(path)


def _save_beats(out, name, X, labels, record_id="synthetic"):
    from .ingest import BeatDataset, read_beats_csv, write_beats_csv
    from .signal import Heartbeat

    ds = BeatDataset([Heartbeat(x, c, record_id, i) for i, (x, c) in enumerate(zip(X, labels))])
    path = out / name
    write_beats_csv(ds, path)
    read_beats_csv(path)
    return ds


def _parse_gap(text):
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError as exc:
        raise CLIError(f"bad gap {text!r}; expected start:end") from exc
    return a, b


# ---------------------------------------------------------------- commands


def cmd_ingest(cp, out: Path):
    from .ingest import BeatDataset, read_record, parse_annotations, segment_beats, split_dataset, write_beats_csv
    from .ingest.dataset import normalize_record
    from .ingest.wfdb import BEAT_SYMBOLS

    provenance = {}
    if _get(cp, "synth-data", "enabled", bool):
        train, test = _toy_split(cp)
        provenance["source"] = "synthetic"
    else:
        root = Path(cp.get("data", "records"))
        if not cp.get("data", "records") or not root.is_dir():
            raise CLIError(f"records directory not found: {cp.get('data', 'records') or '(unset)'}")
        ids = [v for v in cp.get("data", "record_ids").split(",") if v.strip()]
        ids = ids or sorted(p.stem for p in root.glob("*.hea"))
        if not ids:
            raise CLIError(f"no .hea headers in {root}")
        beats, dropped = [], {}
        for rid in ids:
            header, sig = read_record(str(root), rid, cp.get("data", "channel"))
            ann_path = next((root / f"{rid}{ext}" for ext in (".txt", ".ann", ".atr.txt") if (root / f"{rid}{ext}").is_file()), None)
            if ann_path is None:
                raise CLIError(f"no text annotations for record {rid}")
            anns = parse_annotations(ann_path.read_text(encoding="utf-8"), symbols=BEAT_SYMBOLS, strict=False)
            norm, _ = normalize_record(sig)
            got, n_drop = segment_beats(
                norm, anns, header.fs, _get(cp, "data", "pre_ms", float), _get(cp, "data", "post_ms", float), rid
            )
            beats += got
            dropped[rid] = n_drop
        train, test = split_dataset(BeatDataset(beats), _get(cp, "data", "split", float), _get(cp, "data", "seed", int))
        provenance = {"source": str(root), "dropped": dropped}
    write_beats_csv(train, out / "train.csv")
    write_beats_csv(test, out / "test.csv")
    manifest = {
        "train_records": sorted(train.record_ids),
        "test_records": sorted(test.record_ids),
        "n_train": len(train),
        "n_test": len(test),
        **provenance,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [out / "train.csv", out / "test.csv", out / "manifest.json"]


def cmd_train(cp, out: Path):
    from .engine import TrainLog, train

    data = _train_set(cp)
    ckpt_dir = out / "checkpoints" if _get(cp, "train", "checkpoint_every", int) else None
    if ckpt_dir:
        ckpt_dir.mkdir()
    result, log = train(data, train_config(cp), denoiser_config(cp), spectral_config(cp), ckpt_dir and str(ckpt_dir))
    result.save(out / "model.ckpt")
    log.write_csv(out / "train_log.csv")
    TrainLog.read_csv(out / "train_log.csv")
    return [out / "model.ckpt", out / "train_log.csv"]


def _reference(cp):
    path = cp.get("run", "real") or cp.get("data", "test_csv")
    return _dataset(path) if path else None


def cmd_generate(cp, out: Path):
    from .engine import SynthesisRequest, synthesize_batch
    from .signal import BeatClass, TaskKind

    ck = _checkpoint(cp)
    labels = [BeatClass.parse(c).value for c in cp.get("run", "class").split(",")]
    count, seed = _get(cp, "run", "count", int), _get(cp, "run", "seed", int)
    if count < 1:
        raise CLIError("count must be positive")
    reqs = [SynthesisRequest(TaskKind.GENERATION, c, seed=(seed, BeatClass(c).index, i)) for c in labels for i in range(count)]
    X = synthesize_batch(reqs, ck.model, ck.schedule, ck.spectral, ck.beat_length)
    ys = [r.label.value for r in reqs]
    _save_beats(out, "generated.csv", X, ys)
    files = [out / "generated.csv"]
    if _get(cp, "run", "plot", bool):
        plot_beats(out / "generated.png", X, ys, _reference(cp), "generated")
        files.append(out / "generated.png")
    return files


def cmd_impute(cp, out: Path):
    from .engine import SynthesisRequest, synthesize_batch
    from .signal import TaskKind, build_mask

    ck = _checkpoint(cp)
    ds = _dataset(cp.get("run", "beats") or cp.get("data", "test_csv"))
    count, seed = _get(cp, "run", "count", int), _get(cp, "run", "seed", int)
    beats = ds.beats[:count]
    L = ds.beat_length
    rng = np.random.default_rng(seed)
    fixed = _parse_gap(cp.get("run", "gap")) if cp.get("run", "gap") else None
    masks = [build_mask(TaskKind.IMPUTATION, L, gap=fixed, rng=rng) for _ in beats]
    reqs = [SynthesisRequest(TaskKind.IMPUTATION, b.label, b.samples, m, seed=(seed, i)) for i, (b, m) in enumerate(zip(beats, masks))]
    X = synthesize_batch(reqs, ck.model, ck.schedule, ck.spectral, ck.beat_length)
    ys = [b.label.value for b in beats]
    _save_beats(out, "imputed.csv", X, ys)
    with open(out / "gaps.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("row,start,end\n")
        fh.writelines(f"{i},{m.gap[0]},{m.gap[1]}\n" for i, m in enumerate(masks))
    files = [out / "imputed.csv", out / "gaps.csv"]
    if _get(cp, "run", "plot", bool):
        plot_beats(out / "imputed.png", X, ys, _reference(cp), "imputed")
        files.append(out / "imputed.png")
    return files


def cmd_forecast(cp, out: Path):
    from .engine import SynthesisRequest, synthesize_batch
    from .signal import TaskKind

    ck = _checkpoint(cp)
    ds = _dataset(cp.get("run", "beats") or cp.get("data", "test_csv"))
    count, seed = _get(cp, "run", "count", int), _get(cp, "run", "seed", int)
    pairs = ds.predecessor_pairs()[:count]
    if not pairs:
        raise CLIError("no beat in the file has a predecessor in its record")
    reqs = [SynthesisRequest(TaskKind.FORECASTING, c.label, p.samples, seed=(seed, i)) for i, (p, c) in enumerate(pairs)]
    X = synthesize_batch(reqs, ck.model, ck.schedule, ck.spectral, ck.beat_length)
    ys = [c.label.value for _, c in pairs]
    _save_beats(out, "forecast.csv", X, ys)
    _save_beats(out, "forecast_truth.csv", np.stack([c.samples for _, c in pairs]), ys, "truth")
    files = [out / "forecast.csv", out / "forecast_truth.csv"]
    if _get(cp, "run", "plot", bool):
        plot_beats(out / "forecast.png", X, ys, _reference(cp), "forecast")
        files.append(out / "forecast.png")
    return files


def cmd_evaluate(cp, out: Path):
    from .augment import BeatClassifier
    from .metrics import evaluate_sets

    real = _dataset(cp.get("run", "real"))
    synth = _dataset(cp.get("run", "synth"))
    pairing = cp.get("eval", "pairing")
    gaps = None
    if cp.get("run", "gaps"):
        rows = np.loadtxt(cp.get("run", "gaps"), delimiter=",", skiprows=1, dtype=int, ndmin=2)
        gaps = [(int(a), int(b)) for _, a, b in rows]
    if pairing == "auto":
        pairing = "ground_truth" if len(real) == len(synth) and np.array_equal(real.y, synth.y) and gaps is not None else "nearest"
    clf_path = cp.get("eval", "classifier")
    clf = BeatClassifier.load(clf_path) if clf_path else None
    report = evaluate_sets(real, synth, pairing, cp.get("eval", "extractor"), clf, gaps)
    report.to_csv(out / "report.csv")
    (out / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    return [out / "report.csv", out / "report.txt"]


def cmd_augment_eval(cp, out: Path):
    from .augment import reports_csv, reports_text, run_settings

    ck = _checkpoint(cp)
    if cp.get("data", "train_csv"):
        train, test = _dataset(cp.get("data", "train_csv")), _dataset(cp.get("data", "test_csv"))
    elif _get(cp, "synth-data", "enabled", bool):
        train, test = _toy_split(cp)
    else:
        raise CLIError("augment-eval needs data.train_csv/test_csv or synth-data")
    raw = cp.get("run", "n_synth")
    n_synth = int(raw) if raw else None
    c = "classifier"
    rep1, rep6 = run_settings(
        train,
        test,
        ck,
        n_synth,
        seed=_get(cp, c, "seed", int),
        epochs=_get(cp, c, "epochs", int),
        learning_rate=_get(cp, c, "learning_rate", float),
        batch_size=_get(cp, c, "batch_size", int),
    )
    reports_csv([rep1, rep6], out / "augment.csv")
    (out / "augment.txt").write_text(reports_text([rep1, rep6]) + "\n", encoding="utf-8")
    return [out / "augment.csv", out / "augment.txt"]


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "generate": cmd_generate,
    "impute": cmd_impute,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "augment-eval": cmd_augment_eval,
}

# flag name -> (section, key); only flags given on the command line override the config
OVERRIDES = {
    "records": ("data", "records"),
    "split": ("data", "split"),
    "data_seed": ("data", "seed"),
    "channel": ("data", "channel"),
    "train": ("data", "train_csv"),
    "test": ("data", "test_csv"),
    "per_class": ("synth-data", "per_class"),
    "epochs": ("train", "epochs"),
    "train_seed": ("train", "seed"),
    "checkpoint": ("run", "checkpoint"),
    "beats": ("run", "beats"),
    "cls": ("run", "class"),
    "count": ("run", "count"),
    "seed": ("run", "seed"),
    "gap": ("run", "gap"),
    "real": ("run", "real"),
    "synth": ("run", "synth"),
    "gaps": ("run", "gaps"),
    "n_synth": ("run", "n_synth"),
    "pairing": ("eval", "pairing"),
    "extractor": ("eval", "extractor"),
    "classifier": ("eval", "classifier"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beatdiff", description="Heartbeat generation, imputation and forecasting with one diffusion model.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config; the echoed config.ini of a run reproduces it")
        sp.add_argument("--out", help="output directory (default: a fresh run directory)")
        sp.add_argument("--runs", help=f"run-directory root (default ${RUNS_ENV} or ./runs)")
        return sp

    sp = common(sub.add_parser("ingest", help="segment WFDB records (or build the toy corpus) into train/test CSVs"))
    sp.add_argument("--records", help="directory of WFDB records (.hea/.dat plus text annotations)")
    sp.add_argument("--channel", help="signal name or index to segment")
    sp.add_argument("--split", type=float, help="train fraction of records")
    sp.add_argument("--seed", dest="data_seed", type=int, help="split and toy-corpus seed")
    sp.add_argument("--toy", action="store_true", help="dataset-free synthetic corpus")
    sp.add_argument("--per-class", type=int, help="toy beats per class")

    sp = common(sub.add_parser("train", help="train the denoiser"))
    sp.add_argument("--train", help="training beats CSV")
    sp.add_argument("--toy", action="store_true", help="train on the synthetic corpus")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", dest="train_seed", type=int, help="training seed")

    sp = common(sub.add_parser("generate", help="generate beats of a class"))
    sp.add_argument("--checkpoint", help="model.ckpt from train")
    sp.add_argument("--class", dest="cls", help="N, V, F or a comma list")
    sp.add_argument("--count", type=int, help="beats per class (generate) or beats used")
    sp.add_argument("--seed", type=int, help="sampling seed")
    sp.add_argument("--real", help="reference beats for the plot band")

    sp = common(sub.add_parser("impute", help="fill a gap in each beat of a CSV"))
    sp.add_argument("--checkpoint", help="model.ckpt from train")
    sp.add_argument("--beats", help="beats CSV to condition on")
    sp.add_argument("--gap", help="start:end (inclusive); random per beat when omitted")
    sp.add_argument("--count", type=int, help="beats per class (generate) or beats used")
    sp.add_argument("--seed", type=int, help="sampling seed")
    sp.add_argument("--real", help="real beats CSV")

    sp = common(sub.add_parser("forecast", help="predict each beat from its predecessor"))
    sp.add_argument("--checkpoint", help="model.ckpt from train")
    sp.add_argument("--beats", help="beats CSV to condition on")
    sp.add_argument("--count", type=int, help="beats per class (generate) or beats used")
    sp.add_argument("--seed", type=int, help="sampling seed")
    sp.add_argument("--real", help="real beats CSV")

    sp = common(sub.add_parser("evaluate", help="six-metric report of synthetic against real beats"))
    sp.add_argument("--real", help="real beats CSV")
    sp.add_argument("--synth", help="synthetic beats CSV")
    sp.add_argument("--gaps", help="gaps.csv from impute, for gap-restricted errors")
    sp.add_argument("--pairing", choices=["auto", "nearest", "ground_truth"])
    sp.add_argument("--extractor", choices=["statistical", "classifier"])
    sp.add_argument("--classifier", help="classifier checkpoint for classifier features")

    sp = common(sub.add_parser("augment-eval", help="classifier with and without generated beats"))
    sp.add_argument("--checkpoint", help="model.ckpt from train")
    sp.add_argument("--train", help="real training beats CSV")
    sp.add_argument("--test", help="test beats CSV")
    sp.add_argument("--toy", action="store_true", help="use the synthetic corpus")
    sp.add_argument("--n-synth", type=int, help="synthetic beats per class (default: balance to the majority class)")
    return p


def run(argv=None) -> Path:
    args = build_parser().parse_args(argv)
    cp = load_config(args.config)
    for name, (section, key) in OVERRIDES.items():
        value = getattr(args, name, None)
        if value is not None:
            cp.set(section, key, str(value))
    if getattr(args, "toy", False):
        if getattr(args, "records", None) or getattr(args, "train", None):
            raise CLIError("--toy conflicts with --records/--train")
        cp.set("synth-data", "enabled", "true")
    if args.command == "ingest" and getattr(args, "records", None):
        cp.set("synth-data", "enabled", "false")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(config_text(cp), encoding="utf-8")
    else:
        out = run_dir(cp, args.command, args.runs)
    files = COMMANDS[args.command](cp, out)
    missing = [str(f) for f in files if not Path(f).is_file()]
    if missing:
        raise CLIError(f"expected outputs were not written: {missing}")
    return out


def main(argv=None) -> int:
    try:
        out = run(argv)
    except (CLIError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        print(f"beatdiff: error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
