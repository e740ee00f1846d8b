"""Command-line front end: one subcommand per pipeline stage.

Every stage reads the previous stage's directory, writes its own directory
and stamps a ``stage.json`` manifest with the config hash.  Without
``--config`` a stage reuses the ``config.toml`` stored next to its input, so
a chain of commands stays on one configuration.

Exit codes: 0 ok, 1 other pipeline error, 2 missing input, 3 invalid
configuration, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, load_config
from .ensemble import (
    EnsembleHyper,
    cross_validate,
    report_json,
    reports_csv,
    summary_csv,
    sweep_groups,
    train_ensemble,
)
from .errors import (
    ConfigError,
    DegenerateChannelError,
    DegenerateSpectrum,
    NoDataError,
    NumericError,
    SsaEegError,
)
from .plotting import plot_components, plot_matrices, plot_sweep, plot_variance
from .signal import BandPassSpec, bandpass, normalize_channels, segment
from .spectral import (
    build_features,
    build_ssa,
    load_features,
    load_subject_ssa,
    save_features,
    save_subject_ssa,
)
from .ssa import reconstruct_groups
from .synth import PRESETS, generate, preset, read_dataset, write_dataset

log = logging.getLogger("ssa_eeg")

EXIT_OK, EXIT_ERROR, EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4

STAGE_FILE = "stage.json"
CONFIG_FILE = "config.toml"


class MissingInput(SsaEegError):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def parse_range(text: str) -> list[int]:
    """``"1..5"``, ``"1-5"``, ``"1,3,4"`` or ``"4"`` -> sorted unique ints."""
    text = text.strip()
    m = re.fullmatch(r"(\d+)\s*(?:\.\.|-)\s*(\d+)", text)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        if lo > hi:
            raise ConfigError(f"empty range {text!r}")
        return list(range(lo, hi + 1))
    try:
        return sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError:
        raise ConfigError(f"cannot parse range {text!r}") from None


def _need_dir(path, marker: str | None = None) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise MissingInput(f"input directory {path} does not exist")
    if marker and not (path / marker).exists():
        raise MissingInput(f"{path} has no {marker}; is it the output of the right stage?")
    return path


def _stage_meta(path: Path) -> dict:
    f = path / STAGE_FILE
    return json.loads(f.read_text()) if f.exists() else {}


def resolve_config(args, input_dir: Path | None = None) -> PipelineConfig:
    path = args.config
    if path is None and input_dir is not None and (input_dir / CONFIG_FILE).exists():
        path = input_dir / CONFIG_FILE
    if path is not None and not Path(path).exists():
        raise MissingInput(f"config file {path} not found")
    cfg = load_config(path)
    if args.seed is not None:
        cfg = cfg.with_updates(eval={"seed": args.seed}, synth={"seed": args.seed})
    return cfg


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def finish_stage(out: Path, stage: str, cfg: PipelineConfig, inputs: dict | None = None) -> None:
    """Persist the config and a manifest listing every file of the stage."""
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / CONFIG_FILE)
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                   if p.is_file() and p.name != STAGE_FILE)
    rel = {k: os.path.relpath(Path(v).resolve(), out.resolve()) for k, v in (inputs or {}).items()}
    previous = _stage_meta(out)
    if previous.get("stage") == stage:
        rel = {**previous.get("inputs", {}), **rel}
    meta = {"stage": stage, "config_hash": cfg.config_hash(), "version": __version__,
            "inputs": rel, "files": files}
    _write_text(out / STAGE_FILE, json.dumps(meta, indent=1, sort_keys=True) + "\n")
    log.info("%s: wrote %d files to %s", stage, len(files), out)


def _input_from_meta(stage_dir: Path, key: str) -> Path:
    meta = _stage_meta(stage_dir)
    if key not in meta.get("inputs", {}):
        raise MissingInput(f"{stage_dir}/{STAGE_FILE} does not record a {key!r} input")
    return (stage_dir / meta["inputs"][key]).resolve()


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _f(v: float) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    over = {k: v for k, v in (("preset", args.preset), ("n_per_class", args.n_per_class),
                              ("channels", args.channels), ("duration_s", args.duration))
            if v is not None}
    if over:
        cfg = cfg.with_updates(synth=over)
    s = cfg.synth
    if s.preset not in PRESETS:
        raise ConfigError(f"synth.preset must be one of {PRESETS}, got {s.preset!r}")
    spec = preset(s.preset, n_per_class=s.n_per_class, channels=s.channels,
                  duration_s=s.duration_s, fs=cfg.signal.fs, seed=s.seed)
    out = Path(args.out)
    write_dataset(generate(spec), out, args.format)
    finish_stage(out, "synth", cfg)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    src = _need_dir(args.input, "labels.json")
    cfg = resolve_config(args, src)
    recs = read_dataset(src)
    if not recs:
        raise NoDataError(f"{src} lists no recordings")
    sig = cfg.signal
    spec = BandPassSpec(sig.band_low_hz, sig.band_high_hz, sig.filter_order)
    out = Path(args.out)
    done = []
    for rec in recs:
        if rec.fs != sig.fs:
            raise ConfigError(f"{rec.subject_id}: recording fs {rec.fs} != signal.fs {sig.fs}")
        done.append(bandpass(normalize_channels(rec), spec))
    write_dataset(done, out, "raw-f64")
    finish_stage(out, "preprocess", cfg, {"recordings": src})
    return EXIT_OK


def cmd_ssa(args) -> int:
    src = _need_dir(args.input, "labels.json")
    cfg = resolve_config(args, src)
    out = Path(args.out)
    for obj in build_ssa(read_dataset(src), cfg, args.threads):
        save_subject_ssa(obj, out)
    finish_stage(out, "ssa", cfg, {"preprocessed": src})
    return EXIT_OK


def _load_ssa_dir(ssa_dir: Path) -> dict:
    return {p.stem: load_subject_ssa(p) for p in sorted(ssa_dir.glob("*.json"))
            if p.name != STAGE_FILE}


def cmd_features(args) -> int:
    ssa_dir = _need_dir(args.input, STAGE_FILE)
    cfg = resolve_config(args, ssa_dir)
    pre = _need_dir(_input_from_meta(ssa_dir, "preprocessed"), "labels.json")
    states = _load_ssa_dir(ssa_dir)
    recs = read_dataset(pre)
    missing = [r.subject_id for r in recs if r.subject_id not in states]
    if missing:
        raise MissingInput(f"no SSA state for subjects {missing} in {ssa_dir}")
    ds = build_features(recs, cfg, args.threads, ssa=states)
    out = Path(args.out)
    save_features(ds, out)
    finish_stage(out, "features", cfg, {"ssa": ssa_dir, "preprocessed": pre})
    return EXIT_OK


def _members(args, cfg: PipelineConfig) -> int:
    return args.members if args.members is not None else cfg.eval.members


def _folds(args, cfg: PipelineConfig) -> int:
    return args.folds if args.folds is not None else cfg.eval.folds


def _load_feature_dir(args):
    src = _need_dir(args.input, "manifest.json")
    cfg = resolve_config(args, src)
    ds = load_features(src)
    if not ds.samples:
        raise NoDataError(f"{src} holds no feature samples")
    return src, cfg, ds


def cmd_train(args) -> int:
    src, cfg, ds = _load_feature_dir(args)
    hyper = EnsembleHyper.from_config(cfg)
    model = train_ensemble(ds, _members(args, cfg), hyper, cfg.eval.seed)
    out = Path(args.out)
    model.save(out / "ensemble", hyper)
    finish_stage(out, "train", cfg, {"features": src})
    return EXIT_OK


def cmd_eval(args) -> int:
    src, cfg, ds = _load_feature_dir(args)
    k = _members(args, cfg)
    rep = cross_validate(ds, _folds(args, cfg), k, EnsembleHyper.from_config(cfg), cfg.eval.seed)
    out = Path(args.out)
    extra = {"config_hash": cfg.config_hash(), "features_hash": ds.config_hash}
    _write_text(out / "report.json", report_json(rep, extra) + "\n")
    _write_text(out / "folds.csv", reports_csv([(k, rep)]))
    finish_stage(out, "eval", cfg, {"features": src})
    print(f"members={k} accuracy={rep.accuracy:.4f} sensitivity={rep.sensitivity:.4f} "
          f"specificity={rep.specificity:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    src, cfg, ds = _load_feature_dir(args)
    sizes = parse_range(args.groups) if args.groups else list(
        range(cfg.eval.sweep_min, cfg.eval.sweep_max + 1))
    G = ds.samples[0].n_groups
    if not sizes or sizes[0] < 1 or sizes[-1] > G:
        raise ConfigError(f"--groups {sizes} must lie within [1, {G}]")
    reps = sweep_groups(ds, sizes, _folds(args, cfg), EnsembleHyper.from_config(cfg),
                        cfg.eval.seed)
    out = Path(args.out)
    _write_text(out / "sweep.csv", reports_csv(reps))
    _write_text(out / "summary.csv", summary_csv(reps))
    finish_stage(out, "sweep", cfg, {"features": src})
    for k, rep in reps:
        print(f"members={k} accuracy={rep.accuracy:.4f} sensitivity={rep.sensitivity:.4f} "
              f"specificity={rep.specificity:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def report_variance(src: Path, out: Path, cfg: PipelineConfig) -> None:
    states = list(_load_ssa_dir(_need_dir(src, STAGE_FILE)).values())
    if not states:
        raise NoDataError(f"{src} holds no SSA state")
    spec = np.mean([s.spectrum for s in states], axis=0)
    spec = spec / spec.sum()
    retained = states[0].eofs.shape[-1]
    cum = np.cumsum(spec)
    rows = [[i + 1, _f(v), _f(c), int(i < retained)] for i, (v, c) in enumerate(zip(spec, cum))]
    _write_text(out / "variance.csv", _csv(rows, ["component", "fraction", "cumulative", "retained"]))
    share = np.mean([s.share for s in states], axis=0)
    _write_text(out / "group_variance.csv",
                _csv([[g + 1, _f(v)] for g, v in enumerate(share)], ["group", "fraction"]))
    plot_variance(spec, out / "variance.svg", retained)


def report_sweep(src: Path, out: Path, cfg: PipelineConfig) -> None:
    f = _need_dir(src, "summary.csv") / "summary.csv"
    rows = list(csv.DictReader(io.StringIO(f.read_text())))
    plot_sweep(rows, out / "sweep.svg")


def report_matrices(src: Path, out: Path, cfg: PipelineConfig) -> None:
    ds = load_features(_need_dir(src, "manifest.json"))
    means = {}
    for cls in ("control", "dyslexic"):
        picked = [s.matrices for s in ds.samples if s.label == cls]
        if picked:
            means[cls] = np.mean(picked, axis=0)
    if not means:
        raise NoDataError(f"{src} holds no labelled samples")
    rows = [[cls, g + 1, i, j, _f(m[g, i, j])]
            for cls, m in means.items() for g in range(m.shape[0])
            for i in range(m.shape[1]) for j in range(m.shape[2])]
    _write_text(out / "matrices.csv", _csv(rows, ["class", "group", "row", "col", "r"]))
    plot_matrices(means, out / "matrices.svg")


def report_components(src: Path, out: Path, cfg: PipelineConfig, subject: str | None,
                      channel: int) -> None:
    ssa_dir = _need_dir(src, STAGE_FILE)
    pre = _need_dir(_input_from_meta(ssa_dir, "preprocessed"), "labels.json")
    recs = {r.subject_id: r for r in read_dataset(pre)}
    sid = subject or sorted(recs)[0]
    if sid not in recs:
        raise MissingInput(f"subject {sid!r} not found in {pre}")
    rec = recs[sid]
    state = load_subject_ssa(ssa_dir / f"{sid}.json")
    seg = segment(rec, cfg.signal.segment_seconds, cfg.signal.overlap)[0]
    x = seg.data[channel]
    grouped = reconstruct_groups(x, state.eofs[0, channel], state.grouping(0, channel))
    n = min(x.size, int(4 * rec.fs))
    rows = [[_f(i / rec.fs), _f(x[i]), *(_f(grouped[g, i]) for g in range(grouped.shape[0]))]
            for i in range(n)]
    header = ["time_s", "signal"] + [f"group_{g + 1}" for g in range(grouped.shape[0])]
    _write_text(out / "components.csv", _csv(rows, header))
    plot_components(x, grouped, rec.fs, out / "components.svg")


REPORTS = ("variance", "sweep", "matrices", "components")


def cmd_report(args) -> int:
    src = _need_dir(args.input)
    cfg = resolve_config(args, src)
    out = Path(args.out)
    if args.kind == "variance":
        report_variance(src, out, cfg)
    elif args.kind == "sweep":
        report_sweep(src, out, cfg)
    elif args.kind == "matrices":
        report_matrices(src, out, cfg)
    else:
        report_components(src, out, cfg, args.subject, args.channel)
    finish_stage(out, "report", cfg, {args.kind: src})
    return EXIT_OK


def cmd_run(args) -> int:
    """Whole chain from synthetic data to reports under one directory."""
    root = Path(args.out)
    ns = argparse.Namespace(**vars(args))

    def step(fn, out, **kw):
        for k, v in kw.items():
            setattr(ns, k, v)
        ns.out = str(root / out)
        code = fn(ns)
        if code:
            raise SystemExit(code)
        # later stages inherit the stored config
        ns.config = None
        ns.seed = None

    step(cmd_synth, "raw", format="raw-f64")
    step(cmd_preprocess, "preprocessed", input=str(root / "raw"))
    step(cmd_ssa, "ssa", input=str(root / "preprocessed"))
    step(cmd_features, "features", input=str(root / "ssa"))
    step(cmd_eval, "eval", input=str(root / "features"))
    step(cmd_sweep, "sweep", input=str(root / "features"))
    step(cmd_report, "report", input=str(root / "ssa"), kind="variance")
    step(cmd_report, "report", input=str(root / "sweep"), kind="sweep")
    step(cmd_report, "report", input=str(root / "features"), kind="matrices")
    step(cmd_report, "report", input=str(root / "ssa"), kind="components")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline TOML file (default: input's config.toml)")
    common.add_argument("--out", required=True, help="output directory for this stage")
    common.add_argument("--seed", type=int, help="master seed (overrides eval.seed and synth.seed)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-subject work")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ssa-eeg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic two-class dataset")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--n-per-class", type=int)
    s.add_argument("--channels", type=int)
    s.add_argument("--duration", type=float, help="seconds per recording")
    s.add_argument("--format", choices=("raw-f64", "csv"), default="raw-f64")
    s.set_defaults(func=cmd_synth)

    for name, func, helptext in (
            ("preprocess", cmd_preprocess, "normalize and band-pass a dataset directory"),
            ("ssa", cmd_ssa, "decompose and group every channel"),
            ("features", cmd_features, "channel-correlation matrices per grouped component")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--input", required=True)
        s.set_defaults(func=func)

    for name, func, helptext in (("train", cmd_train, "fit an ensemble on all subjects"),
                                 ("eval", cmd_eval, "subject-level cross-validation")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--input", required=True, help="features directory")
        s.add_argument("--members", type=int, help="ensemble size G' (default eval.members)")
        if name == "eval":
            s.add_argument("--folds", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("sweep", parents=[common], help="cross-validate every ensemble size")
    s.add_argument("--input", required=True, help="features directory")
    s.add_argument("--groups", help="sizes to sweep, e.g. 1..5 (default eval.sweep_min..max)")
    s.add_argument("--folds", type=int)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", parents=[common], help="CSV and SVG figures from a stage")
    s.add_argument("--kind", choices=REPORTS, required=True)
    s.add_argument("--input", required=True,
                   help="ssa dir (variance, components), sweep dir or features dir (matrices)")
    s.add_argument("--subject", help="subject for --kind components (default: first)")
    s.add_argument("--channel", type=int, default=0)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", parents=[common], help="synth through report in one go")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--n-per-class", type=int)
    s.add_argument("--channels", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--members", type=int)
    s.add_argument("--folds", type=int)
    s.add_argument("--groups")
    s.add_argument("--subject")
    s.add_argument("--channel", type=int, default=0)
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except SsaEegError as exc:
        code, kind = _classify(exc)
        message = str(exc)
    except FileNotFoundError as exc:
        code, kind, message = EXIT_MISSING, "missing input", str(exc)
    except FloatingPointError as exc:
        code, kind, message = EXIT_NUMERIC, "numeric error", str(exc)
    print(f"ssa-eeg {args.command}: {kind}: {message}", file=sys.stderr)
    return code


def _classify(exc: SsaEegError) -> tuple[int, str]:
    if isinstance(exc, (MissingInput, NoDataError)):
        return EXIT_MISSING, "missing input"
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config error"
    if isinstance(exc, (NumericError, DegenerateSpectrum, DegenerateChannelError)):
        return EXIT_NUMERIC, "numeric error"
    return EXIT_ERROR, "error"
