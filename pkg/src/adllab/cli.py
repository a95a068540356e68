"""Command line harness: generate, train, evaluate, export-heatmaps, sweep.

Errors go to stderr as ``adllab: error[CODE]: message`` and the process
exits nonzero. Codes: E_USAGE, E_CONFIG, E_DATA, E_IO, E_MODEL, E_DIVERGED.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import AXES, VARIANTS, RunConfig
from .experiments import fit, load_data, sweep, sweep_tables
from .imageio import atomic_write_bytes, encode_pnm
from .localization import BBox, evaluate, localize
from .model import ConfigError, TrainingDiverged, load_model, predict_batch, save_model
from .synthdata import DataSpecError, generate_dataset, read_split, write_dataset

EXIT_CODES = {"E_USAGE": 2, "E_CONFIG": 3, "E_DATA": 4, "E_IO": 5, "E_MODEL": 6, "E_DIVERGED": 7}
GT_COLOR = (1.0, 0.0, 0.0)
PRED_COLOR = (0.0, 1.0, 0.0)


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message)


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _out_dir(path: Path | None) -> Path:
    if path is None:
        raise CliError("E_USAGE", "an output directory is required (--out or [run] out)")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("E_IO", f"cannot create output directory {path}: {exc.strerror}") from exc
    return path


def _run_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seeds", None) is not None:
        try:
            rc.seeds = tuple(int(v) for v in args.seeds.split(",") if v.strip())
        except ValueError as exc:
            raise CliError("E_USAGE", f"bad --seeds {args.seeds!r}") from exc
    if getattr(args, "seed", None) is not None:
        rc.seeds = (args.seed,)
    if getattr(args, "variant", None):
        rc.variant = args.variant
    if getattr(args, "theta_box", None) is not None:
        rc.theta_box = args.theta_box
    if getattr(args, "out", None):
        rc.out = Path(args.out)
    if getattr(args, "data", None):
        rc.data_path = Path(args.data)
    rc.validate()
    return rc


def _load_net(path: str):
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise CliError("E_IO", f"model file {path} not found") from exc
    except (ValueError, ConfigError) as exc:
        raise CliError("E_MODEL", str(exc)) from exc


def _load_split(path: str, split: str):
    root = Path(path)
    directory = root / split if (root / split).is_dir() else root
    try:
        return read_split(directory)
    except FileNotFoundError as exc:
        raise CliError("E_DATA", str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    rc = _run_config(args)
    spec = replace(rc.data, seed=rc.seeds[0])
    out = _out_dir(rc.out)
    train_set, test_set = generate_dataset(spec)
    try:
        write_dataset(train_set, test_set, out, spec)
    except OSError as exc:
        raise CliError("E_IO", f"cannot write dataset to {out}: {exc}") from exc
    print(f"wrote {len(train_set)} train and {len(test_set)} test samples to {out}")
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    out = _out_dir(rc.out)
    seed = rc.seeds[0]
    train_set, _, spec = load_data(rc, seed)
    cfg = rc.model_config(spec.num_classes)
    try:
        net, log = fit(cfg, rc.opt, train_set, seed, pin=args.pin)
    except TrainingDiverged as exc:
        if exc.log is not None:
            _write_text(out / "train_log.tsv", exc.log.as_text())
            _write_text(out / "gates.txt", "\n".join(exc.log.gates.as_lines()) + "\n")
        raise CliError("E_DIVERGED", str(exc)) from exc
    _write_text(out / "run.ini", replace(rc, seeds=(seed,), out=None).to_ini())
    save_model(net, out / "model.bin")
    _write_text(out / "train_log.tsv", log.as_text())
    _write_text(out / "gates.txt", "\n".join(log.gates.as_lines()) + "\n")
    print(f"trained {rc.variant} model (seed {seed}), final loss {log.loss[-1] if log.loss else float('nan'):.4f}")
    return 0


def cmd_evaluate(args) -> int:
    net = _load_net(args.model)
    data = _load_split(args.data, "test")
    theta = 0.2 if args.theta_box is None else args.theta_box
    if not 0.0 < theta < 1.0:
        raise CliError("E_CONFIG", f"theta_box must be in (0, 1), got {theta}")
    out = _out_dir(Path(args.out) if args.out else None)
    try:
        report = evaluate(net, data.images, data.labels, data.boxes, theta)
    except ValueError as exc:
        raise CliError("E_DATA", str(exc)) from exc
    _write_text(out / "metrics.txt", report.as_text())
    _write_text(out / "records.tsv", report.records_tsv())
    sys.stdout.write(report.as_text())
    return 0


def draw_box(img: np.ndarray, box: BBox, color) -> None:
    """One-pixel outline along the inside edge of ``box``."""
    x0, y0, x1, y1 = box.as_tuple()
    img[y0, x0:x1] = color
    img[y1 - 1, x0:x1] = color
    img[y0:y1, x0] = color
    img[y0:y1, x1 - 1] = color


def cmd_export_heatmaps(args) -> int:
    net = _load_net(args.model)
    data = _load_split(args.data, "test")
    if args.n < 1:
        raise CliError("E_USAGE", "--n must be at least 1")
    theta = 0.2 if args.theta_box is None else args.theta_box
    out = _out_dir(Path(args.out) if args.out else None)
    n = min(args.n, len(data))
    predicted, _, feats = predict_batch(net, data.images[:n])
    hw = data.images.shape[1:3]
    lines = ["# name label predicted gt_x0 gt_y0 gt_x1 gt_y1 pred_x0 pred_y0 pred_x1 pred_y1"]
    for i in range(n):
        cls = int(predicted[i])
        box, heat = localize(feats[i], net.fc_weight[:, cls], hw, theta)
        stem = f"{i:04d}"
        img = data.images[i]
        overlay = 0.5 * img + 0.5 * np.stack([heat.values, np.zeros(hw), 1.0 - heat.values], axis=-1)
        draw_box(overlay, data.boxes[i], GT_COLOR)
        draw_box(overlay, box, PRED_COLOR)
        atomic_write_bytes(out / f"{stem}_input.ppm", encode_pnm(img))
        atomic_write_bytes(out / f"{stem}_heatmap.pgm", encode_pnm(heat.values))
        atomic_write_bytes(out / f"{stem}_overlay.ppm", encode_pnm(overlay))
        g = data.boxes[i]
        lines.append(f"{stem} {int(data.labels[i])} {cls} {g.x0} {g.y0} {g.x1} {g.y1} {box.x0} {box.y0} {box.x1} {box.y1}")
    _write_text(out / "boxes.txt", "\n".join(lines) + "\n")
    print(f"exported {n} heatmap triples to {out}")
    return 0


def cmd_sweep(args) -> int:
    rc = _run_config(args)
    if args.axis:
        rc.sweep_axis = args.axis
    if args.values is not None:
        rc.sweep_values = tuple(v.strip() for v in args.values.split(",") if v.strip())
        if not rc.sweep_values:
            raise CliError("E_CONFIG", "sweep axis values are empty")
    out = _out_dir(rc.out)
    rows = sweep(rc)
    table, per_seed = sweep_tables(rc, rows)
    _write_text(out / "table.tsv", table)
    _write_text(out / "per_seed.tsv", per_seed)
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adllab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, variant=False):
        sp.add_argument("--config", help="run configuration (INI)")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", help="output directory")
        if variant:
            sp.add_argument("--variant", choices=VARIANTS)

    sp = sub.add_parser("generate", help="write a synthetic dataset directory")
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train one model")
    common(sp, variant=True)
    sp.add_argument("--data", help="dataset directory (default: generate from [data])")
    sp.add_argument("--pin", choices=("drop", "importance"), help="force every ADL gate to one branch")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="Top-1 Loc / Top-1 Clas / GT-known Loc of a model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, help="dataset directory or split directory")
    sp.add_argument("--theta-box", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("export-heatmaps", help="input / heatmap / overlay images for the first N test samples")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--theta-box", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_heatmaps)

    sp = sub.add_parser("sweep", help="train and evaluate over an ADL hyperparameter axis and seeds")
    common(sp)
    sp.add_argument("--data", help="dataset directory (default: generate per seed)")
    sp.add_argument("--axis", choices=AXES)
    sp.add_argument("--values", help="comma separated axis values")
    sp.add_argument("--theta-box", type=float)
    sp.add_argument("--seeds", help="comma separated seeds")
    sp.set_defaults(func=cmd_sweep)
    return p


def _fail(code: str, message: str) -> int:
    print(f"adllab: error[{code}]: {message}", file=sys.stderr)
    return EXIT_CODES[code]


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except CliError as exc:
        return _fail(exc.code, str(exc))
    except (ConfigError, DataSpecError) as exc:
        return _fail("E_CONFIG", str(exc))
    except OSError as exc:
        return _fail("E_IO", f"{exc.filename or ''} {exc.strerror or exc}".strip())


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
