"""Command line entry point: ``dlpr <subcommand> [flags]``.

Settings come from built-in defaults, then ``--config FILE`` (``key = value``
lines with dotted keys such as ``optics.distance = 0.375``), then flags.  The
effective settings are echoed to ``<out>/resolved-config.txt``.

Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric divergence, 5 artifact mismatch.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4, 5

DEFAULTS = {
    "optics.wavelength": "6.328e-07",
    "optics.pixel_pitch": "2e-05",
    "optics.distance": "0.375",
    "optics.grid": "64",
    "optics.pad_factor": "2",
    "optics.pad_mode": "edge",
    "optics.noise_sigma": "0",
    "optics.quantize": "0",
    "optics.noise_seed": "0",
    "dataset.source": "",
    "dataset.kind": "",
    "dataset.count": "100",
    "dataset.split": "0.9",
    "dataset.seed": "0",
    "dataset.margin": "0",
    "train.epochs": "20",
    "train.batch_size": "16",
    "train.learning_rate": "0.001",
    "train.beta1": "0.9",
    "train.beta2": "0.999",
    "train.eps": "1e-08",
    "train.seed": "0",
    "train.eval_every": "1",
    "experiment.axis": "distance",
    "experiment.values": "",
    "experiment.layer": "1",
    "experiment.filters": "0..15",
    "experiment.steps": "100",
    "experiment.step_size": "0.1",
    "experiment.seed": "0",
    "experiment.count": "8",
    "experiment.split": "test",
    "run.threads": "1",
}

# flag dest -> config key
FLAG_KEYS = {
    "wavelength": "optics.wavelength",
    "pixel_pitch": "optics.pixel_pitch",
    "distance": "optics.distance",
    "grid": "optics.grid",
    "pad_factor": "optics.pad_factor",
    "pad_mode": "optics.pad_mode",
    "noise_sigma": "optics.noise_sigma",
    "quantize": "optics.quantize",
    "noise_seed": "optics.noise_seed",
    "source": "dataset.source",
    "procedural": "dataset.kind",
    "count": "dataset.count",
    "split": "dataset.split",
    "seed": None,  # routed per subcommand
    "margin": "dataset.margin",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.learning_rate",
    "eval_every": "train.eval_every",
    "axis": "experiment.axis",
    "values": "experiment.values",
    "layer": "experiment.layer",
    "filters": "experiment.filters",
    "steps": "experiment.steps",
    "step_size": "experiment.step_size",
    "samples": "experiment.count",
    "eval_split": "experiment.split",
    "threads": "run.threads",
}
SEED_KEY = {"gen-data": "dataset.seed", "train": "train.seed", "maps": "experiment.seed"}


class UsageError(Exception):
    pass


# -- settings ---------------------------------------------------------------


def resolve_settings(args, command) -> dict:
    from dlpr.network import parse_key_values

    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        try:
            settings.update(parse_key_values(text))
        except ValueError as exc:
            raise UsageError(f"{args.config}: {exc}") from exc
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "seed":
            key = SEED_KEY.get(command)
            if key is None:
                continue
        if isinstance(value, bool):
            value = int(value)
        settings[key] = str(value)
    return settings


def write_resolved(out: Path, settings: dict, command: str) -> None:
    lines = [f"# dlpr {command}"] + [f"{k} = {settings[k]}" for k in sorted(settings)]
    (out / "resolved-config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _num(settings, key, kind=float):
    try:
        return kind(settings[key])
    except (KeyError, ValueError) as exc:
        raise UsageError(f"setting {key} = {settings.get(key)!r} is not a valid {kind.__name__}") from exc


def optics_from(settings):
    from dlpr.optics import NoiseSpec, PropagationConfig

    try:
        cfg = PropagationConfig(
            wavelength=_num(settings, "optics.wavelength"),
            pixel_pitch=_num(settings, "optics.pixel_pitch"),
            distance=_num(settings, "optics.distance"),
            grid=_num(settings, "optics.grid", int),
            pad_factor=_num(settings, "optics.pad_factor", int),
            pad_mode=settings["optics.pad_mode"],
        )
        noise = NoiseSpec(
            sigma=_num(settings, "optics.noise_sigma"),
            quantize=bool(_num(settings, "optics.quantize", int)),
            seed=_num(settings, "optics.noise_seed", int),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg.distance < 0:
        # back-propagation is an optics-library feature, not a measurement
        raise UsageError(f"object-to-sensor distance must be >= 0, got {cfg.distance}")
    return cfg, noise


def train_config_from(settings):
    from dlpr.training import TrainConfig

    try:
        return TrainConfig(
            epochs=_num(settings, "train.epochs", int),
            batch_size=_num(settings, "train.batch_size", int),
            learning_rate=_num(settings, "train.learning_rate"),
            beta1=_num(settings, "train.beta1"),
            beta2=_num(settings, "train.beta2"),
            eps=_num(settings, "train.eps"),
            seed=_num(settings, "train.seed", int),
            eval_every=_num(settings, "train.eval_every", int),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def spec_from(settings, spec_file):
    from dlpr.network import NetworkSpec, SpecError, parse_key_values

    values = {k[len("network."):]: v for k, v in settings.items() if k.startswith("network.")}
    if spec_file:
        text = Path(spec_file).read_text(encoding="utf-8")
        for k, v in parse_key_values(text).items():
            values[k[len("network."):] if k.startswith("network.") else k] = v
    try:
        return NetworkSpec.from_mapping(values)
    except (SpecError, ValueError) as exc:
        raise UsageError(f"network spec: {exc}") from exc


def parse_range(text: str) -> list:
    """``"0..15"`` or ``"0,3,7"`` -> list of ints."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def output_dir(args) -> Path:
    out = args.out or os.environ.get("DLPR_OUT")
    if not out:
        raise UsageError("no output location: pass --out or set DLPR_OUT")
    return Path(out)


# -- subcommands ------------------------------------------------------------


def cmd_simulate(args, settings):
    from dlpr.datasets import read_gray, write_gray, write_tensor
    from dlpr.optics import quantize_8bit, simulate_measurement

    if not args.input:
        raise UsageError("simulate needs --input")
    cfg, noise = optics_from(settings)
    try:
        gray = read_gray(args.input)
    except Exception as exc:
        raise UsageError(f"cannot read input image {args.input}: {exc}") from exc
    try:
        raw = simulate_measurement(gray, cfg, noise)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    target = output_dir(args)
    target.parent.mkdir(parents=True, exist_ok=True)
    tensor_path = target if target.suffix == ".dlt" else target.with_suffix(".dlt")
    write_tensor(tensor_path, raw)
    write_gray(tensor_path.with_suffix(".pgm"), quantize_8bit(raw))
    write_resolved(tensor_path.parent, settings, "simulate")
    print(f"wrote {tensor_path}")


def cmd_gen_data(args, settings):
    from dlpr.datasets import generate_procedural, ingest, synthesize

    cfg, noise = optics_from(settings)
    source, kind = settings["dataset.source"], settings["dataset.kind"]
    if bool(source) == bool(kind):
        raise UsageError("gen-data needs exactly one of --source or --procedural")
    split = _num(settings, "dataset.split")
    seed = _num(settings, "dataset.seed", int)
    try:
        if kind:
            manifest, objects = generate_procedural(
                kind, _num(settings, "dataset.count", int), seed, cfg.grid, split
            )
        else:
            manifest, objects, _ = ingest(source, cfg.grid, _num(settings, "dataset.margin", int), 0.0, split, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    synthesize(manifest, objects, cfg, out, noise)
    write_resolved(out, settings, "gen-data")
    print(f"generated {len(manifest.split('train'))}/{len(manifest.split('test'))}")


def cmd_train(args, settings):
    from dlpr.datasets import load_dataset
    from dlpr.network import PhaseNet, parse_key_values
    from dlpr.training import train

    if not args.data:
        raise UsageError("train needs --data")
    if args.epochs is not None and args.epochs < 1:
        raise UsageError(f"--epochs must be >= 1, got {args.epochs}")
    config = train_config_from(settings)
    spec = spec_from(settings, args.spec)
    train_set = load_dataset(args.data, "train")
    try:
        test_set = load_dataset(args.data, "test")
    except Exception:
        test_set = None
    if spec.input_size != train_set.cfg.grid:
        raise UsageError(f"network input_size {spec.input_size} differs from dataset grid {train_set.cfg.grid}")
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    for k, v in parse_key_values(spec.to_text()).items():
        settings[f"network.{k}"] = v
    settings["data"] = str(args.data)
    write_resolved(out, settings, "train")
    model = PhaseNet(spec, seed=config.seed)
    history = train(model, train_set, test_set, config, out, {"optics_digest": train_set.digest})
    last = history.test_l1[-1]
    print(f"trained {len(history)} epochs: train_l1 {history.train_l1[-1]:.6f} test_l1 {last if last is None else round(last, 6)}")


def _load_model(args):
    from dlpr.network import load_checkpoint

    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return load_checkpoint(args.checkpoint)


def _split(settings):
    split = settings["experiment.split"] or None
    return None if split == "all" else split


def _check_digest(meta, ds, args):
    from dlpr.experiments import DigestMismatch

    want = meta.get("optics_digest", "")
    if want and ds.digest != want and not args.allow_digest_mismatch:
        raise DigestMismatch(f"dataset optics digest {ds.digest} differs from the checkpoint's {want}")


def cmd_eval(args, settings):
    from dlpr.datasets import load_dataset
    from dlpr.experiments import cross_domain_eval, table_csv

    model, meta = _load_model(args)
    if not args.data:
        raise UsageError("eval needs --data")
    sets = {}
    for d in args.data:
        ds = load_dataset(d, _split(settings))
        _check_digest(meta, ds, args)
        sets[ds.tags[0] if len(set(ds.tags)) == 1 else Path(d).name] = ds
    table = cross_domain_eval(model, sets)
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mae.csv").write_text(table_csv(table), encoding="utf-8")
    write_resolved(out, settings, "eval")
    for tag, (mae, n) in table.items():
        print(f"{tag}: mae {float(mae)!r} n {n}")


def cmd_sweep(args, settings):
    from dlpr.datasets import load_dataset
    from dlpr.experiments import run_sweep

    model, meta = _load_model(args)
    if not args.data:
        raise UsageError("sweep needs --data")
    ds = load_dataset(args.data[0], _split(settings))
    _check_digest(meta, ds, args)
    axis = settings["experiment.axis"]
    try:
        raw_values = [v for v in settings["experiment.values"].split(",") if v.strip()]
        values = [float(v) for v in raw_values] if axis == "distance" else [int(float(v)) for v in raw_values]
        before = model.digest()
        result = run_sweep(axis, model, ds.objects, ds.cfg, values, ds.noise)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    assert model.digest() == before
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    result.write(out / f"sweep-{axis}.csv")
    write_resolved(out, settings, "sweep")
    print(f"swept {axis} over {len(result.values)} values; minimum at {result.argmin()}")


def cmd_maps(args, settings):
    from dlpr.datasets import write_gray
    from dlpr.experiments import max_activation_pattern, pattern_to_gray

    model, _ = _load_model(args)
    layer = _num(settings, "experiment.layer", int)
    try:
        filters = parse_range(settings["experiment.filters"])
    except ValueError as exc:
        raise UsageError(f"bad --filters: {exc}") from exc
    steps = _num(settings, "experiment.steps", int)
    step_size = _num(settings, "experiment.step_size")
    seed = _num(settings, "experiment.seed", int)
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["filter,step,activation"]
    for f in filters:
        try:
            pattern, trace = max_activation_pattern(model, layer, f, steps, step_size, seed)
        except IndexError as exc:
            raise UsageError(str(exc)) from exc
        write_gray(out / f"map-layer{layer}-filter{f:02d}.pgm", pattern_to_gray(pattern))
        rows.extend(f"{f},{k},{float(a)!r}" for k, a in enumerate(trace))
    (out / f"map-layer{layer}-trace.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    write_resolved(out, settings, "maps")
    print(f"wrote {len(filters)} patterns for layer {layer}")


def cmd_grid(args, settings):
    from dlpr.datasets import load_dataset
    from dlpr.experiments import reconstruct_grid

    model, meta = _load_model(args)
    if not args.data:
        raise UsageError("grid needs --data")
    ds = load_dataset(args.data[0], _split(settings))
    _check_digest(meta, ds, args)
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    l1, _ = reconstruct_grid(model, ds, out / "grid.pgm", limit=_num(settings, "experiment.count", int))
    lines = ["row,id,l1"] + [f"{i},{ds.ids[i]},{float(v)!r}" for i, v in enumerate(l1)]
    (out / "grid.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_resolved(out, settings, "grid")
    print(f"wrote grid of {len(l1)} samples, mean l1 {float(np.mean(l1)):.6f}")


COMMANDS = {
    "simulate": cmd_simulate,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "maps": cmd_maps,
    "grid": cmd_grid,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dlpr", description="Lensless phase-retrieval lab: simulate, train, analyse.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--out", help="output file/directory (default: $DLPR_OUT)")
        p.add_argument("--threads", type=int, help="cap BLAS worker threads (1 = deterministic)")
        p.add_argument("-v", "--verbose", action="store_true")

    def optics(p):
        p.add_argument("--distance", type=float, help="object-to-sensor distance [m]")
        p.add_argument("--wavelength", type=float)
        p.add_argument("--pixel-pitch", dest="pixel_pitch", type=float)
        p.add_argument("--grid", type=int)
        p.add_argument("--pad-factor", dest="pad_factor", type=int)
        p.add_argument("--pad-mode", dest="pad_mode", choices=("edge", "zero"))
        p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
        p.add_argument("--quantize", action="store_true", default=None)
        p.add_argument("--noise-seed", dest="noise_seed", type=int)

    def model_io(p, multi=False):
        p.add_argument("--checkpoint")
        p.add_argument("--data", nargs="+" if multi else 1)
        p.add_argument("--split", dest="eval_split", help="dataset split to use (train/test/all)")
        p.add_argument("--allow-digest-mismatch", action="store_true")

    p = sub.add_parser("simulate", help="raw intensity for one object image")
    common(p), optics(p)
    p.add_argument("--input")

    p = sub.add_parser("gen-data", help="build a paired dataset")
    common(p), optics(p)
    p.add_argument("--source")
    p.add_argument("--procedural")
    p.add_argument("--count", type=int)
    p.add_argument("--split", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--margin", type=int)

    p = sub.add_parser("train", help="train a network on a dataset")
    common(p)
    p.add_argument("--data")
    p.add_argument("--spec", help="network spec file (key = value)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="MAE table over one or more datasets")
    common(p), model_io(p, multi=True)

    p = sub.add_parser("sweep", help="distance / shift / rotation sensitivity")
    common(p), model_io(p)
    p.add_argument("--axis", choices=("distance", "shift", "rotation"))
    p.add_argument("--values", help="comma-separated sweep points")

    p = sub.add_parser("maps", help="maximally activated patterns")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--layer", type=int)
    p.add_argument("--filters", help="e.g. 0..15 or 0,3,5")
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("grid", help="ground truth / raw / reconstruction tiles")
    common(p), model_io(p)
    p.add_argument("--samples", type=int, help="number of rows")
    return parser


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    from dlpr.datasets import DatasetError, DigestMismatchError
    from dlpr.experiments import DigestMismatch
    from dlpr.network import CheckpointError
    from dlpr.training import TrainingDivergedError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        settings = resolve_settings(args, args.command)
        threads = _num(settings, "run.threads", int)
        if threads < 1:
            raise UsageError("--threads must be >= 1")
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](args, settings)
    except UsageError as exc:
        print(f"dlpr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"dlpr {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, DigestMismatch, DigestMismatchError) as exc:
        print(f"dlpr {args.command}: artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, DatasetError) as exc:
        print(f"dlpr {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
