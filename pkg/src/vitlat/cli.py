"""Command-line pipeline: sample, lower, featurize, simulate, train, predict,
evaluate, importance, sweep, and replay of any earlier run from its manifest.

Every command writes its outputs into ``--out`` (default ``$VITLAT_OUT`` or
``./vitlat-out``) together with ``manifest.<command>.json`` recording the
argument vector, input and output digests, seeds and library versions.

Seeds: ``sample`` gives config ``i`` the seed ``seed + i``; every other stage
derives its generator seed from the root ``--seed`` and the stage name with
:func:`stage_seed`.

Exit status: 0 success, 2 validation error, 3 I/O error, 4 coverage or
schema error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .archspace import DEFAULT_SPACE, ArchConfig, SearchSpaceSpec, load_arch, sample_arch, validate_arch
from .datastore import MeasurementSet, SplitSpec, ingest, serialize, split, write_atomic
from .errors import (
    ConfigurationError, ContextMismatchError, CoverageError, DataError, LoweringError, SchemaError,
    UnsupportedMethodError, UnsupportedOpError,
)
from .evaluation import evaluate, predict_model, training_size_sweep
from .learners import METHODS, Hyperparams, PredictorBundle, fit_bundle, graph_features, kind_key, mdi_importance
from .opfeatures import features_csv
from .opgraph import OpGraph, lower
from .simdevice import MODES, DeviceModel, simulate_graph

log = logging.getLogger("vitlat")

OUT_ENV = "VITLAT_OUT"
DEFAULT_OUT = "vitlat-out"
STAGES = ("sample", "lower", "featurize", "simulate", "train", "predict", "evaluate", "importance", "sweep")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_COVERAGE = 0, 2, 3, 4


def stage_seed(root: int, stage: str) -> int:
    """32-bit seed for ``stage`` derived from the root seed."""
    ss = np.random.SeedSequence(int(root), spawn_key=(STAGES.index(stage),))
    return int(ss.generate_state(1)[0])


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    return {"vitlat": __version__, "numpy": np.__version__, "python": platform.python_version()}


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, args: argparse.Namespace, argv: list):
        self.command = command
        self.out = Path(args.out)
        self.argv = list(argv)
        self.seed = getattr(args, "seed", None)
        self.inputs = {}
        self.outputs = {}

    def read(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"missing input {path}; run the upstream stage first")
        if path.is_file():
            self.inputs[str(path)] = sha256_file(path)
        return path

    def write(self, rel: str, text: str) -> Path:
        path = self.out / rel
        write_atomic(path, text)
        self.outputs[rel] = hashlib.sha256(text.encode()).hexdigest()
        return path

    def finish(self, extra=None) -> Path:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "out": str(self.out),
            "seed": self.seed,
            "stage_seed": None if self.seed is None or self.command == "sample" else stage_seed(self.seed, self.command),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "versions": _versions(),
        }
        if extra:
            manifest.update(extra)
        path = self.out / f"manifest.{self.command}.json"
        write_atomic(path, json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        return path


def _map(fn, items, jobs: int) -> list:
    """Order-preserving map, in a process pool when ``jobs > 1``."""
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _space(run: Run, args) -> SearchSpaceSpec:
    if args.space is None:
        return DEFAULT_SPACE
    return SearchSpaceSpec.from_json(run.read(args.space))


def _load_graphs(run: Run, directory) -> list:
    directory = run.read(directory)
    files = sorted(directory.glob("*.jsonl"))
    if not files:
        raise FileNotFoundError(f"no graph files in {directory}; run `lower` first")
    return [OpGraph.from_jsonl(run.read(f).read_text()) for f in files]


def _load_bundle(run: Run, path) -> PredictorBundle:
    return PredictorBundle.from_json(run.read(path).read_text())


def _device(run: Run, args) -> DeviceModel:
    dev = DeviceModel.from_json(run.read(args.device_model)) if args.device_model else DeviceModel()
    changes = {}
    if args.modes is not None:
        changes["modes"] = frozenset(args.modes)
    if args.noise is not None:
        changes["rng_noise_pct"] = args.noise
    return DeviceModel.from_dict({**dev.to_dict(), **changes}) if changes else dev


def _hyperparams(run: Run, args) -> Hyperparams:
    if getattr(args, "hyperparams", None) is None:
        return Hyperparams()
    return Hyperparams.from_dict(json.loads(run.read(args.hyperparams).read_text()))


# ---------------------------------------------------------------- commands

def cmd_sample(args, run: Run) -> None:
    if args.count < 0:
        raise ConfigurationError("count must be non-negative")
    space = _space(run, args)
    ids = []
    for i in range(args.count):
        cfg = sample_arch(args.seed + i, space)
        problems = validate_arch(cfg, space)
        if problems:
            raise ConfigurationError(f"sampled config {i} is invalid: {problems}")
        run.write(f"archs/{cfg.arch_id}.json", cfg.to_json())
        ids.append(cfg.arch_id)
    log.info("sampled %d configs", len(ids))


def _lower_one(task):
    text, precision = task
    g = lower(ArchConfig.from_json(text), precision)
    return g.arch_id, g.to_jsonl()


def cmd_lower(args, run: Run) -> None:
    directory = run.read(args.archs)
    files = sorted(directory.glob("*.json")) if directory.is_dir() else [directory]
    texts = [load_arch(run.read(f)).to_json() for f in files]
    for arch_id, text in _map(_lower_one, [(t, args.precision) for t in texts], args.jobs):
        run.write(f"graphs/{arch_id}.jsonl", text)
    log.info("lowered %d graphs", len(texts))


def cmd_featurize(args, run: Run) -> None:
    graphs = _load_graphs(run, args.graphs)
    tables = {}
    for g in graphs:
        for node, fv in zip(g.nodes, graph_features(g)):
            tables.setdefault(kind_key(node.kind, node.conv_layout_tag), []).append((g.arch_id, node.id, fv))
    for key, rows in sorted(tables.items()):
        run.write(f"features/{key.replace('|', '.')}.csv", features_csv(rows))
    log.info("wrote %d feature tables", len(tables))


def _simulate_one(task):
    text, dev_dict, seed, value_scale, vrange = task
    return simulate_graph(OpGraph.from_jsonl(text), DeviceModel.from_dict(dev_dict), seed, value_scale, vrange)


def cmd_simulate(args, run: Run) -> None:
    graphs = _load_graphs(run, args.graphs)
    dev = _device(run, args)
    seed = stage_seed(args.seed, "simulate")
    vrange = tuple(args.value_scale_range) if args.value_scale_range else None
    tasks = [(g.to_jsonl(), dev.to_dict(), seed, args.value_scale, vrange) for g in graphs]
    records = [r for recs in _map(_simulate_one, tasks, args.jobs) for r in recs]
    run.write(f"measurements.{args.format}", serialize(MeasurementSet(records), args.format))
    run.write("device.json", dev.to_json())


def cmd_train(args, run: Run) -> None:
    graphs = _load_graphs(run, args.graphs)
    ms = ingest(run.read(args.measurements), graphs=graphs)
    if ms.flags:
        raise DataError(f"{len(ms.flags)} measurement records do not match a graph node, e.g. {ms.flags[0]}")
    seed = stage_seed(args.seed, "train")
    ids = ms.model_ids()
    if args.train_size is None or args.train_size == len(ids):
        spec = SplitSpec(tuple(ids), (), seed)
    else:
        spec = split(ids, args.train_size, seed)
    bundle = fit_bundle(graphs, ms, args.method, _hyperparams(run, args), seed, model_ids=spec.train_ids,
                        separate_conv_layouts=not args.shared_conv)
    run.write(f"bundle.{args.method}.json", bundle.to_json())
    run.write("split.json", json.dumps(spec.to_dict(), sort_keys=True, indent=1) + "\n")


def cmd_predict(args, run: Run) -> None:
    graphs = _load_graphs(run, args.graphs)
    bundle = _load_bundle(run, args.bundle)
    reports = [predict_model(g, bundle).to_dict() for g in graphs]
    run.write("predictions.json", json.dumps(reports, sort_keys=True, indent=1) + "\n")


def cmd_evaluate(args, run: Run) -> None:
    graphs = _load_graphs(run, args.graphs)
    ms = ingest(run.read(args.measurements))
    bundle = _load_bundle(run, args.bundle)
    model_ids = None
    if args.split:
        spec = SplitSpec.from_dict(json.loads(run.read(args.split).read_text()))
        model_ids = spec.test_ids or spec.train_ids
    res = evaluate(graphs, ms, bundle, model_ids, allow_context_mismatch=args.allow_context_mismatch)
    run.write("evaluation.json", res.to_json())
    run.write("evaluation.csv", res.to_csv())
    print(f"{bundle.method}: end-to-end MAPE {res.end_to_end_mape:.2f}%")


def cmd_importance(args, run: Run) -> None:
    bundle = _load_bundle(run, args.bundle)
    lines = ["kind_key,feature,weight"]
    for key, p in sorted(bundle.predictors.items()):
        for name, w in mdi_importance(p).items():
            lines.append(f"{key},{name},{w!r}")
    run.write("importance.csv", "\n".join(lines) + "\n")


def cmd_sweep(args, run: Run) -> None:
    graphs = _load_graphs(run, args.graphs)
    ms = ingest(run.read(args.measurements))
    methods = tuple(args.methods or METHODS)
    res = training_size_sweep(graphs, ms, tuple(args.sizes), args.runs, methods,
                              hp=_hyperparams(run, args), seed=stage_seed(args.seed, "sweep"),
                              n_test=args.n_test)
    run.write("sweep.csv", res.to_csv())


COMMANDS = {
    "sample": cmd_sample, "lower": cmd_lower, "featurize": cmd_featurize, "simulate": cmd_simulate,
    "train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate, "importance": cmd_importance,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=os.environ.get(OUT_ENV, DEFAULT_OUT),
                        help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--seed", type=int, default=0, help="root seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="vitlat", description="ViT latency prediction pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", parents=[common], help="sample architecture configs")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--space", help="search-space JSON")

    p = sub.add_parser("lower", parents=[common], help="lower configs to operation graphs")
    p.add_argument("--archs", required=True, help="directory of config JSON files, or one file")
    p.add_argument("--precision", default="fp32", choices=("fp32", "int8"))

    p = sub.add_parser("featurize", parents=[common], help="per-kind feature tables")
    p.add_argument("--graphs", required=True)

    p = sub.add_parser("simulate", parents=[common], help="synthetic per-op measurements")
    p.add_argument("--graphs", required=True)
    p.add_argument("--device-model", help="device model JSON")
    p.add_argument("--modes", nargs="*", choices=MODES, help="override the device's quirk modes")
    p.add_argument("--noise", type=float, help="override relative noise in percent")
    p.add_argument("--value-scale", type=float, default=1.0)
    p.add_argument("--value-scale-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    p = sub.add_parser("train", parents=[common], help="fit a predictor bundle")
    p.add_argument("--graphs", required=True)
    p.add_argument("--measurements", required=True)
    p.add_argument("--method", choices=METHODS, default="gbdt")
    p.add_argument("--train-size", type=int, help="models used for training; the rest are held out")
    p.add_argument("--hyperparams", help="hyperparameter JSON")
    p.add_argument("--shared-conv", action="store_true", help="one conv predictor for both layouts")

    p = sub.add_parser("predict", parents=[common], help="predict latencies of graphs")
    p.add_argument("--graphs", required=True)
    p.add_argument("--bundle", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="MAPE of a bundle against measurements")
    p.add_argument("--graphs", required=True)
    p.add_argument("--measurements", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", help="split.json from train; evaluates its test models")
    p.add_argument("--allow-context-mismatch", action="store_true")

    p = sub.add_parser("importance", parents=[common], help="MDI feature importance")
    p.add_argument("--bundle", required=True)

    p = sub.add_parser("sweep", parents=[common], help="MAPE versus training-set size")
    p.add_argument("--graphs", required=True)
    p.add_argument("--measurements", required=True)
    p.add_argument("--sizes", type=int, nargs="+", default=[30, 100, 900])
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--method", dest="methods", action="append", choices=METHODS)
    p.add_argument("--hyperparams")

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="write outputs here instead of the recorded directory")
    p.add_argument("--strict", action="store_true", help="fail if an input digest changed")
    return parser


@contextmanager
def _cwd(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def replay(args) -> int:
    path = Path(args.manifest)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not a manifest ({exc.msg})") from None
    for key in ("argv", "cwd", "out", "inputs"):
        if key not in manifest:
            raise SchemaError(f"{path}: manifest lacks {key!r}")
    out = os.path.abspath(args.out) if args.out else manifest["out"]
    with _cwd(manifest["cwd"]):
        for name, digest in manifest["inputs"].items():
            if Path(name).is_file() and sha256_file(name) != digest:
                msg = f"input {name} changed since the recorded run"
                if args.strict:
                    raise DataError(msg)
                log.warning(msg)
        return main(manifest["argv"] + ["--out", out])


def run_command(args, argv) -> None:
    run = Run(args.command, args, argv)
    COMMANDS[args.command](args, run)
    run.finish()


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(getattr(args, "verbose", 0) or 0, 2),
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "replay":
            return replay(args)
        if args.jobs < 1:
            raise ConfigurationError("--jobs must be >= 1")
        # the recorded argv never carries --out, so replay can redirect it
        recorded = _strip_out(argv)
        args.out = os.path.abspath(args.out)
        run_command(args, recorded)
        return EXIT_OK
    except (CoverageError, SchemaError, ContextMismatchError) as exc:
        print(f"vitlat: {exc}", file=sys.stderr)
        return EXIT_COVERAGE
    except (ConfigurationError, DataError, LoweringError, UnsupportedOpError, UnsupportedMethodError,
            ValueError) as exc:
        print(f"vitlat: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"vitlat: {exc}", file=sys.stderr)
        return EXIT_IO


def _strip_out(argv: list) -> list:
    out = []
    skip = False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
