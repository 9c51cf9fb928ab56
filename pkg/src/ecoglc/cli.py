"""``ecoglc`` command line: generation, features, training, experiments and diagnostics.

Every run writes into ``--out`` atomically (a temporary sibling directory
renamed on success) and leaves a ``run_manifest.json`` there. Passing that
manifest back through ``--config`` re-executes the same command with the
same configuration.

Configuration precedence: built-in defaults < ``--config`` file (JSON or
YAML) < ``ECOGLC_*`` environment variables < command-line flags. Nested keys
map to environment names with double underscores, e.g.
``ECOGLC_GENERATOR__N_CHANNELS=16``.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .decoders import DecoderSpec, make_decoder
from .errors import ConfigurationError, DataError, EcoglcError, SchemaError
from .features import (DEFAULT_CYCLES, DEFAULT_FREQUENCIES, FeatureSet, build_wavelet_bank,
                       extract_features, load_feature_cache, repair_artifacts, save_feature_cache)
from .harness import ExperimentPlan, read_result_csv, run_experiment, write_result
from .learning_curve import fit_result_points, write_fit
from .manifold import (ess_local_id, hand_embedding, read_embedding_csv, svm_separability, twonn_id,
                       write_embedding_csv, write_id_report)
from .metrics import mean_cosine_similarity
from .synth import (GeneratorConfig, generate_session, inject_artifacts, read_session,
                    rising_schedule, write_session)

MANIFEST_NAME = "run_manifest.json"
MANIFEST_KIND = "ecoglc.run_manifest"
ENV_PREFIX = "ECOGLC_"


class UsageError(Exception):
    pass


def default_config() -> dict:
    gen = GeneratorConfig().to_dict()
    gen.pop("seed")
    plan = ExperimentPlan("fi").to_dict()
    for k in ("kind", "decoder", "seed"):
        plan.pop(k)
    return {
        "seed": 0,
        "jobs": 1,
        "generator": gen,
        "artifacts": {"rate": 0.0, "duration_range": [0.05, 0.3]},
        "features": {"border": "window", "n_bins": 10, "frequencies": list(DEFAULT_FREQUENCIES),
                     "cycles": DEFAULT_CYCLES, "repair": False, "z_threshold": 8.0},
        "decoder": DecoderSpec().to_dict(),
        "experiment": plan,
        "idim": {"k": 100, "discard_fraction": 0.1, "stride": 10},
        "embed": {"stride": 10, "feature_space": False},
    }


def _merge(base: dict, over: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in out:
            raise ConfigurationError(f"unknown config key {'.'.join(path + (k,))}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k not in ("band_profiles", "net"):
            out[k] = _merge(out[k], v, path + (k,))
        else:
            out[k] = copy.deepcopy(v)
    return out


def _env_overrides(cfg: dict, environ) -> dict:
    over = {}

    def walk(node, path):
        for k, v in node.items():
            p = path + (k,)
            name = ENV_PREFIX + "__".join(p).upper()
            if name in environ:
                target = over
                for q in p[:-1]:
                    target = target.setdefault(q, {})
                target[k] = yaml.safe_load(environ[name])
            elif isinstance(v, dict) and k not in ("band_profiles", "net"):
                walk(v, p)
    walk(cfg, ())
    return over


def _load_config_file(path) -> dict:
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a mapping")
    return data


# ---------------------------------------------------------------------------
# hashing and manifests

def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _tree_hashes(root: Path, skip=()) -> dict:
    return {str(p.relative_to(root)): _sha256_file(p) for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in skip}


def _input_digest(path: Path) -> str:
    if path.is_dir():
        blob = json.dumps(_tree_hashes(path, skip=(MANIFEST_NAME,)), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()
    return _sha256_file(path)


# ---------------------------------------------------------------------------
# shared loaders

def _session_dirs(root: Path):
    base = root / "sessions" if (root / "sessions").is_dir() else root
    dirs = sorted(p for p in base.iterdir() if p.is_dir() and p.name.startswith("session_"))
    if not dirs:
        raise DataError(f"{root}: no session_* directories found")
    return dirs


def _feature_files(root: Path):
    base = root / "features" if (root / "features").is_dir() else root
    files = sorted(base.glob("session_*.bin"))
    if not files:
        raise DataError(f"{root}: no session_*.bin feature caches found")
    return files


def _load_feature_sets(root: Path):
    return [load_feature_cache(f) for f in _feature_files(root)]


def _parse_range(text: str):
    try:
        a, _, b = text.partition("-")
        lo, hi = int(a), int(b or a)
    except ValueError as exc:
        raise UsageError(f"session range must look like 3-7, got {text!r}") from exc
    if not 1 <= lo <= hi:
        raise UsageError(f"invalid session range {text!r}")
    return lo, hi


def _select(sets, rng, hand):
    lo, hi = rng
    if hi > len(sets):
        raise ConfigurationError(f"session range {lo}-{hi} exceeds the {len(sets)} sessions available")
    states = ("left_hand", "right_hand") if hand == "both" else (hand,)
    return FeatureSet.concat([s.for_states(*states) for s in sets[lo - 1:hi]])


# ---------------------------------------------------------------------------
# subcommands; each writes into ``out`` and returns the list of input paths

def cmd_gen(args, cfg, out: Path):
    g = dict(cfg["generator"], seed=cfg["seed"])
    if g["adaptation_schedule"] == "rising":
        g["adaptation_schedule"] = list(rising_schedule(g["n_sessions"]))
    gcfg = GeneratorConfig.from_dict(g)
    rate = float(cfg["artifacts"]["rate"])
    for i in range(gcfg.n_sessions):
        s = generate_session(gcfg, i)
        if rate > 0:
            s = inject_artifacts(s, rate, tuple(cfg["artifacts"]["duration_range"]),
                                 seed=int(np.random.SeedSequence([cfg["seed"], 5, i]).generate_state(1)[0]))
        write_session(s, out / "sessions" / f"session_{i:03d}")
    return []


def cmd_features(args, cfg, out: Path):
    fc = cfg["features"]
    dirs = _session_dirs(Path(args.data))
    bank = None
    (out / "features").mkdir(parents=True)
    for d in dirs:
        s = read_session(d)
        if bank is None:
            bank = build_wavelet_bank(s.sampling_rate, fc["frequencies"], fc["cycles"])
        if fc["repair"]:
            s, _ = repair_artifacts(s, fc["z_threshold"])
        fs = extract_features(s, bank, border=fc["border"], n_bins=fc["n_bins"])
        save_feature_cache(fs, out / "features" / f"{d.name}.bin")
    return [args.data]


def cmd_train(args, cfg, out: Path):
    sets = _load_feature_sets(Path(args.features))
    hand = cfg["experiment"]["hand"]
    train = _select(sets, _parse_range(args.train_sessions), hand)
    spec = DecoderSpec.from_dict(cfg["decoder"])
    dec = make_decoder(spec, train.shape, seed=cfg["seed"])
    dec.fit(train)
    metrics = {"schema_version": 1, "decoder": spec.kind, "train_sessions": args.train_sessions,
               "n_train_epochs": len(train), "parameter_count": dec.parameter_count()}
    if args.test_sessions:
        test = _select(sets, _parse_range(args.test_sessions), hand)
        metrics["test_sessions"] = args.test_sessions
        metrics["test_cs"] = mean_cosine_similarity(dec.predict(test.values), test.targets)
    if spec.kind == "rewnpls":
        dec.model.save(out / "model.npls")
    else:
        from .neural.train import save_checkpoint
        save_checkpoint(dec.result, out / "model", dec.train_config)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return [args.features]


def cmd_experiment(args, cfg, out: Path):
    sets = _load_feature_sets(Path(args.features))
    plan = ExperimentPlan.from_dict(dict(cfg["experiment"], kind=args.kind, seed=cfg["seed"],
                                         decoder=cfg["decoder"]))
    result = run_experiment(sets, plan, jobs=cfg["jobs"])
    write_result(result, out)
    return [args.features]


def cmd_fit_curve(args, cfg, out: Path):
    result = read_result_csv(args.results)
    xs = [p.x_minutes for p in result.points]
    ys = [p.mean_cs for p in result.points]
    fit = fit_result_points(xs, ys, weighted=args.weighted)
    write_fit(fit, out, min(xs), max(xs))
    return [args.results]


def _point_clouds(path: Path, stride: int):
    if path.is_dir():
        for i, fs in enumerate(_load_feature_sets(path), start=1):
            yield i, fs.flat()[::stride]
    elif path.suffix == ".npy":
        yield 0, np.load(path)
    else:
        yield 0, np.loadtxt(path, delimiter=",", comments="#", ndmin=2)


def cmd_idim(args, cfg, out: Path):
    ic = cfg["idim"]
    rows = []
    for sid, X in _point_clouds(Path(args.input), ic["stride"]):
        if args.method == "twonn":
            rows.append((sid, "twonn", 2, twonn_id(X, ic["discard_fraction"])))
        else:
            rows.append((sid, "ess", ic["k"], ess_local_id(X, ic["k"])))
    write_id_report(rows, out / "idim.csv")
    return [args.input]


def cmd_embed(args, cfg, out: Path):
    ec = cfg["embed"]
    lines = ["# schema_version=1", "session,n_points,space,accuracy"]
    inputs = []
    if args.import_embedding:
        idx, coords, labels = read_embedding_csv(args.import_embedding)
        res = svm_separability(coords, labels)
        lines.append(f"0,{len(coords)},imported,{res.accuracy:.17g}")
        inputs.append(args.import_embedding)
    else:
        sets = _load_feature_sets(Path(args.features))
        inputs.append(args.features)
        (out / "embeddings").mkdir(parents=True)
        for sid, fs in enumerate(sets, start=1):
            coords, labels, idx = hand_embedding(fs, ec["stride"])
            write_embedding_csv(coords, labels, idx, out / "embeddings" / f"session_{sid:03d}.csv")
            if ec["feature_space"]:
                hands = fs.for_states("left_hand", "right_hand")
                sub = hands.select(np.arange(0, len(hands), ec["stride"]))
                res = svm_separability(sub.flat(), sub.states)
                space = "features"
            else:
                res = svm_separability(coords, labels)
                space = "embedding"
            lines.append(f"{sid},{len(coords)},{space},{res.accuracy:.17g}")
    (out / "separability.csv").write_text("\n".join(lines) + "\n")
    return inputs


def _schema_of_csv(path: Path) -> int:
    first = path.read_text().splitlines()[:1]
    if not first or not first[0].startswith("# schema_version="):
        raise SchemaError(f"{path}: missing schema version header")
    return int(first[0].split("=", 1)[1])


def cmd_report(args, cfg, out: Path):
    rows = ["# schema_version=1", "source,kind,key,value"]
    for raw in args.inputs:
        p = Path(raw)
        if p.suffix == ".json":
            data = json.loads(p.read_text())
            if data.get("schema_version") != 1:
                raise SchemaError(f"{p}: schema version {data.get('schema_version')}, expected 1")
            if "kind" in data and "plan" in data:
                rows.append(f"{p.name},{data['kind']},n_points,{data['n_points']}")
                for k, v in sorted((data.get("trend") or {}).items()):
                    rows.append(f"{p.name},{data['kind']},trend_{k},{v}")
            else:
                for k in ("a", "b", "c", "residual_sse", "converged"):
                    if k in data:
                        rows.append(f"{p.name},power_law,{k},{data[k]}")
            continue
        version = _schema_of_csv(p)
        if version != 1:
            raise SchemaError(f"{p}: schema version {version}, expected 1")
        header = p.read_text().splitlines()[1]
        if header.startswith("kind,x_minutes"):
            res = read_result_csv(p)
            for x, vals in res.by_x().items():
                rows.append(f"{p.name},{res.kind},mean_cs@{x:.6f},{float(np.mean(vals)):.6f}")
            if res.trend:
                rows.append(f"{p.name},{res.kind},trend_slope,{res.trend['slope']:.6g}")
                rows.append(f"{p.name},{res.kind},trend_p_value,{res.trend['p_value']:.6g}")
        else:
            for line in p.read_text().splitlines()[2:]:
                if line:
                    parts = line.split(",")
                    rows.append(f"{p.name},{header.split(',')[0]},{parts[0]},{parts[-1]}")
    (out / "report.csv").write_text("\n".join(rows) + "\n")
    for r in rows[1:]:
        print("  ".join(f"{c:<22}" for c in r.split(",")))
    return list(args.inputs)


COMMANDS = {"gen": cmd_gen, "features": cmd_features, "train": cmd_train, "experiment": cmd_experiment,
            "fit-curve": cmd_fit_curve, "idim": cmd_idim, "embed": cmd_embed, "report": cmd_report}


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    def globals_(default):
        g = _Parser(add_help=False)
        g.add_argument("--config", default=default, help="JSON/YAML config file, or a run_manifest.json to re-execute")
        g.add_argument("--seed", type=int, default=default)
        g.add_argument("--jobs", type=int, default=default)
        g.add_argument("--out", default=default, help="output directory")
        return g
    # subcommands accept the global flags too, without resetting ones given earlier
    common = globals_(argparse.SUPPRESS)
    parser = _Parser(prog="ecoglc", description=__doc__.splitlines()[0], parents=[globals_(None)])
    parser.add_argument("--version", action="version", version=f"ecoglc {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="synthesize sessions")
    p.add_argument("--sessions", type=int)
    p.add_argument("--length", type=float, help="session length in seconds")
    p.add_argument("--channels", type=int)
    p.add_argument("--schedule", choices=("flat", "rising"))
    p.add_argument("--artifact-rate", type=float)

    p = sub.add_parser("features", parents=[common], help="extract and cache feature tensors")
    p.add_argument("--data", required=True, help="directory written by gen")
    p.add_argument("--border", choices=("window", "continuous"))
    p.add_argument("--repair", action="store_true", default=None)

    p = sub.add_parser("train", parents=[common], help="train one decoder on a session range")
    p.add_argument("--features", required=True)
    p.add_argument("--decoder", choices=("rewnpls", "mlp", "cnn_lstm"))
    p.add_argument("--train-sessions", required=True, help="1-based inclusive range, e.g. 1-6")
    p.add_argument("--test-sessions")
    p.add_argument("--hand", choices=("left_hand", "right_hand", "both"))

    p = sub.add_parser("experiment", parents=[common], help="run an FI/BI/RI/translation experiment")
    p.add_argument("--features", required=True)
    p.add_argument("--kind", required=True, choices=("fi", "bi", "ri", "translation"))
    p.add_argument("--decoder", choices=("rewnpls", "mlp", "cnn_lstm"))
    p.add_argument("--hand", choices=("left_hand", "right_hand", "both"))
    p.add_argument("--test-sessions", type=int, help="number of test sessions (FI/BI/RI)")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--min-size", type=float, help="smallest RI size in minutes")

    p = sub.add_parser("fit-curve", parents=[common], help="fit a power law to an experiment CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--weighted", action="store_true")

    p = sub.add_parser("idim", parents=[common], help="intrinsic dimension of features or a point file")
    p.add_argument("--input", required=True, help="feature directory, .npy or .csv point cloud")
    p.add_argument("--method", required=True, choices=("twonn", "ess"))
    p.add_argument("--k", type=int)

    p = sub.add_parser("embed", parents=[common], help="2-D embeddings and SVM separability")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--features")
    g.add_argument("--import-embedding", help="externally computed embedding CSV")
    p.add_argument("--feature-space", action="store_true", default=None)

    p = sub.add_parser("report", parents=[common], help="collate result files into one table")
    p.add_argument("inputs", nargs="+")
    return parser


def _flag_overrides(args) -> dict:
    o = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value
    if args.seed is not None:
        o["seed"] = args.seed
    if args.jobs is not None:
        o["jobs"] = args.jobs
    c = args.command
    if c == "gen":
        put("generator", "n_sessions", args.sessions)
        put("generator", "session_length", args.length)
        put("generator", "n_channels", args.channels)
        if args.schedule is not None:
            o.setdefault("generator", {})["adaptation_schedule"] = "rising" if args.schedule == "rising" else None
        put("artifacts", "rate", args.artifact_rate)
    elif c == "features":
        put("features", "border", args.border)
        put("features", "repair", args.repair)
    elif c in ("train", "experiment"):
        put("experiment", "hand", args.hand)
        if args.decoder is not None:
            o["decoder"] = {"kind": args.decoder}
        if c == "experiment":
            put("experiment", "test_session_count", args.test_sessions)
            put("experiment", "repetitions", args.repetitions)
            put("experiment", "min_size_minutes", args.min_size)
    elif c == "idim":
        put("idim", "k", args.k)
    elif c == "embed":
        put("embed", "feature_space", args.feature_space)
    return o


def _strip_globals(argv):
    """Command argv without --config/--out/--jobs, as recorded in the manifest."""
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        name = tok.split("=", 1)[0]
        if name in ("--config", "--out", "--jobs"):
            skip = "=" not in tok
            continue
        out.append(tok)
    return out


def _prepare(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    manifest_argv = None
    file_cfg = {}
    if args.config:
        file_cfg = _load_config_file(args.config)
        if file_cfg.get("kind") == MANIFEST_KIND:
            if args.command is not None:
                raise UsageError("a run manifest already names its command; pass only --config/--out/--jobs")
            manifest_argv = list(file_cfg["argv"])
            rerun = parser.parse_args(manifest_argv)
            rerun.out, rerun.jobs = args.out, args.jobs
            return rerun, file_cfg["config"], manifest_argv
    if args.command is None:
        raise UsageError("missing subcommand (one of " + ", ".join(COMMANDS) + ")")
    cfg = _merge(default_config(), file_cfg)
    cfg = _merge(cfg, _env_overrides(cfg, os.environ))
    cfg = _merge(cfg, _flag_overrides(args))
    return args, cfg, _strip_globals(argv)


def run_command(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, cfg, recorded = _prepare(argv)
        if args.jobs is not None:
            cfg = dict(cfg, jobs=args.jobs)
        if not args.out:
            raise UsageError("--out is required")
        out = Path(args.out)
        if out.exists() and any(out.iterdir()) and not (out / MANIFEST_NAME).exists():
            raise UsageError(f"{out} exists and is not an ecoglc output directory")
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
        try:
            inputs = COMMANDS[args.command](args, cfg, tmp)
            manifest = {
                "kind": MANIFEST_KIND, "schema_version": 1, "tool_version": __version__,
                "command": args.command, "argv": recorded, "config": cfg, "seed": cfg["seed"],
                "inputs": {str(p): _input_digest(Path(p)) for p in inputs},
                "outputs": _tree_hashes(tmp),
            }
            (tmp / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
            if out.exists():
                shutil.rmtree(out)
            os.replace(tmp, out)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (EcoglcError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
