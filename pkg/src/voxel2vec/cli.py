"""Command-line entry point: ``voxel2vec gen|train|simmap|classify|associate|replay``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .model import load_embedding, save_embedding, export_embedding_csv, train
from .multivar import (METRICS, classify_features, export_label_volume, project_features,
                       render_features)
from .sampler import ConfigError, TrainConfig
from .similarity import export_csv, render_heatmap, similarity_map
from .transfer import (VolumeCollection, association_matrix, ensemble_projection,
                       export_association_csv, render_association, render_projection)
from .volume import (DescriptorError, VolumeDescriptor, VolumeError, gen_abc_flow,
                     load_raw_volume, quantize, symbolize_collection, write_raw_volume)

log = logging.getLogger("voxel2vec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
MANIFEST = "manifest.json"
ABC_VARS = ("vx", "vy", "vz", "s1")


class UsageError(Exception):
    pass


# Defaults per command.  Keys match argparse dests.
TRAIN_DEFAULTS = {
    "R": 256, "n": 1, "k": 3, "d": 30, "alpha": 0.05, "lambda_": 0.005, "epochs": 1,
    "seed": 0, "threads": None, "batch": 1000, "subsample": 1e-3, "min_samples": 8,
    "strategies": "both", "deterministic": False,
}
DEFAULTS = {
    "gen": {"abc": False, "A": math.sqrt(3.0), "B": math.sqrt(2.0), "C": 1.0, "t": 0.0,
            "t_range": None, "sweep": None, "dims": "64", "abc_variant": "faithful",
            "dtype": "float32", "seed": 0},
    "train": {**TRAIN_DEFAULTS, "input": None, "vars": None, "member": None},
    "simmap": {"embedding": None, "value_range": "0,1", "scale": 1},
    "classify": {"embedding": None, "input": None, "eps": 0.85, "minpts": 4,
                 "metric": "cosine", "space": "embedding", "min_voxels": None,
                 "seed": 0, "perplexity": 5.0, "iterations": 1000},
    "associate": {**TRAIN_DEFAULTS, "input": None, "vars": None, "value_range": "0.7,1",
                  "scoring": "printed", "project": None, "perplexity": 5.0,
                  "iterations": 1000},
}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_floats(text: str, n: int, name: str) -> list[float]:
    try:
        vals = [float(x) for x in str(text).split(",")]
    except ValueError:
        raise UsageError(f"--{name}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise UsageError(f"--{name}: expected {n} comma-separated numbers, got {text!r}")
    return vals


def _parse_dims(text) -> tuple[int, int, int]:
    parts = [p for p in str(text).replace("x", ",").split(",") if p]
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"--dims: cannot parse {text!r}") from None
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3 or min(vals) <= 0:
        raise UsageError(f"--dims: need one or three positive integers, got {text!r}")
    return tuple(vals)


def _parse_range(text: str, name: str) -> np.ndarray:
    """``start:stop:step`` with an inclusive stop."""
    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"{name}: expected start:stop:step, got {text!r}") from None
    if step <= 0 or stop < start:
        raise UsageError(f"{name}: need step > 0 and stop >= start, got {text!r}")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(count)


def _parse_sweep(text: str) -> dict[str, np.ndarray]:
    axes = {}
    for part in text.split(","):
        key, _, rng = part.partition("=")
        key = key.strip()
        if key not in ("A", "B", "C"):
            raise UsageError(f"--sweep: unknown parameter {key!r}; use A, B or C")
        axes[key] = _parse_range(rng, f"--sweep {key}")
    if not axes:
        raise UsageError("--sweep: empty")
    return axes


def _fmt(x: float) -> str:
    return f"{x:g}"


def _train_config(a: dict) -> TrainConfig:
    strategies = a["strategies"]
    if strategies not in ("both", "adaptive", "self-paced", "none"):
        raise UsageError(f"--strategies: unknown value {strategies!r}")
    threads = 1 if a["deterministic"] else _threads(a["threads"])
    try:
        return TrainConfig(
            window=int(a["n"]), negatives=int(a["k"]), dim=int(a["d"]),
            learning_rate=float(a["alpha"]), penalty=float(a["lambda_"]), R=int(a["R"]),
            batch_size=int(a["batch"]), epochs=int(a["epochs"]), seed=int(a["seed"]),
            subsample=float(a["subsample"]), min_samples_per_symbol=int(a["min_samples"]),
            adaptive=strategies in ("both", "adaptive"),
            self_paced=strategies in ("both", "self-paced"), threads=threads)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _threads(value) -> int:
    if value is None:
        value = os.environ.get("V2V_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"thread count must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    if n > 1:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


def _load_descriptor(path) -> VolumeDescriptor:
    if path is None:
        raise UsageError("--input is required")
    return VolumeDescriptor.load(path)


def _variables(desc: VolumeDescriptor, spec) -> list[str]:
    if not spec:
        raise UsageError("--vars is required")
    names = [v.strip() for v in (spec if isinstance(spec, list) else str(spec).split(",")) if v.strip()]
    if not names:
        raise UsageError("--vars is empty")
    for _, member in desc.members():
        missing = [v for v in names if v not in member.variables]
        if missing:
            raise UsageError(f"unknown variable(s) {missing}; available: {sorted(member.variables)}")
    return names


def _load_collection(desc: VolumeDescriptor, names: list[str], R: int):
    members = desc.members()
    vols = [[load_raw_volume(d, v) for v in names] for _, d in members]
    table, svs = symbolize_collection(vols, R)
    bounds = [[min(m[i].min for m in vols), max(m[i].max for m in vols)] for i in range(len(names))]
    return [label for label, _ in members], table, svs, bounds


# ---------------------------------------------------------------- commands

def cmd_gen(a: dict, out: Path) -> list[Path]:
    if not a["abc"]:
        raise UsageError("gen needs --abc (the only generator)")
    if a["sweep"] and a["t_range"]:
        raise UsageError("--sweep and --t-range are mutually exclusive")
    dims = _parse_dims(a["dims"])
    variant = a["abc_variant"]
    dtype = a["dtype"]
    written: list[Path] = []

    def write_member(sub: str, **params) -> dict:
        vols = gen_abc_flow(dims=dims, variant=variant, **params)
        d = out / sub if sub else out
        d.mkdir(parents=True, exist_ok=True)
        variables = {}
        for name, vol in zip(ABC_VARS, vols):
            p = d / f"{name}.raw"
            write_raw_volume(vol.data, p, dtype)
            written.append(p)
            variables[name] = str(p.relative_to(out))
        return {"variables": variables}

    base = {"dims": list(dims), "dtype": dtype, "byte_order": "little"}
    abc = {k: float(a[k]) for k in ("A", "B", "C")}
    if a["t_range"]:
        steps = []
        for t in _parse_range(a["t_range"], "--t-range"):
            steps.append({**write_member(f"t_{_fmt(t)}", t=float(t), **abc), "time_step": float(t)})
        doc = {**base, "time_steps": steps}
    elif a["sweep"]:
        axes = _parse_sweep(a["sweep"])
        keys = list(axes)
        grids = np.meshgrid(*[axes[k] for k in keys], indexing="ij")
        ensemble = {}
        for combo in zip(*[g.ravel() for g in grids]):
            params = {**abc, **{k: float(v) for k, v in zip(keys, combo)}}
            label = "_".join(f"{k}={_fmt(params[k])}" for k in keys)
            ensemble[label] = {**write_member(label, t=float(a["t"]), **params),
                               "ensemble_params": {k: params[k] for k in keys}}
        doc = {**base, "ensemble": ensemble}
    else:
        doc = {**base, **write_member("", t=float(a["t"]), **abc), "time_step": float(a["t"])}
    desc_path = out / "dataset.json"
    desc_path.write_text(json.dumps(doc, indent=2) + "\n")
    return written + [desc_path]


def cmd_train(a: dict, out: Path) -> list[Path]:
    cfg = _train_config(a)
    desc = _load_descriptor(a["input"])
    names = _variables(desc, a["vars"])
    labels, table, svs, bounds = _load_collection(desc, names, cfg.R)
    member = a["member"]
    if member is None:
        idx = 0
    elif member in labels:
        idx = labels.index(member)
    else:
        raise UsageError(f"--member {member!r} not in {labels}")
    model = train(svs[idx], cfg)
    emb = out / "embedding.v2v"
    save_embedding(model, emb)
    csv = out / "embedding.csv"
    export_embedding_csv(model, csv)
    sidecar = out / "embedding.json"
    sidecar.write_text(json.dumps({
        "R": cfg.R, "variables": names, "bounds": bounds, "member": labels[idx],
        "symbols": table.size, "degenerate": model.degenerate,
        "pairs_seen": model.log.pairs_seen, "objective": model.log.objective,
        "config": cfg.to_dict(),
    }, indent=2) + "\n")
    return [emb, csv, sidecar]


def _load_model(path):
    if path is None:
        raise UsageError("--embedding is required")
    path = Path(path)
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return load_embedding(path, meta.get("R", 0)), meta


def cmd_simmap(a: dict, out: Path) -> list[Path]:
    model, _ = _load_model(a["embedding"])
    smap = similarity_map(model)
    csv = export_csv(smap, out / "simmap.csv")
    png = render_heatmap(smap.values, out / "simmap.png",
                         tuple(_parse_floats(a["value_range"], 2, "value-range")), int(a["scale"]))
    paths = [csv, png]
    if smap.flagged:
        flagged = out / "simmap_flagged.json"
        flagged.write_text(json.dumps([model.table.label(i) for i in smap.flagged]) + "\n")
        paths.append(flagged)
    return paths


def cmd_classify(a: dict, out: Path) -> list[Path]:
    model, meta = _load_model(a["embedding"])
    if not meta:
        raise UsageError("classify needs the embedding's .json sidecar written by train")
    desc = _load_descriptor(a["input"])
    names = meta["variables"]
    _variables(desc, names)
    members = dict(desc.members())
    member = members.get(meta.get("member"), next(iter(members.values())))
    R = int(meta["R"])
    qs = [quantize(load_raw_volume(member, v), R, tuple(b)) for v, b in zip(names, meta["bounds"])]
    sv = model.table.encode(qs)
    if a["metric"] not in METRICS:
        raise UsageError(f"--metric must be one of {METRICS}")
    feats = classify_features(model, sv, float(a["eps"]), int(a["minpts"]),
                              None if a["min_voxels"] is None else int(a["min_voxels"]),
                              a["metric"], a["space"])
    paths: list[Path] = []
    if feats.features:
        project_features(feats, int(a["seed"]), int(a["iterations"]), float(a["perplexity"]))
        paths.append(render_features(feats, out / "features.png"))
    raw, legend = export_label_volume(feats, sv, out)
    return [raw, legend] + paths


def cmd_associate(a: dict, out: Path) -> list[Path]:
    cfg = _train_config(a)
    desc = _load_descriptor(a["input"])
    names = _variables(desc, a["vars"])
    labels, _, svs, _ = _load_collection(desc, names, cfg.R)
    coll = VolumeCollection(svs, labels).train_all(cfg)
    assoc = association_matrix(coll, cfg.window, a["scoring"])
    if not (np.array_equal(assoc.values, assoc.values.T)
            and np.all((assoc.values >= 0) & (assoc.values <= 1))):
        raise AssertionError("association matrix is not a symmetric [0, 1] matrix")
    paths = [export_association_csv(assoc, out / "association.csv"),
             render_association(assoc, out / "association.png",
                                tuple(_parse_floats(a["value_range"], 2, "value-range")))]
    project = a["project"] if a["project"] is not None else bool(desc.ensemble)
    if project and len(coll) >= 2:
        res = ensemble_projection(assoc, cfg.seed, int(a["iterations"]), float(a["perplexity"]))
        lay = out / "projection.csv"
        with open(lay, "w") as fh:
            fh.write("member,x,y\n")
            for lab, (x, y) in zip(labels, res.embedding):
                fh.write(f"{lab},{x:.9g},{y:.9g}\n")
        paths += [lay, render_projection(res.embedding, labels, out / "projection.png")]
    return paths


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "simmap": cmd_simmap,
            "classify": cmd_classify, "associate": cmd_associate}


# ---------------------------------------------------------------- parsing

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--input", default=S, help="dataset descriptor JSON")
    p.add_argument("--vars", default=S, help="comma-separated variable names")
    p.add_argument("--R", type=int, default=S, help="quantization levels (256)")
    p.add_argument("--n", type=int, default=S, help="context window radius (1)")
    p.add_argument("--k", type=int, default=S, help="negatives per positive (3)")
    p.add_argument("--d", type=int, default=S, help="embedding dimension (30)")
    p.add_argument("--alpha", type=float, default=S, help="learning rate (0.05)")
    p.add_argument("--lambda", dest="lambda_", type=float, default=S, help="norm penalty (0.005)")
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--threads", type=int, default=S, help="worker threads (env V2V_THREADS, default 1)")
    p.add_argument("--deterministic", action="store_true", default=S,
                   help="force one thread for bit-reproducible output")
    p.add_argument("--batch", type=int, default=S, help="pairs per curriculum step (1000)")
    p.add_argument("--subsample", type=float, default=S, help="frequent-symbol subsampling constant")
    p.add_argument("--min-samples", dest="min_samples", type=int, default=S)
    p.add_argument("--strategies", choices=["both", "adaptive", "self-paced", "none"], default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="voxel2vec", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out-dir", default=S, help="output directory (created if missing)")
        p.add_argument("--config", default=S, help="JSON config or a previous manifest")

    g = sub.add_parser("gen", help="synthesize ABC-flow volumes")
    common(g)
    g.add_argument("--abc", action="store_true", default=S)
    for name in ("A", "B", "C", "t"):
        g.add_argument(f"--{name}", type=float, default=S)
    g.add_argument("--t-range", dest="t_range", default=S, help="start:stop:step, inclusive")
    g.add_argument("--sweep", default=S, help="e.g. A=-2:2:0.5,B=-2:2:0.5")
    g.add_argument("--dims", default=S, help="N or nx,ny,nz")
    g.add_argument("--abc-faithful", dest="abc_variant", action="store_const", const="faithful", default=S)
    g.add_argument("--abc-symmetric", dest="abc_variant", action="store_const", const="symmetric", default=S)
    g.add_argument("--dtype", choices=["float32", "float64"], default=S)
    g.add_argument("--seed", type=int, default=S, help="recorded only; generation is analytic")

    t = sub.add_parser("train", help="train an embedding on one volume")
    common(t)
    _add_train_flags(t)
    t.add_argument("--member", default=S, help="collection member label to train on")

    s = sub.add_parser("simmap", help="similarity map CSV and heatmap")
    common(s)
    s.add_argument("--embedding", "--input", dest="embedding", default=S)
    s.add_argument("--value-range", dest="value_range", default=S)
    s.add_argument("--scale", type=int, default=S)

    c = sub.add_parser("classify", help="cluster embeddings into voxel features")
    common(c)
    c.add_argument("--embedding", default=S)
    c.add_argument("--input", default=S, help="dataset descriptor JSON")
    c.add_argument("--eps", type=float, default=S)
    c.add_argument("--minpts", type=int, default=S)
    c.add_argument("--metric", choices=list(METRICS), default=S)
    c.add_argument("--space", choices=["embedding", "raw"], default=S)
    c.add_argument("--min-voxels", dest="min_voxels", type=int, default=S)
    c.add_argument("--seed", type=int, default=S)
    c.add_argument("--perplexity", type=float, default=S)
    c.add_argument("--iterations", type=int, default=S)

    a = sub.add_parser("associate", help="association matrix over a collection")
    common(a)
    _add_train_flags(a)
    a.add_argument("--value-range", dest="value_range", default=S)
    a.add_argument("--scoring", choices=["printed", "swapped"], default=S)
    a.add_argument("--project", dest="project", action="store_true", default=S)
    a.add_argument("--no-project", dest="project", action="store_false", default=S)
    a.add_argument("--perplexity", type=float, default=S)
    a.add_argument("--iterations", type=int, default=S)

    r = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    r.add_argument("manifest")
    r.add_argument("--out-dir", default=S)
    return parser


def _config_values(path: str, command: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if "args" in doc and "command" in doc:  # a manifest
        if doc["command"] != command:
            raise UsageError(f"manifest is for {doc['command']!r}, not {command!r}")
        doc = doc["args"]
    doc = {k.replace("-", "_"): v for k, v in doc.items()}
    if "lambda" in doc:
        doc["lambda_"] = doc.pop("lambda")
    unknown = set(doc) - set(DEFAULTS[command]) - {"out_dir"}
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
    return doc


def resolve(command: str, flags: dict) -> dict:
    """Defaults, then config file, then explicit flags."""
    cfg = _config_values(flags["config"], command) if "config" in flags else {}
    resolved = {**DEFAULTS[command], "out_dir": "."}
    resolved.update(cfg)
    resolved.update({k: v for k, v in flags.items() if k != "config"})
    for key in ("input", "embedding"):
        if resolved.get(key):
            resolved[key] = str(Path(resolved[key]).resolve())
    return resolved


def run(command: str, resolved: dict, argv: list[str]) -> dict:
    out = Path(resolved["out_dir"]).resolve()
    out.mkdir(parents=True, exist_ok=True)
    inputs = {}
    for key in ("input", "embedding"):
        p = resolved.get(key)
        if p and Path(p).is_file():
            inputs[p] = _sha256(Path(p))
    t0 = time.perf_counter()
    paths = COMMANDS[command](resolved, out)
    elapsed = time.perf_counter() - t0
    args = {k: v for k, v in resolved.items() if k != "out_dir"}
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "args": args,
        "seed": resolved.get("seed"),
        "inputs": inputs,
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in sorted(set(paths))},
        "timings": {"total_seconds": elapsed},
    }
    if command in ("train", "associate"):
        manifest["config"] = _train_config(resolved).to_dict()
    _atomic_write(out / MANIFEST, json.dumps(manifest, indent=2) + "\n")
    return manifest


def replay(manifest_path: str, out_dir: str | None) -> int:
    doc = json.loads(Path(manifest_path).read_text())
    resolved = {**DEFAULTS[doc["command"]], **doc["args"]}
    resolved["out_dir"] = out_dir or str(Path(manifest_path).parent)
    new = run(doc["command"], resolved, ["replay", manifest_path])
    diff = sorted(k for k in set(doc["outputs"]) | set(new["outputs"])
                  if doc["outputs"].get(k) != new["outputs"].get(k))
    if diff:
        print(f"outputs differ from the manifest: {diff}", file=sys.stderr)
        return EXIT_INTERNAL
    print(f"replay matches {len(doc['outputs'])} outputs")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose")}
    try:
        if ns.command == "replay":
            return replay(flags["manifest"], flags.get("out_dir"))
        resolved = resolve(ns.command, flags)
        manifest = run(ns.command, resolved, argv)
        for name in manifest["outputs"]:
            print(Path(resolved["out_dir"]) / name)
        return EXIT_OK
    except (UsageError, ConfigError) as exc:
        print(f"voxel2vec: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeError, DescriptorError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"voxel2vec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AssertionError, FloatingPointError) as exc:
        print(f"voxel2vec: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
