"""Command-line entry point: ``hirtaxa <command> ...``.

Commands: gen, corrupt, train, eval, compare, inspect.  Logs go to
stderr; artifacts go to files.  Every command that writes artifacts also
writes ``manifest.json`` (tool version, resolved config, SHA-256 of the
inputs, outputs, timings).

Exit codes: 0 ok, 1 other tool error, 2 configuration, 3 numerical
abort, 4 file I/O, 5 report grids do not match (compare).
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

log = logging.getLogger("hirtaxa")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO, EXIT_GRID = 0, 1, 2, 3, 4, 5
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


# manifest -------------------------------------------------------------------
def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, command, argv):
        from . import __version__
        self.doc = {"tool": "hirtaxa", "version": __version__, "command": command,
                    "argv": list(argv), "config": None, "inputs": {}, "outputs": [],
                    "timings": {}}
        self._t0 = time.perf_counter()

    def input(self, path):
        if path and os.path.isfile(path):
            self.doc["inputs"][os.path.abspath(path)] = sha256(path)

    def output(self, path):
        self.doc["outputs"].append(os.path.abspath(str(path)))

    def write(self, out_dir):
        self.doc["timings"]["wall_seconds"] = round(time.perf_counter() - self._t0, 3)
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.doc, fh, indent=1)
            fh.write("\n")
        return path


def _mkdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        from .errors import DataIOError
        raise DataIOError(f"cannot create {path}: {exc}") from exc


def _write_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _dataset_files(path):
    from .synthdata import _paths
    return _paths(path)


# commands -------------------------------------------------------------------
def cmd_gen(args, man):
    from . import config as cfgmod
    from .synthdata import generate, save_dataset
    from .taxonomy import make_closed_split

    resolved = cfgmod.load(args.config, args.set)
    man.doc["config"] = resolved
    man.input(args.config)
    objs = cfgmod.objects(resolved)
    _mkdir(args.out)
    tree, records, forest = generate(objs["generator"])
    log.info("generated %d records, %s taxa per level", len(records),
             [tree.n_labels(l) for l in range(1, tree.n_levels + 1)])
    header, data = save_dataset(records, tree, os.path.join(args.out, "dataset"),
                                config=objs["generator"], forest=forest)
    tree_path = os.path.join(args.out, "tree.json")
    with open(tree_path, "w", encoding="utf-8") as fh:
        json.dump(tree.to_json(), fh, indent=1)
        fh.write("\n")
    split = make_closed_split([r.label for r in records], objs["split"]["test_fraction"],
                              objs["split"]["seed"])
    split_path = os.path.join(args.out, "split.json")
    split.save(split_path)
    log.info("split: %d train / %d test", len(split.train), len(split.test))
    for p in (header, data, tree_path, split_path):
        man.output(p)
    man.write(args.out)
    return EXIT_OK


def cmd_corrupt(args, man):
    from . import config as cfgmod
    from .evalharness import degrade
    from .synthdata import SpecimenRecord, _quantize, load_full, save_dataset
    from .errors import ConfigInvalid

    resolved = cfgmod.load(args.config, args.set)
    man.doc["config"] = resolved
    objs = cfgmod.objects(resolved)
    src_header, src_data = _dataset_files(args.data)
    out_header, out_data = _dataset_files(args.out)
    if os.path.abspath(out_data) in (os.path.abspath(src_data), os.path.abspath(src_header)):
        raise ConfigInvalid("corrupt refuses to overwrite its input dataset")
    for p in (args.config, src_header, src_data):
        man.input(p)
    ds = load_full(args.data)
    idx = list(range(len(ds.records)))
    images, seqs = degrade(ds.records, idx, args.condition, objs["eval"]) if idx else ([], [])
    out = [SpecimenRecord(r.id, _quantize(img), dna, r.label, r.prompt)
           for r, img, dna in zip(ds.records, images, seqs)]
    provenance = {"source": os.path.abspath(src_data), "source_sha256": sha256(src_data),
                  "condition": args.condition, "seed": objs["eval"].seed,
                  "dna_noise": objs["eval"].dna_noise.to_json(),
                  "image_noise": objs["eval"].image_noise.to_json(),
                  "stream": "per record i: (seed, CORRUPT, i >> 16, i & 0xFFFF)"}
    _mkdir(os.path.dirname(os.path.abspath(out_data)))
    h, d = save_dataset(out, ds.tree, args.out, config=ds.config, forest=ds.forest or None,
                        extra={"provenance": provenance})
    changed = sum(a.dna != b.dna for a, b in zip(ds.records, out))
    log.info("corrupted %d records (%s); %d DNA strings changed", len(out), args.condition, changed)
    man.output(h)
    man.output(d)
    man.write(os.path.dirname(os.path.abspath(out_data)))
    return EXIT_OK


def _load_split(path, records, split_cfg):
    from .taxonomy import SplitSpec, make_closed_split
    if path:
        return SplitSpec.load(path)
    log.info("no split file given; drawing a closed split (fraction %s, seed %s)",
             split_cfg["test_fraction"], split_cfg["seed"])
    return make_closed_split([r.label for r in records], split_cfg["test_fraction"],
                             split_cfg["seed"])


def cmd_train(args, man):
    from . import config as cfgmod
    from . import plotting
    from .embedcore import Model
    from .errors import ConfigInvalid
    from .synthdata import load_dataset
    from .trainer import train

    overrides = list(args.set)
    if args.data:
        overrides.append(f"paths.dataset={json.dumps(os.path.abspath(args.data))}")
    if args.split:
        overrides.append(f"paths.split={json.dumps(os.path.abspath(args.split))}")
    if args.out:
        overrides.append(f"paths.run_dir={json.dumps(os.path.abspath(args.out))}")
    resolved = cfgmod.load(args.config, overrides)
    man.doc["config"] = resolved
    objs = cfgmod.objects(resolved)
    paths = objs["paths"]
    if not paths["dataset"]:
        raise ConfigInvalid("paths.dataset: required for train")
    if not paths["run_dir"]:
        raise ConfigInvalid("paths.run_dir: required for train (or pass --out)")
    header, data = _dataset_files(paths["dataset"])
    for p in (args.config, header, data, paths["split"], args.resume):
        man.input(p)
    records, tree = load_dataset(paths["dataset"])
    split = _load_split(paths["split"], records, objs["split"])
    _mkdir(paths["run_dir"])
    model = Model.for_tree(objs["model"], tree)
    t0 = time.perf_counter()
    model, runlog = train(records, tree, split, model, objs["train"], run_dir=paths["run_dir"],
                          resume_from=args.resume)
    man.doc["timings"]["train_seconds"] = round(time.perf_counter() - t0, 3)
    for name in sorted(os.listdir(paths["run_dir"])):
        if name.endswith(".ckpt.json") or name == "runlog.jsonl":
            man.output(os.path.join(paths["run_dir"], name))
    if runlog.steps:
        man.output(plotting.loss_curves(runlog, os.path.join(paths["run_dir"], "loss.png")))
    man.write(paths["run_dir"])
    log.info("run directory: %s", paths["run_dir"])
    return EXIT_OK


def cmd_eval(args, man):
    from . import config as cfgmod
    from . import plotting
    from .embedcore import load_checkpoint
    from .errors import ConfigInvalid, HirTaxaError
    from .evalharness import evaluate
    from .synthdata import load_dataset
    from .taxonomy import SplitSpec

    overrides = list(args.set)
    if args.data:
        overrides.append(f"paths.dataset={json.dumps(os.path.abspath(args.data))}")
    if args.split:
        overrides.append(f"paths.split={json.dumps(os.path.abspath(args.split))}")
    resolved = cfgmod.load(args.config, overrides)
    man.doc["config"] = resolved
    objs = cfgmod.objects(resolved)
    dataset = objs["paths"]["dataset"]
    if not dataset:
        raise ConfigInvalid("paths.dataset: required for eval (or pass --data)")
    header, data = _dataset_files(dataset)
    split_path = objs["paths"]["split"]
    for p in (args.config, args.checkpoint, header, data, split_path):
        man.input(p)
    model, _ = load_checkpoint(args.checkpoint)
    records, tree = load_dataset(dataset)
    if split_path:
        indices = SplitSpec.load(split_path).test
    else:
        log.warning("no split given; evaluating every record")
        indices = list(range(len(records)))
    meta = {"checkpoint": os.path.abspath(args.checkpoint),
            "checkpoint_sha256": sha256(args.checkpoint),
            "dataset": os.path.abspath(data)}
    report = evaluate(model, records, tree, indices, objs["eval"], metadata=meta)
    _mkdir(args.out)
    paths = {"json": os.path.join(args.out, "report.json"),
             "txt": os.path.join(args.out, "report.txt"),
             "csv": os.path.join(args.out, "report.csv")}
    report.save(paths["json"])
    with open(paths["txt"], "w", encoding="utf-8") as fh:
        fh.write(report.render())
    _write_csv(paths["csv"], report.to_rows())
    for p in paths.values():
        man.output(p)
    for k in report.ks:
        man.output(plotting.global_bars(report, os.path.join(args.out, f"global_top{k}.png"), k))
        man.output(plotting.level_lines(report, os.path.join(args.out, f"levels_top{k}.png"), k))
    man.write(args.out)
    log.info("report written to %s", args.out)
    if args.check:
        try:
            report.check()
        except ValueError as exc:
            raise HirTaxaError(f"report check failed: {exc}") from exc
        log.info("report check passed (ranges, Top-k ordering)")
    return EXIT_OK


def cmd_compare(args, man):
    from . import plotting
    from .errors import DataIOError
    from .evalharness import EvalReport, compare_reports

    reports = []
    for p in (args.a, args.b):
        man.input(p)
        try:
            reports.append(EvalReport.load(p))
        except OSError as exc:
            raise DataIOError(f"cannot read report {p}: {exc}") from exc
    delta = compare_reports(*reports)
    _mkdir(args.out)
    out_json = os.path.join(args.out, "delta.json")
    with open(out_json, "w", encoding="utf-8") as fh:
        json.dump({"a": os.path.abspath(args.a), "b": os.path.abspath(args.b),
                   "definition": "b - a, accuracy points", **delta.to_json()}, fh, indent=1)
        fh.write("\n")
    out_txt = os.path.join(args.out, "delta.txt")
    with open(out_txt, "w", encoding="utf-8") as fh:
        fh.write(delta.render())
    out_csv = os.path.join(args.out, "delta.csv")
    rows = [{"mode": e["mode"], "condition": e["condition"], "level": delta.level_names[e["level"] - 1],
             "k": e["k"], "delta": e["delta"]} for e in delta.to_json()["cells"]]
    rows += [{"mode": e["mode"], "condition": e["condition"], "level": "global", "k": e["k"],
              "delta": e["delta"]} for e in delta.to_json()["global"]]
    _write_csv(out_csv, rows)
    for p in (out_json, out_txt, out_csv):
        man.output(p)
    ks = sorted({k[2] for k in delta.global_})
    for k in ks:
        man.output(plotting.delta_heatmap(delta, os.path.join(args.out, f"delta_top{k}.png"), k))
    man.write(args.out)
    return EXIT_OK


def _inspect_runlog(path):
    from .trainer import RunLog
    runlog = RunLog.read(path)
    print(f"run log: {len(runlog.steps)} steps, {len(runlog.evals)} evaluations")
    if runlog.steps:
        first, last = runlog.steps[0], runlog.steps[-1]
        print(f"total loss: first {first['total']:.4f}, last {last['total']:.4f}")
    return EXIT_OK


def cmd_inspect(args, man):
    from .errors import DataIOError

    path = args.path
    if not os.path.exists(path) and os.path.exists(path + ".header.json"):
        path += ".header.json"
    target = path
    if path.endswith(".jsonl"):
        target = path[: -len(".jsonl")] + ".header.json"
        if not os.path.exists(target) and os.path.exists(path):
            return _inspect_runlog(path)
    try:
        with open(target, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataIOError(f"cannot read {target}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataIOError(f"{target}: not a JSON document ({exc})") from exc
    fmt = doc.get("format")
    if fmt == "hirtaxa-dataset":
        from .taxonomy import TaxonomyTree
        tree = TaxonomyTree.from_json(doc["tree"])
        print(f"dataset v{doc['version']}: {doc['count']} records, image {doc['image_shape']}")
        for lvl in range(1, tree.n_levels + 1):
            print(f"  {tree.level_names[lvl - 1]:<8} {tree.n_labels(lvl)} taxa")
        if doc.get("provenance"):
            print(f"  corrupted copy: {doc['provenance']['condition']} of {doc['provenance']['source']}")
    elif fmt == "hirtaxa-checkpoint":
        m = doc["model"]
        n_params = sum(len(p["data"]) for p in m["params"].values())
        print(f"checkpoint v{doc['version']}: {n_params} parameters, {len(m['prompts'])} prompts")
        print(f"  model: {json.dumps({k: v for k, v in m['config'].items() if k != 'loss'})}")
        print(f"  loss: {json.dumps(m['config']['loss'])}")
        tr = doc.get("trainer")
        if tr:
            print(f"  trainer: epochs done {tr['epochs_done']}, step {tr['step']}, best {tr.get('best')}")
    elif "cells" in doc and "global" in doc:
        from .evalharness import EvalReport
        sys.stdout.write(EvalReport.from_json(doc).render())
    elif doc.get("tool") == "hirtaxa":
        print(f"manifest: {doc['command']} (version {doc['version']}), "
              f"{len(doc['inputs'])} inputs, {len(doc['outputs'])} outputs, "
              f"{doc['timings'].get('wall_seconds')} s")
    else:
        print(json.dumps(doc, indent=1)[:2000])
    return EXIT_OK


# argument parsing ------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="hirtaxa", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1,
                   help="cap on BLAS/OpenMP worker threads (default 1, bit-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run config (defaults when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="override a config field (repeatable)")

    g = sub.add_parser("gen", help="generate a synthetic dataset and split")
    with_config(g)
    g.add_argument("--out", required=True, help="output directory")

    c = sub.add_parser("corrupt", help="write a degraded copy of a dataset")
    with_config(c)
    c.add_argument("--data", required=True, help="dataset path (stem, .jsonl or .header.json)")
    c.add_argument("--out", required=True, help="output dataset stem")
    c.add_argument("--condition", default="noisy-I+D",
                   choices=("noisy-D", "noisy-I", "noisy-I+D"))

    t = sub.add_parser("train", help="train a model")
    with_config(t)
    t.add_argument("--data", help="dataset path (overrides paths.dataset)")
    t.add_argument("--split", help="split JSON (overrides paths.split)")
    t.add_argument("--out", help="run directory (overrides paths.run_dir)")
    t.add_argument("--resume", help="epoch checkpoint to continue from")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset path (overrides paths.dataset)")
    e.add_argument("--split", help="split JSON whose test indices are evaluated (overrides paths.split)")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--check", action="store_true", help="verify report invariants afterwards")

    cm = sub.add_parser("compare", help="cellwise delta of two reports (b - a)")
    cm.add_argument("a")
    cm.add_argument("b")
    cm.add_argument("--out", required=True)

    i = sub.add_parser("inspect", help="summarize a dataset, checkpoint, report or manifest")
    i.add_argument("path")
    return p


COMMANDS = {"gen": cmd_gen, "corrupt": cmd_corrupt, "train": cmd_train, "eval": cmd_eval,
            "compare": cmd_compare, "inspect": cmd_inspect}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    for var in THREAD_VARS:
        os.environ.setdefault(var, str(max(args.threads, 1)))
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")

    from .errors import GridMismatch, HirTaxaError

    man = Manifest(args.command, argv)
    try:
        return COMMANDS[args.command](args, man)
    except GridMismatch as exc:
        log.error("%s", exc)
        return EXIT_GRID
    except HirTaxaError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
