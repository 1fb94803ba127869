"""``crophybrid`` command line: one subcommand per pipeline stage.

Every subcommand accepts ``--config run.json`` whose keys are flag names.
Explicit flags beat file values, which beat built-in defaults. A config file
holding an architecture (it has an ``input_shape`` key) is taken as the
``--arch`` argument instead.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from crophybrid import __version__, data, evaluation, model, pipeline, tensor
from crophybrid.features import Satellite, build_feature_cube, FeatureCube
from crophybrid.nn import parallel

log = logging.getLogger("crophybrid")

# flags that never change what gets computed, so they stay out of the config hash
_VOLATILE = {"out", "threads", "config", "func", "command", "verbose"}


class ConfigError(ValueError):
    pass


class GradientCheckError(RuntimeError):
    pass


def _fingerprint(value):
    """Input paths enter the hash by content, so relocating inputs keeps the hash."""
    if not isinstance(value, str):
        return value
    path = Path(value)
    if path.is_file():
        return "sha256:" + hashlib.sha256(path.read_bytes()).hexdigest()
    if path.is_dir():
        h = hashlib.sha256()
        for f in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(f.relative_to(path).as_posix().encode() + b"\0" + f.read_bytes())
        return "sha256:" + h.hexdigest()
    return value


def provenance(args) -> dict:
    cfg = {k: _fingerprint(v) for k, v in sorted(vars(args).items()) if k not in _VOLATILE}
    cfg["command"] = args.command
    digest = hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()
    return {"tool_version": __version__, "seed": args.seed, "config_hash": digest[:16]}


def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _need(args, *names) -> None:
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> None:
    _need(args, "out")
    spec_doc = json.loads(Path(args.spec).read_text()) if args.spec else {}
    for key in ("classes", "months", "sigma", "grid"):
        if getattr(args, key) is not None:
            spec_doc[key] = getattr(args, key)
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    spec = data.SynthSpec(**spec_doc)
    args.seed = spec.seed
    meta = provenance(args)
    scene = data.synth_generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.write_scenes(out / "scenes", scene.bands, scene.cube.months, spec.satellite)
    scene.cube.save(out / "cube", extra={"provenance": meta})
    data.save_parcels(out / "parcels.json", scene.parcels, scene.class_names)
    data.write_label_csv(out / "labels.csv", scene.parcels, scene.class_names)
    tensor.save_many(out / "truth.ctns", [scene.parcel_ids.astype(np.float64), scene.labels.astype(np.float64)])
    _write_json(out / "synth.json", {"spec": spec.to_dict(), "classes": scene.class_names,
                                     "parcels": len(scene.parcels), "provenance": meta})
    print(f"synth: {len(scene.parcels)} parcels, {spec.classes} classes, grid {spec.grid}, "
          f"{spec.months} months -> {out}")


def cmd_preprocess(args) -> None:
    _need(args, "scenes", "out")
    stack = pipeline.run(args.scenes, Satellite(args.satellite), tuple(args.months), args.cloud_threshold)
    stack.save(args.out, extra={"satellite": args.satellite, "provenance": provenance(args)})
    print(f"preprocess: {len(stack.scenes)} monthly composites -> {args.out}")


def cmd_features(args) -> None:
    _need(args, "stack", "out")
    stack = pipeline.SceneStack.load(args.stack)
    cube = build_feature_cube(stack, Satellite(args.satellite))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    cube.save(args.out, extra={"provenance": provenance(args)})
    print(f"features: cube {cube.data.shape}, {int(cube.flagged.sum())} flagged pixels -> {args.out}")


def cmd_sample(args) -> None:
    _need(args, "cube", "parcels", "out")
    cube = FeatureCube.load(args.cube)
    parcels, names = data.load_parcels(args.parcels, args.labels)
    ids, labels = data.rasterize_parcels(parcels, cube.grid)
    parcels = data.split_parcels(parcels, args.ratio, args.seed, args.val_fraction)
    patches = data.sample_patches(cube, labels, ids, args.patch_size, args.stride, parcels)
    if len(patches) == 0:
        raise data.GeometryError("no parcel pixels fall inside the cube grid")
    meta = provenance(args)
    out = Path(args.out)
    patches.save(out, meta={"seed": args.seed, "r": args.patch_size, "stride": args.stride,
                            "provenance": meta}, class_names=names)
    data.save_parcels(out / "parcels.json", parcels, names)
    tensor.save_many(out / "planes.ctns", [ids.astype(np.float64), labels.astype(np.float64)])
    counts = {tag: sum(v.values()) for tag, v in patches.counts().items()}
    print(f"sample: {len(patches)} patches {counts} -> {out}")


def _train_config(args) -> model.TrainConfig:
    doc = json.loads(Path(args.train_config).read_text()) if args.train_config else {}
    for key, flag in (("epochs", "epochs"), ("batch_size", "batch_size"), ("learning_rate", "lr")):
        if getattr(args, flag) is not None:
            doc[key] = getattr(args, flag)
    if args.no_shuffle:
        doc["shuffle"] = False
    doc["seed"] = args.seed
    return model.TrainConfig(**doc)


def _arch_config(args, classes: int, input_shape) -> model.ArchitectureConfig:
    if args.arch:
        cfg = model.ArchitectureConfig.load(args.arch)
        if args.classes is not None:
            cfg.classes = args.classes
        return cfg
    build = model.default_hybrid if args.model == "hybrid" else model.default_baseline
    return build(args.classes or classes, input_shape)


def cmd_train(args) -> None:
    _need(args, "patches", "out")
    index = json.loads((Path(args.patches) / "index.json").read_text())
    names = index.get("classes")
    splits = [s for s in ("train", "val") if s in index["shards"]]
    patches = data.PatchSet.load(args.patches, splits)
    tr, va = patches.where("train"), patches.where("val")
    if len(tr) == 0:
        raise model.TrainingError("patch set has no training split")
    classes = len(names) if names else int(patches.y.max()) + 1
    arch = _arch_config(args, classes, list(tr.x.shape[1:]))
    tcfg = _train_config(args)
    net = model.build_model(arch, seed=args.seed)
    meta = provenance(args)
    history = model.train(net, tr.x, tr.y, tcfg, val=(va.x, va.y) if len(va) else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net.save(out / "model.ckpt", extra={"classes": names, "provenance": meta})
    model.write_history_csv(out / "history.csv", history)
    _write_json(out / "train.json", {
        "architecture": arch.to_dict(), "train": vars(tcfg), "params": model.count_params(net),
        "best_epoch": net.best_epoch, "history": history, "classes": names, "provenance": meta,
    })
    last = history[-1]
    print(f"train: {arch.kind} {model.count_params(net):,} params, {tcfg.epochs} epochs, "
          f"final loss {last['loss']:.5f}, best epoch {net.best_epoch} -> {out / 'model.ckpt'}")


def cmd_evaluate(args) -> None:
    _need(args, "checkpoint", "patches", "out")
    net = model.Model.load(args.checkpoint)
    names = net.meta.get("classes")
    part = data.PatchSet.load(args.patches, (args.split,))
    _, pred = model.predict(net, part.x)
    k = net.config.classes
    pixel = evaluation.pixel_metrics(pred, part.y, class_names=names, classes=k)
    voted = evaluation.parcel_vote(pred, part.parcel, classes=k)
    truth = evaluation.parcel_vote(part.y, part.parcel, classes=k)
    parcel = evaluation.parcel_metrics(voted, truth, class_names=names, classes=k)
    doc = pixel.to_dict()
    doc["parcel"] = parcel.to_dict()
    doc["split"] = args.split
    doc["provenance"] = provenance(args)
    _write_json(args.out, doc)
    print(pixel.table())
    print()
    print(parcel.table())


def cmd_predict_map(args) -> None:
    _need(args, "checkpoint", "cube", "out")
    net = model.Model.load(args.checkpoint)
    cube = FeatureCube.load(args.cube)
    names = net.meta.get("classes") or [str(i) for i in range(net.config.classes)]
    h, w = cube.grid
    r = net.config.input_shape[0]
    if args.parcels:
        parcels, _ = data.load_parcels(args.parcels, args.labels, names)
        ids, _ = data.rasterize_parcels(parcels, cube.grid)
    else:
        ids = np.ones((h, w), dtype=np.int64)
    rows, cols = np.nonzero(ids > 0)
    plane = np.full((h, w), data.UNLABELED, dtype=np.int64)
    for start in range(0, len(rows), 4096):
        sl = slice(start, start + 4096)
        _, pred = model.predict(net, data.extract_patches(cube.data, rows[sl], cols[sl], r))
        plane[rows[sl], cols[sl]] = pred
    if args.vote:
        if not args.parcels:
            raise ConfigError("--vote needs --parcels")
        plane = evaluation.vote_plane(evaluation.parcel_vote(plane, ids, classes=len(names)), ids)
    if args.palette:
        palette = evaluation.ClassPalette(json.loads(Path(args.palette).read_text()))
    else:
        palette = evaluation.ClassPalette.default(names)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.render_map(plane, palette, names, out)
    tensor.save(out.with_suffix(".ctns"), plane.astype(np.float64))
    _write_json(out.with_suffix(".json"), {"classes": names, "palette": palette.to_dict(), "voted": args.vote,
                                           "grid": {"h": h, "w": w}, "provenance": provenance(args)})
    print(f"predict-map: {len(rows)} pixels classified -> {out}")


def _model_for_params(args) -> model.Model:
    if args.arch:
        cfg = model.ArchitectureConfig.load(args.arch)
        if args.classes is not None:
            cfg.classes = args.classes
    else:
        build = model.default_hybrid if args.model == "hybrid" else model.default_baseline
        cfg = build(args.classes or 10)
    return model.build_model(cfg, seed=args.seed)


def cmd_params(args) -> None:
    net = _model_for_params(args)
    total = model.count_params(net)
    print(total)
    print(f"{'layer':<44} {'output':<18} {'params':>10}")
    for desc, shape, n in net.layer_table():
        print(f"{desc:<44} {str(tuple(shape)):<18} {n:>10,}")
    print(f"{'total trainable':<63} {total:>10,}")
    print(f"{'non-trainable buffers':<63} {model.count_buffers(net):>10,}")
    if args.out:
        _write_json(args.out, {"architecture": net.config.to_dict(), "params": total,
                               "buffers": model.count_buffers(net), "provenance": provenance(args)})


def cmd_bench(args) -> None:
    rng = np.random.default_rng(args.seed)
    reports = []
    for name, build in (("hybrid", model.default_hybrid), ("baseline3d", model.default_baseline)):
        net = model.build_model(build(args.classes), seed=args.seed)
        batch = rng.standard_normal((args.batch, *net.config.input_shape)).astype(np.float32)
        reports.append(model.benchmark_inference(net, batch, name, args.warmup, args.iters))
    print(model.bench_table(reports))
    if args.out:
        _write_json(args.out, {"batch": args.batch, "threads": parallel.get_threads(),
                               "models": [vars(r) for r in reports], "provenance": provenance(args)})


def cmd_gradcheck(args) -> None:
    reports = model.gradient_suite(seed=args.seed, tolerance=args.tolerance)
    failed = []
    for name, rep in reports.items():
        print(f"[{'PASS' if rep.passed else 'FAIL'}] {name}  max rel err {rep.max_error:.3e}")
        for line in rep.lines():
            print("    " + line)
        if not rep.passed:
            failed.append(name)
    if args.out:
        _write_json(args.out, {"tolerance": args.tolerance,
                               "errors": {k: r.errors for k, r in reports.items()},
                               "provenance": provenance(args)})
    if failed:
        raise GradientCheckError(f"gradient check failed for {', '.join(failed)}")


# -- parser --------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; keys are flag names")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default ${parallel.ENV_VAR} or all cores)")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="crophybrid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"crophybrid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("synth", cmd_synth, "generate a synthetic scene stack, feature cube and parcels")
    p.add_argument("--spec", help="SynthSpec JSON")
    p.add_argument("--classes", type=int)
    p.add_argument("--months", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"))

    p = add("preprocess", cmd_preprocess, "cloud filter, monthly medians and gap filling")
    p.add_argument("--scenes", help="directory of scene manifests")
    p.add_argument("--satellite", default="sentinel2", choices=[s.value for s in Satellite])
    p.add_argument("--months", type=int, nargs="+", default=list(pipeline.DEFAULT_MONTHS))
    p.add_argument("--cloud-threshold", type=float, default=pipeline.DEFAULT_CLOUD_THRESHOLD)

    p = add("features", cmd_features, "bands plus spectral indices into a feature cube")
    p.add_argument("--stack", help="preprocessed stack directory")
    p.add_argument("--satellite", default="sentinel2", choices=[s.value for s in Satellite])

    p = add("sample", cmd_sample, "rasterize parcels, split them and cut patches")
    p.add_argument("--cube", help="feature cube path (without suffix)")
    p.add_argument("--parcels", help="parcel polygon JSON")
    p.add_argument("--labels", help="parcel_id,class_name CSV")
    p.add_argument("--patch-size", type=int, default=7)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--ratio", type=float, default=0.6, help="train share of parcels per class")
    p.add_argument("--val-fraction", type=float, default=0.1, help="share of train parcels held out for validation")

    p = add("train", cmd_train, "train a model on a patch set")
    p.add_argument("--patches", help="patch set directory")
    p.add_argument("--arch", help="ArchitectureConfig JSON")
    p.add_argument("--model", choices=model.KINDS, default="hybrid", help="default architecture when --arch is absent")
    p.add_argument("--classes", type=int)
    p.add_argument("--train-config", help="TrainConfig JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-shuffle", action="store_true")

    p = add("evaluate", cmd_evaluate, "pixel and parcel metrics on a patch split")
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--patches", help="patch set directory")
    p.add_argument("--split", default="test", choices=data.SPLITS)

    p = add("predict-map", cmd_predict_map, "classify every pixel and render a P6 map")
    p.add_argument("--checkpoint")
    p.add_argument("--cube")
    p.add_argument("--parcels", help="restrict to parcel pixels")
    p.add_argument("--labels")
    p.add_argument("--vote", action="store_true", help="paint each parcel with its majority label")
    p.add_argument("--palette", help="JSON class name -> [r, g, b]")

    p = add("params", cmd_params, "parameter count and layer table")
    p.add_argument("--arch", help="ArchitectureConfig JSON")
    p.add_argument("--model", choices=model.KINDS, default="hybrid")
    p.add_argument("--classes", type=int)

    p = add("bench", cmd_bench, "inference latency of the default hybrid and baseline")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--iters", type=int, default=30)

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser, subs


def _apply_config(parser, subs, args, argv):
    doc = json.loads(Path(args.config).read_text())
    if not isinstance(doc, dict):
        raise ConfigError(f"{args.config}: expected a JSON object")
    sub = subs[args.command]
    dests = {a.dest for a in sub._actions} - {"help", "config", "func"}
    if "input_shape" in doc:
        if "arch" not in dests:
            raise ConfigError(f"{args.command} does not take an architecture config")
        sub.set_defaults(arch=args.config)
    else:
        defaults = {}
        for key, value in doc.items():
            dest = key.replace("-", "_")
            if dest not in dests:
                raise ConfigError(f"unknown key {key!r} for {args.command}")
            defaults[dest] = value
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            args = _apply_config(parser, subs, args, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        warnings.simplefilter("default")
        parallel.set_threads(args.threads)
        if args.command != "synth" and args.seed is None:
            args.seed = 0
        args.func(args)
    except Exception as exc:  # one machine-parsable line, module error text included
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
