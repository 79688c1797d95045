"""Command-line entry point: ``radar-perceive <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .augment import Chip, load_chips, read_manifest
from .detection import (BOX_CELLS, CfarConfig, DbscanConfig, detect_and_classify, object_chips, read_boxes,
                        sample_background_boxes, write_boxes)
from .errors import MISSING_FILE_EXIT_CODE, InvalidInputError, ManifestError, RadarPerceiveError
from .evaluation import accuracy_confusion, format_confusion, map_stratified
from .imaging import load_raster, save_raster
from .nn.network import layers_from_json, load_weights, save_weights
from .nn.training import TrainConfig, predict_batch, stack_inputs, train, transfer_init
from .simulator import (CHIP_SIZE, CHIP_WINDOW, CLASS_NAMES, ChipConfig, SceneConfig, generate_scene_dataset,
                        render_chips, source_templates, write_chip_dataset)

log = logging.getLogger("radar_perceive")

THREADS_ENV = "RADAR_PERCEIVE_THREADS"
BACKGROUND_NAME = "background"


# -- experiment splits ------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    split: str = "random_70_30"
    param: tuple = ()
    transfer: str | None = None
    seed: int = 0

    @classmethod
    def parse(cls, text: str, transfer: str | None = None, seed: int = 0) -> "ExperimentSpec":
        """``random_70_30``, ``by_receiver[:ID]``, ``by_range[:METRES]`` or
        ``by_quadrant[:Q,Q]``."""
        name, _, arg = text.partition(":")
        if name == "random_70_30":
            param: tuple = ()
        elif name == "by_receiver":
            param = (int(arg) if arg else 1,)
        elif name == "by_range":
            param = (float(arg),) if arg else ()
        elif name == "by_quadrant":
            param = tuple(sorted(int(q) for q in arg.split(","))) if arg else (2, 4)
            if not param or any(q not in (1, 2, 3, 4) for q in param):
                raise InvalidInputError(f"invalid quadrant list in {text!r}")
        else:
            raise InvalidInputError(f"unknown split {text!r}")
        return cls(name, param, transfer, seed)

    @property
    def label(self) -> str:
        if not self.param:
            return self.split
        return f"{self.split}:" + ",".join(str(p) for p in self.param)


def split_indices(records, spec: ExperimentSpec):
    """Disjoint ``(train, test)`` index arrays covering every record."""
    n = len(records)
    if n == 0:
        raise ManifestError("manifest is empty")
    if spec.split == "random_70_30":
        order = rngmod.stream(spec.seed, "experiment-split").permutation(n)
        cut = int(round(0.7 * n))
        train_idx, test_idx = np.sort(order[:cut]), np.sort(order[cut:])
    else:
        if spec.split == "by_receiver":
            is_test = np.array([r.receiver_id == spec.param[0] for r in records])
        elif spec.split == "by_range":
            target = spec.param[0] if spec.param else max(r.range_m for r in records)
            is_test = np.array([abs(r.range_m - target) < 1e-6 for r in records])
        else:
            is_test = np.array([r.quadrant in spec.param for r in records])
        train_idx, test_idx = np.flatnonzero(~is_test), np.flatnonzero(is_test)
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise InvalidInputError(f"split {spec.label} leaves an empty train or test set")
    return train_idx, test_idx


def experiment_report(results) -> str:
    """Accuracy per experiment, without and with transfer learning."""
    results = list(results)
    if not results:
        raise InvalidInputError("no results to report")
    rows: dict[str, dict[bool, float]] = {}
    for r in results:
        rows.setdefault(r["experiment"], {})[bool(r.get("transfer"))] = float(r["accuracy"])
    width = max(12, max(len(k) for k in rows) + 2)
    lines = [f"{'experiment':<{width}}{'without TL':>12}{'with TL':>12}"]
    for name, cells in rows.items():
        vals = [f"{100 * cells[k]:.1f}" if k in cells else "-" for k in (False, True)]
        lines.append(f"{name:<{width}}{vals[0]:>12}{vals[1]:>12}")
    return "\n".join(lines)


# -- helpers ----------------------------------------------------------------

def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _class_names(n: int) -> list[str]:
    names = list(CLASS_NAMES[:n]) if n <= len(CLASS_NAMES) else [f"class{i}" for i in range(n)]
    return names + [f"class{i}" for i in range(len(names), n)]


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise InvalidInputError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    if n < 1:
        raise InvalidInputError(f"{THREADS_ENV} must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _load_net(args):
    layers = layers_from_json(_require(args.layers).read_text()) if args.layers else None
    return load_weights(_require(args.weights), layers)


def _train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, momentum=args.momentum, epochs=args.epochs,
                       batch_size=args.batch, validation_fraction=args.validation_fraction, seed=args.seed)


def _load_scene_set(scene_dir: Path):
    index = _require(scene_dir / "scenes.jsonl")
    scenes = []
    with open(index, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                scenes.append((str(obj["scene_id"]), scene_dir / obj["path"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{index}:{line_no}: malformed scene record ({exc})") from None
    truths = read_boxes(_require(scene_dir / "truth.jsonl"))
    return scenes, truths


# -- commands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scenes:
        maker = SceneConfig.hard if args.mode == "hard" else SceneConfig.easy
        cfg = maker(noise_sigma=args.noise)
        density = cfg.density if args.density is None else _parse_density(args.density)
        generate_scene_dataset(args.scenes, density, args.seed, out, cfg)
        print(f"wrote {args.scenes} {args.mode} scenes to {out}")
        return 0
    templates = source_templates(args.source_classes, seed=args.seed) if args.source_classes else None
    cfg = ChipConfig(noise_sigma=args.noise, aspect_step_deg=args.aspect_step)
    chips = render_chips(args.per_class, args.ranges, args.seed, templates, cfg=cfg)
    records = write_chip_dataset(chips, out)
    if args.log_scale:
        (out / "preview").mkdir(exist_ok=True)
        for rec, chip in zip(records, chips):
            save_raster(out / "preview" / Path(rec.path).name, chip.image, log_scale=True)
    print(f"wrote {len(records)} chips to {out / 'manifest.jsonl'}")
    return 0


def _parse_density(text: str):
    if "-" in text:
        lo, hi = text.split("-", 1)
        return int(lo), int(hi)
    return float(text) if "." in text else int(text)


def _background_chips(scene_dir: Path, label: int, seed: int, per_scene: int = 4,
                      with_objects: bool = False) -> list[Chip]:
    """Background chips from every scene, plus one chip per truth box when
    ``with_objects`` is set (objects seen in scene context)."""
    scenes, truths = _load_scene_set(scene_dir)
    by_scene: dict[str, list] = {}
    for t in truths:
        by_scene.setdefault(t.scene_id, []).append(t)
    chips: list[Chip] = []
    for sid, path in scenes:
        img = load_raster(_require(path))
        sample = sample_background_boxes(img, by_scene.get(sid, []), per_scene, rngmod.stream(seed, "background", sid),
                                         label=label, context_cells=CHIP_WINDOW, chip_size=CHIP_SIZE)
        chips.extend(sample.chips)
        if with_objects:
            chips.extend(object_chips(img, by_scene.get(sid, []), CHIP_WINDOW, CHIP_SIZE))
    return chips


def cmd_train(args) -> int:
    manifest = _require(args.manifest)
    records = read_manifest(manifest)
    spec = ExperimentSpec.parse(args.split, args.transfer, args.seed)
    train_idx, test_idx = split_indices(records, spec)
    chips = load_chips(manifest, records)
    num_classes = max(r.label for r in records) + 1
    train_chips = [chips[i] for i in train_idx]
    if args.background_scenes:
        train_chips += _background_chips(Path(args.background_scenes), num_classes, args.seed,
                                         args.background_per_scene, args.scene_objects)
        num_classes += 1
    cfg = _train_config(args)
    layers = layers_from_json(_require(args.layers).read_text()) if args.layers else None
    init = None
    if args.transfer:
        source = load_weights(_require(args.transfer))
        init = transfer_init(source, num_classes, layers=layers, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(epoch, loss, acc):
        log.info("epoch %d  loss %.5f  val_acc %.4f", epoch, loss, acc)

    net, history = train(train_chips, cfg, init=init, num_classes=num_classes, layers=layers,
                         flip_originals_only=args.flip_originals_only, progress=progress)
    save_weights(net, out / "weights.acnw")
    history.write_csv(out / "history.csv")
    test_chips = [chips[i] for i in test_idx]
    probs = predict_batch(net, stack_inputs(test_chips, net.input_shape[0]))
    preds = probs.argmax(axis=1)
    truth = np.array([c.label for c in test_chips])
    acc, matrix = accuracy_confusion(preds, truth, net.num_classes)
    result = {"experiment": spec.label, "transfer": bool(args.transfer), "seed": args.seed,
              "accuracy": acc, "confusion": matrix.tolist(), "best_epoch": history.best_epoch,
              "train_indices": train_idx.tolist(), "test_indices": test_idx.tolist()}
    _dump_json(result, out / "result.json")
    print(format_confusion(matrix, _class_names(net.num_classes), acc))
    return 0


def cmd_classify(args) -> int:
    manifest = _require(args.manifest)
    net = _load_net(args)
    records = read_manifest(manifest)
    chips = load_chips(manifest, records)
    probs = predict_batch(net, stack_inputs(chips, net.input_shape[0]))
    preds = probs.argmax(axis=1)
    lines = ["path,label,predicted,confidence"]
    for rec, p, pr in zip(records, preds, probs):
        lines.append(f"{rec.path},{rec.label},{int(p)},{float(pr[p])!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    acc, matrix = accuracy_confusion(preds, [r.label for r in records], max(net.num_classes, max(r.label for r in records) + 1))
    print(format_confusion(matrix, _class_names(len(matrix)), acc))
    return 0


def cmd_detect(args) -> int:
    scene_dir = Path(args.scenes)
    scenes, _ = _load_scene_set(scene_dir)
    net = _load_net(args)
    cfar = CfarConfig(mode=args.cfar_mode, level=args.cfar_level)
    db = DbscanConfig(epsilon=args.dbscan_eps, min_points=args.dbscan_min_pts)
    background = None if args.no_background else -1
    boxes = []
    for sid, path in scenes:
        img = load_raster(_require(path))
        boxes.extend(detect_and_classify(img, net, cfar, db, args.box_size, background, scene_id=sid))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_boxes(boxes, out)
    print(f"{len(boxes)} detections in {len(scenes)} scenes -> {out}")
    return 0


def cmd_eval(args) -> int:
    if args.mode == "classify":
        result = json.loads(_require(args.result).read_text())
        matrix = np.array(result["confusion"])
        print(format_confusion(matrix, _class_names(len(matrix)), result["accuracy"]))
        return 0
    dets = read_boxes(_require(args.detections))
    truths = read_boxes(_require(args.truth))
    n = args.num_classes or (max([b.label for b in truths + dets], default=-1) + 1)
    table = map_stratified(dets, truths, _class_names(n))
    text = table.to_csv()
    if args.strata:
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        sys.stdout.write(text)
    else:
        overall = table.cell("mAP", "Overall")
        print("mAP", "N/A" if overall is None else f"{100 * overall:.2f}")
    return 0


def cmd_tsne(args) -> int:
    from .analysis import TsneConfig, extract_features, plot_embedding, tsne, write_embedding_csv

    manifest = _require(args.manifest)
    net = _load_net(args)
    chips = load_chips(manifest)
    feats = extract_features(net, chips)
    res = tsne(feats, TsneConfig(perplexity=args.perplexity, iterations=args.iterations, seed=args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embedding_csv(res.embedding, feats.labels, out / "embedding.csv")
    plot_embedding(res.embedding, feats.labels, out / "tsne.ppm")
    print(f"final KL {res.kl:.6f}")
    return 0


def cmd_report(args) -> int:
    results = [json.loads(_require(p).read_text()) for p in args.results]
    print(experiment_report(results))
    return 0


# -- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, keeping 2 for missing files
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radar-perceive", description="Radar object recognition toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="render a synthetic chip or scene dataset")
    kind = s.add_mutually_exclusive_group()
    kind.add_argument("--chips", action="store_true", help="single-object chips (default)")
    kind.add_argument("--scenes", type=int, default=0, metavar="N", help="N multi-object scenes")
    s.add_argument("--per-class", type=int, default=10)
    s.add_argument("--ranges", type=float, nargs="+", default=[3.8, 6.3])
    s.add_argument("--source-classes", type=int, default=0, help="use N procedural source classes")
    s.add_argument("--aspect-step", type=float, default=None, help="aspect grid in degrees (e.g. 4)")
    s.add_argument("--mode", choices=("easy", "hard"), default="easy")
    s.add_argument("--density", default=None, help="count, lo-hi range or mean")
    s.add_argument("--noise", type=float, default=ChipConfig().noise_sigma)
    s.add_argument("--log-scale", action="store_true", help="also export log-compressed previews")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a classifier on a chip manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--split", default="random_70_30")
    t.add_argument("--transfer", default=None, help="source weights for transfer initialisation")
    t.add_argument("--background-scenes", default=None, help="scene directory for background chips")
    t.add_argument("--background-per-scene", type=int, default=4)
    t.add_argument("--scene-objects", action="store_true",
                   help="also train on the truth boxes of --background-scenes")
    t.add_argument("--layers", default=None, help="JSON layer list (default: A-ConvNet)")
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch", type=int, default=100)
    t.add_argument("--validation-fraction", type=float, default=0.2)
    t.add_argument("--flip-originals-only", action="store_true", help="x9 instead of x16 augmentation")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("classify", help="classify every chip of a manifest")
    c.add_argument("--manifest", required=True)
    c.add_argument("--weights", required=True)
    c.add_argument("--layers", default=None, help="JSON layer list of a non-default network")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_classify)

    d = sub.add_parser("detect", help="run the detector over a scene directory")
    d.add_argument("--scenes", required=True)
    d.add_argument("--weights", required=True)
    d.add_argument("--layers", default=None, help="JSON layer list of a non-default network")
    d.add_argument("--cfar-mode", choices=("global", "cell_averaging"), default="global")
    d.add_argument("--cfar-level", type=float, default=0.22)
    d.add_argument("--dbscan-eps", type=float, default=0.3)
    d.add_argument("--dbscan-min-pts", type=int, default=40)
    d.add_argument("--box-size", type=int, default=BOX_CELLS)
    d.add_argument("--no-background", action="store_true", help="the network has no background class")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score classification results or detections")
    e.add_argument("--mode", choices=("classify", "detect"), default="detect")
    e.add_argument("--result", default=None, help="result.json of a training run")
    e.add_argument("--detections", default=None)
    e.add_argument("--truth", default=None)
    e.add_argument("--num-classes", type=int, default=None)
    e.add_argument("--strata", action="store_true", help="emit the stratified AP table")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    z = sub.add_parser("tsne", help="embed penultimate-layer features")
    z.add_argument("--manifest", required=True)
    z.add_argument("--weights", required=True)
    z.add_argument("--layers", default=None, help="JSON layer list of a non-default network")
    z.add_argument("--perplexity", type=float, default=30.0)
    z.add_argument("--iterations", type=int, default=1000)
    z.add_argument("--seed", type=int, default=0)
    z.add_argument("--out", required=True)
    z.set_defaults(func=cmd_tsne)

    r = sub.add_parser("report", help="side-by-side accuracy table of training results")
    r.add_argument("results", nargs="+")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval" and args.mode == "detect" and not (args.detections and args.truth):
            raise InvalidInputError("eval --mode detect needs --detections and --truth")
        if args.command == "eval" and args.mode == "classify" and not args.result:
            raise InvalidInputError("eval --mode classify needs --result")
        with _thread_limit():
            return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return MISSING_FILE_EXIT_CODE
    except RadarPerceiveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
