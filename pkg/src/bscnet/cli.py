"""Command-line entry point: ``bscnet {gen,train,eval,diagnose,cost}``.

Every subcommand accepts ``--seed``, ``--config`` (a JSON object whose keys are
flag names with dashes or underscores; explicit flags win) and ``--out``.
Machine-readable results go to stdout as one JSON document, logs to stderr.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, IndivisibleGroups, InvalidConfig, InvalidSpec
from .conv import sfsc_forward
from .metrics import capture_layer, compute_metrics, count_cost, layer_sign_correspondence
from .nets import PRESETS, NetworkSpec, build_network
from .search import STILL, design_space_size, format_count, random_shift_config
from .sparse import load_points, save_points, voxelize
from .synthetic import PRIMITIVES, Scene, SceneConfig, generate_scene
from .train import PIPELINES, AffineConfig, Dataset, pipeline_stages, split_dataset, train_pipeline, write_history_csv

log = logging.getLogger("bscnet")

USAGE_ERRORS = (ConfigError, InvalidConfig, InvalidSpec, IndivisibleGroups)

# per-command defaults; ``None`` means "derive from other settings"
SCENE_DEFAULTS = dict(scenes=10, classes=3, points=4800, extent=1.4, noise=0.005, mix="box=1,sphere=1,plane=0", objects=4)
DEFAULTS = {
    "gen": dict(SCENE_DEFAULTS, format="text", out="data"),
    "train": dict(
        SCENE_DEFAULTS,
        scenes=12,
        out="run",
        data=None,
        pipeline="baseline",
        preset=None,
        family="unet",
        levels=3,
        base_filters=8,
        filters_step=8,
        blocks=1,
        groups=8,
        relaxation="sigmoid",
        epochs=128,
        epoch_scale=1.0,
        batch_size=4,
        confidence_weight=None,
        allow_zero_confidence=False,
        arch_lr=0.1,
        manual_preset=None,
        resolution=0.05,
        augment=False,
        val_fraction=0.1,
        pack_binary=False,
    ),
    "eval": dict(checkpoint=None, data=None, repeats=3, resolution=None, out=None),
    "diagnose": dict(checkpoint=None, data=None, samples=50, resolution=None, out=None),
    "cost": dict(
        SCENE_DEFAULTS,
        checkpoint=None,
        data=None,
        preset=None,
        family="unet",
        levels=3,
        base_filters=8,
        filters_step=8,
        blocks=1,
        groups=8,
        precision="binary",
        resolution=None,
        design_space=False,
        exclude_still=False,
        n_s=None,
        n_g=None,
        layers=None,
        out=None,
    ),
}
NET_FLAGS = {
    "family": "family",
    "levels": "levels",
    "base_filters": "base_filters",
    "filters_step": "filters_step",
    "blocks": "blocks_per_level",
    "groups": "groups",
    "classes": "num_classes",
    "relaxation": "relaxation",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- run configuration ---------------------------------------------------------


@dataclass
class RunConfig:
    spec: NetworkSpec
    stages: list
    pipeline: str
    scene: SceneConfig | None
    data: str | None
    resolution: float
    out: str
    seed: int = 0
    batch_size: int = 4
    manual_preset: str | None = None
    augment: bool = False
    val_fraction: float = 0.1

    def validate(self, allow_zero_confidence: bool = False) -> "RunConfig":
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}")
        if self.pipeline == "search" and not allow_zero_confidence:
            if self.stages[0].confidence_weight <= 0:
                raise ConfigError("the search pipeline needs a positive confidence weight (or --allow-zero-confidence)")
        if self.pipeline == "manual" and self.manual_preset not in (None, "nyu", "scannet"):
            raise ConfigError(f"unknown manual shift preset {self.manual_preset!r}")
        if self.resolution <= 0:
            raise ConfigError("resolution must be positive")
        self.spec.validate()
        if self.pipeline != "baseline":
            # shifted layers split channels into groups; check before any training
            replace(self.spec, search_mode=True).validate()
        return self

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "stages": [asdict(s) for s in self.stages],
            "pipeline": self.pipeline,
            "scene": None if self.scene is None else asdict(self.scene),
            "data": self.data,
            "resolution": self.resolution,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "manual_preset": self.manual_preset,
            "augment": self.augment,
            "val_fraction": self.val_fraction,
        }


def _parse_mix(text) -> dict:
    if isinstance(text, dict):
        return {k: float(v) for k, v in text.items()}
    mix = {}
    for part in str(text).split(","):
        if not part.strip():
            continue
        name, _, val = part.partition("=")
        name = name.strip()
        if name not in PRIMITIVES or not _:
            raise ConfigError(f"bad primitive weight {part!r}; expected e.g. box=1,sphere=1")
        try:
            mix[name] = float(val)
        except ValueError as exc:
            raise ConfigError(f"bad primitive weight {part!r}") from exc
    return mix


def scene_config(opts: dict, seed: int) -> SceneConfig:
    return SceneConfig(
        num_points=int(opts["points"]),
        num_classes=int(opts["classes"]),
        extent=float(opts["extent"]),
        mix=_parse_mix(opts["mix"]),
        noise_sigma=float(opts["noise"]),
        seed=seed,
        num_objects=int(opts["objects"]),
    )


def network_spec(opts: dict, explicit: set, seed: int) -> NetworkSpec:
    if opts.get("preset"):
        if opts["preset"] not in PRESETS:
            raise ConfigError(f"unknown preset {opts['preset']!r}; choose from {sorted(PRESETS)}")
        spec = NetworkSpec.preset(opts["preset"], num_classes=int(opts["classes"]), seed=seed)
        over = {NET_FLAGS[k]: opts[k] for k in NET_FLAGS if k in explicit and k in opts}
    else:
        spec = NetworkSpec(seed=seed)
        over = {NET_FLAGS[k]: opts[k] for k in NET_FLAGS if k in opts}
    return replace(spec, **over)


# -- data ------------------------------------------------------------------------


def load_scenes(path) -> list:
    """Scenes from a directory or file holding ``manifest.json``, or one point file."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    if path.endswith(".json"):
        with open(path) as fh:
            manifest = json.load(fh)
        root = os.path.dirname(path)
        return [Scene(*load_points(os.path.join(root, s["path"]))) for s in manifest["scenes"]]
    return [Scene(*load_points(path))]


def _scenes_for(opts: dict, seed: int) -> list:
    if opts.get("data"):
        return load_scenes(opts["data"])
    cfg = scene_config(opts, seed)
    return [generate_scene(replace(cfg, seed=seed + i)) for i in range(int(opts["scenes"]))]


def _resolution(opts: dict, extra: dict) -> float:
    return float(opts["resolution"] if opts.get("resolution") is not None else extra.get("resolution", 0.05))


def _emit(doc: dict, out: str | None):
    text = json.dumps(doc, sort_keys=True)
    print(text)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")


# -- commands ------------------------------------------------------------------


def cmd_gen(opts: dict, seed: int) -> dict:
    cfg = scene_config(opts, seed)
    out = opts["out"]
    os.makedirs(out, exist_ok=True)
    ext = "bvpc" if opts["format"] == "binary" else "txt"
    entries = []
    for i in range(int(opts["scenes"])):
        s = seed + i
        scene = generate_scene(replace(cfg, seed=s))
        name = f"scene_{i:04d}.{ext}"
        save_points(os.path.join(out, name), scene.points, scene.labels, opts["format"])
        entries.append({"path": name, "seed": s, "points": int(len(scene.points))})
    manifest = {"config": asdict(replace(cfg, seed=seed)), "format": opts["format"], "scenes": entries}
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"manifest": path, "scenes": len(entries)}


def run_config(opts: dict, explicit: set, seed: int) -> RunConfig:
    spec = network_spec(opts, explicit, seed)
    stages = pipeline_stages(
        opts["pipeline"],
        spec.family,
        int(opts["epochs"]),
        float(opts["epoch_scale"]),
        None if opts["confidence_weight"] is None else float(opts["confidence_weight"]),
        float(opts["arch_lr"]),
    )
    scene = None if opts.get("data") else scene_config(opts, seed)
    cfg = RunConfig(
        spec,
        stages,
        opts["pipeline"],
        scene,
        opts.get("data"),
        float(opts["resolution"]),
        opts["out"],
        seed,
        int(opts["batch_size"]),
        opts["manual_preset"],
        bool(opts["augment"]),
        float(opts["val_fraction"]),
    )
    return cfg.validate(bool(opts["allow_zero_confidence"]))


def cmd_train(opts: dict, seed: int, explicit: set) -> dict:
    cfg = run_config(opts, explicit, seed)
    os.makedirs(cfg.out, exist_ok=True)
    scenes = _scenes_for(opts, seed)
    train, val = split_dataset(scenes, cfg.val_fraction, seed)
    train_ds = Dataset(train, cfg.resolution, AffineConfig() if cfg.augment else None)
    val_ds = Dataset(val, cfg.resolution) if val else None
    result = train_pipeline(
        cfg.pipeline,
        cfg.spec,
        train_ds,
        val_ds,
        cfg.stages,
        seed,
        cfg.batch_size,
        cfg.manual_preset,
        log=log.info,
    )
    paths = {
        "checkpoint": os.path.join(cfg.out, "checkpoint.bsc"),
        "history": os.path.join(cfg.out, "history.csv"),
        "run_config": os.path.join(cfg.out, "run.json"),
    }
    extra = {"resolution": cfg.resolution, "pipeline": cfg.pipeline, "seed": seed}
    if result.shift_config is not None:
        paths["shift_config"] = os.path.join(cfg.out, "shift_config.txt")
        with open(paths["shift_config"], "w") as fh:
            fh.write(result.shift_config.dumps())
        extra["shift_config"] = result.shift_config.dumps()
    save_checkpoint(paths["checkpoint"], result.net, extra, pack_binary=bool(opts["pack_binary"]))
    write_history_csv(paths["history"], result.history)
    with open(paths["run_config"], "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    last = result.history[-1]
    return {**paths, "final_train_loss": last["train_loss"], "final_val_miou": last["val_miou"]}


def evaluate_points(net, scenes, resolution: float, repeats: int, seed: int) -> dict:
    """Per-point metrics averaged over ``repeats`` seeded sub-voxel grid offsets."""
    runs = []
    for r in range(repeats):
        offset = np.random.default_rng([seed, r]).uniform(0.0, resolution, size=3)
        preds, labels = [], []
        for sc in scenes:
            vox = voxelize(sc.points + offset, resolution, labels=sc.labels)
            site_pred = np.argmax(net.predict(vox.tensor), axis=1)
            preds.append(site_pred[vox.point_site])
            labels.append(sc.labels)
        runs.append(compute_metrics(np.concatenate(preds), np.concatenate(labels), net.spec.num_classes))
    per_class = np.array([m.per_class_iou for m in runs], dtype=np.float64)
    with warnings.catch_warnings():
        # classes absent from every repeat stay NaN
        warnings.simplefilter("ignore", RuntimeWarning)
        mean_class = np.nanmean(per_class, axis=0)
    return {
        "miou": float(np.mean([m.miou for m in runs])),
        "macc": float(np.mean([m.macc for m in runs])),
        "acc": float(np.mean([m.acc for m in runs])),
        "per_class_iou": [None if np.isnan(v) else float(v) for v in mean_class],
        "repeats": repeats,
        "per_repeat": [json.loads(m.to_json()) for m in runs],
    }


def cmd_eval(opts: dict, seed: int) -> dict:
    if not opts.get("checkpoint") or not opts.get("data"):
        raise ConfigError("eval needs --checkpoint and --data")
    if int(opts["repeats"]) < 1:
        raise ConfigError("--repeats must be at least 1")
    net, extra = load_checkpoint(opts["checkpoint"])
    scenes = load_scenes(opts["data"])
    return evaluate_points(net, scenes, _resolution(opts, extra), int(opts["repeats"]), seed)


def diagnose(net, sample, samples: int, seed: int) -> dict:
    """Sign correspondence of the first binary layer under many shift configurations."""
    if net.spec.search_mode:
        net, _ = net.derived_copy()
    prev = net.binary
    net.set_binary(False)
    try:
        name = net.first_binary_layer()
        layer = dict(net.named_modules())[name]
        x = capture_layer(net, sample, name, inputs=True)
    finally:
        net.set_binary(prev)
    weight = layer.weight.value
    groups = net.spec.groups
    rows = [
        {"label": "checkpoint", "directions": [list(d) for d in layer.directions]},
        {"label": "unshifted", "directions": [list(STILL)] * groups},
    ]
    rng = np.random.default_rng(seed)
    space = net.spec.space()
    for i in range(samples):
        dirs = random_shift_config(space, groups, 1, rng)[0]
        rows.append({"label": f"random-{i}", "directions": [list(d) for d in dirs]})
    for row in rows:
        dirs = [tuple(d) for d in row["directions"]]
        row["correspondence"] = layer_sign_correspondence(x, weight, dirs, layer.kernel_size)
        real = np.asarray(_sfsc(x, weight, dirs, False, layer.kernel_size))
        binary = np.asarray(_sfsc(x, weight, dirs, True, layer.kernel_size))
        denom = np.linalg.norm(real)
        row["quantization_error"] = float(np.linalg.norm(real - binary) / denom) if denom > 0 else 0.0
    rows.sort(key=lambda r: (r["correspondence"], r["label"]))
    return {"layer": name, "sites": int(sample.num_sites), "rows": rows}


def _sfsc(x, weight, dirs, binary, kernel_size):
    return ad.value(sfsc_forward(x, weight, dirs, binary, kernel_size).features)


def cmd_diagnose(opts: dict, seed: int) -> dict:
    if not opts.get("checkpoint") or not opts.get("data"):
        raise ConfigError("diagnose needs --checkpoint and --data")
    if int(opts["samples"]) < 0:
        raise ConfigError("--samples must be non-negative")
    net, extra = load_checkpoint(opts["checkpoint"])
    scene = load_scenes(opts["data"])[0]
    sample = voxelize(scene.points, _resolution(opts, extra), labels=scene.labels).tensor
    doc = diagnose(net, sample, int(opts["samples"]), seed)
    for row in doc["rows"]:
        log.info("%-12s %.4f", row["label"], row["correspondence"])
    return doc


def cmd_cost(opts: dict, seed: int, explicit: set) -> dict:
    if opts.get("checkpoint"):
        net, extra = load_checkpoint(opts["checkpoint"])
    else:
        spec = network_spec(opts, explicit, seed)
        spec = replace(spec, binary=opts["precision"] == "binary")
        net = build_network(spec)
        extra = {}
    resolution = _resolution(opts, extra)
    if opts.get("data"):
        scene = load_scenes(opts["data"])[0]
    else:
        scene = generate_scene(scene_config(opts, seed))
    sample = voxelize(scene.points, resolution, labels=scene.labels).tensor
    doc = json.loads(count_cost(net, sample).to_json())
    if opts["design_space"]:
        spec = net.spec
        n_s = len(spec.space()) - (1 if opts["exclude_still"] and STILL in spec.space().directions else 0)
        n_s = int(opts["n_s"]) if opts.get("n_s") is not None else n_s
        n_g = int(opts["n_g"]) if opts.get("n_g") is not None else spec.groups
        layers = int(opts["layers"]) if opts.get("layers") is not None else spec.num_searchable()
        size = design_space_size(n_s, n_g, layers)
        doc["design_space"] = {"n_s": n_s, "n_g": n_g, "layers": layers, "size": str(size), "approx": format_count(size)}
        log.info("design space size %s", format_count(size))
    return doc


# -- argument parsing ------------------------------------------------------------


def _scene_flags(p):
    p.add_argument("--scenes", type=int, help="number of synthetic scenes")
    p.add_argument("--classes", type=int, help="class count including the floor")
    p.add_argument("--points", type=int, help="points per scene")
    p.add_argument("--extent", type=float, help="room side length in metres")
    p.add_argument("--noise", type=float, help="Gaussian position noise in metres")
    p.add_argument("--mix", help="primitive weights, e.g. box=1,sphere=1,plane=0")
    p.add_argument("--objects", type=int, help="objects per scene")


def _net_flags(p):
    p.add_argument("--preset", help=f"network preset: {', '.join(sorted(PRESETS))}")
    p.add_argument("--family", choices=("unet", "fcn"))
    p.add_argument("--levels", type=int)
    p.add_argument("--base-filters", type=int)
    p.add_argument("--filters-step", type=int)
    p.add_argument("--blocks", type=int, help="blocks per level")
    p.add_argument("--groups", type=int, help="channel groups of shifted layers")


def build_parser() -> argparse.ArgumentParser:
    glob = _Parser(add_help=False)
    glob.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    glob.add_argument("--config", default=argparse.SUPPRESS, help="JSON file of flag values")
    glob.add_argument("--out", default=argparse.SUPPRESS)
    glob.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="bscnet", description="Binary sparse convolutional networks.", parents=[glob])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", parents=[glob], help="write synthetic point-cloud scenes")
    _scene_flags(p)
    p.add_argument("--format", choices=("text", "binary"))

    p = sub.add_parser("train", parents=[glob], help="run a training pipeline")
    _scene_flags(p)
    _net_flags(p)
    p.add_argument("--data", help="scene directory or manifest; synthetic scenes otherwise")
    p.add_argument("--pipeline", choices=PIPELINES)
    p.add_argument("--relaxation", choices=("sigmoid", "softmax"))
    p.add_argument("--epochs", type=int, help="max epochs per stage (LR steps scale along)")
    p.add_argument("--epoch-scale", type=float, help="multiply epochs and LR steps")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--confidence-weight", type=float)
    p.add_argument("--allow-zero-confidence", action="store_true", default=None)
    p.add_argument("--arch-lr", type=float)
    p.add_argument("--manual-preset", choices=("nyu", "scannet"))
    p.add_argument("--resolution", type=float, help="voxel size in metres")
    p.add_argument("--augment", action="store_true", default=None)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--pack-binary", action="store_true", default=None)

    p = sub.add_parser("eval", parents=[glob], help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--repeats", type=int)
    p.add_argument("--resolution", type=float)

    p = sub.add_parser("diagnose", parents=[glob], help="sign-correspondence report")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--samples", type=int)
    p.add_argument("--resolution", type=float)

    p = sub.add_parser("cost", parents=[glob], help="OPs and storage report")
    _scene_flags(p)
    _net_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--precision", choices=("real", "binary"))
    p.add_argument("--resolution", type=float)
    p.add_argument("--design-space", action="store_true", default=None)
    p.add_argument("--exclude-still", action="store_true", default=None)
    p.add_argument("--n-s", type=int)
    p.add_argument("--n-g", type=int)
    p.add_argument("--layers", type=int)
    return parser


def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(args: argparse.Namespace) -> tuple[dict, int, set]:
    """Merge defaults, config file and explicit flags (in increasing priority)."""
    cmd = args.command
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config", "verbose")}
    config = _load_config(args.config) if getattr(args, "config", None) else {}
    defaults = DEFAULTS[cmd]
    allowed = set(defaults) | {"seed"}
    unknown = sorted(set(config) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys for {cmd}: {unknown}")
    opts = {**defaults, **config, **flags}
    seed = int(opts.pop("seed", 0))
    explicit = set(config) | set(flags)
    return opts, seed, explicit


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: gen, train, eval, diagnose or cost")
        logging.basicConfig(
            level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
            format="%(message)s",
            stream=sys.stderr,
        )
        opts, seed, explicit = resolve(args)
        if args.command == "gen":
            doc = cmd_gen(opts, seed)
            _emit(doc, None)
        elif args.command == "train":
            _emit(cmd_train(opts, seed, explicit), None)
        elif args.command == "eval":
            _emit(cmd_eval(opts, seed), opts.get("out"))
        elif args.command == "diagnose":
            _emit(cmd_diagnose(opts, seed), opts.get("out"))
        else:
            _emit(cmd_cost(opts, seed, explicit), opts.get("out"))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except USAGE_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime and data errors
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

