"""Command-line entry point: ``fslidar <command> [flags]``.

Every command writes into its ``--out`` directory a ``manifest.json``
(command, config digest, dataset digest, seed, revision, outputs) and,
where it produces numbers, a ``metrics.csv`` whose first line names the
schema version.  ``--config file.toml`` overrides any flag: keys are flag
names with dashes or underscores.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .benchmark import Benchmark, BenchmarkConfig, track_config
from .checkpoint import load_checkpoint, save_checkpoint
from .classspace import ClassSpace, remap_for_stage
from .metrics import ConfusionMatrix, iou_table, table_csv
from .pointcloud import load_labels, load_sequence
from .synthgen import SceneSpec, generate_sequence, standard_scene, translating_box_scene, write_sequence
from .tracker import ENTRIES_FILE, GT, Entry, TrackConfig, build_augmented_dataset, write_augmented
from .trainer import TrainConfig, base_train, novel_finetune, predict_scans, sample_few_shot

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("fslidar")

CSV_VERSION = "# fslidar-metrics v1"
ABLATE_DEFAULTS = {"gap": "5,10,15,20,25", "frames": "0,4,10,20,40", "strategy": "freeze,dynamic,lora"}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1 like every other failure
    def error(self, message):
        raise CliError(message)


# --------------------------------------------------------------------------
# plumbing

def _sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def dataset_digest(path) -> str:
    """Content hash over every file below ``path`` (relative names included)."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        h.update(str(f.relative_to(path) if f != path else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        rev = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def write_metrics(path, rows: list[dict]) -> Path:
    Path(path).write_text(CSV_VERSION + "\n" + table_csv(rows))
    return Path(path)


def read_metrics(path) -> list[dict]:
    import csv
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def write_manifest(out: Path, args, config: dict, data_paths, outputs) -> Path:
    digests = {str(p): dataset_digest(p) for p in data_paths if p is not None}
    manifest = {
        "command": args.command,
        "config": config,
        "config_digest": _sha256_json(config),
        "dataset_digest": _sha256_json(digests),
        "inputs": digests,
        "seed": args.seed,
        "revision": revision(),
        "outputs": sorted(str(Path(o).relative_to(out)) for o in outputs),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _epoch_saver(out: Path, outputs: list):
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    def save(epoch, model):
        p = ckpt_dir / f"epoch_{epoch}.ckpt"
        save_checkpoint(p, model)
        outputs.append(p)
    return save


def _history_rows(history):
    return [{k: (float(v) if k != "epoch" else int(v)) for k, v in h.items()} for h in history]


def _train_config(args, **extra) -> TrainConfig:
    kw = dict(epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr, seed=args.seed,
              strategy=args.strategy, lambda_kd=args.lambda_kd, shots=args.shots,
              min_scan_gap=args.min_gap, rank_div=args.rank_div, loss=args.loss)
    return TrainConfig(**{**kw, **extra})


def _track_config(args) -> TrackConfig:
    frames = args.track_frames
    return TrackConfig(frames_forward=frames - frames // 2, frames_backward=frames // 2, gap=args.track_gap,
                       radius=args.radius)


def _load_data(data_dir, split: str | None = None):
    """Class space plus ``{sequence: (scans, dense labels)}`` from a KITTI-style directory."""
    data_dir = Path(data_dir)
    cs = ClassSpace.load(data_dir / "classes.txt")
    seq_root = data_dir / "sequences"
    if not seq_root.is_dir():
        raise FileNotFoundError(f"{seq_root} does not exist")
    names = sorted(p.name for p in seq_root.iterdir() if p.is_dir())
    if split and split != "all":
        wanted = split.split(",")
        missing = set(wanted) - set(names)
        if missing:
            raise FileNotFoundError(f"sequences {sorted(missing)} not found in {seq_root}")
        names = wanted
    out = {}
    for name in names:
        scans, labels = load_sequence(seq_root / name)
        out[name] = (scans, [None if l is None else cs.to_dense(l) for l in labels])
    return cs, out


def _projection(args, model=None) -> dict:
    if model is not None:
        return model.projection
    return {"height": args.height, "width": args.width, "fov_up": args.fov_up, "fov_down": args.fov_down}


# --------------------------------------------------------------------------
# commands

def cmd_synth(args, out: Path):
    if args.scene:
        spec = SceneSpec.load(args.scene)
    elif args.stock == "box":
        spec = translating_box_scene(args.frames or 12, seed=args.seed)
    else:
        spec = standard_scene(args.seed, args.frames or 600, args.ego_speed)
    if args.frames:
        spec = replace(spec, num_frames=args.frames)
    frames = generate_sequence(spec)
    write_sequence(out, spec, frames)
    outputs = [p for p in out.rglob("*") if p.is_file()]
    return spec.to_dict(), [args.scene], outputs


def cmd_base_train(args, out: Path):
    cs, data = _load_data(args.data, args.split)
    scans, labels = [], []
    for seq_scans, seq_labels in data.values():
        for i in range(0, len(seq_scans), args.stride):
            if seq_labels[i] is not None:
                scans.append(seq_scans[i])
                labels.append(seq_labels[i])
    if not scans:
        raise ValueError("no labelled scans to train on")
    cfg = _train_config(args, strategy="dynamic")
    outputs = []
    model, history = base_train(scans, labels, cs, cfg, _projection(args),
                                on_epoch=_epoch_saver(out, outputs))
    final = out / "model.ckpt"
    save_checkpoint(final, model)
    outputs += [final, write_metrics(out / "metrics.csv", _history_rows(history))]
    config = {**cfg.to_dict(), "projection": _projection(args), "stride": args.stride, "split": args.split}
    return config, [args.data], outputs


def cmd_track(args, out: Path):
    cs, data = _load_data(args.data, args.split)
    if args.shots_manifest:
        shots = [(s, int(f)) for s, f in json.loads(Path(args.shots_manifest).read_text())["shots"]]
    else:
        frame_labels = {seq: {i: l for i, l in enumerate(labels) if l is not None}
                        for seq, (_, labels) in data.items()}
        shots = sorted(sample_few_shot(frame_labels, args.shots, args.min_gap, cs, args.seed, args.min_points))
    (out / "shots.json").write_text(json.dumps({"shots": shots}, indent=1) + "\n")
    gts = [(seq, pos, remap_for_stage(data[seq][1][pos], "novel", cs)) for seq, pos in shots]
    cfg = _track_config(args)
    ds = build_augmented_dataset(gts, {seq: scans for seq, (scans, _) in data.items()}, cfg, cs)
    write_augmented(out, ds, cs, args.data)
    cs.save(out / "classes.txt")
    rows = [{"entries": len(ds), "pseudo_entries": len(ds.of_kind(True)),
             "novel_ratio_gt": ds.novel_ratio(cs, False), "novel_ratio_pseudo": ds.novel_ratio(cs, True)}]
    outputs = [p for p in out.rglob("*") if p.is_file()] + [write_metrics(out / "metrics.csv", rows)]
    config = {"track": vars(cfg), "shots": shots, "m": args.shots, "min_gap": args.min_gap,
              "min_points": args.min_points}
    return config, [args.data, args.shots_manifest], outputs


def load_augmented(aug_dir, data_dir) -> tuple[ClassSpace, list[Entry]]:
    aug_dir = Path(aug_dir)
    cs = ClassSpace.load(aug_dir / "classes.txt")
    rows = json.loads((aug_dir / ENTRIES_FILE).read_text())["entries"]
    seqs = {}
    entries = []
    for r in rows:
        if r["sequence"] not in seqs:
            scans, _ = load_sequence(Path(data_dir) / "sequences" / r["sequence"], with_labels=False)
            seqs[r["sequence"]] = {s.frame_index: s for s in scans}
        scan = seqs[r["sequence"]][r["frame"]]
        labels = cs.to_dense(load_labels(aug_dir / r["file"], len(scan)))
        entries.append(Entry(scan, labels, r["provenance"], r["source_frame"], r["step"], r["gap"]))
    return cs, entries


def cmd_finetune(args, out: Path):
    if not args.base or not args.aug:
        raise ValueError("finetune needs --base and --aug")
    base = load_checkpoint(args.base)
    cs, entries = load_augmented(args.aug, args.data)
    if args.track_frames == 0:
        entries = [e for e in entries if e.provenance == GT]
    cfg = _train_config(args)
    outputs = []
    model, history = novel_finetune(base, entries, cs, cfg, on_epoch=_epoch_saver(out, outputs))
    final = out / "model.ckpt"
    save_checkpoint(final, model)
    outputs += [final, write_metrics(out / "metrics.csv", _history_rows(history))]
    config = {**cfg.to_dict(), "entries": len(entries)}
    return config, [args.base, args.aug, args.data], outputs


def cmd_eval(args, out: Path):
    cs, data = _load_data(args.data, args.split)
    model = None if args.oracle else load_checkpoint(args.ckpt) if args.ckpt else None
    if model is None and not args.oracle:
        raise ValueError("eval needs --ckpt or --oracle")
    cm = ConfusionMatrix(cs.num_classes)
    for scans, labels in data.values():
        keep = [i for i in range(0, len(labels), args.stride) if labels[i] is not None]
        gts = [labels[i] for i in keep]
        preds = gts if args.oracle else predict_scans(model, [scans[i] for i in keep])
        for g, p in zip(gts, preds):
            cm.accumulate(g, p)
    row = iou_table(cm, cs)
    outputs = [write_metrics(out / "metrics.csv", [row])]
    config = {"oracle": bool(args.oracle), "split": args.split, "stride": args.stride}
    return config, [args.ckpt, args.data], outputs


def cmd_ablate(args, out: Path):
    axis = args.axis
    raw = args.values or ABLATE_DEFAULTS[axis]
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if axis != "strategy":
        values = [int(v) for v in values]
    seeds = [int(s) for s in args.seeds.split(",")]
    bcfg = BenchmarkConfig(num_frames=args.frames or 600)
    bcfg.finetune = replace(bcfg.finetune, epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
                            lambda_kd=args.lambda_kd, shots=args.shots, min_scan_gap=args.min_gap,
                            rank_div=args.rank_div, loss=args.loss)
    bcfg.track = _track_config(args)
    base = load_checkpoint(args.base) if args.base else None
    bench = Benchmark(bcfg, base)
    outputs = []
    if base is None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        p = out / "checkpoints" / "base.ckpt"
        save_checkpoint(p, bench.base_model)
        outputs.append(p)
    rows = []
    for v in values:
        for seed in seeds:
            strategy = v if axis == "strategy" else args.strategy
            tc = bcfg.track
            if axis == "gap":
                tc = track_config(tc, gap=v)
            elif axis == "frames":
                tc = track_config(tc, frames=v)
            row, _ = bench.run(seed, strategy, tc)
            rows.append({"axis": axis, "value": v, "seed": seed, "strategy": strategy,
                         "miou": row["miou"], "miou_base": row["miou_base"], "miou_novel": row["miou_novel"]})
            log.info("%s=%s seed=%d miou=%.4f", axis, v, seed, row["miou"])
    outputs.append(write_metrics(out / "metrics.csv", rows))
    config = {"axis": axis, "values": values, "seeds": seeds, "benchmark": bcfg.to_dict(),
              "base": args.base}
    return config, [args.base], outputs


COMMANDS = {"synth": cmd_synth, "base-train": cmd_base_train, "track": cmd_track, "finetune": cmd_finetune,
            "eval": cmd_eval, "ablate": cmd_ablate}


# --------------------------------------------------------------------------
# argument parsing

def _common(p: argparse.ArgumentParser):
    d = TrainConfig()
    t = TrackConfig()
    g = p.add_argument_group("experiment")
    g.add_argument("--out", required=True, help="run directory (created)")
    g.add_argument("--config", help="TOML file whose keys override flags")
    g.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    g.add_argument("--shots", type=int, default=d.shots, help=f"annotated scans per novel class (default {d.shots})")
    g.add_argument("--min-gap", type=int, default=d.min_scan_gap,
                   help=f"minimum frame distance between chosen shots (default {d.min_scan_gap})")
    g.add_argument("--min-points", type=int, default=40, help="points a class needs for a scan to count as a shot (default 40)")
    g.add_argument("--track-gap", type=int, default=15, help="frames between emitted pseudo labels (default 15)")
    g.add_argument("--track-frames", type=int, default=t.total_frames,
                   help=f"pseudo-labelled frames per shot, split forward/backward (default {t.total_frames})")
    g.add_argument("--radius", type=float, default=t.radius, help=f"tracker match radius in metres (default {t.radius})")
    g.add_argument("--strategy", choices=("freeze", "dynamic", "lora"), default=d.strategy,
                   help=f"fine-tuning strategy (default {d.strategy})")
    g.add_argument("--loss", choices=("unbiased", "plain"), default=d.loss, help=f"novel-stage loss (default {d.loss})")
    g.add_argument("--lambda-kd", type=float, default=d.lambda_kd, help=f"distillation weight (default {d.lambda_kd})")
    g.add_argument("--rank-div", type=int, default=d.rank_div, help=f"adapter rank divisor (default {d.rank_div})")
    g.add_argument("--epochs", type=int, default=12, help="training epochs (default 12)")
    g.add_argument("--batch", type=int, default=d.batch_size, help=f"batch size (default {d.batch_size})")
    g.add_argument("--lr", type=float, default=d.learning_rate, help=f"learning rate (default {d.learning_rate})")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fslidar", description="Few-shot LiDAR segmentation with tracked pseudo labels.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic sequence in KITTI layout")
    p.add_argument("--scene", help="scene JSON (default: a stock scene)")
    p.add_argument("--stock", choices=("standard", "box"), default="standard", help="stock scene (default standard)")
    p.add_argument("--frames", type=int, default=0, help="override the frame count (default: scene's own)")
    p.add_argument("--ego-speed", type=float, default=BenchmarkConfig.ego_speed,
                   help=f"ego metres per frame for the standard scene (default {BenchmarkConfig.ego_speed})")
    _common(p)

    p = sub.add_parser("base-train", help="train the base model")
    p.add_argument("--data", required=True, help="dataset root with sequences/ and classes.txt")
    p.add_argument("--split", default="all", help="comma-separated sequence names (default all)")
    p.add_argument("--stride", type=int, default=2, help="use every n-th frame (default 2)")
    p.add_argument("--height", type=int, default=16, help="range image rows (default 16)")
    p.add_argument("--width", type=int, default=256, help="range image columns (default 256)")
    p.add_argument("--fov-up", type=float, default=3.0, help="upper field of view in degrees (default 3)")
    p.add_argument("--fov-down", type=float, default=-25.0, help="lower field of view in degrees (default -25)")
    _common(p)

    p = sub.add_parser("track", help="sample shots and build the pseudo-labelled set")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--split", default="all", help="comma-separated sequence names (default all)")
    p.add_argument("--shots-manifest", help="JSON {\"shots\": [[seq, frame], ...]} (default: sample)")
    _common(p)

    p = sub.add_parser("finetune", help="fine-tune the base model on novel classes")
    p.add_argument("--base", help="base model checkpoint")
    p.add_argument("--aug", help="output directory of the track command")
    p.add_argument("--data", required=True, help="dataset root the shots came from")
    _common(p)

    p = sub.add_parser("eval", help="per-class IoU and mIoU splits")
    p.add_argument("--ckpt", help="model checkpoint")
    p.add_argument("--oracle", action="store_true", help="predict the ground truth itself")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--split", default="all", help="comma-separated sequence names (default all)")
    p.add_argument("--stride", type=int, default=1, help="evaluate every n-th frame (default 1)")
    _common(p)

    p = sub.add_parser("ablate", help="sweep one axis of the synthetic benchmark")
    p.add_argument("--axis", choices=("gap", "frames", "strategy"), required=True, help="axis to sweep")
    p.add_argument("--values", help="comma-separated values (default: gap 5..25, frames 0..40, all strategies)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--base", help="reuse this base checkpoint instead of training one")
    p.add_argument("--frames", type=int, default=600, help="benchmark sequence length (default 600)")
    _common(p)
    return parser


def apply_config(args, parser: argparse.ArgumentParser):
    if not args.config:
        return args
    with open(args.config, "rb") as fh:
        overrides = tomllib.load(fh)
    known = vars(args)
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("command", "config"):
            raise CliError(f"unknown config key {key!r}")
        setattr(args, dest, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = apply_config(parser.parse_args(argv), parser)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        config, inputs, outputs = COMMANDS[args.command](args, out)
        write_manifest(out, args, config, [Path(p) for p in inputs if p], outputs)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"fslidar: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
