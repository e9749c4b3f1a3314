"""Command-line entry point: ``einet <subcommand> [flags]``.

Every subcommand writes only under ``--out`` and echoes its resolved
configuration to ``<out>/run.json``. ``--config FILE`` supplies defaults
(``key=value`` lines, or a previous ``run.json``); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, EINetError, InputError

DEFAULT_INPUT = 64


# ------------------------------------------------------------------ helpers

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(args, out: Path) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "out")}
    (out / "run.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _variant(args):
    from .detector import VariantConfig
    from .tpe import TemporalWindow

    cfg = VariantConfig(args.variant, TemporalWindow.parse(args.window), args.include_current_residual)
    if args.include_current_residual and not cfg.uses_tpe:
        raise ConfigError(f"--include-current-residual needs a temporal variant, not {args.variant}")
    return cfg


def _det(args):
    from .detector import DetectorConfig

    if args.input_size % 32:
        raise ConfigError(f"--input-size {args.input_size} must be divisible by 32")
    return DetectorConfig(input_size=args.input_size)


def _load_weights(path, variant):
    from .data.weights_io import load_weights
    from .detector import check_weights

    p = Path(path)
    if not p.is_file():
        raise InputError(f"weights file {p} not found")
    w = load_weights(p)
    if variant is not None:
        check_weights(w, variant)
    return w


def _write_table(out: Path, stem: str, rows) -> str:
    from .evaluate import format_csv, format_table

    text = format_table(rows)
    (out / f"{stem}.txt").write_text(text)
    (out / f"{stem}.csv").write_text(format_csv(rows))
    return text


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    from .data.synthetic import SyntheticConfig, generate_synthetic
    from .evaluate import format_table

    cfg = SyntheticConfig(regime=args.regime, num_videos=args.videos, num_test_videos=args.test_videos,
                          frames_per_video=args.frames_per_video, image_size=args.image_size,
                          objects_per_frame=(args.min_objects, args.max_objects), seed=args.seed)
    out = _out_dir(args)
    ds = generate_synthetic(cfg, out)
    _echo(args, out)
    rows = [["split", "videos", "frames", "objects"]]
    for split, ids in (("train", ds.train_ids), ("test", ds.test_ids)):
        rows.append([split, str(len({i.rsplit("_", 1)[0] for i in ids})), str(len(ids)),
                     str(sum(ds.class_counts(split).values()))])
    print(format_table(rows), end="")
    return 0


def cmd_train(args) -> int:
    from .data.voc import load_dataset
    from .data.weights_io import save_weights
    from .plotting import save_loss_curves
    from .train import TrainConfig, format_history, train_loop

    variant, det = _variant(args), _det(args)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, lr_final=args.lr_final,
                      seed=args.seed, horizontal_flip=not args.no_flip)
    data = load_dataset(args.data, args.split)
    out = _out_dir(args)
    _echo(args, out)
    res = train_loop(data, cfg, variant, det,
                     on_epoch=lambda e, l: print(f"epoch {e} loss {l:.6f}", flush=True) if args.verbose else None)
    save_weights(res.weights, out / "weights.einw")
    (out / "loss.csv").write_text(format_history(res.history))
    save_loss_curves({args.variant: res.history}, out / "loss.png")
    print(f"final loss {res.history[-1][1]:.6f}; weights -> {out / 'weights.einw'}")
    return 0


def cmd_infer(args) -> int:
    from .bench import DetectorSession
    from .data.voc import load_dataset
    from .evaluate import format_detections
    from .train import prepare_videos

    variant, det = _variant(args), _det(args)
    weights = _load_weights(args.weights, variant)
    data = load_dataset(args.data, args.split)
    out = _out_dir(args)
    _echo(args, out)
    session = DetectorSession(weights, variant, det, args.conf, args.nms_iou)
    records = session.detect_prepared(prepare_videos(data, det.input_size))
    (out / "detections.txt").write_text(format_detections(records))
    print(f"{len(records)} detections over {sum(len(v) for v in data)} frames -> {out / 'detections.txt'}")
    return 0


def cmd_eval(args) -> int:
    from .data.voc import load_dataset
    from .evaluate import coco_map, ground_truth, parse_detections

    det_path = Path(args.detections)
    if not det_path.is_file():
        raise InputError(f"detections file {det_path} not found")
    dets = parse_detections(det_path.read_text())
    gts = ground_truth(load_dataset(args.data, args.split))
    out = _out_dir(args)
    _echo(args, out)
    res = coco_map(dets, gts)
    print(_write_table(out, "eval", res.table()), end="")
    return 0


def cmd_bench(args) -> int:
    from .bench import DetectorSession, fps_benchmark, video_windows
    from .data.voc import load_dataset
    from .detector import init_detector

    variant, det = _variant(args), _det(args)
    weights = _load_weights(args.weights, variant) if args.weights else init_detector(variant, args.seed, det)
    if args.data:
        videos = load_dataset(args.data, args.split)
        if not videos:
            raise InputError("benchmark split is empty")
        frames = video_windows(videos[0])[:args.frames]
    else:
        rng = np.random.default_rng(args.seed)
        blank = {o: rng.uniform(0, 1, (3, det.input_size, det.input_size)).astype(np.float32)
                 for o in (-2, -1, 0, 1, 2)}
        frames = [(blank, blank)] * args.frames
    out = _out_dir(args)
    _echo(args, out)
    rep = fps_benchmark(DetectorSession(weights, variant, det), frames, args.warmup, args.runs)
    rows = [["variant", "input", "frames", "runs", "FPS", "std"],
            [args.variant, str(det.input_size), str(rep.frames), str(len(rep.per_run)),
             f"{rep.mean:.2f}", f"{rep.std:.2f}"]]
    print(_write_table(out, "fps", rows), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import gradient_suite

    out = _out_dir(args)
    _echo(args, out)
    reports = gradient_suite(seed=args.seed, h=args.h, tol=args.tol)
    rows = [["module", "max_rel_error", "probes", "kink_skips", "status"]]
    for name, r in reports.items():
        rows.append([name, f"{r.max_error:.3e}", str(sum(r.checked.values())), str(sum(r.skipped.values())),
                     "ok" if r.passed else "FAIL"])
    print(_write_table(out, "gradcheck", rows), end="")
    return 0 if all(r.passed for r in reports.values()) else 1


def cmd_stats(args) -> int:
    from .data.voc import load_dataset
    from .evaluate import class_stats

    splits = {s: load_dataset(args.data, s) for s in args.splits.split(",")}
    out = _out_dir(args)
    _echo(args, out)
    print(_write_table(out, "class_stats", class_stats(splits).rows()), end="")
    return 0


def cmd_dump_features(args) -> int:
    from .data.letterbox import letterbox
    from .data.voc import load_dataset
    from .diagnostics import erasure_panels, region_means
    from .plotting import save_feature_panels

    det = _det(args)
    weights = _load_weights(args.weights, None)
    videos = load_dataset(args.data, args.split)
    frames = {fr.frame_id: fr for v in videos for fr in v}
    if not frames:
        raise InputError("dataset split is empty")
    fid = args.frame or next(iter(frames))
    if fid not in frames:
        raise InputError(f"frame {fid!r} not in split {args.split}")
    fr = frames[fid]
    rgb, th = fr.load()
    panels = erasure_panels(rgb, th, weights, det.input_size, args.level)
    _, tf = letterbox(rgb, det.input_size)
    boxes = [tf.forward_box(o.box) for o in fr.annotation.objects]
    out = _out_dir(args)
    _echo(args, out)
    save_feature_panels(panels, out)
    rows = [["panel", "background_mean", "foreground_mean"]]
    rows += [[k, f"{bg:.6f}", f"{fg:.6f}"] for k, (bg, fg) in region_means(panels, boxes).items()]
    print(f"frame {fid}, level {args.level} (stride {panels.stride})")
    print(_write_table(out, "panels", rows), end="")
    return 0


def cmd_ablate(args) -> int:
    from .bench import ablation_report
    from .data.voc import load_dataset
    from .detector import TABLE_ORDER, VariantConfig
    from .plotting import save_ablation_bars, save_loss_curves
    from .tpe import TemporalWindow
    from .train import TrainConfig

    det = _det(args)
    names = args.variants.split(",") if args.variants else list(TABLE_ORDER)
    names = [n for n in TABLE_ORDER if n in names] + [n for n in names if n not in TABLE_ORDER]
    window = TemporalWindow.parse(args.window)
    variants = [VariantConfig(n, window) for n in names]
    train_v, test_v = load_dataset(args.data, "train"), load_dataset(args.data, "test")
    out = _out_dir(args)
    _echo(args, out)
    seeds = [int(s) for s in str(args.seeds).split(",")]
    per_seed = []
    for seed in seeds:
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, lr_final=args.lr_final,
                          seed=seed, horizontal_flip=not args.no_flip)
        rep = ablation_report(train_v, test_v, variants, cfg, det, fps_runs=args.runs)
        per_seed.append(rep)
        _write_table(out, f"ablation_seed{seed}", rep.table())
        save_loss_curves(rep.histories, out / f"loss_seed{seed}.png")
    rows = [["variant", "AP50", "AP50_std", "AP", "Params(M)", "MFLOPs", "FPS"]]
    ap50s, aps = [], []
    for i, n in enumerate(names):
        a50 = [r.rows[i].ap50 for r in per_seed]
        a = [r.rows[i].ap for r in per_seed]
        ap50s.append(a50)
        aps.append(float(np.mean(a)))
        first = per_seed[0].rows[i]
        rows.append([n, f"{100 * np.mean(a50):.2f}", f"{100 * np.std(a50):.2f}", f"{100 * np.mean(a):.2f}",
                     f"{first.params / 1e6:.3f}", f"{first.flops / 1e6:.2f}",
                     f"{np.mean([r.rows[i].fps for r in per_seed]):.2f}"])
    print(_write_table(out, "ablation", rows), end="")
    save_ablation_bars(names, [float(np.mean(a)) for a in ap50s], aps, out / "ablation.png",
                       errors=[float(np.std(a)) for a in ap50s])
    return 0


# ------------------------------------------------------------------ parser

def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")
    p.add_argument("--config", help="key=value file or run.json supplying defaults")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0)


def _model(p: argparse.ArgumentParser, variant: str = "full") -> None:
    from .detector import VARIANTS

    p.add_argument("--variant", default=variant, choices=VARIANTS)
    p.add_argument("--window", default="f", help="window group a-h or offsets like -1,+1 (default: f)")
    p.add_argument("--include-current-residual", action="store_true",
                   help="add the current frame to the temporal sum (non-default probe)")
    p.add_argument("--input-size", type=int, default=DEFAULT_INPUT)


def _data(p: argparse.ArgumentParser, split: str = "test", required: bool = True) -> None:
    p.add_argument("--data", required=required, help="dataset root (VOC RGBT layout)")
    p.add_argument("--split", default=split)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--lr-final", type=float, default=1e-4)
    p.add_argument("--no-flip", action="store_true", help="disable horizontal flip augmentation")


def build_parser() -> argparse.ArgumentParser:
    from .data.synthetic import REGIMES

    parser = argparse.ArgumentParser(prog="einet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic RGBT video dataset")
    _common(p, "data")
    p.add_argument("--regime", default="night", choices=REGIMES)
    p.add_argument("--videos", type=int, default=50)
    p.add_argument("--test-videos", type=int, default=12)
    p.add_argument("--frames-per-video", type=int, default=6)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=3)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one detector variant")
    _common(p, "runs/train")
    _data(p, "train")
    _model(p)
    _train_flags(p)
    p.add_argument("--verbose", action="store_true", help="print the loss after every epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write detections for a split")
    _common(p, "runs/infer")
    _data(p)
    _model(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--conf", type=float, default=0.01)
    p.add_argument("--nms-iou", type=float, default=0.65)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="AP50 / AP of a detections file")
    _common(p, "runs/eval")
    _data(p)
    p.add_argument("--detections", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="end-to-end frames per second")
    _common(p, "runs/bench")
    _data(p, required=False)
    _model(p)
    p.add_argument("--weights")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--runs", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every module")
    _common(p, "runs/gradcheck")
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("stats", help="per-class object counts per split")
    _common(p, "runs/stats")
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default="train,test")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("dump-features", help="write noise-erasure feature panels for one frame")
    _common(p, "runs/features")
    _data(p)
    p.add_argument("--input-size", type=int, default=DEFAULT_INPUT)
    p.add_argument("--weights", required=True, help="weights holding both rgb and t backbones")
    p.add_argument("--frame", help="frame id (default: first frame of the split)")
    p.add_argument("--level", type=int, default=0)
    p.set_defaults(func=cmd_dump_features)

    p = sub.add_parser("ablate", help="train and score several variants over seeds")
    _common(p, "runs/ablate")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", default="", help="comma list (default: all table rows)")
    p.add_argument("--seeds", default="0")
    p.add_argument("--window", default="f")
    p.add_argument("--input-size", type=int, default=DEFAULT_INPUT)
    p.add_argument("--runs", type=int, default=3, help="FPS timing runs")
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def _config_tokens(sub: argparse.ArgumentParser, path: str) -> list[str]:
    """Translate a config file into flag tokens placed before the real flags."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file {p} not found")
    text = p.read_text()
    if text.lstrip().startswith("{"):
        try:
            items = json.loads(text).items()
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    else:
        items = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{p}:{n}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            items.append((k.strip(), v.strip()))
    actions = {a.dest: a for a in sub._actions}
    tokens = []
    for key, value in items:
        dest = key.replace("-", "_")
        if dest in ("command", "config", "out"):
            continue
        act = actions.get(dest)
        if act is None:
            raise ConfigError(f"{p}: unknown setting {key!r} for this subcommand")
        flag = act.option_strings[-1] if act.option_strings else None
        if flag is None:
            continue
        if act.nargs == 0:
            on = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
            if on:
                tokens.append(flag)
        elif value is not None:
            tokens += [flag, str(value)]
    return tokens


def _config_path(argv: Sequence[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        # splice config-file settings in before parsing so they can satisfy required flags
        subs = parser._subparsers._group_actions[0].choices
        cmd_at = next((i for i, a in enumerate(argv) if a in subs), None)
        config = _config_path(argv)
        if cmd_at is not None and config is not None:
            argv = argv[:cmd_at + 1] + _config_tokens(subs[argv[cmd_at]], config) + argv[cmd_at + 1:]
        args = parser.parse_args(argv)
        with threadpool_limits(limits=max(1, args.threads)):
            return args.func(args)
    except EINetError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
