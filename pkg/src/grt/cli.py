"""``grt`` command line: synth, train, eval, predict, gradcheck, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 data or checkpoint
error, 3 failed check (gradient check, ablation direction).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

from grt import checkpoint as ckpt
from grt.backbone import build, predict
from grt.config import ConfigError, RunConfig, load as load_config
from grt.data import DataError, load_dataset, read_scan_file, synth_generate, write_dataset
from grt.metrics import EvaluationReport
from grt.training import TrainState, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

# RGB per class for the colored point dump
COLORS = ((160, 160, 160), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (145, 30, 180))

VAL_SEED_OFFSET = 10_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.threads is not None:
        cfg.run.threads = args.threads
    if cfg.run.threads < 1:
        raise ConfigError("threads must be positive")
    torch.set_num_threads(cfg.run.threads)
    return cfg


def _datasets(cfg: RunConfig):
    """Training and validation clouds: from disk when paths are set, else synthesized."""
    if cfg.data.train:
        train_clouds = load_dataset(cfg.data.train)
    else:
        train_clouds = synth_generate(cfg.synth, cfg.run.seed)
    if cfg.data.val:
        val_clouds = load_dataset(cfg.data.val)
    elif cfg.data.val_scenes:
        val_synth = dataclasses.replace(cfg.synth, n_scenes=cfg.data.val_scenes)
        val_clouds = synth_generate(val_synth, cfg.run.seed + VAL_SEED_OFFSET)
    else:
        val_clouds = []
    return train_clouds, val_clouds


# -- commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _run_config(args)
    synth = cfg.synth
    if args.n_scenes is not None:
        synth = dataclasses.replace(synth, n_scenes=args.n_scenes)
    clouds = synth_generate(synth, cfg.run.seed)
    echo = {"synth": synth.to_dict(), "seed": cfg.run.seed}
    path = write_dataset(args.out, clouds, echo)
    print(f"wrote {len(clouds)} scenes to {path.parent}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_clouds, val_clouds = _datasets(cfg)
    state = None
    if args.resume:
        model, raw = ckpt.load_model(args.resume, expect_classes=cfg.model.num_classes)
        if raw.config != cfg.model.to_dict():
            raise ConfigError(f"{args.resume} was trained with a different model config")
        extra = raw.extra
        state = TrainState(epoch=int(extra.get("epoch", 0)), momentum=raw.momentum(),
                           best_miou=float(extra.get("best_miou", -1.0)),
                           best_epoch=int(extra.get("best_epoch", -1)),
                           best_params=raw.group("best") or None,
                           trace=list(extra.get("trace", [])))
        _log(f"resuming at epoch {state.epoch}")
    else:
        model = build(cfg.model, seed=cfg.run.seed)
        if args.double:
            model = model.double()
    echo = cfg.to_dict()
    (out / "config.ini").write_text(cfg.to_ini())
    trace_path = out / "trace.jsonl"

    def on_epoch(record, st):
        _log(f"epoch {record['epoch']}: lr {record['lr']:.5f} loss {record['train_loss']:.4f}"
             + ("" if record["val_miou"] is None else f" val mIoU {record['val_miou']:.4f}"))
        extra = {"epoch": st.epoch, "best_miou": st.best_miou, "best_epoch": st.best_epoch,
                 "trace": st.trace, "run_config": echo}
        ckpt.save(out / "last.ckpt", ckpt.model_checkpoint(model, extra, st.momentum, best=st.best_params))

    state = train(model, train_clouds, val_clouds, cfg.optim, cfg.loss, cfg.augment,
                  seed=cfg.run.seed, state=state, eval_every=cfg.run.eval_every, on_epoch=on_epoch)
    trace_path.write_text("".join(json.dumps(r) + "\n" for r in state.trace))
    best_extra = {"epoch": state.best_epoch + 1, "best_miou": state.best_miou, "run_config": echo}
    ckpt.save(out / "best.ckpt", ckpt.model_checkpoint(model, best_extra, params=state.best_params))
    print(f"trained {state.epoch} epochs; best val mIoU {state.best_miou:.4f} at epoch {state.best_epoch}; "
          f"checkpoints in {out}")
    return EXIT_OK


def _load_for_inference(args, expect_classes=None):
    model, _ = ckpt.load_model(args.checkpoint, expect_classes=expect_classes)
    return model.double() if args.double else model


def cmd_eval(args) -> int:
    clouds = load_dataset(args.data)
    labels_max = max(int(c.label.max()) for c in clouds)
    model = _load_for_inference(args)
    if labels_max >= model.config.num_classes:
        raise DataError(f"data has label {labels_max}, checkpoint predicts {model.config.num_classes} classes")
    report = EvaluationReport.from_confusion(evaluate(model, clouds))
    print(report.to_json(checkpoint=str(args.checkpoint)) if args.json else report.to_text())
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_for_inference(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in map(Path, args.scans):
        cloud = read_scan_file(path)
        if not len(cloud):
            raise DataError(f"{path}: no detections")
        padded = cloud.padded(model.config.min_points)
        with torch.no_grad():
            labels = predict(model(padded.features, padded.coords))[:len(cloud)]
        (out / f"{path.stem}.labels").write_text("".join(f"{int(c)}\n" for c in labels))
        if args.colored:
            rows = [f"{x!r} {y!r} 0.0 {r} {g} {b}\n" for x, y, (r, g, b)
                    in zip(cloud.x.tolist(), cloud.y.tolist(), (COLORS[c % len(COLORS)] for c in labels))]
            (out / f"{path.stem}.xyzrgb").write_text("".join(rows))
        print(f"{path}: {len(labels)} points -> {out / (path.stem + '.labels')}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from grt.gradcheck import SCOPES, run_suite

    scopes = args.scope or list(SCOPES)
    result = run_suite(scopes, seeds=range(args.seeds), tolerance=args.tolerance,
                       fault=args.inject_fault, log=_log if args.verbose else None)
    print(result.to_text())
    for line in result.failures[:20]:
        print(f"  {line}")
    return EXIT_OK if result.passed else EXIT_CHECK


def cmd_ablate(args) -> int:
    from grt.ablation import run_ablation

    cfg = _run_config(args)
    train_clouds, val_clouds = _datasets(cfg)
    if not val_clouds:
        raise ConfigError("ablation needs validation scenes: set [data] val or val_scenes")
    seeds = [int(s) for s in args.seeds.split(",")]
    report = run_ablation(cfg.model, train_clouds, val_clouds, cfg.optim, cfg.loss, cfg.augment,
                          seeds=seeds, log=_log)
    text = report.to_text()
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.txt").write_text(text + "\n")
        (out / "ablation.json").write_text(json.dumps({**report.to_dict(), "run_config": cfg.to_dict()},
                                                      indent=2) + "\n")
    ok = report.component_direction()[0] and report.feature_direction()[0]
    return EXIT_OK if ok else EXIT_CHECK


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--threads", type=int, help="torch thread count (default 1)")
    common.add_argument("--double", action="store_true", help="run the model in float64")

    parser = _Parser(prog="grt", description="Gaussian Radar Transformer tools")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--out", help="output directory (default [run] out_dir)")
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory, manifest or scan file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="label every point of scan files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--colored", action="store_true", help="also write x y z r g b dumps")
    p.add_argument("scans", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--scope", action="append", choices=["primitives", "layers", "losses", "model"])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--inject-fault", choices=["fully_connected", "layer_norm", "gelu",
                                              "gaussian_activation", "softmax"])
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common], help="component and feature ablations")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated model seeds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads = args.threads if args.threads is not None else 1
        if threads < 1:
            raise UsageError("--threads must be positive")
        torch.set_num_threads(threads)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ckpt.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining validation failures come from user-supplied values
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
