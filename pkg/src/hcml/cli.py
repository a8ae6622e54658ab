"""Command-line entry point: gradcheck, gen, train, eval, export-flow.

Every hyperparameter lives in a plain-text ``key = value`` run config. Flags
given as ``--set key=value`` override the file. The resolved config is
echoed into the run directory as ``resolved.cfg``.

Exit codes: 0 success, 1 check failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gradcheck
from .autodiff import format_reports
from .backbone import MotionNetwork, NetworkConfig
from .contrastive import ContrastiveConfig
from .dataio import (FormatError, SyntheticSpec, generate_split, load_checkpoint, load_dataset,
                     save_checkpoint, save_dataset)
from .flow_head import CharbonnierParams
from .flowviz import export_flow
from .trainer import (PROGRESSIVE, STAGES, LossWeights, StageOrderError, TrainConfig, Trainer,
                      UndefinedScoreError, efficacy_score, knn_eval, linear_probe, write_metrics_csv)

log = logging.getLogger("hcml")

__all__ = ["RunConfig", "ConfigError", "KEYS", "main", "build_trainer"]

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    """Unknown key, unparsable value or invalid combination in a run config."""


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(","))


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class Key:
    parse: object
    default: str
    doc: str


# name -> (parser, default as written in a config file, description)
KEYS: dict[str, Key] = {
    # synthetic data
    "data.height": Key(int, "32", "clip height in pixels"),
    "data.width": Key(int, "32", "clip width in pixels"),
    "data.frames": Key(int, "8", "frames per clip T"),
    "data.num_classes": Key(int, "6", "number of motion classes"),
    "data.speed": Key(lambda s: tuple(float(v) for v in s.split(",")), "0.75,1.0", "object speed range, px/frame"),
    "data.radius": Key(lambda s: tuple(float(v) for v in s.split(",")), "2.5,4.0", "object radius range, px"),
    "data.orbit_radius": Key(lambda s: tuple(float(v) for v in s.split(",")), "3.0,5.0", "orbit radius range, px"),
    "data.background_sigma": Key(float, "0.15", "background texture contrast"),
    "data.noise_sigma": Key(float, "0.02", "per-frame pixel noise"),
    "data.seed": Key(int, "0", "dataset seed"),
    "data.train": Key(int, "2000", "training clips"),
    "data.test": Key(int, "500", "test clips"),
    # network
    "model.variant": Key(str, "full", "full | pmb | baseline"),
    "model.seed": Key(int, "0", "parameter init and training seed"),
    "model.channels": Key(_ints, "16,32,64", "backbone channels per level"),
    "model.motion_channels": Key(_ints, "16,16,32", "motion feature channels per level"),
    "model.beta": Key(_ints, "1,4,4", "channel reduction factor per level"),
    "model.max_displacement": Key(_ints, "1,2,2", "cost-volume max displacement d per level"),
    "model.cv_stride": Key(_ints, "1,1,1", "cost-volume stride s per level"),
    "model.flow_growth": Key(int, "8", "flow estimator dense growth"),
    "model.match_temperature": Key(float, "0.003", "softmax temperature of the matching prior"),
    "model.predictor_hidden": Key(int, "64", "predictor MLP hidden width"),
    # contrastive
    "contrastive.temperature": Key(float, "0.1", "InfoNCE temperature tau"),
    "contrastive.locations": Key(int, "16", "sampled locations per clip N"),
    "contrastive.steps": Key(_ints, "1,2,3", "prediction steps delta"),
    "contrastive.detach_targets": Key(_bool, "true", "stop-gradient on lower-level targets in joint training"),
    # losses
    "loss.lambda": Key(float, "15", "reconstruction weight in the joint loss"),
    "loss.gamma1": Key(float, "0.25", "level-1 contrastive weight"),
    "loss.gamma2": Key(float, "0.25", "level-2 contrastive weight"),
    "loss.zeta": Key(float, "0.02", "smoothness weight inside reconstruction"),
    "loss.charbonnier_alpha": Key(float, "0.45", "Charbonnier exponent"),
    "loss.charbonnier_eps": Key(float, "0.001", "Charbonnier epsilon"),
    # schedule
    "train.batch_size": Key(int, "8", "clips per SGD step B"),
    "train.momentum": Key(float, "0.9", "SGD momentum"),
    "recon.epochs": Key(int, "4", "reconstruction stage epochs"),
    "recon.lr": Key(float, "0.1", "reconstruction stage base lr"),
    "recon.warmup": Key(int, "1", "reconstruction stage warmup epochs"),
    "level1.epochs": Key(int, "3", "level-1 stage epochs"),
    "level1.lr": Key(float, "0.01", "level-1 stage base lr"),
    "level1.warmup": Key(int, "1", "level-1 stage warmup epochs"),
    "level2.epochs": Key(int, "3", "level-2 stage epochs"),
    "level2.lr": Key(float, "0.03", "level-2 stage base lr"),
    "level2.warmup": Key(int, "1", "level-2 stage warmup epochs"),
    "joint.epochs": Key(int, "10", "joint stage epochs"),
    "joint.lr": Key(float, "0.03", "joint stage base lr"),
    "joint.warmup": Key(int, "1", "joint stage warmup epochs"),
    # evaluation
    "eval.knn_k": Key(int, "5", "neighbours for the cosine KNN probe"),
    "eval.probe_epochs": Key(int, "200", "linear probe full-batch epochs"),
    "eval.probe_lr": Key(float, "0.1", "linear probe lr"),
    "gradcheck.instances": Key(int, "10", "random instances per op"),
    "gradcheck.seed": Key(int, "0", "gradcheck seed"),
    # paths
    "run_dir": Key(str, "runs/default", "output directory for data, checkpoints and metrics"),
}


class RunConfig:
    """Parsed key=value config; every key in :data:`KEYS` has a value."""

    def __init__(self, raw: dict[str, str] | None = None):
        self.raw = {k: v.default for k, v in KEYS.items()}
        self.values: dict[str, object] = {}
        for k, v in (raw or {}).items():
            self.set(k, v)
        for k in KEYS:
            if k not in self.values:
                self.set(k, self.raw[k])

    def set(self, key: str, text: str) -> None:
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        text = text.strip()
        try:
            value = KEYS[key].parse(text)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {text!r} ({e})") from None
        self.raw[key], self.values[key] = text, value

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            k, v = line.split("=", 1)
            if k.strip() in raw:
                raise ConfigError(f"line {lineno}: duplicate key {k.strip()!r}")
            raw[k.strip()] = v
        return cls(raw)

    @classmethod
    def load(cls, path, overrides=()) -> "RunConfig":
        cfg = cls.parse(Path(path).read_text()) if path else cls()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            log.info("override %s = %s", k.strip(), v.strip())
            cfg.set(k, v)
        cfg.validate()
        return cfg

    def dump(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in KEYS)

    def validate(self) -> None:
        if self["model.variant"] not in ("full", "pmb", "baseline"):
            raise ConfigError(f"model.variant must be full, pmb or baseline, got {self['model.variant']!r}")
        try:
            self.spec(), self.network(), self.weights(), self.contrastive()
            for s in STAGES:
                self.schedule(s)
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None

    # -- typed views ---------------------------------------------------------

    def spec(self) -> SyntheticSpec:
        return SyntheticSpec(height=self["data.height"], width=self["data.width"],
                             frames=self["data.frames"], num_classes=self["data.num_classes"],
                             speed=self["data.speed"], radius=self["data.radius"],
                             orbit_radius=self["data.orbit_radius"],
                             background_sigma=self["data.background_sigma"],
                             noise_sigma=self["data.noise_sigma"], seed=self["data.seed"])

    def network(self) -> NetworkConfig:
        return NetworkConfig(num_classes=self["data.num_classes"], channels=self["model.channels"],
                             motion_channels=self["model.motion_channels"], beta=self["model.beta"],
                             max_displacement=self["model.max_displacement"],
                             cv_stride=self["model.cv_stride"], flow_growth=self["model.flow_growth"],
                             match_temperature=self["model.match_temperature"],
                             predictor_hidden=self["model.predictor_hidden"],
                             steps=self["contrastive.steps"])

    def weights(self) -> LossWeights:
        if self["model.variant"] != "full":
            return LossWeights(reconstruct=0.0, contrastive=(0.0, 0.0), zeta=self["loss.zeta"])
        return LossWeights(reconstruct=self["loss.lambda"],
                           contrastive=(self["loss.gamma1"], self["loss.gamma2"]), zeta=self["loss.zeta"])

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(temperature=self["contrastive.temperature"],
                                 locations=self["contrastive.locations"],
                                 steps=self["contrastive.steps"], hidden=self["model.predictor_hidden"])

    def charbonnier(self) -> CharbonnierParams:
        return CharbonnierParams(self["loss.charbonnier_alpha"], self["loss.charbonnier_eps"])

    def schedule(self, stage: str) -> TrainConfig:
        return TrainConfig(lr=self[f"{stage}.lr"], warmup_epochs=self[f"{stage}.warmup"],
                           epochs=self[f"{stage}.epochs"], batch_size=self["train.batch_size"],
                           momentum=self["train.momentum"], seed=self["model.seed"])


def build_trainer(cfg: RunConfig) -> Trainer:
    net = MotionNetwork(cfg.network(), seed=cfg["model.seed"], motion=cfg["model.variant"] != "baseline")
    return Trainer(net, weights=cfg.weights(), contrastive=cfg.contrastive(),
                   charbonnier=cfg.charbonnier(), detach_targets=cfg["contrastive.detach_targets"],
                   seed=cfg["model.seed"])


# --------------------------------------------------------------------------
# commands


def _run_dir(cfg: RunConfig) -> Path:
    d = Path(cfg["run_dir"])
    d.mkdir(parents=True, exist_ok=True)
    (d / "resolved.cfg").write_text(cfg.dump())
    return d


def _load_data(run_dir: Path, which: str):
    path = run_dir / f"{which}.ds"
    if not path.exists():
        raise StageOrderError(f"{path} not found; run `gen` first")
    return load_dataset(path.read_bytes())


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    t0 = time.process_time()
    reports = gradcheck.run_suite(instances=cfg["gradcheck.instances"], seed=cfg["gradcheck.seed"],
                                  names=args.ops or None)
    print(format_reports(reports))
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports)} ops, {len(reports) - len(failed)} passed, "
          f"{time.process_time() - t0:.1f}s CPU")
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_FAIL
    return EXIT_OK


def cmd_gen(cfg: RunConfig, args) -> int:
    run_dir = _run_dir(cfg)
    tr, te = generate_split(cfg.spec(), cfg["data.train"], cfg["data.test"])
    (run_dir / "train.ds").write_bytes(save_dataset(tr))
    (run_dir / "test.ds").write_bytes(save_dataset(te))
    print(f"train {len(tr)} clips sha256 {tr.checksum()[:16]}")
    print(f"test {len(te)} clips sha256 {te.checksum()[:16]}")
    return EXIT_OK


def _stage_plan(cfg: RunConfig, stage: str) -> list[str]:
    if stage == "all":
        return list(STAGES) if cfg["model.variant"] == "full" else ["joint"]
    if stage in PROGRESSIVE and cfg["model.variant"] != "full":
        raise StageOrderError(f"stage {stage} only applies to model.variant=full")
    return [stage]


def _previous(cfg: RunConfig, stage: str) -> str | None:
    if cfg["model.variant"] != "full":
        return None
    order = list(STAGES)
    i = order.index(stage)
    return order[i - 1] if i > 0 else None


def _resume_or_start(trainer: Trainer, run_dir: Path, cfg: RunConfig, stage: str, resume: bool) -> int:
    """Load the state this stage starts from; returns the first epoch to run."""
    partial = run_dir / f"{stage}.partial.ck"
    if resume and partial.exists():
        trainer.load(partial)
        if trainer.state.stage != stage:
            raise StageOrderError(f"{partial} holds stage {trainer.state.stage!r}, not {stage!r}")
        return trainer.state.epoch
    prev = _previous(cfg, stage)
    if prev is None:
        return 0
    path = run_dir / f"{prev}.ck"
    if not path.exists():
        raise StageOrderError(f"stage {stage} needs {path} from stage {prev}; run it first")
    trainer.load(path)
    if prev not in trainer.state.completed:
        raise StageOrderError(f"{path} is not a completed {prev} checkpoint")
    return 0


def _save(trainer: Trainer, path: Path, cfg: RunConfig) -> None:
    ck = trainer.checkpoint()
    ck.meta["config"] = cfg.dump()
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(save_checkpoint(ck))
    tmp.replace(path)


def cmd_train(cfg: RunConfig, args) -> int:
    run_dir = _run_dir(cfg)
    plan = _stage_plan(cfg, args.stage)
    train = _load_data(run_dir, "train")
    test = _load_data(run_dir, "test")
    metrics = run_dir / "metrics.csv"
    if args.stage == "all" and not args.resume and metrics.exists():
        metrics.unlink()
    trainer = build_trainer(cfg)
    fresh = True       # trainer still holds its initial parameters
    for stage in plan:
        partial = run_dir / f"{stage}.partial.ck"
        if args.resume and len(plan) > 1 and (run_dir / f"{stage}.ck").exists() and not partial.exists():
            continue       # finished in an earlier invocation
        if fresh or args.resume:
            start = _resume_or_start(trainer, run_dir, cfg, stage, args.resume)
        else:
            start = 0
        fresh = False
        sched = cfg.schedule(stage)
        stop = sched.epochs if args.stop_epoch is None else min(args.stop_epoch, sched.epochs)

        def on_epoch(row, stage=stage, partial=partial):
            write_metrics_csv([row], metrics, append=True)
            _save(trainer, partial, cfg)

        trainer.train_stage(stage, train, sched, start_epoch=start, stop_epoch=stop, on_epoch=on_epoch)
        if stop < sched.epochs:
            print(f"{stage}: stopped after epoch {stop}; resume with --resume")
            return EXIT_OK
        _save(trainer, run_dir / f"{stage}.ck", cfg)
        partial.unlink(missing_ok=True)
        print(f"{stage}: done, {_stage_summary(trainer, stage, test, cfg)}")
    return EXIT_OK


def _stage_summary(trainer: Trainer, stage: str, test, cfg: RunConfig) -> str:
    if stage == "recon":
        return f"test EPE {trainer.flow_epe(test):.4f}"
    if stage in ("level1", "level2"):
        level = int(stage[-1])
        acc, counts = trainer.retrieval_accuracy(test, level, cfg["train.batch_size"])
        return (f"held-out retrieval {acc:.4f} (chance {1 / counts['candidates']:.5f}), "
                f"negatives {counts}")
    return f"test accuracy {100 * trainer.accuracy(test):.2f}%"


def _trainer_from(path: Path) -> Trainer:
    ck = load_checkpoint(Path(path).read_bytes())
    if "config" not in ck.meta:
        raise FormatError(f"{path} carries no run config")
    trainer = build_trainer(RunConfig.parse(ck.meta["config"]))
    trainer.restore(ck)
    return trainer


def cmd_eval(cfg: RunConfig, args) -> int:
    run_dir = _run_dir(cfg)
    train, test = _load_data(run_dir, "train"), _load_data(run_dir, "test")
    paths = args.checkpoint or [run_dir / "joint.ck"]
    status = EXIT_OK
    scores = {}
    for path in paths:
        trainer = _trainer_from(path)
        if not trainer.net.motion:
            print(f"{path}: baseline network has no motion features")
            status = EXIT_FAIL
            continue
        for level in args.levels:
            ftr = trainer.motion_features(train.clips, level)
            fte = trainer.motion_features(test.clips, level)
            if args.probe == "knn":
                acc = knn_eval(ftr, train.labels, fte, test.labels, cfg["eval.knn_k"])
                print(f"{path} level {level}: knn k={cfg['eval.knn_k']} accuracy {acc:.2f}%")
                continue
            a_tr, a_te = linear_probe(ftr, train.labels, fte, test.labels, epochs=cfg["eval.probe_epochs"],
                                      lr=cfg["eval.probe_lr"], num_classes=cfg["data.num_classes"],
                                      seed=cfg["model.seed"])
            line = f"{path} level {level}: probe train {a_tr:.2f}% test {a_te:.2f}%"
            if args.probe == "efficacy":
                try:
                    scores[(str(path), level)] = efficacy_score(a_tr, a_te)
                    line += f" efficacy {scores[(str(path), level)]:.4f}"
                except UndefinedScoreError:
                    line += " efficacy undefined"
                    status = EXIT_FAIL
            print(line)
    return status


def cmd_export_flow(cfg: RunConfig, args) -> int:
    if args.constant is not None:
        u, v = args.constant
        h, w = args.size
        flow = np.stack([np.full((h, w), u), np.full((h, w), v)])
    else:
        run_dir = _run_dir(cfg)
        data = _load_data(run_dir, args.split)
        if not 0 <= args.index < len(data):
            raise ConfigError(f"--index {args.index} outside [0, {len(data)})")
        if args.ground_truth:
            field = data.flow[args.index]
        else:
            path = args.checkpoint or run_dir / "recon.ck"
            trainer = _trainer_from(path)
            if not trainer.net.motion:
                raise ConfigError("baseline network estimates no flow")
            field = trainer.predict_flow(data.clips[args.index: args.index + 1])[0]
        if not 0 <= args.frame < field.shape[1]:
            raise ConfigError(f"--frame {args.frame} outside [0, {field.shape[1]})")
        flow = field[:, args.frame]
    export_flow(args.out, flow)
    print(f"wrote {args.out} ({flow.shape[1]}x{flow.shape[2]})")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _keys_epilog() -> str:
    width = max(len(k) for k in KEYS)
    lines = ["config keys (key = default: description):"]
    lines += [f"  {k:<{width}} = {v.default}: {v.doc}" for k, v in KEYS.items()]
    lines.append("environment: HCML_THREADS caps BLAS worker threads (default 1)")
    return "\n".join(lines)


def _pair(typ):
    def parse(s):
        a, b = s.split(",")
        return typ(a), typ(b)
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="key = value run config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch metrics")
    p = argparse.ArgumentParser(prog="hcml", description="Hierarchical contrastive motion learning toolkit",
                                epilog=_keys_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    g = sub.add_parser("gradcheck", parents=[common], help="certify every differentiable op",
                       epilog=_keys_epilog(), formatter_class=fmt)
    g.add_argument("ops", nargs="*", help="subset of registered ops (default all)")
    g.set_defaults(func=cmd_gradcheck)

    g = sub.add_parser("gen", parents=[common], help="generate the synthetic train/test sets",
                       epilog=_keys_epilog(), formatter_class=fmt)
    g.set_defaults(func=cmd_gen)

    g = sub.add_parser("train", parents=[common], help="run one training stage or all of them",
                       epilog=_keys_epilog(), formatter_class=fmt)
    g.add_argument("--stage", required=True, choices=[*STAGES, "all"])
    g.add_argument("--resume", action="store_true", help="continue from <stage>.partial.ck")
    g.add_argument("--stop-epoch", type=int, help="stop after this many epochs of the stage")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", parents=[common], help="probe motion features of checkpoints",
                       epilog=_keys_epilog(), formatter_class=fmt)
    g.add_argument("probe", choices=["probe", "knn", "efficacy"])
    g.add_argument("--checkpoint", action="append", type=Path, help="checkpoint(s), default run_dir/joint.ck")
    g.add_argument("--levels", type=_ints, default=(1, 2), help="motion levels, e.g. 1,2")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("export-flow", parents=[common], help="render a flow field as a PPM image",
                       epilog=_keys_epilog(), formatter_class=fmt)
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--checkpoint", type=Path, help="default run_dir/recon.ck")
    g.add_argument("--split", choices=["train", "test"], default="test")
    g.add_argument("--index", type=int, default=0, help="clip index")
    g.add_argument("--frame", type=int, default=0, help="frame pair index")
    g.add_argument("--ground-truth", action="store_true", help="export the dataset flow instead")
    g.add_argument("--constant", type=_pair(float), metavar="U,V", help="export a constant flow field")
    g.add_argument("--size", type=_pair(int), default=(32, 32), metavar="H,W", help="size for --constant")
    g.set_defaults(func=cmd_export_flow)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.set)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    threads = int(os.environ.get("HCML_THREADS", "1"))
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=max(threads, 1)):
        try:
            return args.func(cfg, args)
        except StageOrderError as e:
            print(f"refused: {e}", file=sys.stderr)
            return EXIT_USAGE
        except (ConfigError, FormatError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
