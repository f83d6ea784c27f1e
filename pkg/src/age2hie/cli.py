"""Command-line front-end for the full pipeline.

One flat key=value RunConfig drives every subcommand; flags mirror config
keys one to one and win over the file, which wins over built-in defaults.
Every run writes its fully-resolved config next to its artifacts, so any
output directory can be reproduced with --config alone.  User errors exit
with status 1 and a single diagnostic line, never a traceback.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from age2hie.data import (
    DataError,
    load_manifest,
    synth_age_dataset,
    synth_hie_dataset,
    write_dataset,
)
from age2hie.evaluate import (
    ArmSpec,
    EvalError,
    ablation,
    cross_site,
    cross_validate,
    format_ablation,
    format_table,
    format_text,
)
from age2hie.models import ModelConfig
from age2hie.optim import (
    finetune_schedule,
    pretrain_schedule,
    refine_schedule,
    scratch_schedule,
)
from age2hie.pipeline import (
    PipelineError,
    finetune,
    load_checkpoint,
    predict,
    pretrain,
    refine,
    save_checkpoint,
    train_scratch,
)

OUT_ENV_VAR = "AGE2HIE_OUT"

# (field, type, default) — also the serialization order of run_config.txt
FIELD_SPECS = (
    ("variant", str, "resnet18"),
    ("width", int, 64),
    ("in_channels", int, 2),
    ("pretrain_epochs", int, 80),
    ("refine_epochs", int, 100),
    ("finetune_epochs", int, 100),
    ("pretrain_lr", float, 0.001),
    ("refine_lr", float, 0.001),
    ("finetune_lr", float, 0.0005),
    ("batch", int, 16),
    ("n", int, 100),
    ("dims", str, "16"),
    ("seed", int, 0),
    ("seeds", str, ""),
    ("site_mix", float, 1.0),
    ("site_gain", float, 1.0),
    ("site_offset", float, 0.0),
    ("k", int, 5),
    ("arm", str, "transfer"),
    ("train_site", str, "SITE_A"),
    ("test_site", str, "SITE_B"),
    ("variants", str, "resnet18,resnet34,resnet50"),
    ("jobs", int, 1),
    ("out", str, ""),
    ("data", str, ""),
    ("pretrained", str, ""),
    ("checkpoint", str, ""),
)


class CliError(Exception):
    """User-facing argument or config problem; rendered as one line."""


@dataclass
class RunConfig:
    variant: str
    width: int
    in_channels: int
    pretrain_epochs: int
    refine_epochs: int
    finetune_epochs: int
    pretrain_lr: float
    refine_lr: float
    finetune_lr: float
    batch: int
    n: int
    dims: str
    seed: int
    seeds: str
    site_mix: float
    site_gain: float
    site_offset: float
    k: int
    arm: str
    train_site: str
    test_site: str
    variants: str
    jobs: int
    out: str
    data: str
    pretrained: str
    checkpoint: str

    def dims_tuple(self) -> tuple:
        parts = self.dims.split(",")
        try:
            values = [int(p) for p in parts]
        except ValueError:
            raise CliError(f"dims must be an integer or D,H,W, got {self.dims!r}")
        if len(values) == 1:
            values = values * 3
        if len(values) != 3:
            raise CliError(f"dims must name one or three extents, got {self.dims!r}")
        return tuple(values)

    def seed_list(self) -> list:
        if not self.seeds:
            return [self.seed]
        try:
            return [int(s) for s in self.seeds.split(",")]
        except ValueError:
            raise CliError(f"seeds must be a comma list of integers, "
                           f"got {self.seeds!r}")

    def variant_list(self) -> list:
        return [v for v in self.variants.split(",") if v]

    def model_config(self, out_dim: int) -> ModelConfig:
        return ModelConfig(variant=self.variant, in_channels=self.in_channels,
                           out_dim=out_dim, width=self.width)


def parse_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().split("\n"), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise CliError(f"{path}: line {lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return values


def merged_config(args) -> RunConfig:
    file_vals = {}
    if getattr(args, "config", None):
        file_vals = parse_config_file(args.config)
    known = {name for name, _, _ in FIELD_SPECS}
    unknown = sorted(set(file_vals) - known)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    for name, typ, default in FIELD_SPECS:
        value = default
        if name in file_vals:
            try:
                value = typ(file_vals[name])
            except ValueError:
                raise CliError(f"config key {name} needs a {typ.__name__}, "
                               f"got {file_vals[name]!r}")
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            value = flag_value
        kwargs[name] = value
    cfg = RunConfig(**kwargs)
    if not cfg.out:
        cfg.out = os.environ.get(OUT_ENV_VAR, "") or "."
    return cfg


def write_run_config(cfg: RunConfig, outdir: Path) -> None:
    lines = [f"{name}={getattr(cfg, name)}" for name, _, _ in FIELD_SPECS]
    (outdir / "run_config.txt").write_text("\n".join(lines) + "\n", newline="\n")


def ensure_outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_config(cfg, out)
    return out


def _require(cfg: RunConfig, field: str, flag: str) -> str:
    value = getattr(cfg, field)
    if not value:
        raise CliError(f"{flag} is required for this command")
    return value


def _load_data(cfg: RunConfig, task: str):
    manifest = _require(cfg, "data", "--data")
    return load_manifest(manifest, task)


def _arm_spec(cfg: RunConfig) -> ArmSpec:
    if cfg.arm == "transfer":
        path = _require(cfg, "pretrained", "--pretrained")
        return ArmSpec(arm="transfer", pretrained=load_checkpoint(path),
                       refine_epochs=cfg.refine_epochs,
                       finetune_epochs=cfg.finetune_epochs, batch=cfg.batch)
    if cfg.arm == "scratch":
        return ArmSpec(arm="scratch", config=cfg.model_config(out_dim=2),
                       refine_epochs=cfg.refine_epochs,
                       finetune_epochs=cfg.finetune_epochs, batch=cfg.batch)
    raise CliError(f"unknown arm {cfg.arm!r}; choose transfer or scratch")


def _write_report(report, outdir: Path, stem: str) -> None:
    (outdir / f"{stem}.txt").write_text(format_text(report), newline="\n")
    (outdir / f"{stem}.kv").write_text(format_table(report), newline="\n")


def _write_trace(trace, outdir: Path) -> None:
    lines = [repr(float(v)) for v in trace]
    (outdir / "loss_trace.txt").write_text("\n".join(lines) + "\n", newline="\n")


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def cmd_synth_age(args) -> int:
    cfg = merged_config(args)
    out = ensure_outdir(cfg)
    ds = synth_age_dataset(cfg.n, cfg.dims_tuple(), cfg.seed)
    manifest = write_dataset(ds, out)
    print(f"wrote {len(ds)} age volumes and {manifest.name} to {out}")
    return 0


def cmd_synth_hie(args) -> int:
    cfg = merged_config(args)
    out = ensure_outdir(cfg)
    ds = synth_hie_dataset(cfg.n, cfg.dims_tuple(), cfg.seed,
                           site_mix=cfg.site_mix,
                           site_shift=(cfg.site_gain, cfg.site_offset))
    manifest = write_dataset(ds, out)
    print(f"wrote {len(ds)} outcome volumes and {manifest.name} to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = merged_config(args)
    data = _load_data(cfg, "age")
    out = ensure_outdir(cfg)
    ck = pretrain(data, cfg.model_config(out_dim=1),
                  pretrain_schedule(cfg.pretrain_epochs, cfg.pretrain_lr),
                  cfg.seed, batch=cfg.batch)
    save_checkpoint(out / "pretrained.a2h", ck)
    _write_trace(ck.loss_trace, out)
    print(f"pretrained {cfg.pretrain_epochs} epochs, final MAE "
          f"{ck.final_loss:.4f}, wrote pretrained.a2h to {out}")
    return 0


def cmd_refine(args) -> int:
    cfg = merged_config(args)
    source = load_checkpoint(_require(cfg, "pretrained", "--pretrained"))
    data = _load_data(cfg, "outcome")
    out = ensure_outdir(cfg)
    ck = refine(source, data,
                refine_schedule(cfg.refine_epochs, cfg.refine_lr), cfg.seed,
                batch=cfg.batch)
    save_checkpoint(out / "refined.a2h", ck)
    _write_trace(ck.loss_trace, out)
    print(f"refined {cfg.refine_epochs} epochs, final loss "
          f"{ck.final_loss:.4f}, wrote refined.a2h to {out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = merged_config(args)
    source = load_checkpoint(_require(cfg, "checkpoint", "--checkpoint"))
    data = _load_data(cfg, "outcome")
    out = ensure_outdir(cfg)
    ck = finetune(source, data,
                  finetune_schedule(cfg.finetune_epochs, cfg.finetune_lr),
                  cfg.seed, batch=cfg.batch)
    save_checkpoint(out / "finetuned.a2h", ck)
    _write_trace(ck.loss_trace, out)
    print(f"finetuned {cfg.finetune_epochs} epochs, final loss "
          f"{ck.final_loss:.4f}, wrote finetuned.a2h to {out}")
    return 0


def cmd_train_scratch(args) -> int:
    cfg = merged_config(args)
    data = _load_data(cfg, "outcome")
    out = ensure_outdir(cfg)
    schedule = scratch_schedule(cfg.refine_epochs, cfg.finetune_epochs,
                                cfg.refine_lr, cfg.finetune_lr)
    ck = train_scratch(data, cfg.model_config(out_dim=2), schedule, cfg.seed,
                       batch=cfg.batch)
    save_checkpoint(out / "scratch.a2h", ck)
    _write_trace(ck.loss_trace, out)
    print(f"trained scratch baseline {schedule.epochs} epochs, final loss "
          f"{ck.final_loss:.4f}, wrote scratch.a2h to {out}")
    return 0


def cmd_cross_validate(args) -> int:
    cfg = merged_config(args)
    data = _load_data(cfg, "outcome")
    spec = _arm_spec(cfg)
    out = ensure_outdir(cfg)
    report = cross_validate(data, spec, cfg.k, cfg.seed_list(), jobs=cfg.jobs)
    _write_report(report, out, "cv_report")
    agg = report.aggregate()["accuracy"]
    print(f"{cfg.arm} {cfg.k}-fold accuracy {agg[0]:.2f} +- {agg[1]:.2f}, "
          f"wrote cv_report.txt to {out}")
    return 0


def cmd_cross_site(args) -> int:
    cfg = merged_config(args)
    data = _load_data(cfg, "outcome")
    spec = _arm_spec(cfg)
    out = ensure_outdir(cfg)
    report = cross_site(data, cfg.train_site, cfg.test_site, spec,
                        cfg.seed_list(), jobs=cfg.jobs)
    _write_report(report, out, "cross_site_report")
    agg = report.aggregate()["accuracy"]
    print(f"{cfg.arm} {cfg.train_site}->{cfg.test_site} accuracy "
          f"{agg[0]:.2f} +- {agg[1]:.2f}, wrote cross_site_report.txt to {out}")
    return 0


def cmd_ablation(args) -> int:
    cfg = merged_config(args)
    data = _load_data(cfg, "outcome")
    out = ensure_outdir(cfg)
    results = ablation(data, cfg.variant_list(), cfg.k, cfg.seed,
                       width=cfg.width, refine_epochs=cfg.refine_epochs,
                       finetune_epochs=cfg.finetune_epochs, batch=cfg.batch,
                       jobs=cfg.jobs)
    table = format_ablation(results)
    (out / "ablation.txt").write_text(table, newline="\n")
    for variant, report in results:
        (out / f"ablation_{variant}.kv").write_text(format_table(report),
                                                    newline="\n")
    sys.stdout.write(table)
    print(f"wrote ablation.txt to {out}")
    return 0


def cmd_predict(args) -> int:
    cfg = merged_config(args)
    ck = load_checkpoint(_require(cfg, "checkpoint", "--checkpoint"))
    data = _load_data(cfg, "outcome")
    out = ensure_outdir(cfg)
    rows = predict(ck, data, batch=cfg.batch)
    lines = ["id,class,prob1"]
    lines += [f"{sid},{cls},{repr(p1)}" for sid, cls, p1 in rows]
    (out / "predictions.csv").write_text("\n".join(lines) + "\n", newline="\n")
    print(f"wrote {len(rows)} predictions to {out / 'predictions.csv'}")
    return 0


def cmd_inspect(args) -> int:
    cfg = merged_config(args)
    ck = load_checkpoint(_require(cfg, "checkpoint", "--checkpoint"))
    print(f"stage: {ck.stage}")
    print(f"variant: {ck.config.variant}")
    print(f"width: {ck.config.width}")
    print(f"in_channels: {ck.config.in_channels}")
    print(f"out_dim: {ck.config.out_dim}")
    print(f"seed: {ck.seed}")
    print(f"epochs: {ck.epochs}")
    print(f"final_loss: {ck.final_loss!r}")
    total = sum(int(np.prod(arr.shape)) for _, arr in ck.tensors)
    print(f"tensors: {len(ck.tensors)} ({total} values)")
    for name, arr in ck.tensors:
        print(f"  {name} {tuple(arr.shape)}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _add(parser, *flags, **kw):
    kw.setdefault("default", None)
    parser.add_argument(*flags, **kw)


def _common(parser) -> None:
    _add(parser, "--config", help="key=value config file")
    _add(parser, "--out", help=f"output directory (or ${OUT_ENV_VAR})")
    _add(parser, "--seed", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="age2hie",
                     description="3D ResNet transfer learning: age pretraining "
                                 "to binary outcome prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        _common(p)
        return p

    p = command("synth-age", cmd_synth_age, "generate an age-regression cohort")
    _add(p, "--n", type=int)
    _add(p, "--dims")

    p = command("synth-hie", cmd_synth_hie, "generate a binary-outcome cohort")
    _add(p, "--n", type=int)
    _add(p, "--dims")
    _add(p, "--site-mix", type=float, dest="site_mix")
    _add(p, "--site-gain", type=float, dest="site_gain")
    _add(p, "--site-offset", type=float, dest="site_offset")

    p = command("pretrain", cmd_pretrain, "train on age regression")
    _add(p, "--data")
    _add(p, "--variant")
    _add(p, "--width", type=int)
    _add(p, "--in-channels", type=int, dest="in_channels")
    _add(p, "--epochs", type=int, dest="pretrain_epochs")
    _add(p, "--lr", type=float, dest="pretrain_lr")
    _add(p, "--batch", type=int)

    p = command("refine", cmd_refine, "train a new 2-way head, extractor frozen")
    _add(p, "--pretrained")
    _add(p, "--data")
    _add(p, "--epochs", type=int, dest="refine_epochs")
    _add(p, "--lr", type=float, dest="refine_lr")
    _add(p, "--batch", type=int)

    p = command("finetune", cmd_finetune, "unfreeze and train end to end")
    _add(p, "--checkpoint")
    _add(p, "--data")
    _add(p, "--epochs", type=int, dest="finetune_epochs")
    _add(p, "--lr", type=float, dest="finetune_lr")
    _add(p, "--batch", type=int)

    p = command("train-scratch", cmd_train_scratch,
                "no-transfer baseline on the combined epoch budget")
    _add(p, "--data")
    _add(p, "--variant")
    _add(p, "--width", type=int)
    _add(p, "--in-channels", type=int, dest="in_channels")
    _add(p, "--refine-epochs", type=int, dest="refine_epochs")
    _add(p, "--finetune-epochs", type=int, dest="finetune_epochs")
    _add(p, "--refine-lr", type=float, dest="refine_lr")
    _add(p, "--finetune-lr", type=float, dest="finetune_lr")
    _add(p, "--batch", type=int)

    p = command("cross-validate", cmd_cross_validate, "k-fold CV of one arm")
    _add(p, "--data")
    _add(p, "--arm")
    _add(p, "--pretrained")
    _add(p, "--variant")
    _add(p, "--width", type=int)
    _add(p, "--k", type=int)
    _add(p, "--seeds")
    _add(p, "--refine-epochs", type=int, dest="refine_epochs")
    _add(p, "--finetune-epochs", type=int, dest="finetune_epochs")
    _add(p, "--batch", type=int)
    _add(p, "--jobs", type=int)

    p = command("cross-site", cmd_cross_site, "train one site, test the other")
    _add(p, "--data")
    _add(p, "--arm")
    _add(p, "--pretrained")
    _add(p, "--variant")
    _add(p, "--width", type=int)
    _add(p, "--train-site", dest="train_site")
    _add(p, "--test-site", dest="test_site")
    _add(p, "--seeds")
    _add(p, "--refine-epochs", type=int, dest="refine_epochs")
    _add(p, "--finetune-epochs", type=int, dest="finetune_epochs")
    _add(p, "--batch", type=int)
    _add(p, "--jobs", type=int)

    p = command("ablation", cmd_ablation, "scratch CV per architecture variant")
    _add(p, "--data")
    _add(p, "--variants")
    _add(p, "--k", type=int)
    _add(p, "--width", type=int)
    _add(p, "--refine-epochs", type=int, dest="refine_epochs")
    _add(p, "--finetune-epochs", type=int, dest="finetune_epochs")
    _add(p, "--batch", type=int)
    _add(p, "--jobs", type=int)

    p = command("predict", cmd_predict, "classify a manifest with a checkpoint")
    _add(p, "--checkpoint")
    _add(p, "--data")
    _add(p, "--batch", type=int)

    p = command("inspect-checkpoint", cmd_inspect, "print checkpoint metadata")
    _add(p, "--checkpoint")

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, PipelineError, EvalError, ValueError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(run(sys.argv[1:]))
