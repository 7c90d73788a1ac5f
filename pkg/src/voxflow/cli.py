"""Command-line entry point: decode, benchmark, and distillation workflows.

Configuration comes from an optional JSON file (sections ``decode``,
``akvs``, ``distill`` mirroring the corresponding dataclasses; unknown
keys are rejected) with CLI flags overriding file values.  Every report
written by a command echoes the fully resolved configuration and seed.
Exit codes: 0 success, 1 runtime failure, 2 usage error.

The ``VOXFLOW_OUT_DIR`` environment variable sets the directory under
which relative output paths are placed (default: current directory).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .akvs import AkvsConfig, hierarchical_decode_akvs
from .field import build_surface_latents, format_shape, parse_shape
from .hierdec import DecodeConfig, dense_decode, hierarchical_decode, write_volume
from .metrics import (DEFAULT_MODES, DEFAULT_SUITE, RunReport, bench_run,
                      reports_to_csv, surface_iou, volume_iou)
from .surface import marching_cubes, sign_volume, write_obj

OUT_DIR_ENV = "VOXFLOW_OUT_DIR"
MODES = ("dense", "hier", "hier+akvs")


class CliError(Exception):
    """Runtime failure reported to stderr with exit code 1."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class CliConfig:
    """Resolved run configuration: file values with flag overrides applied."""

    decode: DecodeConfig = dc_field(default_factory=DecodeConfig)
    akvs: AkvsConfig = dc_field(default_factory=AkvsConfig)
    distill: "object" = None  # DistillConfig, built lazily

    def to_dict(self) -> dict:
        d = {"decode": dataclasses.asdict(
                dataclasses.replace(self.decode, akvs=None)),
             "akvs": dataclasses.asdict(self.akvs)}
        d["decode"].pop("akvs", None)
        if self.distill is not None:
            d["distill"] = dataclasses.asdict(self.distill)
        return d


def _section(data: dict, name: str, cls, **overrides):
    """Build a dataclass from a config-file section plus flag overrides."""
    values = dict(data.get(name, {}))
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise CliError(f"unknown key '{unknown[0]}' in config section '{name}'")
    for k, v in overrides.items():
        if v is not None:
            values[k] = v
    values = {k: tuple(v) if isinstance(v, list) else v
              for k, v in values.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config section '{name}': {exc}") from None


def load_cli_config(path: str | None, *, decode_overrides=None,
                    akvs_overrides=None, distill_overrides=None,
                    with_distill: bool = False) -> CliConfig:
    """Parse the JSON config file, rejecting unknown sections and keys."""
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise CliError("config file must hold a JSON object")
        unknown = sorted(set(data) - {"decode", "akvs", "distill"})
        if unknown:
            raise CliError(f"unknown config section '{unknown[0]}'")
    cfg = CliConfig(
        decode=_section(data, "decode", DecodeConfig,
                        **(decode_overrides or {})),
        akvs=_section(data, "akvs", AkvsConfig, **(akvs_overrides or {})))
    if "akvs" in dataclasses.asdict(cfg.decode):
        cfg.decode = dataclasses.replace(cfg.decode, akvs=None)
    if with_distill:
        from .distill import DistillConfig
        cfg.distill = _section(data, "distill", DistillConfig,
                               **(distill_overrides or {}))
    return cfg


def _out_path(path: str) -> str:
    """Resolve an output path against VOXFLOW_OUT_DIR for relative names."""
    base = os.environ.get(OUT_DIR_ENV, "")
    if base and not os.path.isabs(path):
        os.makedirs(base, exist_ok=True)
        return os.path.join(base, path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# decode


def cmd_decode(args) -> int:
    cfg = load_cli_config(
        args.config,
        decode_overrides={"target_res": args.res, "base_res": args.base},
        akvs_overrides={"r": args.subvol, "K": args.topk})
    try:
        shape = parse_shape(args.shape)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    latents = build_surface_latents(shape, args.tokens, args.seed)

    dcfg = dataclasses.replace(cfg.decode, akvs=cfg.akvs)
    t0 = time.perf_counter()
    if args.mode == "dense":
        volume, rep = dense_decode(latents, dcfg.target_res)
    elif args.mode == "hier":
        volume, rep = hierarchical_decode(latents, dcfg)
    else:
        volume, rep = hierarchical_decode_akvs(latents, dcfg, seed=args.seed,
                                               kept_mass_stats=True)
    wall = time.perf_counter() - t0

    mesh = marching_cubes(volume, gamma=dcfg.gamma, mask=rep.final_mask)
    write_obj(mesh, _out_path(args.out))
    if args.volume:
        write_volume(volume, path=_out_path(args.volume))

    report = RunReport(shape=format_shape(shape), mode=args.mode,
                       seed=args.seed, target_res=dcfg.target_res,
                       wall_time=wall, decode=rep,
                       config={**cfg.to_dict(), "tokens": args.tokens,
                               "seed": args.seed})
    if args.report:
        with open(_out_path(args.report), "w") as fh:
            fh.write(report.to_json() + "\n")
    print(f"{report.shape} mode={args.mode} res={dcfg.target_res} "
          f"queries={rep.total_queries} reduction={rep.reduction:.4f} "
          f"wall={wall:.3f}s -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    cfg = load_cli_config(
        args.config,
        decode_overrides={"target_res": args.res, "base_res": args.base},
        akvs_overrides={"r": args.subvol, "K": args.topk})
    shapes = tuple(args.shapes) if args.shapes else DEFAULT_SUITE
    modes = tuple(args.modes) if args.modes else DEFAULT_MODES
    for mode in modes:
        if mode not in MODES:
            raise CliError(f"unknown mode '{mode}'")
    dcfg = dataclasses.replace(cfg.decode, akvs=cfg.akvs)
    out = _out_path(args.out)
    with open(out, "w") as sink:
        reports = bench_run(shapes=shapes, modes=modes,
                            seeds=tuple(args.seeds), cfg=dcfg,
                            M=args.tokens, repeats=args.repeat, sink=sink)
    if args.csv:
        with open(_out_path(args.csv), "w", newline="") as fh:
            reports_to_csv(reports, fh)
    header = (f"{'shape':<24}{'mode':<11}{'queries':>10}{'reduction':>11}"
              f"{'v_iou':>9}{'median_s':>10}")
    print(header)
    print("-" * len(header))
    for r in reports:
        v = "" if r.v_iou is None else f"{r.v_iou:.4f}"
        print(f"{r.shape:<24}{r.mode:<11}{r.decode.total_queries:>10}"
              f"{r.decode.reduction:>11.4f}{v:>9}{r.wall_time:>10.3f}")
    print(f"{len(reports)} records -> {out}")
    return 0


# ---------------------------------------------------------------------------
# distill


STAGES = ("teacher", "gd", "cfd", "adv")


def _ckpt_path(out_dir: str, stage: str) -> str:
    return os.path.join(out_dir, f"{stage}.ckpt")


def _require_stage(out_dir: str, stage: str):
    """Load a prerequisite checkpoint or fail naming the missing stage."""
    from .distill.checkpoint import load_checkpoint

    path = _ckpt_path(out_dir, stage)
    if not os.path.exists(path):
        raise CliError(f"missing checkpoint for stage '{stage}' "
                       f"({path}): run `voxflow distill {stage}` first")
    return load_checkpoint(path)


def _model_from(config: dict, arrays):
    from .distill import FlowModel

    # load_arrays replaces every parameter, so the init seed is irrelevant
    model = FlowModel(seed=0, with_w=bool(config["with_w"]),
                      width=int(config["width"]))
    model.load_arrays(arrays)
    return model


def _save_stage(out_dir: str, stage: str, model, cfg: CliConfig,
                seed: int) -> str:
    from .distill.checkpoint import save_checkpoint

    os.makedirs(out_dir, exist_ok=True)
    config = {"stage": stage, "seed": seed, "with_w": model.with_w,
              "width": model.width, **cfg.to_dict()}
    path = _ckpt_path(out_dir, stage)
    save_checkpoint(path, config, model.param_arrays())
    return path


def _distill_cfg(args) -> CliConfig:
    overrides = {"seed": args.seed, "dist": args.dist}
    if getattr(args, "no_gd_warmup", False):
        overrides["gd_warmup"] = False
    if getattr(args, "no_ema", False):
        overrides["use_ema"] = False
    if getattr(args, "loss", None) is not None:
        overrides["loss"] = args.loss
    return load_cli_config(args.config, distill_overrides=overrides,
                           with_distill=True)


def _stage_log(out_dir: str, stage: str):
    os.makedirs(out_dir, exist_ok=True)
    return open(os.path.join(out_dir, f"{stage}.log"), "w")


def cmd_distill(args) -> int:
    from .distill import (PhaseSchedule, adversarial_finetune, cfd_train,
                          energy_distance, guidance_distill, sample_student,
                          sample_teacher, sample_toy_data, train_teacher)
    from .distill.models import FlowModel

    cfg = _distill_cfg(args)
    dcfg = cfg.distill
    out_dir = _out_path(args.out_dir)
    stage = args.stage

    if stage == "teacher":
        with _stage_log(out_dir, stage) as log:
            model = train_teacher(dcfg, log_sink=log)
        path = _save_stage(out_dir, stage, model, cfg, args.seed)
    elif stage == "gd":
        tconf, tarr = _require_stage(out_dir, "teacher")
        teacher = _model_from(tconf, tarr)
        with _stage_log(out_dir, stage) as log:
            model = guidance_distill(teacher, dcfg, log_sink=log)
        path = _save_stage(out_dir, stage, model, cfg, args.seed)
    elif stage == "cfd":
        tconf, tarr = _require_stage(out_dir, "teacher")
        teacher = _model_from(tconf, tarr)
        if dcfg.gd_warmup:
            gconf, garr = _require_stage(out_dir, "gd")
            student0 = _model_from(gconf, garr)
        else:
            student0 = FlowModel(seed=dcfg.seed + 2, with_w=True)
        with _stage_log(out_dir, stage) as log:
            model = cfd_train(student0, teacher, dcfg,
                              PhaseSchedule(dcfg.phases), log_sink=log)
            if not args.no_finetune and dcfg.finetune_steps > 0:
                model = cfd_train(model, teacher, dcfg, PhaseSchedule(1),
                                  steps=dcfg.finetune_steps,
                                  lr=dcfg.finetune_lr, log_sink=log,
                                  stage_name="cfd_finetune",
                                  rehearse=PhaseSchedule(dcfg.phases),
                                  select_best=True)
        path = _save_stage(out_dir, stage, model, cfg, args.seed)
    elif stage == "adv":
        tconf, tarr = _require_stage(out_dir, "teacher")
        cconf, carr = _require_stage(out_dir, "cfd")
        teacher = _model_from(tconf, tarr)
        gen = _model_from(cconf, carr)
        with _stage_log(out_dir, stage) as log:
            model = adversarial_finetune(gen, teacher, dcfg, log_sink=log)
        path = _save_stage(out_dir, stage, model, cfg, args.seed)
    elif stage == "sample":
        sconf, sarr = _require_stage(out_dir, args.from_stage)
        model = _model_from(sconf, sarr)
        nfe = args.nfe if args.nfe is not None else (
            50 if args.from_stage == "teacher" else dcfg.phases)
        if args.from_stage == "teacher":
            samples, _ = sample_teacher(model, args.n, args.seed, nfe=nfe,
                                        w=dcfg.w_const)
        else:
            samples, _ = sample_student(model, args.n, args.seed, nfe=nfe,
                                        w=dcfg.w_const)
        path = _out_path(args.out)
        np.save(path, samples)
        meta = {"stage": args.from_stage, "nfe": nfe, "n": args.n,
                "seed": args.seed, **cfg.to_dict()}
        with open(path + ".json", "w") as fh:
            json.dump(meta, fh, sort_keys=True)
        print(f"wrote {len(samples)} samples (nfe={nfe}) -> {path}")
        return 0
    else:  # eval
        tconf, tarr = _require_stage(out_dir, "teacher")
        teacher = _model_from(tconf, tarr)
        student_stage = args.from_stage
        if student_stage is None:
            student_stage = ("adv" if os.path.exists(_ckpt_path(out_dir, "adv"))
                             else "cfd")
        sconf, sarr = _require_stage(out_dir, student_stage)
        student = _model_from(sconf, sarr)
        held, _ = sample_toy_data(dcfg.dist, args.n, seed=args.seed + 10_000)
        ts, _ = sample_teacher(teacher, args.n, args.seed, nfe=50,
                               w=dcfg.w_const)
        ss, _ = sample_student(student, args.n, args.seed, nfe=args.nfe or 5,
                               w=dcfg.w_const)
        d_teacher = energy_distance(ts, held)
        d_student = energy_distance(ss, held)
        result = {"teacher_nfe50": d_teacher,
                  f"{student_stage}_nfe{args.nfe or 5}": d_student,
                  "ratio": d_student / d_teacher if d_teacher > 0 else None,
                  "n": args.n, "seed": args.seed, **cfg.to_dict()}
        print(f"energy distance: teacher@50 NFE = {d_teacher:.4f}, "
              f"{student_stage}@{args.nfe or 5} NFE = {d_student:.4f} "
              f"(ratio {result['ratio']:.3f})")
        if args.out:
            with open(_out_path(args.out), "w") as fh:
                json.dump(result, fh, sort_keys=True)
        return 0
    print(f"stage '{stage}' -> {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="voxflow",
        description="Sparse hierarchical SDF decoding and toy flow distillation")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("decode", help="decode one shape to a mesh")
    d.add_argument("--shape", required=True,
                   help="shape spec, e.g. sphere:r=0.5")
    d.add_argument("--mode", choices=MODES, default="hier")
    d.add_argument("--res", type=int, default=None, help="target resolution")
    d.add_argument("--base", type=int, default=None, help="base resolution")
    d.add_argument("--tokens", type=int, default=1024,
                   help="number of latent tokens")
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--subvol", type=int, default=None,
                   help="subvolumes per axis for KV selection")
    d.add_argument("--topk", type=int, default=None,
                   help="tokens kept per subvolume")
    d.add_argument("--out", required=True, help="output OBJ path")
    d.add_argument("--volume", default=None, help="optional volume dump path")
    d.add_argument("--report", default=None, help="optional JSON report path")
    d.add_argument("--config", default=None, help="JSON config file")
    d.set_defaults(func=cmd_decode)

    b = sub.add_parser("bench", help="run the decode benchmark suite")
    b.add_argument("--shapes", nargs="+", default=None)
    b.add_argument("--modes", nargs="+", default=None)
    b.add_argument("--seeds", nargs="+", type=int, required=True)
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--res", type=int, default=None)
    b.add_argument("--base", type=int, default=None)
    b.add_argument("--tokens", type=int, default=1024)
    b.add_argument("--subvol", type=int, default=None)
    b.add_argument("--topk", type=int, default=None)
    b.add_argument("--out", default="bench.jsonl", help="JSON-lines output")
    b.add_argument("--csv", default=None, help="optional CSV summary path")
    b.add_argument("--config", default=None)
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("distill", help="staged flow-distillation pipeline")
    tsub = t.add_subparsers(dest="stage", required=True)
    common = dict(out_dir="checkpoint/log directory")
    for name in STAGES:
        s = tsub.add_parser(name)
        s.add_argument("--seed", type=int, required=True)
        s.add_argument("--out-dir", default="distill", help=common["out_dir"])
        s.add_argument("--dist", default=None, help="toy distribution name")
        s.add_argument("--config", default=None)
        if name == "cfd":
            s.add_argument("--no-gd-warmup", action="store_true")
            s.add_argument("--no-ema", action="store_true")
            s.add_argument("--loss", choices=("huber", "l2"), default=None)
            s.add_argument("--no-finetune", action="store_true")
        if name == "adv":
            s.add_argument("--no-ema", action="store_true")
        s.set_defaults(func=cmd_distill)

    sm = tsub.add_parser("sample")
    sm.add_argument("--seed", type=int, required=True)
    sm.add_argument("--out-dir", default="distill", help=common["out_dir"])
    sm.add_argument("--from-stage", choices=("teacher", "cfd", "adv"),
                    default="cfd")
    sm.add_argument("--nfe", type=int, default=None)
    sm.add_argument("--n", type=int, default=2048)
    sm.add_argument("--out", default="samples.npy")
    sm.add_argument("--dist", default=None)
    sm.add_argument("--config", default=None)
    sm.set_defaults(func=cmd_distill)

    ev = tsub.add_parser("eval")
    ev.add_argument("--seed", type=int, required=True)
    ev.add_argument("--out-dir", default="distill", help=common["out_dir"])
    ev.add_argument("--from-stage", choices=("cfd", "adv"), default=None)
    ev.add_argument("--nfe", type=int, default=5)
    ev.add_argument("--n", type=int, default=2048)
    ev.add_argument("--out", default=None, help="optional JSON result path")
    ev.add_argument("--dist", default=None)
    ev.add_argument("--config", default=None)
    ev.set_defaults(func=cmd_distill)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
