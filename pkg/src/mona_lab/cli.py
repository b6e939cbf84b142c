"""Command-line entry points: synth | pretrain | finetune | eval | theory | plot.

Every command resolves a config (file + repeatable --set overrides), writes
its outputs into a run directory named by the config hash, and drops the
exact resolved config there for reproducibility.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import metrics, theory
from .config import TrainConfig, config_hash, load_config, serialize_config
from .data import (ZipfSpec, class_frequency, generate_synthetic, load_dataset,
                   save_dataset, split_by_patient)
from .nets import StudentTeacherPair
from .train import build_model, run_finetune, run_pretrain


def _run_dir(cfg: TrainConfig, out_override=None) -> Path:
    # named by config hash alone: re-running the same config lands in the
    # same directory with identical contents, which keeps runs verifiable
    root = Path(out_override or os.environ.get("MONA_LAB_OUT", cfg.out))
    d = root / config_hash(cfg)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.txt").write_text(serialize_config(cfg))
    return d


def _load_split(cfg: TrainConfig):
    samples = load_dataset(cfg.data_root)
    return split_by_patient(samples, cfg.label_ratio, cfg.val_frac,
                            cfg.test_frac, cfg.seed)


def _check_hash(meta, cfg, force: bool):
    if meta["config_hash"] != config_hash(cfg):
        msg = (f"checkpoint config hash {meta['config_hash']} does not match "
               f"current config {config_hash(cfg)}")
        if not force:
            raise SystemExit(f"error: {msg}; rerun with --force to proceed")
        print(f"warning: {msg} (continuing under --force)", file=sys.stderr)


def cmd_synth(cfg: TrainConfig, run_dir: Path) -> int:
    spec = ZipfSpec(num_classes=cfg.num_fg_classes, exponent=cfg.zipf_exponent,
                    image_size=(cfg.image_size, cfg.image_size),
                    num_patients=cfg.num_patients,
                    slices_per_patient=cfg.slices_per_patient,
                    shape_family=cfg.shape_family, seed=cfg.seed)
    samples = generate_synthetic(spec)
    save_dataset(samples, cfg.data_root)
    freq = class_frequency(samples)
    with open(run_dir / "class_frequency.tsv", "w") as f:
        f.write("class\tpixels\n")
        for c in sorted(freq):
            f.write(f"{c}\t{freq[c]}\n")
    print(f"wrote {len(samples)} slices to {cfg.data_root}")
    return 0


def cmd_pretrain(cfg: TrainConfig, run_dir: Path) -> int:
    split = _load_split(cfg)
    pair = run_pretrain(cfg, split, log_path=run_dir / "pretrain_log.tsv")
    ckpt.save_checkpoint(run_dir / "stage1.ckpt", pair.student,
                         config_hash(cfg), "pretrain")
    ckpt.save_checkpoint(run_dir / "stage1_teacher.ckpt", pair.teacher,
                         config_hash(cfg), "pretrain")
    print(f"stage-1 checkpoint at {run_dir / 'stage1.ckpt'}")
    return 0


def cmd_finetune(cfg: TrainConfig, run_dir: Path, init: str = None,
                 force: bool = False, from_scratch: bool = False) -> int:
    split = _load_split(cfg)
    model = build_model(cfg)
    if init:
        meta = ckpt.load_checkpoint(init, model)
        _check_hash(meta, cfg, force)
    elif not from_scratch:
        raise SystemExit("error: finetune needs --init CHECKPOINT or --from-scratch")
    pair = StudentTeacherPair(model, momentum=cfg.momentum_teacher)
    pair, _bank = run_finetune(cfg, split, pair, log_path=run_dir / "finetune_log.tsv")
    ckpt.save_checkpoint(run_dir / "stage2.ckpt", pair.student,
                         config_hash(cfg), "finetune")
    print(f"stage-2 checkpoint at {run_dir / 'stage2.ckpt'}")
    return 0


def cmd_eval(cfg: TrainConfig, run_dir: Path, init: str, split_name: str = "test",
             force: bool = False) -> int:
    split = _load_split(cfg)
    model = build_model(cfg)
    meta = ckpt.load_checkpoint(init, model)
    _check_hash(meta, cfg, force)
    samples = getattr(split, split_name)
    evals, summary = metrics.evaluate(model, samples, cfg.num_classes_total)
    with open(run_dir / "eval.tsv", "w") as f:
        f.write("patient_id\tclass\tdice\tasd\n")
        for e in evals:
            for c in sorted(e.dice):
                f.write(f"{e.patient_id}\t{c}\t{e.dice[c]:.6f}\t{e.asd[c]:.6f}\n")
    with open(run_dir / "summary.tsv", "w") as f:
        f.write("metric\tvalue\n")
        f.write(f"macro_dice\t{summary['macro_dice']:.6f}\n")
        f.write(f"macro_asd\t{summary['macro_asd']:.6f}\n")
        for c, v in sorted(summary["per_class_dice"].items()):
            f.write(f"dice_class_{c}\t{v:.6f}\n")
    print(f"macro dice {summary['macro_dice']:.4f} over {len(evals)} patients")
    return 0


def cmd_theory(cfg: TrainConfig, run_dir: Path) -> int:
    with open(run_dir / "theory.tsv", "w") as f:
        f.write("instance\tstep\tnorm_l1\tnorm_l2\tparticipation_ratio\ttop_share\n")
        verdicts = []
        for inst in range(cfg.theory_instances):
            problem = theory.make_instance(cfg.theory_n, cfg.theory_kernel_width,
                                           seed=cfg.seed + inst,
                                           epsilon=cfg.theory_eps,
                                           steps=cfg.theory_steps)
            hist = theory.self_distill_simulate(problem)
            report = theory.sparsification_report(hist)
            verdicts.append(report["pr_nonincreasing"])
            for row in report["rows"]:
                f.write(f"{inst}\t{row['step']}\t{row['norm_l1']:.8f}\t"
                        f"{row['norm_l2']:.8f}\t{row['participation_ratio']:.8f}\t"
                        f"{row['top_share']:.8f}\n")
    ok = sum(verdicts)
    print(f"participation ratio nonincreasing on {ok}/{len(verdicts)} instances")
    return 0 if ok == len(verdicts) else 1


def cmd_plot(inputs, run_dir: Path) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for path in inputs:
        path = Path(path)
        if not path.exists():
            raise SystemExit(f"error: no such file {path}")
        with open(path) as f:
            header = f.readline().rstrip("\n").split("\t")
            rows = [line.rstrip("\n").split("\t") for line in f if line.strip()]
        fig, ax = plt.subplots(figsize=(7, 4))
        if "class" in header[0]:
            classes = [r[0] for r in rows]
            counts = [float(r[1]) for r in rows]
            ax.bar(classes, counts)
            ax.set_xlabel("class")
            ax.set_ylabel(header[1])
        else:
            try:
                x = [float(r[0]) for r in rows]
            except ValueError:
                x = list(range(len(rows)))
            for col in range(1, len(header)):
                try:
                    ys = [float(r[col]) for r in rows]
                except ValueError:
                    continue
                ax.plot(x, ys, label=header[col])
            ax.set_xlabel(header[0])
            ax.legend(fontsize=7)
        ax.set_title(path.stem)
        out = run_dir / f"{path.stem}.png"
        fig.savefig(out, dpi=120)
        plt.close(fig)
        print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mona-lab",
                                description="two-stage semi-supervised segmentation lab")
    p.add_argument("--show-defaults", action="store_true",
                   help="print the built-in config defaults and exit")
    sub = p.add_subparsers(dest="command")
    for name in ("synth", "pretrain", "finetune", "eval", "theory", "plot"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None)
        sp.add_argument("--set", action="append", default=[], metavar="K=V")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--force", action="store_true")
        if name in ("finetune", "eval"):
            sp.add_argument("--init", default=None, help="checkpoint to start from")
        if name == "finetune":
            sp.add_argument("--from-scratch", action="store_true")
        if name == "eval":
            sp.add_argument("--split", default="test",
                            choices=["test", "val", "labeled"])
        if name == "plot":
            sp.add_argument("inputs", nargs="+")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.show_defaults:
        print(serialize_config(TrainConfig()), end="")
        return 0
    if not args.command:
        build_parser().print_help()
        return 2
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
        run_dir = _run_dir(cfg, args.out)
        if args.command == "synth":
            return cmd_synth(cfg, run_dir)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, run_dir)
        if args.command == "finetune":
            return cmd_finetune(cfg, run_dir, init=args.init, force=args.force,
                                from_scratch=args.from_scratch)
        if args.command == "eval":
            if not args.init:
                raise SystemExit("error: eval needs --init CHECKPOINT")
            return cmd_eval(cfg, run_dir, init=args.init,
                            split_name=args.split, force=args.force)
        if args.command == "theory":
            return cmd_theory(cfg, run_dir)
        if args.command == "plot":
            return cmd_plot(args.inputs, run_dir)
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
