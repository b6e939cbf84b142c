"""Flat dotted-key configuration with embedded method defaults.

One text file, `key = value` per line, `#` comments. Values are parsed by
the declared field type; `--set key=value` overrides come in as strings.
Round-trip parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .augment import AugmentParams


@dataclass
class TrainConfig:
    # reproducibility / paths
    seed: int = 0
    out: str = "runs"
    data_root: str = "data/synth"
    dtype: str = "float32"

    # data
    image_size: int = 64
    num_fg_classes: int = 3
    zipf_exponent: float = 1.0
    num_patients: int = 40
    slices_per_patient: int = 5
    shape_family: str = "disks"
    label_ratio: float = 0.05
    val_frac: float = 0.1
    test_frac: float = 0.25

    # network
    base_width: int = 8
    m_embed: int = 512
    m_rep: int = 0            # 0 means "same as m_embed"

    # stage-1 (relational pre-training)
    tau_theta: float = 0.1
    tau_xi: float = 0.01
    momentum_teacher: float = 0.99
    mined_views: int = 36
    local_crops: int = 36
    local_crop_size: int = 64
    use_instance_losses: bool = True
    pretrain_epochs: int = 100

    # stage-2 (anatomical contrastive reconstruction)
    tau: float = 0.5
    bank_capacity: int = 36
    bank_store: str = "mean"  # mean | pixels
    n_queries: int = 256
    n_keys: int = 512
    delta_theta: float = 0.97
    knn: int = 5
    lambda1: float = 0.01
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    finetune_epochs: int = 200
    student_aug: str = "strong"   # strong | weak
    teacher_aug: str = "weak"

    # optimizer
    lr: float = 0.01
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 6
    lr_step: int = 2500

    # augmentation ranges
    rot_degrees: float = 15.0
    crop_scale_min: float = 0.8
    flip_prob: float = 0.5
    contrast_lo: float = 0.7
    contrast_hi: float = 1.3
    brightness_delta: float = 0.2
    cutmix_prob: float = 0.5
    warp_sigma: float = 6.0
    warp_alpha: float = 2.5

    # theory experiment
    theory_n: int = 20
    theory_steps: int = 10
    theory_eps: float = 1e-3
    theory_kernel_width: float = 0.3
    theory_instances: int = 20

    @property
    def num_classes_total(self) -> int:
        return self.num_fg_classes + 1

    @property
    def effective_m_rep(self) -> int:
        return self.m_rep if self.m_rep else self.m_embed

    @property
    def aug(self) -> AugmentParams:
        return AugmentParams(
            rot_degrees=self.rot_degrees, crop_scale_min=self.crop_scale_min,
            flip_prob=self.flip_prob,
            contrast_range=(self.contrast_lo, self.contrast_hi),
            brightness_delta=self.brightness_delta, cutmix_prob=self.cutmix_prob,
            warp_sigma=self.warp_sigma, warp_alpha=self.warp_alpha)

    def validate(self) -> None:
        for key in ("tau", "tau_theta", "tau_xi"):
            if getattr(self, key) <= 0:
                raise ValueError(f"config error: {key} must be > 0")
        if not (0.0 <= self.delta_theta <= 1.0):
            raise ValueError("config error: delta_theta must be in [0, 1]")
        for key in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, key) < 0:
                raise ValueError(f"config error: {key} must be >= 0")
        if self.bank_capacity < 1 or self.mined_views < 1:
            raise ValueError("config error: capacities must be >= 1")
        if not (0 <= self.momentum_teacher < 1):
            raise ValueError("config error: momentum_teacher must be in [0, 1)")
        if self.student_aug not in ("strong", "weak") or self.teacher_aug not in ("strong", "weak"):
            raise ValueError("config error: student_aug/teacher_aug must be strong|weak")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("config error: dtype must be float32|float64")


_BOOLS = {"true": True, "false": False, "1": True, "0": False}


def _parse_value(ftype, raw: str):
    raw = raw.strip()
    if ftype is bool:
        if raw.lower() not in _BOOLS:
            raise ValueError(f"expected boolean, got {raw!r}")
        return _BOOLS[raw.lower()]
    return ftype(raw)


def serialize_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: TrainConfig = None) -> TrainConfig:
    cfg = dataclasses.replace(base) if base else TrainConfig()
    known = {f.name: f.type for f in fields(cfg)}
    typemap = {"int": int, "float": float, "str": str, "bool": bool}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config error: line {lineno}: expected key = value")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise ValueError(f"config error: unknown key {key!r} (line {lineno})")
        ftype = known[key] if isinstance(known[key], type) else typemap[known[key]]
        try:
            setattr(cfg, key, _parse_value(ftype, raw))
        except ValueError as e:
            raise ValueError(f"config error: key {key!r}: {e}") from None
    cfg.validate()
    return cfg


def load_config(path, overrides=()) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        cfg = parse_config(Path(path).read_text(), cfg)
    for ov in overrides:
        if "=" not in ov:
            raise ValueError(f"config error: bad --set {ov!r}, expected key=value")
        cfg = parse_config(ov, cfg)
    cfg.validate()
    return cfg


def config_hash(cfg: TrainConfig) -> str:
    """Hash of the config minus filesystem locations, so the same experiment
    hashes identically no matter where its inputs and outputs live."""
    lines = [ln for ln in serialize_config(cfg).splitlines()
             if not ln.startswith(("out ", "data_root "))]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:12]
