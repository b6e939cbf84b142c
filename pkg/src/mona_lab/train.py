"""Epoch loops for both training stages, with TSV logging and checkpoints."""

from __future__ import annotations

import random
from pathlib import Path

import numpy as np
import torch

from .acr import ClassMemoryBank, finetune_step
from .config import TrainConfig, config_hash
from .nets import SegModel, StudentTeacherPair
from .pretrain import pretrain_step

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def seed_everything(seed: int) -> np.random.Generator:
    random.seed(seed)
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def build_model(cfg: TrainConfig) -> SegModel:
    torch.manual_seed(cfg.seed)
    model = SegModel(num_classes=cfg.num_classes_total, base_width=cfg.base_width,
                     m_embed=cfg.m_embed, m_rep=cfg.effective_m_rep)
    return model.to(DTYPES[cfg.dtype])


def make_optimizer(model: SegModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=cfg.lr,
                           momentum=cfg.sgd_momentum, weight_decay=cfg.weight_decay)


def set_lr(optimizer, cfg: TrainConfig, iteration: int) -> float:
    lr = cfg.lr * (0.1 ** (iteration // cfg.lr_step))
    for group in optimizer.param_groups:
        group["lr"] = lr
    return lr


def _batches(n_items: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n_items)
    for i in range(0, n_items, batch_size):
        yield order[i:i + batch_size]


def _sample_batch(pool, batch_size, rng):
    if not pool:
        return []
    idx = rng.integers(0, len(pool), size=min(batch_size, len(pool)))
    return [pool[i] for i in idx]


def run_pretrain(cfg: TrainConfig, split, log_path=None):
    """Stage 1. An epoch is one shuffled pass over the unlabeled pool (or the
    labeled pool when no unlabeled data exists)."""
    rng = seed_everything(cfg.seed)
    pair = StudentTeacherPair(build_model(cfg), momentum=cfg.momentum_teacher)
    opt = make_optimizer(pair.student, cfg)
    driver = split.unlabeled if split.unlabeled else split.labeled
    log = open(log_path, "w") if log_path else None
    if log:
        log.write("step\tL_sup\tL_inst_global\tL_inst_local\tlr\n")
    step = 0
    for _epoch in range(cfg.pretrain_epochs):
        for idx in _batches(len(driver), cfg.batch_size, rng):
            lr = set_lr(opt, cfg, step)
            labeled = _sample_batch(split.labeled, cfg.batch_size, rng)
            unlabeled = [split.unlabeled[i] for i in idx] if split.unlabeled else []
            losses = pretrain_step(pair, labeled, unlabeled, rng, cfg, opt)
            if log:
                log.write(f"{step}\t{losses['L_sup']:.6f}\t{losses['L_inst_global']:.6f}"
                          f"\t{losses['L_inst_local']:.6f}\t{lr:.6g}\n")
            step += 1
    if log:
        log.close()
    return pair


def run_finetune(cfg: TrainConfig, split, pair: StudentTeacherPair, log_path=None):
    """Stage 2, continuing from a stage-1 pair (or a fresh one)."""
    rng = seed_everything(cfg.seed + 1)
    opt = make_optimizer(pair.student, cfg)
    bank = ClassMemoryBank(cfg.num_classes_total, cfg.bank_capacity)
    driver = split.unlabeled if split.unlabeled else split.labeled
    log = open(log_path, "w") if log_path else None
    if log:
        log.write("step\tL_sup\tL_contrast\tL_eqv\tL_unsup\tL_nn\ttotal\tquery_counts\n")
    step = 0
    for _epoch in range(cfg.finetune_epochs):
        for idx in _batches(len(driver), cfg.batch_size, rng):
            set_lr(opt, cfg, step)
            labeled = _sample_batch(split.labeled, cfg.batch_size, rng)
            unlabeled = [split.unlabeled[i] for i in idx] if split.unlabeled else []
            losses = finetune_step(pair, labeled, unlabeled, bank, rng, cfg, opt)
            if log:
                qc = ";".join(f"{c}:{e}/{h}" for c, (e, h)
                              in sorted(losses["query_counts"].items()))
                log.write(f"{step}\t{losses['L_sup']:.6f}\t{losses['L_contrast']:.6f}"
                          f"\t{losses['L_eqv']:.6f}\t{losses['L_unsup']:.6f}"
                          f"\t{losses['L_nn']:.6f}\t{losses['total']:.6f}\t{qc}\n")
            step += 1
    if log:
        log.close()
    return pair, bank
