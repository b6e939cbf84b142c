"""Stage-1 relational semi-supervised pre-training.

Relation distributions over mined views (student vs teacher, different
temperatures), the KL instance-discrimination loss, the dice+cross-entropy
supervised loss, and the single training step combining them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentParams, identity_record, strong_chain, weak_chain
from .data import Sample2D
from .nets import EmbeddingBatch, SegModel, StudentTeacherPair, make_windows

DICE_EPS = 1e-5


@dataclass
class MinedViewSet:
    views: list                     # augmented Sample2D, drawn without replacement
    embeddings: EmbeddingBatch      # teacher embeddings, one row per view


@dataclass
class RelationDistribution:
    log_probs: torch.Tensor
    temperature: float


def relation_distribution(anchor: torch.Tensor, mined: torch.Tensor,
                          temperature: float) -> RelationDistribution:
    """Log-softmax of cosine similarities between one anchor embedding and a
    batch of mined-view embeddings."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if mined.shape[0] < 2:
        raise ValueError("need at least 2 mined views")
    sims = mined @ anchor
    return RelationDistribution(F.log_softmax(sims / temperature, dim=0), temperature)


def instance_discrimination_loss(s_student: RelationDistribution,
                                 s_teacher: RelationDistribution) -> torch.Tensor:
    """KL(student || teacher) with the teacher side treated as a constant."""
    lp = s_student.log_probs
    lq = s_teacher.log_probs.detach()
    if lp.shape != lq.shape:
        raise ValueError(f"length mismatch {lp.shape} vs {lq.shape}")
    p = lp.exp()
    return (p * (lp - lq)).sum()


def soft_dice_loss(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Per-class soft Dice loss averaged over all classes."""
    if logits.dim() == 4:
        logits = logits[0]
    c = logits.shape[0]
    p = F.softmax(logits, dim=0).reshape(c, -1)
    g = F.one_hot(label.reshape(-1), num_classes=c).to(p.dtype).t()
    inter = (p * g).sum(dim=1)
    denom = p.sum(dim=1) + g.sum(dim=1)
    return (1.0 - (2 * inter + DICE_EPS) / (denom + DICE_EPS)).mean()


def supervised_loss(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Equal combination of soft Dice loss and pixelwise cross-entropy."""
    if logits.dim() == 4:
        logits = logits[0]
    label = torch.as_tensor(np.asarray(label), dtype=torch.long)
    ce = F.cross_entropy(logits.unsqueeze(0), label.unsqueeze(0))
    return 0.5 * soft_dice_loss(logits, label) + 0.5 * ce


def mine_views(unlabeled: Sequence[Sample2D], d: int, rng: np.random.Generator,
               aug: AugmentParams) -> list:
    """Draw d distinct unlabeled samples and augment each (spatial-only)."""
    if len(unlabeled) == 0:
        raise ValueError("mined views requested but unlabeled pool is empty")
    idx = rng.choice(len(unlabeled), size=min(d, len(unlabeled)), replace=False)
    return [weak_chain(unlabeled[i], rng, aug)[0] for i in idx]


def _to_tensor(img: np.ndarray, dtype) -> torch.Tensor:
    return torch.as_tensor(img, dtype=dtype)


def pretrain_step(pair: StudentTeacherPair, labeled: Sequence[Sample2D],
                  unlabeled: Sequence[Sample2D], rng: np.random.Generator,
                  cfg, optimizer: torch.optim.Optimizer) -> dict:
    """One stage-1 step: L_sup + global and local instance discrimination,
    one SGD step on the student, then the EMA teacher update.

    `cfg` needs: tau_theta, tau_xi, mined_views, local_crops, local_crop_size,
    use_instance_losses, aug (AugmentParams), dtype.
    """
    student, teacher = pair.student, pair.teacher
    dtype = next(student.parameters()).dtype
    aug = cfg.aug

    loss_sup = torch.zeros((), dtype=dtype)
    for s in labeled:
        s_aug, _ = weak_chain(s, rng, aug)
        logits, _, _ = student(_to_tensor(s_aug.image, dtype))
        loss_sup = loss_sup + supervised_loss(logits, s_aug.label)
    if labeled:
        loss_sup = loss_sup / len(labeled)

    loss_g = torch.zeros((), dtype=dtype)
    loss_l = torch.zeros((), dtype=dtype)
    # relation distributions need at least 2 mined views, so a remainder
    # batch of one unlabeled sample takes the supervised-only path
    if cfg.use_instance_losses and len(unlabeled) >= 2:
        mined = mine_views(unlabeled, cfg.mined_views, rng, aug)
        m_feats = []
        m_global = []
        with torch.no_grad():
            for v in mined:
                _, fts, gf = teacher(_to_tensor(v.image, dtype))
                m_feats.append(teacher.instance_map(fts))
                m_global.append(teacher.global_embed(gf, use_predictor=False,
                                                     scope_source=("global", "teacher_mined")).vectors[0])
            w_global = torch.stack(m_global)

        for s in unlabeled:
            # shared weak spatial base keeps the two views pixel-aligned, so
            # local crops at the same location compare the same anatomy
            weak_s, _ = weak_chain(s, rng, aug)
            donor = unlabeled[int(rng.integers(0, len(unlabeled)))]
            strong_s, _ = strong_chain(weak_s, donor, rng, aug,
                                       base_record=identity_record(*weak_s.image.shape))
            _, st_feats, st_gf = student(_to_tensor(strong_s.image, dtype))
            with torch.no_grad():
                _, te_feats, te_gf = teacher(_to_tensor(weak_s.image, dtype))
                v_prime = teacher.global_embed(te_gf, use_predictor=False,
                                               scope_source=("global", "teacher_aug")).vectors[0]
            u = student.global_embed(st_gf, use_predictor=True).vectors[0]
            s_th = relation_distribution(u, w_global, cfg.tau_theta)
            s_xi = relation_distribution(v_prime, w_global, cfg.tau_xi)
            loss_g = loss_g + instance_discrimination_loss(s_th, s_xi)

            h, w = strong_s.image.shape
            windows = make_windows(h, w, cfg.local_crops, cfg.local_crop_size, rng)
            st_rep = student.instance_map(st_feats)
            u_loc = student.local_project(st_rep, windows, use_predictor=True).vectors
            with torch.no_grad():
                te_rep = teacher.instance_map(te_feats)
                v_loc = teacher.local_project(te_rep, windows, use_predictor=False,
                                              scope_source=("local", "teacher_aug")).vectors
                w_loc = torch.stack([teacher.local_project(
                    mf, windows, use_predictor=False,
                    scope_source=("local", "teacher_mined")).vectors for mf in m_feats])
            for i in range(len(windows)):
                s_th_l = relation_distribution(u_loc[i], w_loc[:, i, :], cfg.tau_theta)
                s_xi_l = relation_distribution(v_loc[i], w_loc[:, i, :], cfg.tau_xi)
                loss_l = loss_l + instance_discrimination_loss(s_th_l, s_xi_l)
            loss_l = loss_l / len(windows)
        loss_g = loss_g / len(unlabeled)
        loss_l = loss_l / len(unlabeled)

    total = loss_sup + loss_g + loss_l
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    pair.ema_update()
    return {"L_sup": loss_sup.detach().item(),
            "L_inst_global": loss_g.detach().item(),
            "L_inst_local": loss_l.detach().item(),
            "total": total.detach().item()}
