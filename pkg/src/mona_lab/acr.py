"""Stage-2 anatomical contrastive reconstruction.

Per-class query/key representation sets, easy/hard query splitting, active
anchor sampling, the class-aware FIFO memory bank, the pixel contrastive
loss, the class relation graph, the equivariance loss, the nearest-neighbor
diversity loss, the masked unsupervised cross-entropy, and the total
fine-tuning objective.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import TransformRecord, apply_spatial, apply_warp
from .nets import SegModel, l2_normalize

KL_EPS = 1e-12


@dataclass
class ClassSets:
    queries: torch.Tensor          # n_q x D unit rows, label == c
    keys: torch.Tensor             # n_k x D unit rows, label != c
    positive_key: torch.Tensor     # D, renormalized mean of queries
    confidences: torch.Tensor      # n_q, in [0, 1]


@dataclass
class RepresentationSets:
    per_class: Dict[int, ClassSets]

    def classes(self):
        return sorted(self.per_class)


@dataclass
class QuerySplit:
    easy: torch.Tensor   # indices into the class query set
    hard: torch.Tensor


def build_representation_sets(reps: torch.Tensor, label_map,
                              class_set: Sequence[int],
                              confidences=None) -> RepresentationSets:
    """Partition per-pixel representations into per-class query/key sets.

    `reps` is D x H x W (unit-norm per pixel) or N x D; `label_map` matches
    spatially. Classes absent from the batch are skipped.
    """
    if reps.dim() == 3:
        d = reps.shape[0]
        flat = reps.reshape(d, -1).t()
    else:
        flat = reps
    label = torch.as_tensor(np.asarray(label_map)).reshape(-1)
    if label.shape[0] != flat.shape[0]:
        raise ValueError(f"label map size {label.shape[0]} vs {flat.shape[0]} representations")
    if confidences is None:
        conf = torch.ones(flat.shape[0], dtype=flat.dtype)
    else:
        conf = torch.as_tensor(np.asarray(confidences), dtype=flat.dtype).reshape(-1)
    per_class = {}
    for c in class_set:
        mask = label == c
        if not bool(mask.any()):
            continue
        queries = flat[mask]
        keys = flat[~mask]
        pos = l2_normalize(queries.mean(dim=0), dim=0)
        per_class[int(c)] = ClassSets(queries=queries, keys=keys,
                                      positive_key=pos, confidences=conf[mask])
    return RepresentationSets(per_class=per_class)


def split_easy_hard(queries: torch.Tensor, confidences: torch.Tensor,
                    delta_theta: float) -> QuerySplit:
    """Easy iff confidence strictly exceeds the threshold."""
    confidences = torch.as_tensor(confidences)
    easy = torch.nonzero(confidences > delta_theta, as_tuple=False).reshape(-1)
    hard = torch.nonzero(confidences <= delta_theta, as_tuple=False).reshape(-1)
    return QuerySplit(easy=easy, hard=hard)


class ClassMemoryBank:
    """Per-class FIFO buffer of key vectors with fixed capacity."""

    def __init__(self, num_classes: int, capacity: int = 36):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.num_classes = num_classes
        self.buffers = {c: deque(maxlen=capacity) for c in range(num_classes)}

    def push(self, cls: int, keys) -> None:
        if cls not in self.buffers:
            raise KeyError(f"unknown class index {cls}")
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        for k in keys:
            self.buffers[cls].append(k.copy())

    def entries(self, cls: int) -> np.ndarray:
        if cls not in self.buffers:
            raise KeyError(f"unknown class index {cls}")
        buf = self.buffers[cls]
        return np.stack(buf) if buf else np.zeros((0,))

    def negatives(self, cls: int) -> np.ndarray:
        """All stored entries of classes other than `cls`."""
        if cls not in self.buffers:
            raise KeyError(f"unknown class index {cls}")
        chunks = [np.stack(self.buffers[c]) for c in sorted(self.buffers)
                  if c != cls and self.buffers[c]]
        if not chunks:
            return np.zeros((0,))
        return np.concatenate(chunks, axis=0)

    def all_entries(self) -> np.ndarray:
        chunks = [np.stack(self.buffers[c]) for c in sorted(self.buffers) if self.buffers[c]]
        if not chunks:
            return np.zeros((0,))
        return np.concatenate(chunks, axis=0)

    def sizes(self) -> dict:
        return {c: len(b) for c, b in self.buffers.items()}


def _draw(pool_size: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample without replacement until the pool is exhausted, then with."""
    if pool_size >= n:
        return rng.choice(pool_size, size=n, replace=False)
    extra = rng.choice(pool_size, size=n - pool_size, replace=True)
    return np.concatenate([np.arange(pool_size), extra])


def sample_anchors(sets: RepresentationSets, delta_theta: float,
                   bank: Optional[ClassMemoryBank], n_q: int, n_k: int,
                   rng: np.random.Generator) -> dict:
    """Per class: up to n_q queries (hard first) and n_k negatives drawn from
    in-batch keys plus bank entries of other classes."""
    if n_q < 1 or n_k < 1:
        raise ValueError("n_q and n_k must be >= 1")
    out = {}
    for c in sets.classes():
        cs = sets.per_class[c]
        split = split_easy_hard(cs.queries, cs.confidences, delta_theta)
        hard, easy = split.hard.numpy(), split.easy.numpy()
        if len(hard) >= n_q:
            q_idx = hard[_draw(len(hard), n_q, rng)]
        elif len(easy):
            q_idx = np.concatenate([hard, easy[_draw(len(easy), n_q - len(hard), rng)]])
        else:
            q_idx = hard[_draw(len(hard), n_q, rng)]
        q_idx = q_idx.astype(np.int64)
        queries = cs.queries[torch.as_tensor(q_idx, dtype=torch.long)]
        neg_pool = [cs.keys]
        if bank is not None:
            bn = bank.negatives(c)
            if bn.size:
                neg_pool.append(torch.as_tensor(bn, dtype=cs.keys.dtype))
        negs = torch.cat([p for p in neg_pool if p.numel()], dim=0) \
            if any(p.numel() for p in neg_pool) else cs.keys
        if negs.shape[0] == 0:
            continue
        n_idx = _draw(negs.shape[0], n_k, rng)
        out[c] = (queries, cs.positive_key, negs[torch.as_tensor(n_idx, dtype=torch.long)])
    return out


def anatomical_contrastive_loss(queries: torch.Tensor, positive_key: torch.Tensor,
                                negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE-style pull to the class-mean positive, push from negatives;
    mean over queries."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if negatives.shape[0] < 1:
        raise ValueError("need at least one negative key")
    pos_logit = queries @ positive_key / tau              # n_q
    neg_logits = queries @ negatives.t().detach() / tau   # n_q x n_k
    denom = torch.logsumexp(
        torch.cat([pos_logit.unsqueeze(1), neg_logits], dim=1), dim=1)
    return (denom - pos_logit).mean()


def contrastive_loss_over_classes(anchors: dict, tau: float) -> torch.Tensor:
    """Mean over present classes of the per-class contrastive loss."""
    losses = [anatomical_contrastive_loss(q, p, n, tau) for q, p, n in anchors.values()]
    if not losses:
        return torch.zeros(())
    return torch.stack(losses).mean()


def class_graph(positive_keys: Dict[int, torch.Tensor]) -> np.ndarray:
    """Pairwise dot products of class-mean keys; diagonal fixed to zero."""
    classes = sorted(positive_keys)
    if len(classes) < 2:
        raise ValueError("class graph needs at least 2 classes")
    vecs = torch.stack([positive_keys[c] for c in classes]).detach()
    g = (vecs @ vecs.t()).numpy().astype(np.float64)
    np.fill_diagonal(g, 0.0)
    return g


def symmetric_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Pixel-averaged KL(p||q) + KL(q||p) over channel-dim-0 probability maps."""
    lp = torch.log(p + KL_EPS)
    lq = torch.log(q + KL_EPS)
    kl_pq = (p * (lp - lq)).sum(dim=0)
    kl_qp = (q * (lq - lp)).sum(dim=0)
    return (kl_pq + kl_qp).mean()


def equivariance_loss(model: SegModel, image: np.ndarray,
                      record: TransformRecord) -> torch.Tensor:
    """Symmetric KL between transform-then-predict and predict-then-transform."""
    if not record.is_invertible():
        raise ValueError("equivariance transform must be spatially invertible")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(image, dtype=dtype)
    logits, _, _ = model(x)
    logits_t, _, _ = model(torch.as_tensor(
        np.clip(apply_spatial(record, np.asarray(image, dtype=np.float64)), 0, 1), dtype=dtype))
    p = F.softmax(apply_spatial(record, logits[0]), dim=0)
    q = F.softmax(logits_t[0], dim=0)
    return symmetric_kl(p, q)


def nearest_neighbor_loss(reps: torch.Tensor, bank: ClassMemoryBank,
                          k: int) -> torch.Tensor:
    """Mean (1 - cosine similarity) to each rep's K nearest bank entries."""
    if k < 1:
        raise ValueError("K must be >= 1")
    entries = bank.all_entries()
    if entries.size == 0:
        raise ValueError("memory bank is empty")
    bank_t = torch.as_tensor(entries, dtype=reps.dtype)
    sims = reps @ bank_t.t()
    kk = min(k, bank_t.shape[0])
    top = sims.topk(kk, dim=1).values
    return (1.0 - top).mean()


def unsup_ce(student_logits: torch.Tensor, pseudo_label, mask) -> torch.Tensor:
    """Cross-entropy on confidently pseudo-labeled pixels; 0 if none."""
    if student_logits.dim() == 4:
        student_logits = student_logits[0]
    label = torch.as_tensor(np.asarray(pseudo_label), dtype=torch.long)
    mask_t = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    if not bool(mask_t.any()):
        return torch.zeros((), dtype=student_logits.dtype)
    c = student_logits.shape[0]
    flat = student_logits.reshape(c, -1).t()
    return F.cross_entropy(flat[mask_t.reshape(-1)], label.reshape(-1)[mask_t.reshape(-1)])


def finetune_total_loss(terms: dict, lambdas) -> torch.Tensor:
    """L_sup + l1*L_contrast + l2*L_eqv + l3*L_unsup + l4*L_nn."""
    order = ("L_sup", "L_contrast", "L_eqv", "L_unsup", "L_nn")
    for name in order:
        t = terms[name]
        val = t.detach().item() if isinstance(t, torch.Tensor) else float(t)
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite loss term {name}: {val}")
    l1, l2, l3, l4 = lambdas
    return (terms["L_sup"] + l1 * terms["L_contrast"] + l2 * terms["L_eqv"]
            + l3 * terms["L_unsup"] + l4 * terms["L_nn"])


def _teacher_view(sample, rng, cfg):
    from .augment import strong_chain, weak_chain
    if getattr(cfg, "teacher_aug", "weak") == "strong":
        view, rec = weak_chain(sample, rng, cfg.aug)
        view, rec2 = strong_chain(view, None, rng, _no_cutmix(cfg.aug),
                                  base_record=None)
        return view, rec2
    return weak_chain(sample, rng, cfg.aug)


def _no_cutmix(aug):
    from dataclasses import replace
    return replace(aug, cutmix_prob=0.0)


def finetune_step(pair, labeled, unlabeled, bank: ClassMemoryBank,
                  rng: np.random.Generator, cfg,
                  optimizer: torch.optim.Optimizer) -> dict:
    """One stage-2 step.

    Teacher sees weakly augmented inputs and provides pseudo-labels and
    confidences; the student sees the configured augmentation built on the
    same spatial base, so maps stay pixel-aligned. All five loss terms are
    computed, one SGD step is taken, the teacher is EMA-updated, and the
    step's class-mean keys are pushed into the bank.
    """
    from .augment import identity_record, make_record, strong_chain
    from .pretrain import supervised_loss

    student, teacher = pair.student, pair.teacher
    dtype = next(student.parameters()).dtype
    n_cls = student.num_classes
    lambdas = (cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4)
    need_contrast = cfg.lambda1 > 0
    need_eqv = cfg.lambda2 > 0
    need_unsup = cfg.lambda3 > 0
    need_nn = cfg.lambda4 > 0
    need_reps = need_contrast or need_nn
    use_unlabeled = need_unsup or need_reps or need_eqv

    def tensor(img):
        return torch.as_tensor(img, dtype=dtype)

    # teacher pass over the unlabeled batch first, so CutMix donors can carry
    # their own pseudo-labels into the pasted box
    unlab_views = []
    for s in (unlabeled if use_unlabeled else []):
        weak_s, _ = _teacher_view(s, rng, cfg)
        with torch.no_grad():
            t_logits, t_feats, _ = teacher(tensor(weak_s.image))
            probs = F.softmax(t_logits[0], dim=0)
            conf, pseudo = probs.max(dim=0)
        unlab_views.append({"weak": weak_s, "pseudo": pseudo.numpy(),
                            "conf": conf.numpy().astype(np.float64)})

    loss_sup = torch.zeros((), dtype=dtype)
    loss_unsup = torch.zeros((), dtype=dtype)
    loss_eqv = torch.zeros((), dtype=dtype)
    rep_rows, rep_labels, rep_confs = [], [], []
    teacher_keys = {}   # class -> list of mean-key tensors for the bank push
    n_eqv = 0

    def accumulate_reps(feats, label_flat, conf_flat):
        reps = student.representation_head(feats)[0]          # D x H x W
        rep_rows.append(reps.reshape(reps.shape[0], -1).t())
        rep_labels.append(label_flat)
        rep_confs.append(conf_flat)

    def teacher_mean_keys(image, label):
        with torch.no_grad():
            _, t_feats, _ = teacher(tensor(image))
            t_reps = teacher.representation_head(t_feats)[0]
            flat = t_reps.reshape(t_reps.shape[0], -1).t()
        lab = torch.as_tensor(label.reshape(-1))
        for c in range(n_cls):
            m = lab == c
            if bool(m.any()):
                key = l2_normalize(flat[m].mean(dim=0), dim=0)
                if cfg.bank_store == "pixels":
                    idx = np.asarray(m.nonzero().reshape(-1))
                    pick = idx[rng.integers(0, len(idx), size=min(4, len(idx)))]
                    teacher_keys.setdefault(c, []).extend(
                        flat[torch.as_tensor(pk)] for pk in np.atleast_1d(pick))
                else:
                    teacher_keys.setdefault(c, []).append(key)

    # labeled samples: supervised loss on ground truth
    for s in labeled:
        weak_s, _ = _teacher_view(s, rng, cfg)
        if cfg.student_aug == "strong":
            stu_s, _ = strong_chain(weak_s, None, rng, _no_cutmix(cfg.aug),
                                    base_record=identity_record(*weak_s.image.shape))
        else:
            stu_s = weak_s
        logits, feats, _ = student(tensor(stu_s.image))
        loss_sup = loss_sup + supervised_loss(logits, stu_s.label)
        if need_reps:
            with torch.no_grad():
                t_logits, _, _ = teacher(tensor(weak_s.image))
                conf = F.softmax(t_logits[0], dim=0).max(dim=0).values.numpy()
            accumulate_reps(feats, stu_s.label.reshape(-1).astype(np.int64),
                            conf.reshape(-1).astype(np.float64))
            teacher_mean_keys(weak_s.image, stu_s.label)
        if need_eqv and n_eqv < 2:
            rec = make_record(*stu_s.image.shape,
                              angle=float(rng.uniform(-cfg.rot_degrees, cfg.rot_degrees)),
                              flip=bool(rng.random() < 0.5))
            loss_eqv = loss_eqv + _eqv_from_logits(student, stu_s.image, logits, rec, dtype)
            n_eqv += 1

    # unlabeled samples: pseudo-label losses
    for i, uv in enumerate(unlab_views):
        weak_s, pseudo, conf = uv["weak"], uv["pseudo"], uv["conf"]
        if cfg.student_aug == "strong" and len(unlab_views) > 1:
            j = int(rng.integers(0, len(unlab_views)))
            donor = unlab_views[j]
            stu_s, rec = strong_chain(weak_s, donor["weak"], rng, cfg.aug,
                                      base_record=identity_record(*weak_s.image.shape))
            # warp targets to match the student's elastically warped input;
            # the CutMix box is pasted after the warp, so paste donor targets
            # (which align with the unwarped donor image) afterwards
            pseudo = apply_warp(rec, pseudo, order=0).astype(np.int64)
            conf = apply_warp(rec, conf)
            if rec.cutmix_box is not None:
                r0, c0, bh, bw = rec.cutmix_box
                pseudo[r0:r0 + bh, c0:c0 + bw] = donor["pseudo"][r0:r0 + bh, c0:c0 + bw]
                conf[r0:r0 + bh, c0:c0 + bw] = donor["conf"][r0:r0 + bh, c0:c0 + bw]
        elif cfg.student_aug == "strong":
            stu_s, rec = strong_chain(weak_s, None, rng, _no_cutmix(cfg.aug),
                                    base_record=identity_record(*weak_s.image.shape))
            pseudo = apply_warp(rec, pseudo, order=0).astype(np.int64)
            conf = apply_warp(rec, conf)
        else:
            stu_s = weak_s
        logits, feats, _ = student(tensor(stu_s.image))
        if need_unsup:
            mask = conf > cfg.delta_theta
            loss_unsup = loss_unsup + unsup_ce(logits, pseudo, mask)
        if need_reps:
            accumulate_reps(feats, pseudo.reshape(-1).astype(np.int64),
                            conf.reshape(-1))
            teacher_mean_keys(weak_s.image, pseudo)
        if need_eqv and n_eqv < 4:
            rec = make_record(*stu_s.image.shape,
                              angle=float(rng.uniform(-cfg.rot_degrees, cfg.rot_degrees)),
                              flip=bool(rng.random() < 0.5))
            loss_eqv = loss_eqv + _eqv_from_logits(student, stu_s.image, logits, rec, dtype)
            n_eqv += 1

    if labeled:
        loss_sup = loss_sup / len(labeled)
    if unlab_views:
        loss_unsup = loss_unsup / len(unlab_views)
    if n_eqv:
        loss_eqv = loss_eqv / n_eqv

    # anatomical contrastive loss over the pooled pixel representations
    loss_contrast = torch.zeros((), dtype=dtype)
    query_counts = {}
    sampled_queries = None
    if rep_rows:
        flat = torch.cat(rep_rows, dim=0)
        labs = np.concatenate(rep_labels)
        confs = np.concatenate(rep_confs)
        sets = build_representation_sets(flat, labs, range(n_cls), confs)
        anchors = sample_anchors(sets, cfg.delta_theta, bank,
                                 cfg.n_queries, cfg.n_keys, rng)
        if anchors:
            loss_contrast = contrastive_loss_over_classes(anchors, cfg.tau)
            sampled_queries = torch.cat([q for q, _, _ in anchors.values()], dim=0)
        for c in sets.classes():
            cs = sets.per_class[c]
            sp = split_easy_hard(cs.queries, cs.confidences, cfg.delta_theta)
            query_counts[c] = (int(sp.easy.numel()), int(sp.hard.numel()))

    # nearest-neighbor diversity loss against the bank
    loss_nn = torch.zeros((), dtype=dtype)
    if need_nn and sampled_queries is not None and bank.all_entries().size:
        loss_nn = nearest_neighbor_loss(sampled_queries, bank, cfg.knn)

    terms = {"L_sup": loss_sup, "L_contrast": loss_contrast, "L_eqv": loss_eqv,
             "L_unsup": loss_unsup, "L_nn": loss_nn}
    total = finetune_total_loss(terms, lambdas)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    pair.ema_update()
    for c, keys in teacher_keys.items():
        bank.push(c, torch.stack(keys).numpy())

    out = {k: v.detach().item() for k, v in terms.items()}
    out["total"] = total.detach().item()
    out["query_counts"] = query_counts
    return out


def _eqv_from_logits(student, image, logits, record, dtype):
    """Equivariance term reusing the already-computed logits for F(x)."""
    logits_t, _, _ = student(torch.as_tensor(
        np.clip(apply_spatial(record, np.asarray(image, dtype=np.float64)), 0, 1),
        dtype=dtype))
    p = F.softmax(apply_spatial(record, logits[0]), dim=0)
    q = F.softmax(logits_t[0], dim=0)
    return symmetric_kl(p, q)
