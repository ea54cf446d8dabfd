"""Brute-force reference implementations used to check the fast metrics."""
import math

import numpy as np


def brute_f1(scores, truth, thr):
    pred = [s >= thr for s in scores]
    tp = sum(p and t for p, t in zip(pred, truth))
    fp = sum(p and not t for p, t in zip(pred, truth))
    fn = sum((not p) and t for p, t in zip(pred, truth))
    if tp == 0:
        return 0.0
    prec, rec = tp / (tp + fp), tp / (tp + fn)
    return 2 * (prec * rec) / (prec + rec)


def brute_sweep(scores, truth):
    """Every distinct score plus +inf as a threshold; ties keep the lowest threshold."""
    cands = sorted(set(float(s) for s in scores)) + [np.inf]
    best, best_thr = -1.0, None
    for thr in cands:  # ascending, so strict > keeps the lowest threshold on ties
        f = brute_f1(scores, truth, thr)
        if f > best:
            best, best_thr = f, thr
    return best, best_thr


def brute_f1_vectorised(scores, truth):
    """Same sweep, counting with numpy over all thresholds at once (for 10^4 pixels)."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    cands = np.r_[np.unique(scores), np.inf]
    pred = scores[None, :] >= cands[:, None]
    tp = (pred & truth).sum(1)
    fp = (pred & ~truth).sum(1)
    fn = (~pred & truth).sum(1)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = tp / (tp + fp)
        rec = tp / (tp + fn)
        f1 = np.where(tp > 0, 2 * (prec * rec) / (prec + rec), 0.0)
    i = int(np.argmax(f1))  # first maximum = lowest threshold
    return float(f1[i]), float(cands[i])


def pairwise_auroc(scores, truth):
    pos = [s for s, t in zip(scores, truth) if t]
    neg = [s for s, t in zip(scores, truth) if not t]
    acc = 0.0
    for p in pos:
        for n in neg:
            acc += 1.0 if p > n else 0.5 if p == n else 0.0
    return acc / (len(pos) * len(neg))


def brute_nn_tour(centers, start):
    """Reference tour: scan all unvisited poses in index order, keep the strictly closer one."""
    n = len(centers)
    order, left = [start], set(range(n)) - {start}
    while left:
        cur = centers[order[-1]]
        best, best_d = None, math.inf
        for j in range(n):
            if j in left:
                d = math.dist(cur, centers[j])
                if d < best_d:
                    best, best_d = j, d
        order.append(best)
        left.remove(best)
    return order


def brute_f1_chunked(scores, truth, chunk=512):
    """``brute_f1_vectorised`` over threshold blocks, for 10^4 distinct scores."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    cands = np.r_[np.unique(scores), np.inf]
    best, best_thr = -1.0, None
    for i in range(0, len(cands), chunk):
        c = cands[i:i + chunk]
        pred = scores[None, :] >= c[:, None]
        tp = (pred & truth).sum(1)
        fp = (pred & ~truth).sum(1)
        fn = (~pred & truth).sum(1)
        with np.errstate(invalid="ignore", divide="ignore"):
            prec = tp / (tp + fp)
            rec = tp / (tp + fn)
            f1 = np.where(tp > 0, 2 * (prec * rec) / (prec + rec), 0.0)
        j = int(np.argmax(f1))
        if f1[j] > best:
            best, best_thr = float(f1[j]), float(c[j])
    return best, best_thr


def pairwise_auroc_numpy(scores, truth):
    """O(n^2) pairwise comparison with broadcasting."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    p, n = scores[truth][:, None], scores[~truth][None, :]
    return float(((p > n).sum() + 0.5 * (p == n).sum()) / (p.size * n.size))


def fd_gradient_check(model, x, per_param=3, eps=1e-6, seed=0):
    """Worst relative error between autograd and central differences of the
    distillation loss, sampling a few coordinates of every student parameter."""
    import torch

    from scenead.model import distillation_loss

    t = model.teacher_forward(x)

    def loss():
        return distillation_loss(t, model.student_forward(t))

    model.zero_grad()
    loss().backward()
    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    for p in model.student_parameters():
        flat, grad = p.data.view(-1), p.grad.view(-1)
        for idx in rng.choice(p.numel(), size=min(per_param, p.numel()), replace=False):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                lp = loss().item()
                flat[idx] = orig - eps
                lm = loss().item()
                flat[idx] = orig
            num, ana = (lp - lm) / (2 * eps), grad[idx].item()
            if max(abs(num), abs(ana)) > 1e-9:
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana)))
                checked += 1
    return worst, checked
