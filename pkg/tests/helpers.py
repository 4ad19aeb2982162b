"""Shared test utilities: independent oracles and synthetic data builders.

Everything here deliberately avoids the package's own vectorized paths so
tests compare two independent routes to the same value.
"""

from __future__ import annotations

import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from drnet.data import ImageSample


# ---------------------------------------------------------------- oracles


def loop_confusion(pred: np.ndarray, gt: np.ndarray, fov: np.ndarray | None = None):
    """Per-pixel double loop tally of (tp, fp, tn, fn)."""
    tp = fp = tn = fn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if fov is not None and fov[i, j] == 0:
                continue
            p, g = int(pred[i, j]), int(gt[i, j])
            if p == 1 and g == 1:
                tp += 1
            elif p == 1 and g == 0:
                fp += 1
            elif p == 0 and g == 0:
                tn += 1
            else:
                fn += 1
    return tp, fp, tn, fn


def exact_sen_spe_acc(tp: int, fp: int, tn: int, fn: int):
    return (
        Fraction(tp, tp + fn),
        Fraction(tn, tn + fp),
        Fraction(tp + tn, tp + fp + tn + fn),
    )


def exact_mcc(tp: int, fp: int, tn: int, fn: int) -> float:
    """High-precision MCC: exact rational numerator over a 50-digit sqrt."""
    from decimal import Decimal, getcontext

    getcontext().prec = 50
    num = Decimal(tp * tn - fp * fn)
    den = Decimal((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)).sqrt()
    return float(num / den)


def pairwise_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """O(n^2) comparison count: P(score_pos > score_neg) + 0.5 P(tie)."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def scalar_loop_bce(probs: np.ndarray, targets: np.ndarray, eps: float = 1e-7) -> float:
    total = 0.0
    flat_p = probs.ravel()
    flat_t = targets.ravel()
    for p, t in zip(flat_p, flat_t):
        p = min(max(float(p), eps), 1.0 - eps)
        total += -(float(t) * math.log(p) + (1.0 - float(t)) * math.log(1.0 - p))
    return total / flat_p.size


def is_union_of_squares(dropped: np.ndarray, block_size: int) -> bool:
    """True iff the dropped region is exactly a union of full bs x bs squares."""
    h, w = dropped.shape
    bs = block_size
    if not dropped.any():
        return True
    rebuilt = np.zeros_like(dropped)
    for i in range(h - bs + 1):
        for j in range(w - bs + 1):
            if dropped[i : i + bs, j : j + bs].all():
                rebuilt[i : i + bs, j : j + bs] = True
    return bool((rebuilt == dropped).all())


def fd_gradcheck(
    parameters,
    loss_fn,
    n_per_tensor: int = 50,
    h: float = 1e-6,
    atol: float = 1e-9,
    rtol: float = 1e-5,
    seed: int = 0,
) -> float:
    """Central-difference check of autograd gradients at a generic point.

    Returns the worst error in units of (atol + rtol * gradient scale); a
    value below 1.0 means every sampled entry satisfies
    |analytic - fd| <= atol + rtol * max(|analytic|, |fd|).
    Assumes gradients were already populated by a backward pass.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in parameters:
        assert p.grad is not None
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        n = min(n_per_tensor, flat.numel())
        for k in rng.choice(flat.numel(), size=n, replace=False):
            orig = flat[k].item()
            flat[k] = orig + h
            up = loss_fn().item()
            flat[k] = orig - h
            down = loss_fn().item()
            flat[k] = orig
            fd = (up - down) / (2.0 * h)
            a = grad[k].item()
            err = abs(a - fd) / (atol + rtol * max(abs(a), abs(fd)))
            worst = max(worst, err)
    return worst


def jitter_parameters(module: torch.nn.Module, scale: float = 0.05, seed: int = 99) -> None:
    """Move parameters off their init point.

    Zero-initialized biases sit exactly on relu tie points where the loss
    is non-differentiable; finite differences are only meaningful at a
    generic point.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.empty_like(p).uniform_(-scale, scale, generator=gen))


# ---------------------------------------------------- synthetic datasets


def vessel_arrays(h: int, w: int, variant: int = 0):
    """Deterministic vessel-like (image, gt) pair: bright curves on a dark bed."""
    yy, xx = np.mgrid[0:h, 0:w]
    gt = np.zeros((h, w), dtype=np.uint8)
    for k in range(2 + variant % 2):
        center = (0.25 + 0.5 * ((variant + k) % 3) / 2.0) * h
        curve = center + 0.15 * h * np.sin(2 * np.pi * (xx / w) * (1 + k) + variant)
        gt |= (np.abs(yy - curve) <= max(1, h // 24)).astype(np.uint8)
    texture = 0.08 * np.sin(2 * np.pi * xx / 9.0) * np.cos(2 * np.pi * yy / 7.0)
    image = np.clip(0.25 + 0.5 * gt + texture, 0.0, 1.0).astype(np.float32)
    return image, gt


def make_sample(h: int = 64, w: int = 64, variant: int = 0, sample_id: str = "synthetic"):
    image, gt = vessel_arrays(h, w, variant)
    return ImageSample(id=sample_id, image=image, gt_mask=gt)


def write_dataset(
    root: Path,
    count: int,
    size: tuple[int, int] = (24, 28),
    with_fov: bool = True,
    rgb_indices: tuple[int, ...] = (),
) -> Path:
    """Write a synthetic dataset in the documented directory layout."""
    root = Path(root)
    (root / "images").mkdir(parents=True)
    (root / "GT").mkdir()
    if with_fov:
        (root / "mask").mkdir()
    h, w = size
    for i in range(count):
        image, gt = vessel_arrays(h, w, variant=i)
        img8 = np.round(255.0 * image).astype(np.uint8)
        name = f"img_{i:02d}.png"
        if i in rgb_indices:
            rgb = np.stack([img8, img8, img8], axis=2)
            Image.fromarray(rgb, mode="RGB").save(root / "images" / name)
        else:
            Image.fromarray(img8, mode="L").save(root / "images" / name)
        Image.fromarray(gt * 255, mode="L").save(root / "GT" / name)
        if with_fov:
            fov = np.zeros((h, w), dtype=np.uint8)
            fov[1 : h - 1, 1 : w - 1] = 255
            Image.fromarray(fov, mode="L").save(root / "mask" / name)
    return root
