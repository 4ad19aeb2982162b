"""Built-in release gate: re-runs the package's oracle checks at small scale.

Each suite recomputes expected values through an independent route (pixel
loops, exact rational arithmetic, pairwise comparisons, finite differences)
and compares against the production implementations.  Intended for
``drnet selftest``; the full pytest suite covers the same ground at larger
scale.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from . import data, metrics, model as model_mod, reporting
from .blocks import Compression, DoubleResidualBlock, DropBlockConfig, dropblock_apply
from .model import DRNet, ModelConfig, build, load_weights, save_weights
from .training import bce_loss


@dataclass
class SelfTestResult:
    name: str
    passed: bool
    detail: str


def _loop_confusion(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    tp = fp = tn = fn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
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


def _exact_mcc(tp: int, fp: int, tn: int, fn: int) -> float:
    num = Fraction(tp * tn - fp * fn)
    den_sq = Fraction((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    # mcc = num / sqrt(den_sq); compare via float at the end.
    import math

    return float(num) / math.sqrt(float(den_sq))


def _suite_metric_oracles() -> SelfTestResult:
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(60):
        h, w = rng.integers(2, 24, size=2)
        pred = rng.integers(0, 2, size=(h, w)).astype(np.uint8)
        gt = rng.integers(0, 2, size=(h, w)).astype(np.uint8)
        c = metrics.confusion_counts(pred, gt)
        tp, fp, tn, fn = _loop_confusion(pred, gt)
        if (c.tp, c.fp, c.tn, c.fn) != (tp, fp, tn, fn):
            return SelfTestResult("metric_oracles", False, "confusion counts mismatch")
        if min(tp + fn, tn + fp, tp + fp, tn + fn) == 0:
            continue
        pairs = [
            (metrics.sen(c), Fraction(tp, tp + fn)),
            (metrics.spe(c), Fraction(tn, tn + fp)),
            (metrics.acc(c), Fraction(tp + tn, c.n)),
        ]
        for got, exact in pairs:
            worst = max(worst, abs(got - float(exact)))
        worst = max(worst, abs(metrics.mcc(c) - _exact_mcc(tp, fp, tn, fn)))
    ok = worst <= 1e-12
    return SelfTestResult("metric_oracles", ok, f"max deviation {worst:.2e}")


def _pairwise_auc(scores: np.ndarray, labels: np.ndarray) -> float:
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


def _suite_auc_paths() -> SelfTestResult:
    rng = np.random.default_rng(202)
    worst_gap = 0.0
    worst_oracle = 0.0
    for trial in range(30):
        n = int(rng.integers(20, 150))
        # Quantized scores force heavy ties.
        levels = int(rng.integers(2, 12)) if trial % 2 == 0 else 0
        scores = rng.random(n)
        if levels:
            scores = np.round(scores * levels) / levels
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0], labels[-1] = 0, 1
        a = metrics.auc(scores.reshape(1, -1), labels.reshape(1, -1))
        b = metrics._auc_rank(scores.astype(np.float64), labels)
        worst_gap = max(worst_gap, abs(a - b))
        worst_oracle = max(worst_oracle, abs(a - _pairwise_auc(scores, labels)))
    ok = worst_gap <= 1e-9 and worst_oracle <= 1e-9
    return SelfTestResult(
        "auc_paths", ok, f"path gap {worst_gap:.2e}, oracle gap {worst_oracle:.2e}"
    )


def _suite_dropblock() -> SelfTestResult:
    cfg = DropBlockConfig(block_size=7, keep_prob=0.86, training=True)
    ones = np.ones((100, 32, 32), dtype=np.float32)
    fractions = []
    for seed in range(5):
        out = dropblock_apply(ones, cfg, rng_seed=seed)
        fractions.append(float((out == 0).mean()))
    mean_dropped = float(np.mean(fractions))
    if abs(mean_dropped - 0.14) > 0.02:
        return SelfTestResult("dropblock", False, f"dropped fraction {mean_dropped:.4f}")
    # Structure: every dropped region must be a union of full squares.
    out = dropblock_apply(ones, cfg, rng_seed=9)
    for ch in range(10):
        dropped = out[ch] == 0
        if dropped.any() and not _is_union_of_squares(dropped, 7):
            return SelfTestResult("dropblock", False, f"non-square drop region in channel {ch}")
    x = np.random.default_rng(3).random((4, 16, 16)).astype(np.float32)
    inference = dropblock_apply(x, DropBlockConfig(7, 0.86, training=False), rng_seed=1)
    if not np.array_equal(inference, x):
        return SelfTestResult("dropblock", False, "inference mode is not the identity")
    return SelfTestResult("dropblock", True, f"dropped fraction {mean_dropped:.4f}")


def _is_union_of_squares(dropped: np.ndarray, bs: int) -> bool:
    h, w = dropped.shape
    eroded = np.zeros((h - bs + 1, w - bs + 1), dtype=bool)
    for i in range(h - bs + 1):
        for j in range(w - bs + 1):
            eroded[i, j] = dropped[i : i + bs, j : j + bs].all()
    rebuilt = np.zeros_like(dropped)
    for i in range(h - bs + 1):
        for j in range(w - bs + 1):
            if eroded[i, j]:
                rebuilt[i : i + bs, j : j + bs] = True
    return bool((rebuilt == dropped).all())


def _fd_check(module: torch.nn.Module, x: torch.Tensor, n_per_tensor: int = 6) -> float:
    """Max gradcheck error |analytic - fd| / (atol + rtol * scale), < 1 passes.

    Parameters are jittered to a generic point first: zero-initialized
    biases sit exactly on relu tie points, where the loss is genuinely
    non-differentiable and central differences straddle the kink.
    """
    module = module.double().eval()
    jitter = torch.Generator().manual_seed(13)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.empty_like(p).uniform_(-0.05, 0.05, generator=jitter))
    x = x.double()
    with torch.no_grad():
        out_shape = module(x).shape
    target = (torch.arange(int(np.prod(out_shape))).reshape(out_shape) % 2).double()

    def loss_value() -> torch.Tensor:
        return bce_loss(torch.sigmoid(module(x)), target)

    loss = loss_value()
    loss.backward()
    h = 1e-6
    atol, rtol = 1e-9, 1e-5
    rng = np.random.default_rng(77)
    worst = 0.0
    for p in module.parameters():
        grad = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        n = min(n_per_tensor, flat.numel())
        for k in rng.choice(flat.numel(), size=n, replace=False):
            orig = flat[k].item()
            flat[k] = orig + h
            up = loss_value().item()
            flat[k] = orig - h
            down = loss_value().item()
            flat[k] = orig
            fd = (up - down) / (2 * h)
            a = grad[k].item()
            worst = max(worst, abs(a - fd) / (atol + rtol * max(abs(a), abs(fd))))
    return worst


def _suite_gradients() -> SelfTestResult:
    torch.manual_seed(5)
    worst = 0.0
    drb = DoubleResidualBlock(3)
    worst = max(worst, _fd_check(drb, torch.randn(1, 3, 8, 8)))
    comp = Compression(4, 2, DropBlockConfig(3, 0.9))
    worst = max(worst, _fd_check(comp, torch.randn(1, 4, 8, 8)))
    ok = worst < 1.0
    return SelfTestResult("gradients", ok, f"worst error {worst:.3f}x tolerance")


def _suite_round_trips() -> SelfTestResult:
    rng = np.random.default_rng(11)
    img = rng.random((20, 26)).astype(np.float32)
    gt = rng.integers(0, 2, size=(20, 26)).astype(np.uint8)
    sample = data.ImageSample(id="s", image=img, gt_mask=gt)
    padded = data.pad_to(sample, 32)
    if not np.array_equal(data.crop_back(padded.image, padded), img):
        return SelfTestResult("round_trips", False, "pad/crop failed on image")
    if not np.array_equal(data.crop_back(padded.gt_mask, padded), gt):
        return SelfTestResult("round_trips", False, "pad/crop failed on ground truth")

    cfg = ModelConfig(initial_channels=2, encoder_steps=2, input_size=16,
                      dropblock=DropBlockConfig(3, 0.9))
    model, store = build(cfg, rng_seed=1)
    with tempfile.TemporaryDirectory() as td:
        path = Path(td) / "weights.ckpt"
        save_weights(store, path)
        loaded = load_weights(path)
    if loaded != store:
        return SelfTestResult("round_trips", False, "checkpoint round trip not bit-exact")

    pool = [data.ImageSample(id=f"i{k:02d}", image=img, gt_mask=gt) for k in range(20)]
    s1 = data.split_train_val(pool, 0.1, seed=3)
    s2 = data.split_train_val(pool, 0.1, seed=3)
    if len(s1.train) != 18 or len(s1.val) != 2:
        return SelfTestResult("round_trips", False, "20-pool split is not 18/2")
    if [s.id for s in s1.val] != [s.id for s in s2.val]:
        return SelfTestResult("round_trips", False, "split not deterministic per seed")
    return SelfTestResult("round_trips", True, "pad/crop, checkpoint, split all exact")


def _suite_report_reference() -> SelfTestResult:
    for dataset in ("iostar", "rcslo"):
        rendered = reporting.baseline_rows_markdown(dataset)
        packaged = reporting.packaged_baseline_rows(dataset)
        if rendered != packaged:
            return SelfTestResult(
                "report_reference", False, f"{dataset} baseline rows drifted from reference"
            )
    return SelfTestResult("report_reference", True, "baseline rows match packaged reference")


SUITES = (
    _suite_metric_oracles,
    _suite_auc_paths,
    _suite_dropblock,
    _suite_gradients,
    _suite_round_trips,
    _suite_report_reference,
)


def run_selftest(verbose: bool = True) -> list[SelfTestResult]:
    results = []
    for suite in SUITES:
        t0 = time.perf_counter()
        res = suite()
        dt = time.perf_counter() - t0
        results.append(res)
        if verbose:
            status = "PASS" if res.passed else "FAIL"
            print(f"[{status}] {res.name}: {res.detail} ({dt:.1f}s)")
    if verbose:
        failed = sum(1 for r in results if not r.passed)
        print(f"{len(results) - failed}/{len(results)} suites passed")
    return results
