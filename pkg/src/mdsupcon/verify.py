"""Self-check suites run by ``mdsupcon verify``.

Each suite returns ``(passed, detail)``. They are sized to finish in seconds;
the pytest acceptance module runs the same checks at full scale.
"""

from __future__ import annotations

import math
import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from . import ndtensor as nd
from .data import bank_from_bytes, bank_to_bytes, gen_synthetic_multidomain
from .evalsuite import SweepGrid, mean_per_class_accuracy, select_best, top1_accuracy
from .losses import CEBatch, SupConBatch, cross_entropy, supcon_loss, supcon_loss_bruteforce
from .models import EncoderConfig, init_params
from .trainer import ScheduleSpec, checkpoint_from_bytes, checkpoint_to_bytes, lr_at_epoch

LossFn = Callable[[SupConBatch, str], nd.Tensor]


def supcon_inside_log(batch: SupConBatch, reduction: str = "sum") -> nd.Tensor:
    """The rejected variant with the positive average inside the log (for mutation checks)."""
    u = nd.l2_normalize(batch.projections).data
    labels = np.asarray(batch.labels)
    s = u @ u.T / batch.temperature
    n = len(labels)
    total = 0.0
    for i in range(n):
        others = [k for k in range(n) if k != i]
        pos = [j for j in others if labels[j] == labels[i]]
        if not pos:
            continue
        denom = np.sum(np.exp(s[i, others]))
        total += -math.log(np.mean(np.exp(s[i, pos]) / denom))
    return nd.Tensor(np.asarray(total / (n if reduction == "mean" else 1)))


def random_supcon_batch(rng: np.random.Generator) -> SupConBatch:
    n = int(rng.integers(2, 9))
    d = int(rng.integers(2, 17))
    tau = float(rng.uniform(0.04, 1.0))
    labels = np.tile(rng.integers(0, max(2, n // 2), size=n), 2)
    return SupConBatch(rng.standard_normal((2 * n, d)), labels, tau)


def suite_oracle(loss_fn: LossFn = supcon_loss, instances: int = 200, seed: int = 0) -> tuple:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        b = random_supcon_batch(rng)
        worst = max(worst, abs(float(loss_fn(b, "sum").data) - supcon_loss_bruteforce(b)))
    return worst <= 1e-9, f"max |vectorised - brute force| = {worst:.3e} over {instances} batches"


def suite_gradients(instances: int = 10, seed: int = 1) -> tuple:
    rng = np.random.default_rng(seed)
    worst_sc = worst_ce = 0.0
    for _ in range(instances):
        b = random_supcon_batch(rng)
        worst_sc = max(worst_sc, nd.grad_check(
            lambda z: supcon_loss(SupConBatch(z, b.labels, b.temperature), "sum"), b.projections))
        n, k = int(rng.integers(1, 9)), int(rng.integers(2, 11))
        labels = rng.integers(0, k, size=n)
        worst_ce = max(worst_ce, nd.grad_check(
            lambda s: cross_entropy(CEBatch(s, labels, k), "sum"), nd.Tensor(rng.standard_normal((n, k)) * 3)))
    ok = worst_sc <= 1e-5 and worst_ce <= 1e-5
    return ok, f"max rel err supcon {worst_sc:.2e}, cross-entropy {worst_ce:.2e}"


def suite_closed_form() -> tuple:
    errs = []
    for k in (2, 10, 100, 345):
        errs.append(abs(cross_entropy(CEBatch(np.zeros((1, k)), [0]), "sum").item() - math.log(k)))
    labels = [0, 1, 0, 1]
    same = supcon_loss(SupConBatch(np.ones((4, 3)), labels, 0.13), "sum").item()
    errs.append(abs(same - 4 * math.log(3)))
    rng = np.random.default_rng(3)
    flat = supcon_loss(SupConBatch(rng.standard_normal((4, 5)), labels, 1e6), "sum").item()
    ok = max(errs) <= 1e-9 and abs(flat - 4 * math.log(3)) <= 1e-3
    return ok, f"max closed-form err {max(errs):.2e}, tau=1e6 err {abs(flat - 4 * math.log(3)):.2e}"


def suite_schedule() -> tuple:
    spec = ScheduleSpec(0.1, 400, 10, (250, 350), 0.1)
    expect = {5: 0.05, 10: 0.1, 249: 0.1, 250: 0.01, 251: 0.01, 351: 0.001, 400: 0.001}
    got = {e: lr_at_epoch(spec, e) for e in expect}
    bad = {e: got[e] for e in expect if got[e] != expect[e]}
    return not bad, "exact" if not bad else f"mismatches {bad}"


def suite_metrics(instances: int = 100, seed: int = 4) -> tuple:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        k = int(rng.integers(2, 8))
        n = int(rng.integers(k, 60))
        labels = rng.integers(0, k, size=n)
        logits = rng.standard_normal((n, k))
        preds = logits.argmax(axis=1)
        recalls = []
        for c in range(k):
            members = [i for i in range(n) if labels[i] == c]
            if members:
                recalls.append(sum(1 for i in members if preds[i] == c) / len(members))
        worst = max(worst, abs(mean_per_class_accuracy(logits, labels, k) - sum(recalls) / len(recalls)))
    balanced = np.repeat(np.arange(4), 5)
    logits = rng.standard_normal((20, 4))
    eq = abs(mean_per_class_accuracy(logits, balanced, 4) - top1_accuracy(logits, balanced))
    trace = [(lr, b, 0.5) for lr, b in SweepGrid().points()]
    trace[4] = (trace[4][0], trace[4][1], 0.9)
    ok = worst <= 1e-12 and eq <= 1e-12 and select_best(trace) == trace[4][:2]
    return ok, f"max brute-force diff {worst:.1e}, balanced diff {eq:.1e}"


def suite_formats() -> tuple:
    bank = gen_synthetic_multidomain(3, 2, 4, 0, test_fraction=0.25)
    raw = bank_to_bytes(bank)
    bank_ok = bank_to_bytes(bank_from_bytes(raw)) == raw
    ckpt = init_params(EncoderConfig(widths=(4, 4, 8), feature_dim=8, head_dim=8), 0, n_classes=3)
    ckpt.metadata.update(stage="pretrain_supcon", tau="0.13")
    raw = checkpoint_to_bytes(ckpt)
    ckpt_ok = checkpoint_to_bytes(checkpoint_from_bytes(raw)) == raw
    return bank_ok and ckpt_ok, f"bank round-trip {'ok' if bank_ok else 'FAILED'}, checkpoint {'ok' if ckpt_ok else 'FAILED'}"


def suite_determinism() -> tuple:
    from .trainer import TrainConfig, pretrain

    with tempfile.TemporaryDirectory() as tmp:
        a = bank_to_bytes(gen_synthetic_multidomain(2, 2, 3, 5))
        b = bank_to_bytes(gen_synthetic_multidomain(2, 2, 3, 5))
        bank = gen_synthetic_multidomain(2, 2, 4, 5)
        cfg = TrainConfig.supcon(batch_size=8, epochs=1, seed=3)
        enc = EncoderConfig(widths=(4, 4, 8), feature_dim=8, head_dim=8)
        blobs = []
        for i in range(2):
            pretrain(bank, cfg, enc, out_dir=Path(tmp) / str(i))
            blobs.append((Path(tmp) / str(i) / "checkpoint.sckp").read_bytes())
    ok = a == b and blobs[0] == blobs[1]
    return ok, "bank and checkpoint bytes identical across runs" if ok else "outputs differ between runs"


SUITES = {
    "oracle": suite_oracle,
    "gradients": suite_gradients,
    "closed_form": suite_closed_form,
    "schedule": suite_schedule,
    "metrics": suite_metrics,
    "formats": suite_formats,
    "determinism": suite_determinism,
}

MUTANTS = {"inside-log": supcon_inside_log}


def run_suites(names=None, mutant: str | None = None, echo=print) -> bool:
    names = list(SUITES) if not names else list(names)
    all_ok = True
    for name in names:
        fn = SUITES[name]
        if name == "oracle" and mutant is not None:
            ok, detail = fn(MUTANTS[mutant])
        else:
            ok, detail = fn()
        all_ok &= ok
        echo(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
