"""Equivalence sweeps shared by the CLI check commands and the test suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, attn_logits, rep_fuse
from .model import Model, ModelConfig, model_forward, reparameterize
from .neuron import (
    SpikeTensor,
    expand_spike_train,
    if_multistep_fire,
    mls_fire,
    spike_matmul_event,
)
from .numeric import Rng

SWEEP_THETAS = (0.5, 1.0, 1.3)
SWEEP_TS = (1, 2, 4, 6, 8)


@dataclass
class CheckResult:
    name: str
    cases: int
    failures: list = field(default_factory=list)
    max_error: float = 0.0
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return (f"{status} {self.name}: {self.cases} cases, {len(self.failures)} failures, "
                f"max_err={self.max_error:.3g}, {self.seconds:.3f}s")


def sweep_potentials() -> np.ndarray:
    """The 0.1-spaced grid on [-2, 8] plus one ulp either side of each point (303 values)."""
    grid = np.round(-2.0 + 0.1 * np.arange(101), 10)
    return np.sort(np.concatenate([np.nextafter(grid, -np.inf), grid, np.nextafter(grid, np.inf)]))


def check_mls_if(fire=mls_fire) -> CheckResult:
    start = time.perf_counter()
    res = CheckResult("mls_vs_if", 0)
    for v in sweep_potentials():
        for theta in SWEEP_THETAS:
            for T in SWEEP_TS:
                res.cases += 1
                got = int(np.asarray(fire(v, theta, T).levels))
                want = sum(if_multistep_fire(v, theta, T))
                if got != want:
                    res.failures.append((float(v), theta, T, got, want))
    res.max_error = float(max((abs(f[3] - f[4]) for f in res.failures), default=0))
    res.seconds = time.perf_counter() - start
    return res


def check_spike_expansion(seed: int = 0, trials: int = 200) -> CheckResult:
    """Expansion sums back to the levels; event-driven product equals the dense one."""
    start = time.perf_counter()
    rng = Rng(seed)
    res = CheckResult("spike_matmul_event", trials)
    for i in range(trials):
        T = int(rng.integers(1, 8))
        N, D, M = (int(rng.integers(1, 12)) for _ in range(3))
        s = SpikeTensor(rng.integers(0, T, size=(N, D)), T)
        W = rng.normal((D, M))
        train = expand_spike_train(s)
        if not np.array_equal(train.sum(axis=0), s.levels):
            res.failures.append((i, "expansion"))
            continue
        got, events = spike_matmul_event(train, W)
        dense = s.levels @ W
        err = float(np.max(np.abs(got - dense)) / max(np.max(np.abs(dense)), 1e-12))
        res.max_error = max(res.max_error, err)
        if err > 1e-5:
            res.failures.append((i, "value", err))
        if events != int(s.levels.sum()) * M:
            res.failures.append((i, "events", events, int(s.levels.sum()) * M))
    res.seconds = time.perf_counter() - start
    return res


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def check_logit_fusion(seed: int = 0, trials: int = 100) -> CheckResult:
    start = time.perf_counter()
    rng = Rng(seed)
    res = CheckResult("fused_logits", trials)
    for i in range(trials):
        H = int(rng.integers(1, 4))
        D = H * int(rng.integers(1, 6))
        N = int(rng.integers(1, 10))
        T = int(rng.integers(1, 6))
        X = rng.integers(0, T, size=(N, D)).astype(np.float64)
        p = AttentionParams(*(ad.Tensor(rng.normal((D, D))) for _ in range(4)), heads=H)
        a = attn_logits(X, p, "factored").data
        b = attn_logits(X, rep_fuse(p), "fused").data
        err = rel_err(b, a)
        res.max_error = max(res.max_error, err)
        if err > 1e-5:
            res.failures.append((i, err))
    res.seconds = time.perf_counter() - start
    return res


def random_eval_model(rng: Rng, variant: str = "hd_repssa_s", T: int = 4, seed: int = 0) -> Model:
    """Small randomly initialised model with non-trivial frozen statistics."""
    cfg = ModelConfig(num_layers=2, D=16, H=4, D_ff=32, T=T, variant=variant, num_classes=3, C_in=6)
    model = Model.init(cfg, seed=seed)
    calib = rng.normal((4, 12, cfg.C_in))
    model.train()
    model(calib)
    return model.eval()


def check_model_fusion(seed: int = 0, trials: int = 50, variant: str = "hd_repssa_s") -> CheckResult:
    """End-to-end logits before and after reparameterization (1e-4 relative)."""
    start = time.perf_counter()
    rng = Rng(seed)
    res = CheckResult(f"model_fusion[{variant}]", trials)
    if trials == 0:
        return res
    model = random_eval_model(rng, variant, seed=seed)
    fused = reparameterize(model)
    for i in range(trials):
        x = rng.normal((int(rng.integers(1, 16)), model.cfg.C_in))
        a = model_forward(model, x).data
        b = model_forward(fused, x).data
        err = rel_err(b, a)
        res.max_error = max(res.max_error, err)
        if err > 1e-4:
            res.failures.append((i, err))
    res.seconds = time.perf_counter() - start
    return res
