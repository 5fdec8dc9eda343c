"""Spiking neuron mechanics.

Iterative LIF/IF dynamics with soft reset serve as the reference; the
multi-level spike (MLS) neuron produces the same spike count in a single
step, and the input-aware variant (IMLS) rescales the threshold per channel
from a running maximum of the pre-synaptic input.

Thresholds: with running maximum ``Lambda`` per channel the effective
threshold is ``theta * Lambda / T``, so an input equal to the running max
fires the full ``T`` levels.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .errors import CorruptionError, DimensionError, PreconditionError, StateError


@dataclass(frozen=True)
class NeuronConfig:
    theta: float = 1.0
    beta: float = 1.0
    T: int = 4
    alpha: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.theta > 0:
            raise PreconditionError(f"theta must be > 0, got {self.theta}")
        if not 0.0 <= self.beta <= 1.0:
            raise PreconditionError(f"beta must lie in [0, 1], got {self.beta}")
        if int(self.T) != self.T or self.T < 1:
            raise PreconditionError(f"T must be an integer >= 1, got {self.T}")
        if not 0.0 < self.alpha <= 1.0:
            raise PreconditionError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.epsilon > 0:
            raise PreconditionError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class ThresholdState:
    """Per-channel running maximum of pre-synaptic input."""

    running_max: np.ndarray
    T: int
    frozen: bool = False

    @classmethod
    def initial(cls, channels: int, T: int) -> "ThresholdState":
        # running max = T gives theta_eff = theta before any statistics arrive
        return cls(np.full(channels, float(T)), T)

    @property
    def lam(self) -> np.ndarray:
        return self.T / self.running_max

    @property
    def channels(self) -> int:
        return self.running_max.shape[0]

    def freeze(self) -> "ThresholdState":
        return replace(self, frozen=True)


@dataclass
class MembraneState:
    v: np.ndarray


@dataclass(frozen=True)
class SpikeTensor:
    levels: np.ndarray
    T: int

    def __post_init__(self):
        lv = np.asarray(self.levels)
        if lv.size and (lv.min() < 0 or lv.max() > self.T):
            raise CorruptionError(f"spike levels must lie in [0, {self.T}]")
        if lv.size and not np.array_equal(lv, np.round(lv)):
            raise CorruptionError("spike levels must be integers")


# --- reference dynamics --------------------------------------------------------


def lif_step(state: MembraneState, x, cfg: NeuronConfig):
    """One LIF step: leak + integrate, fire on ``v >= theta``, soft reset."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != np.shape(state.v):
        raise DimensionError(f"input shape {x.shape} != membrane shape {np.shape(state.v)}")
    v = cfg.beta * np.asarray(state.v, dtype=np.float64) + x
    spikes = (v >= cfg.theta).astype(np.int64)
    return MembraneState(v - cfg.theta * spikes), spikes


def if_multistep_fire(x1: float, theta: float, T: int) -> list[int]:
    """Spike train of an IF neuron that receives ``x1`` at the first step only.

    Runs in exact rational arithmetic on the given floats, so repeated soft
    resets accumulate no rounding error.
    """
    v = Fraction(float(x1))
    th = Fraction(float(theta))
    train = []
    for _ in range(int(T)):
        s = 1 if v >= th else 0
        v -= th * s
        train.append(s)
    return train


def if_multistep_forward(x1, theta, T: int):
    """Array version of the iterative IF neuron (float arithmetic).

    Returns the binary train ``[T, ...]`` and the list of per-step membrane
    snapshots a BPTT implementation would have to keep.
    """
    v = np.asarray(x1, dtype=np.float64).copy()
    theta = np.asarray(theta, dtype=np.float64)
    train = np.zeros((int(T),) + v.shape, dtype=np.int64)
    states = []
    for t in range(int(T)):
        s = v >= theta
        v = v - theta * s
        train[t] = s
        states.append(v.copy())
    return train, states


# --- multi-level firing ---------------------------------------------------------


def _mls_levels(v, theta, T) -> np.ndarray:
    """floor(clip(v / theta, 0, T)) with an exact floor.

    ``v / theta`` can round up onto an integer (3.9 / 1.3 -> 3.0); fmod is
    exact, so ``(v - fmod(v, theta)) / theta`` is within rounding of the
    true integer quotient.
    """
    v = np.asarray(v, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    pos = np.maximum(v, 0.0)
    q = np.rint((pos - np.fmod(pos, theta)) / theta)
    return np.minimum(q, float(T))


def mls_fire(v1, theta, T: int) -> SpikeTensor:
    if np.any(np.asarray(theta) <= 0) or T < 1:
        raise PreconditionError("theta must be > 0 and T >= 1")
    return SpikeTensor(_mls_levels(v1, theta, T).astype(np.int64), int(T))


def mls_surrogate_grad(v1, theta, T: int) -> np.ndarray:
    """Straight-through gradient of the clipped ramp: 1/theta on [0, theta*T]."""
    v1 = np.asarray(v1, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    inside = (v1 >= 0.0) & (v1 <= theta * T)
    return np.where(inside, 1.0 / theta, 0.0)


def _valid_mask(B: int, L: int, valid_lengths) -> np.ndarray:
    if valid_lengths is None:
        return np.ones((B, L), dtype=bool)
    lengths = np.asarray(valid_lengths, dtype=np.int64)
    if lengths.shape != (B,):
        raise DimensionError(f"expected {B} valid lengths, got {lengths.shape}")
    if np.any(lengths > L) or np.any(lengths < 0):
        raise PreconditionError("valid length outside [0, L]")
    return np.arange(L)[None, :] < lengths[:, None]


def compute_batch_max(x, valid_lengths=None, epsilon: float = 1e-5) -> np.ndarray:
    """Per-channel max of ``x[B, L, C]`` over unpadded positions, floored at epsilon."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"expected [B, L, C] input, got shape {x.shape}")
    B, L, C = x.shape
    mask = _valid_mask(B, L, valid_lengths)
    if not mask.any():
        raise PreconditionError("no valid positions to take the maximum over")
    vals = x[mask]
    return np.maximum(vals.max(axis=0), epsilon)


def update_running_max(state: ThresholdState, batch_max, alpha: float) -> ThresholdState:
    if state.frozen:
        raise StateError("threshold statistics are frozen")
    batch_max = np.asarray(batch_max, dtype=np.float64)
    if batch_max.shape != state.running_max.shape:
        raise DimensionError(f"batch max shape {batch_max.shape} != {state.running_max.shape}")
    new = (1.0 - alpha) * state.running_max + alpha * batch_max
    return replace(state, running_max=new)


def effective_threshold(state: ThresholdState, cfg: NeuronConfig) -> np.ndarray:
    return cfg.theta * state.running_max / cfg.T


def imls_fire(x, state: ThresholdState, cfg: NeuronConfig, training: bool = False,
              valid_lengths=None):
    """Input-aware multi-level firing of ``x[B, L, C]``.

    In training mode the running maximum is updated from the current batch
    before firing; in inference the stored statistics are used as is.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != state.channels:
        raise DimensionError(f"input has {x.shape[-1]} channels, threshold state has {state.channels}")
    if training:
        x3 = x if x.ndim == 3 else x.reshape((1, -1, x.shape[-1]))
        batch_max = compute_batch_max(x3, valid_lengths if x.ndim == 3 else None, cfg.epsilon)
        state = update_running_max(state, batch_max, cfg.alpha)
    return mls_fire(x, effective_threshold(state, cfg), cfg.T), state


# --- event-driven execution -----------------------------------------------------


def expand_spike_train(s: SpikeTensor) -> np.ndarray:
    """Level ``k`` -> ``k`` ones then ``T - k`` zeros along a new leading time axis."""
    levels = np.asarray(s.levels)
    if levels.size and (levels.max() > s.T or levels.min() < 0):
        raise CorruptionError(f"spike level outside [0, {s.T}]")
    t = np.arange(s.T).reshape((s.T,) + (1,) * levels.ndim)
    return (t < levels[None]).astype(np.int8)


def spike_matmul_event(train, W):
    """Accumulate-only product of a binary train ``[T, N, D]`` with ``W[D, M]``.

    Every spike at ``(t, n, d)`` adds row ``W[d]`` into output row ``n``.
    Returns the result and the number of scalar accumulations performed.
    """
    train = np.asarray(train)
    W = np.asarray(W, dtype=np.float64)
    if train.ndim != 3 or train.shape[2] != W.shape[0]:
        raise DimensionError(f"train {train.shape} incompatible with weights {W.shape}")
    out = np.zeros((train.shape[1], W.shape[1]))
    events = 0
    for step in train:
        rows, cols = np.nonzero(step)
        if rows.size:
            np.add.at(out, rows, W[cols])
            events += rows.size * W.shape[1]
    return out, events


# --- differentiable firing ------------------------------------------------------


def fire(x, theta, T: int, relaxed: bool = False) -> ad.Tensor:
    """Multi-level firing as a tape primitive.

    Forward is the discrete level count (or the clipped ramp when
    ``relaxed``); backward is the straight-through gradient ``1/theta``
    inside ``[0, theta*T]``. ``theta`` carries no gradient.
    """
    x = ad.as_tensor(x)
    theta = np.asarray(theta, dtype=np.float64)
    v = x.data
    if relaxed:
        out = np.clip(v / theta, 0.0, float(T))
    else:
        out = _mls_levels(v, theta, T)
    ad.log_region(np.where(v < 0, 0, np.where(v > theta * T, 2, 1)).astype(np.int8))
    surrogate = mls_surrogate_grad(v, theta, T)
    return ad.record("imls_fire", out, (x,), lambda g: (g * surrogate,))


MODES = ("imls", "mls", "if")


class SpikingNeuron:
    """One spiking-neuron site (SN) with its own threshold statistics.

    ``mode``: ``"imls"`` (input-aware thresholds), ``"mls"`` (fixed
    threshold) or ``"if"`` (fixed threshold evaluated by explicit T-step
    iteration; used to measure the state a multi-step forward keeps).
    """

    def __init__(self, channels: int, cfg: NeuronConfig, mode: str = "imls", name: str = ""):
        if mode not in MODES:
            raise PreconditionError(f"unknown neuron mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.name = name
        self.state = ThresholdState.initial(channels, cfg.T)
        self.training = False
        self.relaxed = False
        self.last_levels: np.ndarray | None = None
        self.last_valid: np.ndarray | None = None
        self.stored_states = 0

    @property
    def channels(self) -> int:
        return self.state.channels

    def threshold(self) -> np.ndarray:
        if self.mode == "imls":
            return effective_threshold(self.state, self.cfg)
        return np.full(self.channels, self.cfg.theta)

    def __call__(self, x, valid_lengths=None) -> ad.Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.channels:
            raise DimensionError(f"{self.name}: {x.shape[-1]} channels, expected {self.channels}")
        if self.mode == "imls" and self.training:
            batch_max = compute_batch_max(x.data, valid_lengths, self.cfg.epsilon)
            self.state = update_running_max(self.state, batch_max, self.cfg.alpha)
        theta = self.threshold()
        if self.mode == "if":
            train, states = if_multistep_forward(x.data, theta, self.cfg.T)
            self.stored_states += len(states)
        out = fire(x, theta, self.cfg.T, relaxed=self.relaxed)
        if self.mode == "if" and not self.relaxed:
            out.data = train.sum(axis=0).astype(np.float64)
        self.last_levels = out.data
        B, L = x.shape[0], x.shape[1]
        self.last_valid = _valid_mask(B, L, valid_lengths)
        return out
