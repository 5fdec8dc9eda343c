"""FLOP counting, firing rates and theoretical energy estimates.

FLOPs are multiply-accumulate counts. A matrix product is *spike-fed* when
one operand is a spike tensor; it is then costed at ``E_AC`` scaled by
``T * R`` (R = firing rate of that operand), otherwise at ``E_MAC``.
Softmax, mask multiplies, residual adds and pooling are not counted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import ProfileError

E_MAC_NJ = 4.6
E_AC_NJ = 0.9
NJ_PER_MJ = 1e6


@dataclass(frozen=True)
class LayerProfile:
    name: str
    flops: int
    T: int
    operand_kind: str  # "spike-fed" | "real-fed"
    spike_site: str | None = None
    firing_rate: float | None = None

    def __post_init__(self):
        if self.flops < 0:
            raise ProfileError(f"{self.name}: negative FLOPs")
        if self.firing_rate is not None and not 0.0 <= self.firing_rate <= 1.0:
            raise ProfileError(f"{self.name}: firing rate {self.firing_rate} outside [0, 1]")

    @property
    def spike_fed(self) -> bool:
        return self.operand_kind == "spike-fed"


@dataclass
class EnergyReport:
    layers: list[LayerProfile]
    ann_nj: list[float]
    snn_nj: list[float]

    @property
    def e_ann_mj(self) -> float:
        return float(np.sum(self.ann_nj)) / NJ_PER_MJ

    @property
    def e_snn_mj(self) -> float:
        return float(np.sum(self.snn_nj)) / NJ_PER_MJ

    @property
    def saving_ratio(self) -> float:
        return self.e_ann_mj / self.e_snn_mj if self.e_snn_mj > 0 else float("inf")

    def summary(self) -> str:
        return (f"E_ANN_mJ={self.e_ann_mj:.6g} E_SNN_mJ={self.e_snn_mj:.6g} "
                f"saving_ratio={self.saving_ratio:.2f}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "flops", "R", "T", "kind", "energy_nJ"])
            for p, e in zip(self.layers, self.snn_nj):
                rate = "" if p.firing_rate is None else f"{p.firing_rate:.9g}"
                w.writerow([p.name, p.flops, rate, p.T, p.operand_kind, f"{e:.9g}"])


def _spike(name, flops, T, site):
    return LayerProfile(name, int(flops), T, "spike-fed", site)


def _real(name, flops, T):
    return LayerProfile(name, int(flops), T, "real-fed")


def layer_specs(cfg, seq_len: int, fused: bool = False) -> list[LayerProfile]:
    """FLOP profile of one forward pass over ``seq_len`` tokens.

    ``cfg`` is a :class:`~imlspike.model.ModelConfig`-like object;
    ``num_layers = 0`` is accepted and leaves only the projection and head.
    """
    N, D, H, F, T = seq_len, cfg.D, cfg.H, cfg.D_ff, cfg.T
    dk = D // H
    out = [_real("input_proj", N * cfg.C_in * D, T)]
    for layer in range(cfg.num_layers):
        p = f"blocks.{layer}."
        entry = p + "entry"
        if cfg.variant == "sdsa3":
            out += [
                _spike(p + "q_proj", N * D * D, T, entry),
                _spike(p + "k_proj", N * D * D, T, entry),
                _spike(p + "v_proj", N * D * D, T, entry),
                _spike(p + "kv", N * D * dk, T, p + "attn.k"),
                _spike(p + "q_kv", N * D * dk, T, p + "attn.q"),
            ]
        else:
            if fused:
                out += [
                    _spike(p + "qk_proj", H * N * D * D, T, entry),
                    _spike(p + "logits", H * N * N * D, T, entry),
                ]
            else:
                out += [
                    _spike(p + "q_proj", N * D * D, T, entry),
                    _spike(p + "k_proj", N * D * D, T, entry),
                    _real(p + "logits", N * N * D, T),
                ]
            out += [
                _spike(p + "v_proj", N * D * D, T, entry),
                _spike(p + "attn_v", N * N * D, T, p + "attn.v"),
            ]
        out += [
            _spike(p + "out_proj", N * D * D, T, p + "attn.out"),
            _spike(p + "mlp.fc1", N * D * F, T, p + "mlp.in"),
            _spike(p + "mlp.fc2", N * F * D, T, p + "mlp.hidden"),
        ]
    out.append(_real("head", D * cfg.num_classes, T))
    return out


def count_flops(model, seq_len: int) -> list[LayerProfile]:
    cfg = getattr(model, "cfg", model)
    return layer_specs(cfg, seq_len, fused=bool(getattr(model, "is_fused", False)))


def firing_rate(levels, T: int, valid=None) -> float:
    """Mean spikes per neuron per timestep: ``sum(s) / (numel * T)``."""
    levels = np.asarray(levels, dtype=np.float64)
    if valid is not None:
        levels = levels[np.asarray(valid, dtype=bool)]
    if levels.size == 0:
        return 0.0
    return float(levels.sum() / (levels.size * T))


def record_firing_rates(profiles, model) -> list[LayerProfile]:
    """Fill firing rates from the spike levels of the model's last forward pass."""
    out = []
    for p in profiles:
        if p.spike_fed:
            neuron = model.neurons[p.spike_site]
            if neuron.last_levels is None:
                raise ProfileError(f"{p.name}: no forward pass recorded at {p.spike_site}")
            rate = firing_rate(neuron.last_levels, p.T, neuron.last_valid)
            p = replace(p, firing_rate=rate)
        out.append(p)
    return out


def estimate_ann_energy(profiles) -> float:
    """Total ANN energy in nJ: every layer costed as MACs."""
    return float(sum(p.flops * E_MAC_NJ for p in profiles))


def _snn_layer_nj(p: LayerProfile) -> float:
    if not p.spike_fed:
        return p.flops * E_MAC_NJ
    if p.firing_rate is None:
        raise ProfileError(f"{p.name}: spike-fed layer without a recorded firing rate")
    return p.T * p.firing_rate * p.flops * E_AC_NJ


def estimate_snn_energy(profiles) -> float:
    """Total SNN energy in nJ: spike-fed layers at ``T*R*FLOPs*E_AC``, the rest at MAC cost."""
    return float(sum(_snn_layer_nj(p) for p in profiles))


def spike_fed_energy(profiles) -> float:
    return float(sum(_snn_layer_nj(p) for p in profiles if p.spike_fed))


def energy_report(profiles) -> EnergyReport:
    profiles = list(profiles)
    return EnergyReport(profiles,
                        [p.flops * E_MAC_NJ for p in profiles],
                        [_snn_layer_nj(p) for p in profiles])


def cross_check_event_energy(events, profiles=None, rtol: float = 1e-6) -> float:
    """Energy in nJ of counted accumulate events.

    With ``profiles`` the result is compared against the rate-based
    spike-fed energy and a mismatch beyond ``rtol`` raises.
    """
    total = events if np.isscalar(events) else sum(events.values())
    e_events = float(total) * E_AC_NJ
    if profiles is not None:
        e_rate = spike_fed_energy(profiles)
        scale = max(abs(e_rate), abs(e_events))
        if scale > 0 and abs(e_rate - e_events) > rtol * scale:
            raise ProfileError(f"event energy {e_events} nJ != rate-based {e_rate} nJ")
    return e_events


def merge_profiles(runs) -> list[LayerProfile]:
    """Combine per-utterance profiles layer by layer.

    FLOPs add up; the firing rate is FLOP-weighted so that
    ``T * R * FLOPs`` of the merged layer equals the sum over runs.
    """
    runs = [list(r) for r in runs]
    if not runs:
        return []
    merged = []
    for layer in zip(*runs):
        flops = sum(p.flops for p in layer)
        first = layer[0]
        rate = None
        if first.spike_fed and all(p.firing_rate is not None for p in layer):
            rate = (sum(p.firing_rate * p.flops for p in layer) / flops) if flops else 0.0
        merged.append(replace(first, flops=flops, firing_rate=rate))
    return merged


def profile_utterance(model, features):
    """Run one utterance spike-driven; return (profiles with rates, events)."""
    from .model import spike_driven_forward

    _, events = spike_driven_forward(model, features)
    profiles = record_firing_rates(count_flops(model, np.asarray(features).shape[0]), model)
    return profiles, events
