"""Spiking Transformer sequence classifier.

input projection -> ``num_layers`` blocks -> mean pool over valid frames ->
linear head. Each block keeps a real-valued residual stream::

    X_s = SN_entry(X)
    X'  = Attn(X_s) + X
    X'' = ChannelMLP(X') + X'

After :func:`reparameterize` the attention uses fused ``W_QK`` weights and
all threshold statistics are frozen; :func:`spike_driven_forward` then runs
every spike-weight product as event-driven accumulation.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import (
    AttentionParams,
    FusedAttentionParams,
    build_hdm,
    channel_mlp,
    hd_repssa_l,
    hd_repssa_s,
    rep_fuse,
    sdsa3,
)
from .errors import CheckpointFormatError, DimensionError, PreconditionError, StateError
from .neuron import (
    MODES,
    NeuronConfig,
    SpikeTensor,
    SpikingNeuron,
    ThresholdState,
    expand_spike_train,
    spike_matmul_event,
)
from .numeric import Rng, softmax_rows, xavier_uniform

VARIANTS = ("hd_repssa_s", "hd_repssa_l", "repssa_s", "repssa_l", "sdsa3")


@dataclass
class ModelConfig:
    num_layers: int = 2
    D: int = 32
    H: int = 4
    D_ff: int = 128
    T: int = 4
    variant: str = "hd_repssa_s"
    num_classes: int = 4
    C_in: int = 16
    neuron_mode: str = "imls"
    neuron: NeuronConfig = field(default_factory=NeuronConfig)

    def __post_init__(self):
        if self.num_layers < 1:
            raise PreconditionError("num_layers must be >= 1")
        if self.variant not in VARIANTS:
            raise PreconditionError(f"unknown attention variant {self.variant!r}; choose from {VARIANTS}")
        if self.D % self.H:
            raise DimensionError(f"D={self.D} is not divisible by H={self.H}")
        if self.neuron_mode not in MODES:
            raise PreconditionError(f"unknown neuron mode {self.neuron_mode!r}")
        if self.neuron.T != self.T:
            self.neuron = replace(self.neuron, T=self.T)

    @property
    def d_k(self) -> int:
        return self.D // self.H

    @property
    def uses_decay_mask(self) -> bool:
        return self.variant.startswith("hd_")

    @property
    def softmax_attention(self) -> bool:
        return self.variant.endswith("_s")


def site_names(cfg: ModelConfig, layer: int) -> list[str]:
    p = f"blocks.{layer}."
    attn = ["q", "k", "v", "out"] if cfg.variant == "sdsa3" else ["v", "out"]
    return [p + "entry"] + [p + "attn." + a for a in attn] + [p + "mlp.in", p + "mlp.hidden"]


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, ad.Tensor]):
        self.cfg = cfg
        self.params = params
        self.fused: dict[int, ad.Tensor] | None = None
        self.training = False
        self.relaxed = False
        self.neurons: dict[str, SpikingNeuron] = {}
        for layer in range(cfg.num_layers):
            for name in site_names(cfg, layer):
                channels = cfg.D_ff if name.endswith("mlp.hidden") else cfg.D
                self.neurons[name] = SpikingNeuron(channels, cfg.neuron, cfg.neuron_mode, name)
        self._masks: dict[tuple[int, int], object] = {}

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        rng = Rng(seed)
        D, F = cfg.D, cfg.D_ff
        shapes = {"input.W": (cfg.C_in, D)}
        for layer in range(cfg.num_layers):
            p = f"blocks.{layer}."
            for w in ("W_Q", "W_K", "W_V", "W_out"):
                shapes[p + "attn." + w] = (D, D)
            shapes[p + "mlp.W1"] = (D, F)
            shapes[p + "mlp.W2"] = (F, D)
        shapes["head.W"] = (D, cfg.num_classes)
        params = {name: ad.Tensor(xavier_uniform(rng, *shape), requires_grad=True, name=name)
                  for name, shape in shapes.items()}
        params["head.b"] = ad.Tensor(np.zeros(cfg.num_classes), requires_grad=True, name="head.b")
        return cls(cfg, params)

    @property
    def is_fused(self) -> bool:
        return self.fused is not None

    def parameters(self) -> list[ad.Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def parameter_count(self) -> int:
        n = sum(p.data.size for p in self.params.values())
        if self.fused:
            n += sum(w.data.size for w in self.fused.values())
        return n

    def train(self, mode: bool = True) -> "Model":
        if mode and self.is_fused:
            raise StateError("a reparameterized model cannot be trained")
        self.training = mode
        for n in self.neurons.values():
            n.training = mode
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def set_relaxed(self, relaxed: bool) -> "Model":
        self.relaxed = relaxed
        for n in self.neurons.values():
            n.relaxed = relaxed
        return self

    def mask(self, seq_len: int, layer: int):
        if not self.cfg.uses_decay_mask:
            return None
        key = (seq_len, layer)
        if key not in self._masks:
            self._masks[key] = build_hdm(seq_len, layer + 1)
        return self._masks[key]

    def attention_params(self, layer: int):
        p = f"blocks.{layer}.attn."
        if self.fused is not None and self.cfg.variant != "sdsa3":
            return FusedAttentionParams(self.fused[layer], self.params[p + "W_V"],
                                        self.params[p + "W_out"], self.cfg.H)
        return AttentionParams(self.params[p + "W_Q"], self.params[p + "W_K"],
                               self.params[p + "W_V"], self.params[p + "W_out"], self.cfg.H)

    def threshold_states(self) -> dict[str, ThresholdState]:
        return {name: n.state for name, n in self.neurons.items()}

    def __call__(self, features, valid_lengths=None) -> ad.Tensor:
        return model_forward(self, features, valid_lengths)


def _attention(model: Model, layer: int, X_s, valid_lengths, return_maps=False):
    cfg = model.cfg
    site = f"blocks.{layer}.attn."
    n = model.neurons
    params = model.attention_params(layer)
    if cfg.variant == "sdsa3":
        if return_maps:
            raise PreconditionError("sdsa3 has no token-to-token attention map")
        return sdsa3(X_s, params, n[site + "q"], n[site + "k"], n[site + "v"], n[site + "out"],
                     valid_lengths)
    mask = model.mask(X_s.shape[1], layer)
    fn = hd_repssa_s if cfg.softmax_attention else hd_repssa_l
    return fn(X_s, params, mask, n[site + "v"], n[site + "out"], valid_lengths, return_maps)


def block_forward(model: Model, X, layer: int, valid_lengths=None) -> ad.Tensor:
    if model.training and model.is_fused:
        raise StateError("fused parameters cannot run in training mode")
    p = f"blocks.{layer}."
    X_s = model.neurons[p + "entry"](X, valid_lengths)
    X1 = _attention(model, layer, X_s, valid_lengths) + X
    mlp = channel_mlp(X1, model.params[p + "mlp.W1"], model.params[p + "mlp.W2"],
                      model.neurons[p + "mlp.in"], model.neurons[p + "mlp.hidden"], valid_lengths)
    return mlp + X1


def _prepare(model: Model, features, valid_lengths):
    x = features.data if isinstance(features, ad.Tensor) else np.asarray(features, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != model.cfg.C_in:
        raise DimensionError(f"expected features [B, L, {model.cfg.C_in}], got {x.shape}")
    if x.shape[1] < 1:
        raise PreconditionError("empty sequence")
    if valid_lengths is None:
        valid_lengths = np.full(x.shape[0], x.shape[1])
    valid_lengths = np.asarray(valid_lengths, dtype=np.int64)
    if np.any(valid_lengths < 1):
        raise PreconditionError("empty sequence")
    return x, valid_lengths, single


def model_forward(model: Model, features, valid_lengths=None) -> ad.Tensor:
    """Logits ``[B, num_classes]`` (``[num_classes]`` for a single utterance)."""
    x, valid_lengths, single = _prepare(model, features, valid_lengths)
    h = ad.Tensor(x) @ model.params["input.W"]
    for layer in range(model.cfg.num_layers):
        h = block_forward(model, h, layer, valid_lengths)
    logits = ad.mean_pool(h, valid_lengths) @ model.params["head.W"] + model.params["head.b"]
    return ad.reshape(logits, logits.shape[1:]) if single else logits


def attention_maps(model: Model, features, layer: int, valid_lengths=None) -> np.ndarray:
    """Per-head attention maps ``[B, H, N, N]`` of ``layer`` (0-based)."""
    x, valid_lengths, _ = _prepare(model, features, valid_lengths)
    h = ad.Tensor(x) @ model.params["input.W"]
    for i in range(layer):
        h = block_forward(model, h, i, valid_lengths)
    X_s = model.neurons[f"blocks.{layer}.entry"](h, valid_lengths)
    _, maps = _attention(model, layer, X_s, valid_lengths, return_maps=True)
    return maps


def reparameterize(model: Model) -> Model:
    """Inference copy with fused ``W_QK`` per head and frozen statistics."""
    if model.is_fused:
        raise StateError("model is already reparameterized")
    out = copy.deepcopy(model)
    out.eval()
    fused = {}
    if out.cfg.variant != "sdsa3":
        for layer in range(out.cfg.num_layers):
            fused[layer] = rep_fuse(out.attention_params(layer)).W_QK
            del out.params[f"blocks.{layer}.attn.W_Q"]
            del out.params[f"blocks.{layer}.attn.W_K"]
    out.fused = fused
    for n in out.neurons.values():
        n.state = n.state.freeze()
    return out


# --- event-driven inference ----------------------------------------------------------


def _fire_levels(neuron: SpikingNeuron, x: np.ndarray) -> SpikeTensor:
    out = neuron(ad.Tensor(x[None]))
    return SpikeTensor(out.data[0].astype(np.int64), neuron.cfg.T)


def _event_matmul(s: SpikeTensor, W: np.ndarray, events: dict, key: str) -> np.ndarray:
    out, n = spike_matmul_event(expand_spike_train(s), W)
    events[key] = events.get(key, 0) + n
    return out


def spike_driven_forward(model: Model, features):
    """Event-driven inference for one utterance ``[L, C_in]``.

    Every spike-weight product goes through :func:`spike_matmul_event`.
    Returns ``(logits, events)`` with accumulate counts keyed by layer name
    (see :func:`imlspike.energy.layer_specs`).
    """
    if not model.is_fused:
        raise StateError("spike-driven inference needs a reparameterized model")
    cfg = model.cfg
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.C_in or x.shape[0] < 1:
        raise DimensionError(f"expected features [L >= 1, {cfg.C_in}], got {x.shape}")
    N, H, dk = x.shape[0], cfg.H, cfg.d_k
    P = {k: v.data for k, v in model.params.items()}
    events: dict[str, int] = {}
    h = x @ P["input.W"]
    for layer in range(cfg.num_layers):
        pre = f"blocks.{layer}."
        ns = model.neurons
        X_s = _fire_levels(ns[pre + "entry"], h)
        v_pre = _event_matmul(X_s, P[pre + "attn.W_V"], events, pre + "v_proj")
        heads = []
        if cfg.variant == "sdsa3":
            Q_s = _fire_levels(ns[pre + "attn.q"], _event_matmul(X_s, P[pre + "attn.W_Q"], events, pre + "q_proj"))
            K_s = _fire_levels(ns[pre + "attn.k"], _event_matmul(X_s, P[pre + "attn.W_K"], events, pre + "k_proj"))
            V_s = _fire_levels(ns[pre + "attn.v"], v_pre)
            for hd in range(H):
                c = slice(hd * dk, (hd + 1) * dk)
                Kt = SpikeTensor(K_s.levels[:, c].T, cfg.T)
                KV = _event_matmul(Kt, V_s.levels[:, c].astype(np.float64), events, pre + "kv")
                heads.append(_event_matmul(SpikeTensor(Q_s.levels[:, c], cfg.T), KV, events, pre + "q_kv"))
        else:
            V_s = _fire_levels(ns[pre + "attn.v"], v_pre)
            mask = model.mask(N, layer)
            for hd in range(H):
                c = slice(hd * dk, (hd + 1) * dk)
                P_h = _event_matmul(X_s, model.fused[layer].data[hd], events, pre + "qk_proj")
                # X_s P_h^T = (P_h X_s^T)^T
                A = _event_matmul(X_s, P_h.T, events, pre + "logits").T
                if mask is not None:
                    A = A * mask.values
                if cfg.softmax_attention:
                    A = softmax_rows(A / math.sqrt(dk))
                Vt = SpikeTensor(V_s.levels[:, c].T, cfg.T)
                heads.append(_event_matmul(Vt, A.T, events, pre + "attn_v").T)
        mixed = np.concatenate(heads, axis=1)
        O_s = _fire_levels(ns[pre + "attn.out"], mixed)
        h = h + _event_matmul(O_s, P[pre + "attn.W_out"], events, pre + "out_proj")
        M_s = _fire_levels(ns[pre + "mlp.in"], h)
        hid = _event_matmul(M_s, P[pre + "mlp.W1"], events, pre + "mlp.fc1")
        Hd_s = _fire_levels(ns[pre + "mlp.hidden"], hid)
        h = h + _event_matmul(Hd_s, P[pre + "mlp.W2"], events, pre + "mlp.fc2")
    logits = h.mean(axis=0) @ P["head.W"] + P["head.b"]
    return logits, events


# --- checkpoints ---------------------------------------------------------------------

MAGIC = b"IMLS"
VERSION = 1
CONFIG_RECORD = "__config__"


def _config_text(model: Model) -> str:
    cfg = model.cfg
    items = {k: v for k, v in asdict(cfg).items() if k != "neuron"}
    for k, v in asdict(cfg.neuron).items():
        items[f"neuron.{k}"] = v
    items["fused"] = int(model.is_fused)
    items["frozen"] = int(all(n.state.frozen for n in model.neurons.values()))
    return "".join(f"{k}={v}\n" for k, v in items.items())


def _parse_config(text: str) -> tuple[ModelConfig, bool, bool]:
    kv = dict(line.split("=", 1) for line in text.splitlines() if line)
    try:
        ncfg = {f.name: f.type for f in fields(NeuronConfig)}
        neuron = NeuronConfig(**{k: (int if k == "T" else float)(kv.pop(f"neuron.{k}")) for k in ncfg})
        fused = bool(int(kv.pop("fused")))
        frozen = bool(int(kv.pop("frozen")))
        ints = {"num_layers", "D", "H", "D_ff", "T", "num_classes", "C_in"}
        cfg = ModelConfig(neuron=neuron, **{k: int(v) if k in ints else v for k, v in kv.items()})
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"bad config record: {exc}") from exc
    return cfg, fused, frozen


def _records(model: Model) -> list[tuple[str, np.ndarray]]:
    recs = [(name, p.data) for name, p in model.params.items()]
    if model.fused:
        recs += [(f"blocks.{layer}.attn.W_QK", w.data) for layer, w in model.fused.items()]
    recs += [(f"neurons.{name}.running_max", n.state.running_max) for name, n in model.neurons.items()]
    return sorted(recs, key=lambda r: r[0])


def checkpoint_bytes(model: Model) -> bytes:
    """Serialized model (see README for the layout)."""
    text = _config_text(model).encode("utf-8")
    recs = _records(model)
    out = [MAGIC, struct.pack("<II", VERSION, len(recs) + 1)]

    def header(name: str, dims) -> bytes:
        raw = name.encode("utf-8")
        return (struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(dims))
                + struct.pack(f"<{len(dims)}I", *dims))

    # the config record holds UTF-8 bytes rather than float32 values
    out.append(header(CONFIG_RECORD, (len(text),)) + text)
    for name, arr in recs:
        arr = np.asarray(arr)
        out.append(header(name, arr.shape) + arr.astype("<f4").tobytes())
    return b"".join(out)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError("truncated checkpoint payload")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint_bytes(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic bytes (not an IMLS checkpoint)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    records: dict[str, np.ndarray] = {}
    text = None
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        if name == CONFIG_RECORD:
            text = r.take(int(np.prod(dims))).decode("utf-8")
            continue
        n = int(np.prod(dims)) if rank else 1
        records[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after last record")
    if text is None:
        raise CheckpointFormatError("missing __config__ record")
    cfg, fused, frozen = _parse_config(text)
    model = Model(cfg, {})
    fused_w = {}
    for name, arr in records.items():
        if name.startswith("neurons."):
            site = name[len("neurons."):-len(".running_max")]
            if site not in model.neurons:
                raise CheckpointFormatError(f"unknown neuron site {site!r}")
            model.neurons[site].state = ThresholdState(arr, cfg.T, frozen)
        elif name.endswith(".attn.W_QK"):
            fused_w[int(name.split(".")[1])] = ad.Tensor(arr, name=name)
        else:
            model.params[name] = ad.Tensor(arr, requires_grad=True, name=name)
    expected = set(Model.init(cfg).params)
    if fused and cfg.variant != "sdsa3":
        expected -= {f"blocks.{i}.attn.{w}" for i in range(cfg.num_layers) for w in ("W_Q", "W_K")}
        if set(fused_w) != set(range(cfg.num_layers)):
            raise CheckpointFormatError("fused checkpoint lacks W_QK records")
    if set(model.params) != expected:
        missing = sorted(expected - set(model.params))
        extra = sorted(set(model.params) - expected)
        raise CheckpointFormatError(f"parameter records do not match config (missing {missing}, extra {extra})")
    if fused:
        model.fused = fused_w
    return model


def load_checkpoint(path) -> Model:
    return load_checkpoint_bytes(Path(path).read_bytes())
