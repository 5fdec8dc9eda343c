"""Command-line entry point: ``imlspike <command> [flags]``.

Exit codes: 0 success, 1 check failure or runtime error, 2 usage error
(bad flags, bad config, missing or malformed input files).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import energy as en
from .attention import build_hdm
from .checks import check_logit_fusion, check_mls_if, check_model_fusion, check_spike_expansion, rel_err
from .data import gen_synthetic, load_manifest, read_features_csv
from .errors import CheckpointFormatError, ConfigError, ImlsError, ManifestError, StateError
from .model import (
    VARIANTS,
    Model,
    ModelConfig,
    attention_maps,
    load_checkpoint,
    model_forward,
    reparameterize,
    save_checkpoint,
    spike_driven_forward,
)
from .neuron import NeuronConfig
from .training import SCHEDULES, train, write_history_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "model.num_layers": 2,
    "model.D": 32,
    "model.H": 4,
    "model.D_ff": 128,
    "model.T": 4,
    "model.variant": "hd_repssa_s",
    "model.num_classes": 4,
    "model.C_in": 16,
    "neuron.mode": "imls",
    "neuron.theta": 0.5,
    "neuron.beta": 1.0,
    "neuron.alpha": 0.5,
    "neuron.epsilon": 1e-5,
    "training.epochs": 30,
    "training.batch_size": 32,
    "training.lr": 3e-3,
    "training.seed": 0,
    "training.grad_clip": 1.0,
    "training.lr_schedule": "constant",
    "data.train_per_class": 200,
    "data.test_per_class": 50,
    "data.seed": 1,
    "data.test_seed": 2,
    "data.train_manifest": "",
    "data.test_manifest": "",
}


class UsageError(ImlsError):
    pass


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines, ``#`` comments; unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        out[key] = value
    return out


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    for values in (file_values or {}, overrides or {}):
        for key, value in values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            kind = type(DEFAULTS[key])
            try:
                cfg[key] = kind(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None
    return cfg


def print_config(cfg: dict, out=None) -> None:
    out = out or sys.stdout
    print("# resolved config", file=out)
    for k in sorted(cfg):
        print(f"{k} = {cfg[k]}", file=out)


def model_config(cfg: dict) -> ModelConfig:
    neuron = NeuronConfig(theta=cfg["neuron.theta"], beta=cfg["neuron.beta"], T=cfg["model.T"],
                          alpha=cfg["neuron.alpha"], epsilon=cfg["neuron.epsilon"])
    return ModelConfig(num_layers=cfg["model.num_layers"], D=cfg["model.D"], H=cfg["model.H"],
                       D_ff=cfg["model.D_ff"], T=cfg["model.T"], variant=cfg["model.variant"],
                       num_classes=cfg["model.num_classes"], C_in=cfg["model.C_in"],
                       neuron_mode=cfg["neuron.mode"], neuron=neuron)


# --- commands ------------------------------------------------------------------


def cmd_equiv(args) -> int:
    print_config({"command": "equiv", "seed": args.seed})
    results = [check_mls_if(), check_spike_expansion(seed=args.seed)]
    for r in results:
        print(r.line())
        for f in r.failures[:20]:
            print(f"  offending case: {f}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def cmd_reparam_check(args) -> int:
    print_config({"command": "reparam-check", "seed": args.seed, "trials": args.trials})
    if args.trials == 0:
        print("PASS no trials requested")
        return EXIT_OK
    results = [check_logit_fusion(args.seed, args.trials)]
    for variant in ("hd_repssa_s", "hd_repssa_l"):
        results.append(check_model_fusion(args.seed, args.trials, variant))
    for r in results:
        print(r.line())
    guard = False
    try:
        reparameterize(reparameterize(Model.init(ModelConfig(D=8, H=2, D_ff=8, C_in=4))))
    except StateError:
        guard = True
    print(f"{'PASS' if guard else 'FAIL'} double fusion rejected")
    return EXIT_OK if guard and all(r.ok for r in results) else EXIT_FAIL


def _load_data(cfg: dict):
    nc = cfg["model.num_classes"]
    if cfg["data.train_manifest"]:
        train_set = load_manifest(cfg["data.train_manifest"], nc)
    else:
        train_set = gen_synthetic(cfg["data.train_per_class"], cfg["data.seed"], nc, cfg["model.C_in"])
    if cfg["data.test_manifest"]:
        test_set = load_manifest(cfg["data.test_manifest"], nc)
    else:
        test_set = gen_synthetic(cfg["data.test_per_class"], cfg["data.test_seed"], nc, cfg["model.C_in"])
    return train_set, test_set


def cmd_train(args) -> int:
    file_values = parse_config_text(Path(args.config).read_text(), args.config) if args.config else {}
    overrides = {}
    if args.variant is not None:
        overrides["model.variant"] = args.variant
    if args.T is not None:
        overrides["model.T"] = args.T
    if args.seed is not None:
        overrides["training.seed"] = args.seed
    if args.epochs is not None:
        overrides["training.epochs"] = args.epochs
    cfg = resolve_config(file_values, overrides)
    if cfg["model.variant"] not in VARIANTS:
        raise UsageError(f"invalid variant {cfg['model.variant']!r}; choose from {', '.join(VARIANTS)}")
    if cfg["training.lr_schedule"] not in SCHEDULES:
        raise UsageError(f"invalid lr_schedule {cfg['training.lr_schedule']!r}; choose from {', '.join(SCHEDULES)}")
    print_config(cfg)
    train_set, test_set = _load_data(cfg)
    model = Model.init(model_config(cfg), seed=cfg["training.seed"])

    def report(m):
        print(f"epoch {m.epoch:3d} loss {m.loss:.4f} train_acc {m.train_acc:.4f} test_acc {m.test_acc:.4f}",
              flush=True)

    model, history = train(model, train_set, test_set, cfg["training.epochs"], cfg["training.seed"],
                           cfg["training.lr"], cfg["training.batch_size"],
                           cfg["training.grad_clip"] or None, callback=report,
                           schedule=cfg["training.lr_schedule"])
    if args.metrics_csv:
        write_history_csv(history, args.metrics_csv)
    if args.out_checkpoint:
        save_checkpoint(model, args.out_checkpoint)
        print(f"checkpoint written to {args.out_checkpoint}")
    return EXIT_OK


def _fused_model(path, quiet=False) -> Model:
    model = load_checkpoint(path)
    if not model.is_fused:
        if not quiet:
            print("notice: checkpoint is not reparameterized; fusing W_Q W_K^T now")
        model = reparameterize(model)
    return model


def _manifest_or_usage(path, num_classes):
    utts = load_manifest(path, num_classes)
    if not utts:
        raise UsageError(f"manifest {path} lists no utterances")
    return utts


def cmd_infer(args) -> int:
    print_config({"command": "infer", "checkpoint": args.checkpoint, "manifest": args.manifest,
                  "spike_driven": args.spike_driven, "energy_csv": args.energy_csv or ""})
    model = load_checkpoint(args.checkpoint)
    if args.spike_driven and not model.is_fused:
        print("notice: checkpoint is not reparameterized; fusing W_Q W_K^T now")
        model = reparameterize(model)
    model.eval()
    utts = _manifest_or_usage(args.manifest, model.cfg.num_classes)
    correct, worst, runs = 0, 0.0, []
    for u in utts:
        dense = model_forward(model, u.features).data
        logits = dense
        if args.spike_driven:
            logits, events = spike_driven_forward(model, u.features)
            worst = max(worst, rel_err(logits, dense))
            runs.append(en.record_firing_rates(en.count_flops(model, u.length), model))
        pred = int(np.argmax(logits))
        correct += pred == u.label
        print(f"{u.id},{u.label},{pred}")
    print(f"accuracy {correct / len(utts):.4f} ({correct}/{len(utts)})")
    status = EXIT_OK
    if args.spike_driven:
        ok = worst <= 1e-4
        print(f"{'PASS' if ok else 'FAIL'} spike-driven vs dense logits max_rel_err={worst:.3g}")
        status = EXIT_OK if ok else EXIT_FAIL
        if args.energy_csv:
            report = en.energy_report(en.merge_profiles(runs))
            report.write_csv(args.energy_csv)
            print(report.summary())
    elif args.energy_csv:
        raise UsageError("--energy-csv requires --spike-driven")
    return status


def cmd_energy(args) -> int:
    print_config({"command": "energy", "checkpoint": args.checkpoint, "manifest": args.manifest})
    model = _fused_model(args.checkpoint)
    utts = _manifest_or_usage(args.manifest, model.cfg.num_classes)
    runs, worst = [], 0.0
    for u in utts:
        profiles, events = en.profile_utterance(model, u.features)
        e_events = en.cross_check_event_energy(events)
        e_rate = en.spike_fed_energy(profiles)
        worst = max(worst, abs(e_events - e_rate) / max(abs(e_rate), 1e-300))
        runs.append(profiles)
    report = en.energy_report(en.merge_profiles(runs))
    print("layer,flops,R,T,kind,energy_nJ")
    for p, e in zip(report.layers, report.snn_nj):
        rate = "" if p.firing_rate is None else f"{p.firing_rate:.6f}"
        print(f"{p.name},{p.flops},{rate},{p.T},{p.operand_kind},{e:.6g}")
    print(f"E_ANN_mJ={report.e_ann_mj:.6g} E_SNN_mJ={report.e_snn_mj:.6g} "
          f"saving_ratio={report.saving_ratio:.2f}x")
    if args.energy_csv:
        report.write_csv(args.energy_csv)
    ok = worst <= 1e-6
    print(f"{'PASS' if ok else 'FAIL'} event-count vs rate-based energy max_rel_err={worst:.3g}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_mask(args) -> int:
    print_config({"command": "mask", "layer": args.layer, "len": args.len, "out_csv": args.out_csv})
    if args.layer < 1 or args.len < 1:
        raise UsageError("--layer and --len must be >= 1")
    mask = build_hdm(args.len, args.layer)
    with open(args.out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in mask.values:
            w.writerow([f"{v:.17g}" for v in row])
    print(f"phi({args.layer}) = {mask.phi:.17g}; wrote {args.len}x{args.len} mask to {args.out_csv}")
    return EXIT_OK


def cmd_attn_dump(args) -> int:
    print_config({"command": "attn-dump", "checkpoint": args.checkpoint, "utterance": args.utterance,
                  "layer": args.layer, "out_csv": args.out_csv, "pad_to": args.pad_to or 0})
    model = load_checkpoint(args.checkpoint).eval()
    if not 1 <= args.layer <= model.cfg.num_layers:
        raise UsageError(f"--layer must lie in [1, {model.cfg.num_layers}]")
    feats = read_features_csv(args.utterance)
    L = feats.shape[0]
    padded = np.zeros((max(args.pad_to or L, L), feats.shape[1]))
    padded[:L] = feats
    maps = attention_maps(model, padded[None], args.layer - 1, [L])[0]
    with open(args.out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["head", "query", "key", "weight"])
        for h in range(maps.shape[0]):
            for i in range(L):
                for j in range(maps.shape[2]):
                    w.writerow([h, i, j, f"{maps[h, i, j]:.9g}"])
    print(f"wrote {maps.shape[0]} heads x {L} queries to {args.out_csv}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="imlspike", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1 for determinism)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equiv", help="MLS/IF sweep and event-driven matmul oracle")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("reparam-check", help="factored vs fused attention sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_reparam_check)

    p = sub.add_parser("train", help="train a classifier on the synthetic task or a manifest")
    p.add_argument("--config")
    p.add_argument("--out-checkpoint")
    p.add_argument("--metrics-csv")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--T", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="classify a manifest, optionally spike-driven")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--spike-driven", action="store_true")
    p.add_argument("--energy-csv")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("energy", help="ANN/SNN energy estimate with dual-route check")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--energy-csv")
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("mask", help="write the decay mask of one layer as CSV")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--len", type=int, required=True)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("attn-dump", help="write per-head attention maps of one utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--utterance", required=True, help="feature CSV file")
    p.add_argument("--layer", type=int, required=True, help="1-based layer index")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--pad-to", type=int, help="zero-pad the utterance to this length")
    p.set_defaults(func=cmd_attn_dump)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, ConfigError, ManifestError, CheckpointFormatError, FileNotFoundError) as exc:
        # unreadable or malformed inputs are usage errors; 1 is reserved for failed checks
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ImlsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
