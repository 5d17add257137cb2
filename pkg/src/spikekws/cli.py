"""Command-line entry point.

Subcommands: train, eval, profile, ingest, synth. Exit codes: 0 on
success, 1 on usage errors, 2 on runtime failures. Every training run
directory receives the echoed config, the seed, and the build version,
which is enough to replay the run bit-identically.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, echo_config, parse_config
from .data import (
    bin_and_discretize,
    collate,
    dense_to_events,
    event_drop,
    ingest_csv,
    load_events,
    load_features,
    pad_and_mask,
    spec_mask,
    synth_dataset,
    write_events,
    DenseSample,
)
from .energy import estimate_energy, fold_model, format_report
from .model import SpikingTransformer, load_checkpoint
from .tensor import SpikeTensor, Tensor
from .trainer import evaluate, split_validation, train
from . import report as report_mod


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="spikekws", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p_train = sub.add_parser("train", help="train a model on an SPKE/SPKA dataset")
    p_train.add_argument("--config", type=Path, default=None)
    p_train.add_argument("--data", type=Path, required=True)
    p_train.add_argument("--out", type=Path, required=True)
    p_train.add_argument("--seed", type=int, default=None,
                         help="overrides train.seed from the config")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--data", type=Path, required=True)
    p_eval.add_argument("--config", type=Path, default=None,
                        help="data-preparation settings (binning, padding)")

    p_prof = sub.add_parser("profile", help="estimate per-layer energy")
    p_prof.add_argument("--config", type=Path, default=None)
    p_prof.add_argument("--checkpoint", type=Path, default=None)
    p_prof.add_argument("--input", choices=("spike", "analog"), default="spike")
    p_prof.add_argument("--data", type=Path, default=None,
                        help="profile real samples instead of a random probe batch")
    p_prof.add_argument("--batch", type=int, default=1)
    p_prof.add_argument("--seed", type=int, default=312)
    p_prof.add_argument("--out", type=Path, default=None)

    p_ingest = sub.add_parser("ingest", help="convert a CSV event dump to SPKE")
    p_ingest.add_argument("--csv", type=Path, required=True)
    p_ingest.add_argument("--out", type=Path, required=True)
    p_ingest.add_argument("--neurons", type=int, required=True)

    p_synth = sub.add_parser("synth", help="write a synthetic SPKE dataset")
    p_synth.add_argument("--classes", type=int, default=2)
    p_synth.add_argument("--samples", type=int, default=100,
                         help="samples per class")
    p_synth.add_argument("--t", type=int, default=50)
    p_synth.add_argument("--n", type=int, default=16)
    p_synth.add_argument("--noise", type=float, default=0.05)
    p_synth.add_argument("--out", type=Path, required=True)
    p_synth.add_argument("--seed", type=int, default=312)
    return parser


def _load_config(path) -> RunConfig:
    if path is None:
        return parse_config_defaults()
    return parse_config(path)


def parse_config_defaults() -> RunConfig:
    from .config import parse_config_text

    return parse_config_text("")


def _materialize_spike(events, cfg: RunConfig, rng=None, augment=False):
    out = []
    for s in events.samples:
        if augment and rng is not None:
            s = event_drop(s, cfg.augment, rng, events.num_neurons)
        dense = bin_and_discretize(s, cfg.data.neuron_bin, cfg.data.delta_t_ms,
                                   events.num_neurons)
        padded, _, _ = pad_and_mask(dense, cfg.data.target_t)
        out.append(padded)
    return out


def _materialize_analog(samples, cfg: RunConfig, rng=None, augment=False):
    out = []
    for s in samples:
        data = s.data
        if augment and rng is not None:
            data = spec_mask(data[: s.valid_steps], cfg.augment, rng)
            full = np.zeros_like(s.data)
            full[: s.valid_steps] = data
            data = full
        d = DenseSample(data=data, valid_steps=s.valid_steps, label=s.label,
                        is_spike=False)
        padded, _, _ = pad_and_mask(d, cfg.data.target_t)
        out.append(padded)
    return out


def _load_dataset(path: Path, cfg: RunConfig):
    """Returns (epoch_fn, static_samples, input_kind, feature_count)."""
    suffix = path.suffix.lower()
    if suffix == ".spke":
        events = load_events(path)
        n_bins = events.num_neurons // cfg.data.neuron_bin
        static = _materialize_spike(events, cfg)

        def epoch_fn(rng):
            if not cfg.augment_enabled:
                return static
            return _materialize_spike(events, cfg, rng, augment=True)

        return epoch_fn, static, "spike", n_bins
    if suffix == ".spka":
        samples, n_features = load_features(path)
        static = _materialize_analog(samples, cfg)

        def epoch_fn(rng):
            if not cfg.augment_enabled:
                return static
            return _materialize_analog(samples, cfg, rng, augment=True)

        return epoch_fn, static, "analog", n_features
    raise ValueError(f"{path}: expected a .spke or .spka dataset")


def _check_data_model(cfg: RunConfig, input_kind: str, features: int) -> None:
    if cfg.model.input_kind != input_kind:
        raise ValueError(
            f"model expects {cfg.model.input_kind} input but dataset is {input_kind}"
        )
    if cfg.model.input_neurons_n != features:
        raise ValueError(
            f"model expects {cfg.model.input_neurons_n} input channels, "
            f"dataset provides {features}"
        )
    if cfg.model.time_steps_t != cfg.data.target_t:
        raise ValueError(
            f"model time steps {cfg.model.time_steps_t} != data.target_t "
            f"{cfg.data.target_t}"
        )


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace

        cfg = RunConfig(
            model=cfg.model,
            train=replace(cfg.train, seed=args.seed),
            data=cfg.data,
            augment=cfg.augment,
            augment_enabled=cfg.augment_enabled,
        )
    epoch_fn, static, input_kind, features = _load_dataset(args.data, cfg)
    _check_data_model(cfg, input_kind, features)

    out_dir = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved.cfg").write_text(echo_config(cfg), encoding="utf-8")
    (out_dir / "run.json").write_text(
        json.dumps(
            {
                "seed": cfg.train.seed,
                "build": f"spikekws {__version__}",
                "command": "train",
                "data": str(args.data),
            },
            indent=2,
        ),
        encoding="utf-8",
    )

    train_static, val_samples = split_validation(
        static, cfg.train.val_fraction, cfg.train.seed
    )
    train_ids = {id(s) for s in train_static}

    def train_fn(rng):
        if not cfg.augment_enabled:
            return train_static
        epoch = epoch_fn(rng)
        # augmentation re-materializes everything; keep the split stable
        return [s for base, s in zip(static, epoch) if id(base) in train_ids]

    model = SpikingTransformer(cfg.model, seed=cfg.train.seed)
    metrics = train(model, train_fn, val_samples, cfg.train, out_dir=out_dir)
    report_mod.write_jsonl(metrics, out_dir / "metrics.jsonl")
    report_mod.write_csv(metrics, out_dir / "metrics.csv")
    report_mod.plot_training_curves(metrics, out_dir / "curves.png")
    last = metrics[-1]
    print(
        f"trained {cfg.train.epochs} epochs: train_acc={last['train_acc']:.4f} "
        f"val_acc={last['val_acc']:.4f} (run dir: {out_dir})"
    )
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = _load_config(args.config)
    cfg = RunConfig(
        model=model.config,
        train=cfg.train,
        data=cfg.data,
        augment=cfg.augment,
        augment_enabled=False,
    )
    _, static, input_kind, features = _load_dataset(args.data, cfg)
    _check_data_model(cfg, input_kind, features)
    loss, acc = evaluate(model, static, cfg.train.batch_size)
    print(f"samples={len(static)} loss={loss:.6f} accuracy={acc:.4f}")
    return 0


def _probe_batch(cfg: RunConfig, kind: str, batch: int, seed: int):
    rng = np.random.default_rng(seed)
    shape = (cfg.model.time_steps_t, batch, cfg.model.input_neurons_n)
    if kind == "spike":
        return SpikeTensor((rng.random(shape) < 0.2).astype(float))
    return Tensor(rng.normal(size=shape))


def _cmd_profile(args) -> int:
    cfg = _load_config(args.config)
    if args.checkpoint is not None:
        model = load_checkpoint(args.checkpoint)
    else:
        from dataclasses import replace

        model_cfg = replace(cfg.model, input_kind=args.input)
        model = SpikingTransformer(model_cfg, seed=args.seed)
        # fresh models have no running statistics yet; warm them up on
        # one probe batch so eval-mode batch norm is defined
        warm = _probe_batch(cfg, args.input, max(args.batch, 2), args.seed)
        model.train()
        from .attention import ForwardCtx

        model.forward(warm, ctx=ForwardCtx(training=False))
        model.eval()
    if model.config.input_kind != args.input:
        raise ValueError(
            f"checkpoint expects {model.config.input_kind} input, got --input {args.input}"
        )

    cfg = RunConfig(model=model.config, train=cfg.train, data=cfg.data,
                    augment=cfg.augment, augment_enabled=False)
    if args.data is not None:
        _, static, input_kind, features = _load_dataset(args.data, cfg)
        _check_data_model(cfg, input_kind, features)
        x, mask, _ = collate(static[: args.batch])
    else:
        x, mask = _probe_batch(cfg, args.input, args.batch, args.seed), None

    fold_model(model)
    report = estimate_energy(model, x, mask)
    print(format_report(report))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        records = report.to_records()
        report_mod.write_jsonl(records, args.out / "layers.jsonl")
        report_mod.write_csv(records, args.out / "layers.csv")
        report_mod.plot_layer_energy(report, args.out / "energy.png")
        print(f"report files written to {args.out}")
    return 0


def _cmd_ingest(args) -> int:
    count = ingest_csv(args.csv, args.out, args.neurons)
    print(f"wrote {count} samples to {args.out}")
    return 0


def _cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    samples = synth_dataset(args.classes, args.samples, args.t, args.n, rng,
                            noise_p=args.noise)
    events = [dense_to_events(s) for s in samples]
    write_events(args.out, events, args.n)
    print(
        f"wrote {len(events)} samples ({args.classes} classes, T={args.t}, "
        f"N={args.n}) to {args.out}"
    )
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "profile": _cmd_profile,
    "ingest": _cmd_ingest,
    "synth": _cmd_synth,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
