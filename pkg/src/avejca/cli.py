"""``ave`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 I/O or parse error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autograd as ag
from .config import RunConfig, load_config, write_config_echo
from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_checkpoint,
    read_feature_file,
    write_feature_file,
)
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .jca import FusionStrategy
from .model import (
    JcaModel,
    confusion_matrix,
    count_parameters,
    mlsm_loss,
    one_hot,
    parameter_breakdown,
    segment_accuracy,
)
from .train import check_compatible, format_ablation, predict_scores, run_ablation, train

logger = logging.getLogger("avejca")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

_INT_FIELDS = {
    "N", "d_a", "d_v", "k", "depth", "class_count", "audio_dim", "visual_positions",
    "visual_channels", "joint_hidden", "epochs", "batch_size", "seed",
}

# Small enough that central differences over every parameter stay cheap.
GRADCHECK_TOY = dict(
    N=4, d_a=8, d_v=8, k=4, depth=3, fusion_strategy="concatenation+fc", class_count=3,
    audio_dim=6, visual_positions=4, visual_channels=6, joint_hidden=4, mlp_hidden=[8, 8],
)
GRADCHECK_LIMITS = {"N": 6, "d_a": 16, "d_v": 16, "audio_dim": 16, "visual_positions": 16,
                    "visual_channels": 16, "joint_hidden": 8}

FUSION_STRATEGIES = [
    "addition", "multiplication", "concatenation",
    "addition+fc", "multiplication+fc", "concatenation+fc",
]


def _parse_residual(text: str) -> str:
    lowered = text.lower()
    if lowered in ("true", "on", "1", "yes"):
        return "input"
    if lowered in ("false", "off", "0", "no"):
        return "off"
    return lowered


def _field_type(name: str):
    if name in _INT_FIELDS:
        return int
    if name == "learning_rate":
        return float
    if name == "mlp_hidden":
        return lambda s: [int(x) for x in s.split(",") if x]
    if name == "residual_embedding":
        return _parse_residual
    return str


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON run configuration")
    group = p.add_argument_group("config overrides")
    for f in dataclasses.fields(RunConfig):
        flags = [f"--{f.name.replace('_', '-')}"]
        if f.name == "N":
            flags.append("--n")
        group.add_argument(*flags, dest=f"cfg_{f.name}", type=_field_type(f.name), default=argparse.SUPPRESS)


def _overrides(args: argparse.Namespace) -> dict:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}


def _config(args: argparse.Namespace, base: dict | None = None) -> RunConfig:
    if args.config is None and base:
        return load_config(None, {**base, **_overrides(args)})
    if base:
        file_values = json.loads(Path(args.config).read_text())
        return load_config(None, {**base, **file_values, **_overrides(args)})
    return load_config(args.config, _overrides(args))


# ------------------------------------------------------------------ synth


def cmd_synth(args: argparse.Namespace) -> int:
    seed = args.seed
    if seed is None:
        seed = int(os.environ.get("AVE_SEED", 0))
    spec = SyntheticSpec(
        class_count=args.classes,
        sequences_per_class=args.per_class,
        N=args.n,
        background_rate=args.background_rate,
        noise_sigma=args.sigma,
        seed=seed,
        audio_dim=args.audio_dim,
        visual_positions=args.visual_positions,
        visual_channels=args.visual_channels,
    )
    data = generate_synthetic(spec, args.split)
    write_feature_file(args.out, data)
    Path(str(args.out) + ".config.json").write_text(
        json.dumps({**dataclasses.asdict(spec), "split": args.split}, indent=2, sort_keys=True) + "\n"
    )
    counts = np.bincount(data.labels.reshape(-1), minlength=spec.label_count)
    print(f"wrote {args.out}: {len(data)} sequences, {data.labels.size} segments")
    for c, n in enumerate(counts):
        name = "background" if c == spec.class_count else f"class {c}"
        print(f"  {name:<12} {n}")
    print(f"background fraction {counts[-1] / data.labels.size:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ train


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    if config.train_path is None:
        raise ConfigError("train_path is required")
    if config.checkpoint_path is None:
        raise ConfigError("checkpoint_path is required")
    log_path = config.log_path or str(config.checkpoint_path) + ".metrics.csv"
    train_set = read_feature_file(config.train_path, config.class_count)
    val_set = read_feature_file(config.val_path, config.class_count) if config.val_path else None
    check_compatible(config, train_set, "training set")
    if val_set is not None:
        check_compatible(config, val_set, "validation set")

    def report(m):
        print(f"epoch {m.epoch:3d}  loss {m.train_loss:.6f}  train_acc {m.train_acc:.4f}  val_acc {m.val_acc:.4f}",
              flush=True)

    result = train(config, train_set, val_set, log_path=log_path,
                   checkpoint_path=config.checkpoint_path, on_epoch=report)
    print(f"best epoch {result.best_epoch}; checkpoint {config.checkpoint_path}; log {log_path}")
    return EXIT_OK


# ------------------------------------------------------------------- eval


def cmd_eval(args: argparse.Namespace) -> int:
    config, params = load_checkpoint(args.checkpoint)
    data = read_feature_file(args.data)
    check_compatible(config, data, f"feature file {args.data}")
    model = JcaModel(config, params)
    scores = predict_scores(model, data, config.batch_size)
    acc = segment_accuracy(scores, data.labels)
    cm = confusion_matrix(scores, data.labels, config.class_count)
    print(f"segment accuracy {acc:.6f} ({int(np.trace(cm))}/{data.labels.size})")
    for c in range(config.class_count):
        total = cm[c].sum()
        if total:
            print(f"  class {c:<3} accuracy {cm[c, c] / total:.4f}  ({total} segments)")
    if args.out:
        header = "true\\pred," + ",".join(str(c) for c in range(config.class_count))
        rows = [f"{c}," + ",".join(str(v) for v in cm[c]) for c in range(config.class_count)]
        Path(args.out).write_text("\n".join([header, *rows]) + "\n")
        write_config_echo(config, args.out)
        print(f"confusion matrix written to {args.out}")
    return EXIT_OK


# -------------------------------------------------------------- gradcheck


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = _config(args, base=GRADCHECK_TOY)
    for name, limit in GRADCHECK_LIMITS.items():
        if getattr(config, name) > limit:
            raise ConfigError(f"gradcheck needs toy dims: {name}={getattr(config, name)} exceeds {limit}")
    if max(config.mlp_hidden) > 16:
        raise ConfigError("gradcheck needs toy dims: mlp_hidden entries must be <= 16")

    rng = np.random.default_rng(config.seed)
    model = JcaModel(config)
    audio = ag.Tensor(rng.uniform(-1, 1, (2, config.N, config.audio_dim)))
    visual = ag.Tensor(rng.uniform(-1, 1, (2, config.N, config.visual_positions, config.visual_channels)))
    targets = one_hot(rng.integers(0, config.class_count, (2, config.N)), config.class_count)

    def loss(*_params):
        return mlsm_loss(model.forward(audio, visual).logits, targets)

    start = time.perf_counter()
    report = ag.grad_check(loss, list(model.params.values()), h=args.h, tol=args.tol,
                           names=list(model.params), max_coords=args.max_coords)
    elapsed = time.perf_counter() - start
    print(f"{'block':<36}{'max_rel_err':>14}{'checked':>9}{'excluded':>9}")
    for c in report.inputs:
        print(f"{c.name:<36}{c.max_rel_error:>14.3e}{c.checked:>9}{c.excluded:>9}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: max relative error {report.max_rel_error:.3e} (tol {args.tol:g}), {elapsed:.1f}s")
    return EXIT_OK if report.passed else EXIT_VERIFY


# ----------------------------------------------------------------- params


def _print_breakdown(config: RunConfig) -> None:
    counts = parameter_breakdown(config)
    for module, n in counts.items():
        print(f"  {module:<16}{n:>14,}")
    print(f"  {'total':<16}{sum(counts.values()):>14,}")


def cmd_params(args: argparse.Namespace) -> int:
    config = _config(args)
    print(f"N={config.N} d_a={config.d_a} d_v={config.d_v} k={config.k} depth={config.depth} "
          f"strategy={config.fusion_strategy} mode={config.coattention_mode}")
    _print_breakdown(config)
    if args.sweep:
        print("\ndepth sweep")
        print(f"{'depth':>6}{'total':>14}{'jca':>12}{'increment':>12}")
        prev = None
        for depth in range(1, 6):
            cfg = dataclasses.replace(config, depth=depth)
            total = count_parameters(cfg)
            inc = "" if prev is None else f"{total - prev:,}"
            print(f"{depth:>6}{total:>14,}{parameter_breakdown(cfg)['jca']:>12,}{inc:>12}")
            prev = total
    if args.strategies:
        print("\nfusion strategy sweep")
        for name in FUSION_STRATEGIES:
            cfg = dataclasses.replace(config, fusion_strategy=name).validate()
            print(f"  {name:<20}{count_parameters(cfg):>14,}")
    return EXIT_OK


# ----------------------------------------------------------------- attend


def write_pgm(path: Path, grid: np.ndarray) -> None:
    """Binary 8-bit graymap; the largest weight maps to white."""
    peak = grid.max()
    pixels = np.zeros_like(grid) if peak <= 0 else grid / peak
    data = np.round(pixels * 255).astype(np.uint8)
    h, w = data.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def cmd_attend(args: argparse.Namespace) -> int:
    config, params = load_checkpoint(args.checkpoint)
    if config.early_fusion != "audio_guided":
        raise ConfigError(f"checkpoint uses {config.early_fusion} pooling; no attention weights to dump")
    side = math.isqrt(config.visual_positions)
    if side * side != config.visual_positions:
        raise ConfigError(f"visual_positions={config.visual_positions} is not a square grid")
    data = read_feature_file(args.data)
    check_compatible(config, data, f"feature file {args.data}")
    if not 0 <= args.index < len(data):
        raise ContractError(f"sequence index {args.index} out of range [0, {len(data)})")
    model = JcaModel(config, params)
    seq = data[[args.index]]
    with ag.no_grad():
        weights = model.forward(seq.audio, seq.visual).attention.data[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, w in enumerate(weights):
        grid = w.reshape(side, side)
        np.savetxt(out / f"segment_{t:02d}.csv", grid, delimiter=",", fmt="%.17g")
        write_pgm(out / f"segment_{t:02d}.pgm", grid)
    (out / "config.json").write_text(json.dumps(
        {**config.to_dict(), "checkpoint": str(args.checkpoint), "data": str(args.data), "index": args.index},
        indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(weights)} heatmaps to {out}")
    return EXIT_OK


# ----------------------------------------------------------------- ablate


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _config(args)
    if config.train_path is None:
        raise ConfigError("train_path is required")
    train_set = read_feature_file(config.train_path, config.class_count)
    val_set = read_feature_file(config.val_path, config.class_count) if config.val_path else None
    check_compatible(config, train_set, "training set")
    rows = run_ablation(config, train_set, val_set)
    table = format_ablation(rows)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")
        write_config_echo(config, args.out)
    return EXIT_OK


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ave", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic feature file")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--background-rate", type=float, default=0.2)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p.add_argument("--audio-dim", type=int, default=128)
    p.add_argument("--visual-positions", type=int, default=49)
    p.add_argument("--visual-channels", type=int, default=512)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and save the best-validation checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="feature file")
    p.add_argument("--out", help="confusion matrix CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    _add_config_flags(p)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=None, help="probe at most this many entries per block")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts per module")
    _add_config_flags(p)
    p.add_argument("--sweep", action="store_true", help="depth 1..5 with per-layer increments")
    p.add_argument("--strategies", action="store_true", help="all six joint-representation strategies")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("attend", help="dump early-fusion attention heatmaps for one sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("ablate", help="train every ablation variant and print a comparison table")
    _add_config_flags(p)
    p.add_argument("--out", help="write the table here as well")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ContractError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
