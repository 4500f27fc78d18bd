"""``acformer`` command line.

Every subcommand prints a one-line JSON summary on stdout (``cost`` prints
TSV when no ``--out`` is given). Exit codes: 2 bad flags or config, 3 data,
shape or I/O errors, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import analysis, baselines, costmodel
from .connector import (
    TOY_LR,
    ConnectorConfig,
    init_weights,
    load_weights,
    make_toy_dataset,
    toy_train,
)
from .errors import ConfigError, DataError, NumericError, ShapeError
from .gradcheck import TINY_CONFIG, connector_gradcheck
from .selector import select_anchors
from .synth import STRUCTURES, synthesize
from .tensorfile import atomic_write_text, read_tensor, tensor_hash, write_tensor

CONNECTORS = {
    "acformer": "acformer",
    "pr": "pr",
    "pooling": "pooling",
    "pooling-pr": "pooling_pr",
    "random-pr": "random_pr",
    "top-p": "top_p_direct",
    "evit": "evit_direct",
}
RUN_KEYS = {f.name for f in fields(ConnectorConfig)} | {"seed", "features", "attn", "weights", "out"}
NEEDS_ATTN = {"acformer", "top_p_direct", "evit_direct"}


# ---------------------------------------------------------------- helpers


def resolve_seed(args, run: dict | None = None) -> int:
    """--seed, then the run config, then $ACFORMER_SEED, then 0."""
    if getattr(args, "seed", None) is not None:
        return args.seed
    if run and "seed" in run:
        if not isinstance(run["seed"], int):
            raise ConfigError("config seed must be an integer")
        return run["seed"]
    env = os.environ.get("ACFORMER_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"ACFORMER_SEED must be an integer, got {env!r}") from None


def load_run_config(path) -> dict:
    """Read a run config, rejecting unknown keys and non-integer dims."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    unknown = sorted(set(doc) - RUN_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    for f in fields(ConnectorConfig):
        if f.name in doc and f.name != "variant":
            if not isinstance(doc[f.name], int) or isinstance(doc[f.name], bool):
                raise ConfigError(f"{path}: {f.name} must be an integer")
    if "variant" in doc and doc["variant"] not in CONNECTORS.values():
        # accept the CLI spelling too
        doc["variant"] = CONNECTORS.get(doc["variant"], doc["variant"])
    return doc


def read_run(args) -> dict:
    return load_run_config(args.config) if getattr(args, "config", None) else {}


def build_config(args, run: dict, base: ConnectorConfig | None = None, feature_dim: int | None = None):
    """Defaults < config file < flags. ``feature_dim`` from data fills in when unset."""
    cfg_keys = {f.name for f in fields(ConnectorConfig)}
    values = (base or ConnectorConfig()).to_dict()
    values.update({k: v for k, v in run.items() if k in cfg_keys})
    if feature_dim is not None and "feature_dim" not in run:
        values["feature_dim"] = feature_dim
    if getattr(args, "connector", None):
        values["variant"] = CONNECTORS[args.connector]
    if getattr(args, "budget", None) is not None:
        values["token_budget"] = args.budget
    return ConnectorConfig(**values)


def out_dir(args, run: dict | None = None) -> Path:
    path = args.out or (run or {}).get("out")
    if not path:
        raise ConfigError("--out is required")
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _path(args, run: dict, key: str, required: bool = True):
    value = getattr(args, key, None) or run.get(key)
    if required and not value:
        raise ConfigError(f"--{key} is required")
    return value


def emit(summary: dict) -> None:
    sys.stdout.write(json.dumps(summary) + "\n")


def _finite(out: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NumericError(f"{what} produced non-finite values")
    return out


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    seed = resolve_seed(args)
    planted = None
    if args.planted:
        try:
            planted = [int(t) for t in args.planted.split(",") if t.strip()]
        except ValueError:
            raise ConfigError(f"--planted must be comma-separated integers, got {args.planted!r}") from None
    n_planted = args.n_planted
    if args.structure == "planted" and planted is None and n_planted is None:
        raise ConfigError("planted mode needs --planted or --n-planted")
    s = synthesize(seed, args.tokens, args.dim, args.heads, args.structure, planted, n_planted)
    out = out_dir(args)
    write_tensor(out / "features.vtf", s.features)
    write_tensor(out / "attn.vtf", s.attn)
    summary = {
        "features": str(out / "features.vtf"),
        "attn": str(out / "attn.vtf"),
        "features_shape": list(s.features.shape),
        "attn_shape": list(s.attn.shape),
        "structure": args.structure,
        "seed": seed,
    }
    if args.structure == "planted":
        side = {
            "seed": seed,
            "planted_visual": s.planted,
            "planted_sequence": [j + 1 for j in s.planted],
        }
        atomic_write_text(out / "planted.json", json.dumps(side) + "\n")
        summary["planted"] = str(out / "planted.json")
        summary["planted_sequence"] = side["planted_sequence"]
    emit(summary)
    return 0


def _select_one(path: str, t_n: int) -> list[int]:
    return select_anchors(read_tensor(path), t_n)


def cmd_select(args) -> int:
    if args.budget < 1:
        raise ConfigError("--budget must be >= 1 (it counts the [CLS] anchor)")
    t_n = args.budget - 1
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(lambda p: _select_one(p, t_n), args.attn))
    if len(args.attn) == 1:
        summary = {"indices": results[0], "budget": args.budget}
    else:
        summary = {
            "budget": args.budget,
            "results": [{"attn": p, "indices": r} for p, r in zip(args.attn, results)],
        }
    if args.out:
        atomic_write_text(args.out, json.dumps(summary) + "\n")
    emit(summary)
    return 0


def cmd_forward(args) -> int:
    run = read_run(args)
    features = read_tensor(_path(args, run, "features"))
    if features.ndim != 2:
        raise ShapeError(f"features must be 2-D, got {features.shape}")
    cfg = build_config(args, run, feature_dim=features.shape[1])
    attn = None
    if cfg.variant in NEEDS_ATTN:
        attn = read_tensor(_path(args, run, "attn"))
    seed = resolve_seed(args, run)
    weights_path = _path(args, run, "weights", required=False)
    if weights_path:
        w = load_weights(weights_path)
        w.check(cfg)
    else:
        w = init_weights(cfg, seed)
    out = _finite(baselines.run_connector(features, attn, cfg, w, seed=seed), "forward")
    dest = out_dir(args, run)
    write_tensor(dest / "output.vtf", out)
    summary = {
        "connector": cfg.variant,
        "output_shape": list(out.shape),
        "token_budget": cfg.token_budget,
        "output": str(dest / "output.vtf"),
        "weights": weights_path or f"init(seed={seed})",
    }
    if cfg.variant in NEEDS_ATTN:
        summary["indices"] = select_anchors(attn, cfg.t_n)
    emit(summary)
    return 0


def cmd_viz(args) -> int:
    if not args.features and not args.attn:
        raise ConfigError("viz needs --features and/or --attn")
    # render everything first so a bad input leaves no files behind
    images = []
    summary: dict = {}
    if args.features:
        f = read_tensor(args.features)
        if f.ndim != 2:
            raise ShapeError(f"features must be 2-D, got {f.shape}")
        p = analysis.pca3(f[1:])
        images.append(("features_pca.ppm", analysis.render_feature_rgb(p), tensor_hash(f)))
        summary["explained_variance"] = p.explained_variance.tolist()
        summary["degenerate"] = p.degenerate
    if args.attn:
        a = read_tensor(args.attn)
        head = "mean" if args.head == "mean" else _int_flag(args.head, "--head")
        images.append((f"attn_{head}.ppm", analysis.render_attention_heatmap(a, head), tensor_hash(a)))
    dest = out_dir(args)
    for name, img, digest in images:
        analysis.write_ppm(dest / name, img, digest, args.scale)
        key = "features_image" if name.startswith("features") else "attn_image"
        summary[key] = str(dest / name)
    summary["grid"] = list(images[0][1].shape[:2])
    emit(summary)
    return 0


def _int_flag(value: str, flag: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{flag} must be an integer or 'mean', got {value!r}") from None


def cmd_overlap(args) -> int:
    f = read_tensor(args.features)
    a = read_tensor(args.attn)
    k = args.k if args.k is not None else args.budget - 1
    result = analysis.anchor_overlap(f, a, k)
    if args.out:
        atomic_write_text(args.out, json.dumps(result) + "\n")
    emit(result)
    return 0


def cmd_gradcheck(args) -> int:
    run = read_run(args)
    cfg = build_config(args, run, base=TINY_CONFIG)
    report = connector_gradcheck(
        cfg, n_tokens=args.tokens, attn_heads=args.heads,
        n_probes=args.probes, seed=resolve_seed(args, run),
    )
    summary = report.to_dict()
    summary["tolerance"] = args.tolerance
    summary["passed"] = report.max_rel_err <= args.tolerance
    emit(summary)
    if not summary["passed"]:
        print(f"gradcheck: max relative error {report.max_rel_err:.3e} exceeds {args.tolerance:g}",
              file=sys.stderr)
        return 4
    return 0


def cmd_train(args) -> int:
    run = read_run(args)
    cfg = build_config(args, run, base=TINY_CONFIG)
    seed = resolve_seed(args, run)
    data = make_toy_dataset(cfg, args.samples, args.tokens, args.heads, seed)
    result = toy_train(cfg, data, args.steps, args.lr, seed=seed)
    summary = {
        "steps": args.steps,
        "lr": args.lr,
        "initial_loss": result.losses[0],
        "final_loss": result.losses[-1],
        "losses": result.losses,
    }
    if args.out or run.get("out"):
        dest = out_dir(args, run)
        result.weights.save(dest / "weights.acfw")
        summary["weights"] = str(dest / "weights.acfw")
    emit(summary)
    return 0


def cmd_cost(args) -> int:
    try:
        budgets = [int(t) for t in args.budgets.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--budgets must be comma-separated integers, got {args.budgets!r}") from None
    if not budgets:
        raise ConfigError("--budgets is empty")
    cfg = build_config(args, read_run(args))
    llm = costmodel.LlmCostSpec(args.llm_layers, args.llm_hidden, args.ff_mult, args.text_tokens)
    rows = costmodel.cost_table(budgets, llm, cfg, n_features=args.n_features)
    tsv = costmodel.format_tsv(rows)
    if args.out:
        atomic_write_text(args.out, tsv)
        emit({
            "table": args.out,
            "rows": [
                {"variant": r.variant, "visual_tokens": r.visual_tokens, "ratio": r.speed_ratio_vs_baseline}
                for r in rows
            ],
        })
    else:
        sys.stdout.write(tsv)
    return 0


# ---------------------------------------------------------------- parser


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config=True, seed=True, out_help="output directory"):
        if config:
            p.add_argument("--config", help="JSON run config (connector fields, seed, paths)")
        if seed:
            p.add_argument("--seed", type=int, help="seed (falls back to $ACFORMER_SEED, then 0)")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("synth", help="generate synthetic feature/attention tensors")
    p.add_argument("--tokens", type=_positive, default=577, help="N, including [CLS]")
    p.add_argument("--dim", type=_positive, default=1024)
    p.add_argument("--heads", type=_positive, default=16)
    p.add_argument("--structure", choices=STRUCTURES, default="random")
    p.add_argument("--planted", help="comma-separated visual indices to plant")
    p.add_argument("--n-planted", type=int, help="number of random indices to plant")
    common(p, config=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("select", help="select visual anchors from CLS attention")
    p.add_argument("--attn", nargs="+", required=True, help="one or more VTF1 attention maps")
    p.add_argument("--budget", type=int, default=145, help="tokens kept, including [CLS]")
    p.add_argument("--workers", type=int, default=1)
    common(p, config=False, seed=False, out_help="optional JSON file for the result")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("forward", help="run a connector forward pass")
    p.add_argument("--features")
    p.add_argument("--attn")
    p.add_argument("--connector", choices=sorted(CONNECTORS))
    p.add_argument("--budget", type=int)
    p.add_argument("--weights", help="ACFW checkpoint; default is seeded initialization")
    common(p)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("viz", help="render PCA feature image and attention heatmap as PPM")
    p.add_argument("--features")
    p.add_argument("--attn")
    p.add_argument("--head", default="mean", help="head index or 'mean'")
    p.add_argument("--scale", type=_positive, default=1, help="pixels per patch")
    common(p, config=False, seed=False)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("overlap", help="PCA-activated vs CLS-salient token overlap")
    p.add_argument("--features", required=True)
    p.add_argument("--attn", required=True)
    p.add_argument("--k", type=int, help="set size (default: budget - 1)")
    p.add_argument("--budget", type=int, default=145)
    common(p, config=False, seed=False, out_help="optional JSON file for the result")
    p.set_defaults(func=cmd_overlap)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full backward pass")
    p.add_argument("--probes", type=_positive, default=300)
    p.add_argument("--tokens", type=_positive, default=10)
    p.add_argument("--heads", type=_positive, default=2, help="attention-map heads")
    p.add_argument("--tolerance", type=float, default=1e-4)
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="toy anchor-regression training run")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=TOY_LR)
    p.add_argument("--samples", type=_positive, default=8)
    p.add_argument("--tokens", type=_positive, default=10)
    p.add_argument("--heads", type=_positive, default=2)
    common(p, out_help="directory for the trained ACFW checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cost", help="FLOP cost table vs the 577-token linear baseline")
    p.add_argument("--budgets", default="65,145,257,577")
    p.add_argument("--connector", choices=sorted(CONNECTORS))
    p.add_argument("--n-features", type=_positive, default=costmodel.BASELINE_TOKENS)
    p.add_argument("--llm-layers", type=_positive, default=costmodel.VICUNA_7B.layers)
    p.add_argument("--llm-hidden", type=_positive, default=costmodel.VICUNA_7B.hidden)
    p.add_argument("--ff-mult", type=float, default=costmodel.VICUNA_7B.ff_mult)
    p.add_argument("--text-tokens", type=_positive, default=costmodel.VICUNA_7B.text_tokens)
    common(p, seed=False, out_help="TSV file (default: TSV on stdout)")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        code = 3 if isinstance(exc, (ShapeError, DataError)) else 2
        print(f"acformer {args.command}: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"acformer {args.command}: {exc}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as exc:
        print(f"acformer {args.command}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
