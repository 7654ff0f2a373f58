"""Command-line entry point: synth / train / eval / diagnose.

Every command writes a manifest.json into its output directory holding the
fully resolved config, seed, package version, timestamps and output paths;
re-running a command with the same resolved config reproduces its CSV/JSON
outputs byte for byte (the manifest itself carries the only timestamps).

Exit codes: 0 success, 1 usage/config error, 2 runtime/data error.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, SynthConfig, gen_synthetic, load_manifest, write_dataset
from .diagnostics import grad_direction_report, hardness_consistency
from .errors import ConfigError, DatasetError
from .evaluation import compute_dist_matrix, evaluate_market, k_reciprocal_rerank, query_expansion
from .layers import l2_normalize
from .numerics import Rng
from .pipeline import inference_feature, init_pipeline, load_checkpoint, save_checkpoint
from .training import TrainConfig, pk_sample, train_run, write_history_csv

OUTPUT_ROOT_ENV = "REIDBENCH_OUT"

_USAGE_ERRORS = (ConfigError, ValueError)  # ParameterError/ShapeError/... are ValueErrors
_RUNTIME_ERRORS = (RuntimeError, OSError)  # DatasetError/StateError/... are RuntimeErrors


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with status 2
        raise ConfigError(message)


def _default_out(command: str) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / command


def _load_json_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    if "command" in doc and "config" in doc:  # accept a prior run manifest
        doc = doc["config"]
    return doc


def _apply_overrides(cfg: dict, sets: list[str] | None) -> None:
    for item in sets or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"--set {key}: {part} is not a config section")
            node = nxt
        node[parts[-1]] = value


def _write_manifest(out_dir: Path, command: str, config: dict, seed, outputs: dict, inputs: dict | None = None) -> Path:
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "outputs": {k: str(v) for k, v in outputs.items()},
        "inputs": {k: str(v) for k, v in (inputs or {}).items()},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def _prepare_out_dir(arg, command: str) -> Path:
    out = Path(arg) if arg else _default_out(command)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _load_dataset(args, cfg_dataset: dict | None) -> tuple[Dataset, dict]:
    """Dataset from --data DIR, or from the config's dataset spec."""
    if getattr(args, "data", None):
        manifest = Path(args.data)
        if manifest.is_dir():
            manifest = manifest / "manifest.csv"
        return load_manifest(manifest), {"manifest": str(manifest)}
    spec = cfg_dataset or {}
    if "manifest" in spec:
        return load_manifest(spec["manifest"]), spec
    if "synthetic" in spec:
        synth = SynthConfig.from_dict(spec["synthetic"])
        return gen_synthetic(synth), {"synthetic": synth.to_dict()}
    raise ConfigError("no dataset given: pass --data DIR or a config dataset spec")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg_dict = _load_json_config(args.config) if args.config else {}
    _apply_overrides(cfg_dict, args.set)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg = SynthConfig.from_dict(cfg_dict)
    out = _prepare_out_dir(args.out_dir, "synth")
    ds = gen_synthetic(cfg)
    manifest_csv = write_dataset(ds, out)
    _write_manifest(
        out,
        "synth",
        cfg.to_dict(),
        cfg.seed,
        outputs={"manifest_csv": manifest_csv, "payloads": out / "payloads"},
    )
    n_splits = {s: len(ds.indices(s)) for s in ("train", "query", "gallery")}
    print(f"wrote {len(ds.items)} items to {out} (splits: {n_splits})")
    return 0


def cmd_train(args) -> int:
    cfg_dict = _load_json_config(args.config) if args.config else {}
    _apply_overrides(cfg_dict, args.set)
    if args.variant:
        cfg_dict["variant"] = args.variant
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.optimizer:
        cfg_dict["optimizer"] = args.optimizer
    if args.epochs is not None:
        cfg_dict.setdefault("schedule", {})["total_epochs"] = args.epochs
    cfg = TrainConfig.from_dict(cfg_dict)

    dataset, data_spec = _load_dataset(args, cfg.dataset)
    cfg.dataset = data_spec
    out = _prepare_out_dir(args.out_dir, "train")

    result = train_run(cfg, dataset)
    ckpt = out / "checkpoint.json"
    save_checkpoint(ckpt, result.params, cfg.variant, meta={"config": cfg.to_dict()})
    hist = out / "history.csv"
    write_history_csv(result.history, hist)
    _write_manifest(
        out,
        "train",
        cfg.to_dict(),
        cfg.seed,
        outputs={"checkpoint": ckpt, "history": hist},
        inputs=data_spec,
    )
    if result.history:
        last = result.history[-1]
        tail = "" if last.map is None else f", final mAP {last.map:.4f}"
        print(f"trained {cfg.variant} for {len(result.history)} epochs{tail}; wrote {out}")
    else:
        print(f"0 epochs requested; wrote manifest and empty history to {out}")
    return 0


def _rank_str(report) -> str:
    ranks = [report.rank(k) for k in (1, 5, 10) if k <= report.cmc.size]
    labels = [f"rank-{k} {v:.4f}" for k, v in zip((1, 5, 10), ranks)]
    return ", ".join(labels)


def cmd_eval(args) -> int:
    params, variant, _meta = load_checkpoint(args.checkpoint)
    dataset, data_spec = _load_dataset(args, None)
    out = _prepare_out_dir(args.out_dir, "eval")

    if args.self_match:
        feats = inference_feature(dataset.features(args.self_match), params)
        pids = np.arange(feats.shape[0])
        q_pids = g_pids = pids
        q_cams = np.zeros(feats.shape[0], dtype=np.int64)
        g_cams = np.ones(feats.shape[0], dtype=np.int64)
        fq = fg = feats
    else:
        q = dataset.features("query")
        g = dataset.features("gallery")
        if q.shape[0] == 0 or g.shape[0] == 0:
            raise DatasetError("dataset lacks query/gallery splits")
        fq = inference_feature(q, params)
        fg = inference_feature(g, params)
        q_pids, q_cams = dataset.pids("query"), dataset.camids("query")
        g_pids, g_cams = dataset.pids("gallery"), dataset.camids("gallery")

    plain = evaluate_market(
        compute_dist_matrix(fq, fg, args.metric), q_pids, q_cams, g_pids, g_cams, args.max_rank
    )

    if args.qe:
        fq = query_expansion(fq, fg, qe_k=args.qe_k, alpha=args.qe_alpha)
    if args.rerank:
        nq_feats, _ = l2_normalize(fq)
        ng_feats, _ = l2_normalize(fg)
        dist = k_reciprocal_rerank(nq_feats, ng_feats, k1=args.k1, k2=args.k2, lam=args.rerank_lambda)
    else:
        dist = compute_dist_matrix(fq, fg, args.metric)
    report = evaluate_market(dist, q_pids, q_cams, g_pids, g_cams, args.max_rank)

    doc = report.to_dict()
    doc["variant"] = variant
    doc["metric"] = args.metric
    doc["postprocessing"] = {
        "query_expansion": bool(args.qe),
        "rerank": bool(args.rerank),
        "qe_k": args.qe_k,
        "qe_alpha": args.qe_alpha,
        "rerank_k1": args.k1,
        "rerank_k2": args.k2,
        "rerank_lambda": args.rerank_lambda,
    }
    doc["plain_mAP"] = plain.map
    doc["map_delta_vs_plain"] = report.map - plain.map
    report_path = Path(args.out) if args.out else out / "report.json"
    report_path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    _write_manifest(
        out,
        "eval",
        {
            "checkpoint": str(args.checkpoint),
            "metric": args.metric,
            "qe": bool(args.qe),
            "rerank": bool(args.rerank),
            "self_match": args.self_match,
            "max_rank": args.max_rank,
        },
        None,
        outputs={"report": report_path},
        inputs=data_spec,
    )
    print(f"mAP {report.map:.4f}, {_rank_str(report)} ({report.num_valid_queries} valid queries)")
    return 0


def cmd_diagnose(args) -> int:
    dataset, data_spec = _load_dataset(args, None)
    out = _prepare_out_dir(args.out_dir, "diagnose")
    labels = dataset.train_labels()
    if labels.size == 0:
        raise DatasetError("diagnostics need a train split")
    feats = dataset.features("train")

    if args.checkpoint:
        params, variant, _ = load_checkpoint(args.checkpoint)
        if args.variant:
            variant = args.variant
    else:
        rng_init = Rng(args.seed)
        params = init_pipeline(feats.shape[1], (64, 32), dataset.num_train_ids, rng_init)
        variant = args.variant or "stronger"

    rng = Rng(args.seed + 1)
    rows = []
    for b in range(args.batches):
        idx = pk_sample(labels, args.p, args.k, rng)
        x = feats[idx]
        y = labels[idx]
        cons_x = l2_normalize(x)[0] if args.normalize_first else x
        cons = hardness_consistency(cons_x, y)
        grad = grad_direction_report(x, y, params, variant)
        rows.append(
            [
                b,
                repr(cons.positive_agreement),
                repr(cons.negative_agreement),
                "" if grad.mean_branch_cosine is None else repr(grad.mean_branch_cosine),
                "" if grad.radial_leakage is None else repr(grad.radial_leakage),
            ]
        )
    csv_path = Path(args.out) if args.out else out / "diagnostics.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch_id", "positive_agreement", "negative_agreement", "mean_branch_cosine", "radial_leakage"])
        w.writerows(rows)
    _write_manifest(
        out,
        "diagnose",
        {
            "checkpoint": str(args.checkpoint) if args.checkpoint else None,
            "variant": variant,
            "batches": args.batches,
            "p": args.p,
            "k": args.k,
            "normalize_first": bool(args.normalize_first),
        },
        args.seed,
        outputs={"csv": csv_path},
        inputs=data_spec,
    )
    print(f"wrote {len(rows)} diagnostic rows to {csv_path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reidbench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--config", help="JSON synthetic config (or a prior run manifest)")
    p_synth.add_argument("--out-dir", help=f"output directory (default ${OUTPUT_ROOT_ENV}/synth)")
    p_synth.add_argument("--seed", type=int)
    p_synth.add_argument("--set", action="append", metavar="KEY=VAL", help="dotted config override")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train one pipeline variant")
    p_train.add_argument("--config", help="JSON train config (or a prior run manifest)")
    p_train.add_argument("--data", help="dataset directory or manifest.csv (overrides config)")
    p_train.add_argument("--out-dir")
    p_train.add_argument("--variant", choices=("strong", "stronger"))
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--optimizer", choices=("adam", "sgd"))
    p_train.add_argument("--set", action="append", metavar="KEY=VAL")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="retrieval evaluation of a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--metric", choices=("cosine", "euclidean", "sq_euclidean"), default="cosine")
    p_eval.add_argument("--qe", action="store_true", help="expand queries before ranking")
    p_eval.add_argument("--qe-k", type=int, default=5)
    p_eval.add_argument("--qe-alpha", type=float, default=3.0)
    p_eval.add_argument("--rerank", action="store_true", help="k-reciprocal re-ranking")
    p_eval.add_argument("--k1", type=int, default=20)
    p_eval.add_argument("--k2", type=int, default=6)
    p_eval.add_argument("--rerank-lambda", type=float, default=0.3)
    p_eval.add_argument("--max-rank", type=int, default=10)
    p_eval.add_argument(
        "--self-match",
        nargs="?",
        const="train",
        default=None,
        metavar="SPLIT",
        help="sanity mode: rank a split against itself with per-item ids (expects mAP = 1)",
    )
    p_eval.add_argument("--out", help="report JSON path")
    p_eval.add_argument("--out-dir")
    p_eval.set_defaults(func=cmd_eval)

    p_diag = sub.add_parser("diagnose", help="mining-consistency and gradient-direction report")
    p_diag.add_argument("--data", required=True)
    p_diag.add_argument("--checkpoint")
    p_diag.add_argument("--variant", choices=("strong", "stronger"))
    p_diag.add_argument("--batches", type=int, default=8)
    p_diag.add_argument("--p", type=int, default=8)
    p_diag.add_argument("--k", type=int, default=4)
    p_diag.add_argument("--seed", type=int, default=0)
    p_diag.add_argument("--normalize-first", action="store_true")
    p_diag.add_argument("--out", help="CSV path")
    p_diag.add_argument("--out-dir")
    p_diag.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
