"""Command-line entry point: ``evisurv {synth,train,eval,km,attend}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import dataio, model, survival, trainer

log = logging.getLogger("evisurv")

_MODEL_KEYS = {f.name for f in fields(model.ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(trainer.TrainConfig)}


@dataclass(frozen=True)
class RunConfig:
    model: model.ModelConfig
    train: trainer.TrainConfig

    @classmethod
    def build(cls, base: dict | None = None, overrides: dict | None = None) -> "RunConfig":
        merged = dict(base or {})
        merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
        unknown = set(merged) - _MODEL_KEYS - _TRAIN_KEYS
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        mcfg = model.ModelConfig(**{k: v for k, v in merged.items() if k in _MODEL_KEYS})
        tcfg = trainer.TrainConfig(**{k: v for k, v in merged.items() if k in _TRAIN_KEYS})
        return cls(mcfg, tcfg)

    def to_dict(self) -> dict:
        return {**self.model.to_dict(), **self.train.to_dict()}


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg = dataio.SynthConfig(
        patients=args.patients,
        d_h=args.d_h,
        n_genes=args.n_genes,
        mean_bag_size=args.mean_bag_size,
        censor_rate=args.censor_rate,
        signal_strength=args.signal_strength,
        feature_signal=args.feature_signal,
        seed=args.seed,
    )
    dataset = dataio.synth_generate(cfg, args.out)
    summary = dataio.cohort_summary(dataset)
    print(json.dumps(summary))
    return 0


# ---------------------------------------------------------------------------
# train


def _write_history(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_cindex"])
        for h in history:
            w.writerow([h.epoch, _fmt(h.train_loss), _fmt(h.val_cindex)])


def _train_fold(dataset, splits, fold: int, run: RunConfig, out_dir: Path, k: int) -> dict:
    train_idx, val_idx = splits[fold]
    meta = {
        "folds": k,
        "fold": fold,
        "split_seed": run.train.seed,
        "val_ids": [dataset[i].id for i in val_idx],
    }
    ckpt, history = trainer.train(dataset, (train_idx, val_idx), run.model, run.train, meta)
    ckpt_path = out_dir / f"fold{fold}.ckpt"
    trainer.save_checkpoint(ckpt, ckpt_path)
    _write_history(out_dir / f"fold{fold}_history.csv", history)
    return {"fold": fold, "checkpoint": str(ckpt_path), "final_val_cindex": history[-1].val_cindex}


def cmd_train(args) -> int:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {k: getattr(args, k, None) for k in _MODEL_KEYS | _TRAIN_KEYS}
    run = RunConfig.build(base, overrides)
    dataset = dataio.load_dataset(args.data)
    splits = dataio.kfold_split(len(dataset), args.folds, run.train.seed)
    if args.fold == "all":
        folds = list(range(args.folds))
    else:
        fold = int(args.fold)
        if not 0 <= fold < args.folds:
            raise ValueError(f"--fold must lie in 0..{args.folds - 1}, got {fold}")
        folds = [fold]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(run.to_dict(), indent=1) + "\n")

    if args.workers > 1 and len(folds) > 1:
        with ThreadPoolExecutor(args.workers) as pool:
            results = list(pool.map(lambda f: _train_fold(dataset, splits, f, run, out_dir, args.folds), folds))
    else:
        results = [_train_fold(dataset, splits, f, run, out_dir, args.folds) for f in folds]
    for r in results:
        print(json.dumps(r))
    return 0


# ---------------------------------------------------------------------------
# eval


def _eval_indices(ckpt: trainer.Checkpoint, dataset: dataio.Dataset, subset: str):
    if subset == "all":
        return list(range(len(dataset)))
    ids = ckpt.meta.get("val_ids")
    if ids is None:
        raise ValueError("checkpoint has no validation split; use --subset all")
    index = {r.id: i for i, r in enumerate(dataset.records)}
    try:
        return [index[pid] for pid in ids]
    except KeyError as exc:
        raise ValueError(f"validation patient {exc} is not in the dataset") from None


def write_risks_csv(path: Path, result: dict, K: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "time", "event", "scalar_risk", *[f"o_risk_{k}" for k in range(K)], "u_h", "u_g", "u_fused"])
        for j, pid in enumerate(result["ids"]):
            w.writerow([
                pid,
                _fmt(result["times"][j]),
                int(result["events"][j]),
                _fmt(result["risks"][j]),
                *[_fmt(x) for x in result["o_risk"][j]],
                _fmt(result["u_h"][j]),
                _fmt(result["u_g"][j]),
                _fmt(result["u_fused"][j]),
            ])


def read_risks_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no patients")
    return {
        "ids": [r["patient_id"] for r in rows],
        "times": np.array([float(r["time"]) for r in rows]),
        "events": np.array([int(r["event"]) for r in rows]),
        "risks": np.array([float(r["scalar_risk"]) for r in rows]),
    }


def cmd_eval(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    dataset = dataio.load_dataset(args.data)
    result = trainer.evaluate(ckpt, dataset, _eval_indices(ckpt, dataset, args.subset))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    c = result["c_index"]
    metrics = {
        "c_index": None if math.isnan(c) else c,
        "n_patients": len(result["ids"]),
        "n_comparable_pairs": result["n_comparable_pairs"],
    }
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=1) + "\n")
    write_risks_csv(out_dir / "risks.csv", result, ckpt.model_config.K)
    print(json.dumps(metrics))
    return 0


# ---------------------------------------------------------------------------
# km


def km_stratify(times, events, risks) -> tuple[dict, survival.LogRankResult]:
    high = survival.median_split(risks)
    curves = {
        "low": survival.km_curve(times[~high], events[~high]),
        "high": survival.km_curve(times[high], events[high]),
    }
    test = survival.log_rank(times[high], events[high], times[~high], events[~high])
    return curves, test


def cmd_km(args) -> int:
    if args.risks:
        res = read_risks_csv(args.risks)
    else:
        if not (args.checkpoint and args.data):
            raise ValueError("km needs --risks, or both --checkpoint and --data")
        ckpt = trainer.load_checkpoint(args.checkpoint)
        dataset = dataio.load_dataset(args.data)
        res = trainer.evaluate(ckpt, dataset, _eval_indices(ckpt, dataset, args.subset))
    curves, test = km_stratify(res["times"], res["events"], res["risks"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "km.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "time", "at_risk", "events", "survival"])
        for group, curve in curves.items():
            for t, n, d, s in zip(curve.times, curve.at_risk, curve.events, curve.survival):
                w.writerow([group, _fmt(t), int(n), int(d), _fmt(s)])
    report = {"chi2": test.chi2, "p": test.p}
    (out_dir / "logrank.json").write_text(json.dumps(report, indent=1) + "\n")
    print(json.dumps(report))
    return 0


# ---------------------------------------------------------------------------
# attend


def attention_for(ckpt: trainer.Checkpoint, dataset: dataio.Dataset, patient_id: str) -> np.ndarray:
    rec = dataset.by_id(patient_id)
    out, _ = trainer.predict(rec, dataset, ckpt.params, ckpt.model_config)
    return out.A_coat.data


def top_patches(A: np.ndarray, j: int) -> np.ndarray:
    """Column indices of the ``j`` largest weights per row, highest first (ties by index)."""
    j = min(j, A.shape[1])
    return np.argsort(-A, axis=1, kind="stable")[:, :j]


def cmd_attend(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    dataset = dataio.load_dataset(args.data)
    A = attention_for(ckpt, dataset, args.patient)
    names = dataset.gene_sets.names
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{args.patient}_coattention.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", *[f"patch_{m}" for m in range(A.shape[1])]])
        for name, row in zip(names, A):
            w.writerow([name, *[_fmt(x) for x in row]])
    top = top_patches(A, args.top)
    with open(out_dir / f"{args.patient}_top.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "rank", "patch_index", "weight"])
        for name, row, idx in zip(names, A, top):
            for rank, m in enumerate(idx, start=1):
                w.writerow([name, rank, int(m), _fmt(row[m])])
    print(json.dumps({"patient": args.patient, "n_patches": int(A.shape[1]), "categories": list(names)}))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model / training overrides (take precedence over --config)")
    g.add_argument("--d-model", dest="d_model", type=int)
    g.add_argument("--K", dest="K", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--ffn-dim", dest="ffn_dim", type=int)
    g.add_argument("--dropout-rate", dest="dropout_rate", type=float)
    g.add_argument("--attn-hidden", dest="attn_hidden", type=int)
    g.add_argument("--gene-hidden", dest="gene_hidden", type=int)
    g.add_argument("--coattn-heads", dest="coattn_heads", type=int)
    g.add_argument("--learning-rate", dest="learning_rate", type=float)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--grad-accum", dest="grad_accum", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evisurv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort with a planted risk signal")
    d = dataio.SynthConfig()
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=d.patients)
    p.add_argument("--d-h", dest="d_h", type=int, default=d.d_h)
    p.add_argument("--n-genes", dest="n_genes", type=int, default=d.n_genes)
    p.add_argument("--mean-bag-size", dest="mean_bag_size", type=int, default=d.mean_bag_size)
    p.add_argument("--censor-rate", dest="censor_rate", type=float, default=d.censor_rate)
    p.add_argument("--signal-strength", dest="signal_strength", type=float, default=d.signal_strength)
    p.add_argument("--feature-signal", dest="feature_signal", type=float, default=d.feature_signal)
    p.add_argument("--seed", type=int, default=d.seed)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on one or all cross-validation folds")
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True, help="output directory for checkpoints and histories")
    p.add_argument("--config", help="JSON file with model/training settings")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--fold", default="all", help="fold index or 'all'")
    p.add_argument("--workers", type=int, default=1, help="train folds on this many threads")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subset", choices=("val", "all"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("km", help="median-split Kaplan-Meier curves and log-rank test")
    p.add_argument("--risks", help="risks.csv written by eval")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--subset", choices=("val", "all"), default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_km)

    p = sub.add_parser("attend", help="export the co-attention matrix for one patient")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attend)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError, NotImplementedError) as exc:
        print(f"evisurv {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
