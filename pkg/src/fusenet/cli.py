"""Command-line entry point: ``fusenet {synth,split,train,eval,report,gradcheck}``.

Exit codes: 0 success, 1 usage/configuration error, 2 data error, 3 numeric
failure (non-finite loss, failed gradient check). Every command writes only
inside its ``--out`` directory, and identical inputs give identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

from .backbones import KINDS
from .checkpoint import read_checkpoint, save_checkpoint
from .data import SplitPlan, load_manifest, make_blob_dataset, split_dataset, synthetic_splits, write_manifest
from .errors import DataError, FusenetError, TrainingError, UsageError
from .fusion import FusionModel, default_specs
from .metrics import CSV_HEADER, roc_curve
from .trainer import TrainConfig, evaluate, train


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for data errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    """Every knob of a run; loaded from ``--config`` JSON, then overridden by flags."""

    # data
    manifest: Optional[str] = None
    split: Optional[str] = None
    n_val: int = 250
    n_test: int = 250
    standardize: bool = False
    synthetic_seed: int = 0
    # model
    kinds: List[str] = field(default_factory=lambda: list(KINDS))
    feature_dim: int = 1000
    hidden: int = 512
    input_size: List[int] = field(default_factory=lambda: [64, 64])
    backbones: Optional[dict] = None
    # training
    classes: int = 2
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout_p: float = 0.2
    seed: int = 0
    select_best: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}; allowed: {', '.join(sorted(known))}")
        cfg = cls(**d)
        for f in fields(cls):
            value = getattr(cfg, f.name)
            if f.type in ("int", "float") and (isinstance(value, bool) or not isinstance(value, (int, float))):
                raise UsageError(f"config key {f.name!r} must be a number, got {value!r}")
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, learning_rate=self.lr, epochs=self.epochs, beta1=self.beta1,
            beta2=self.beta2, eps=self.eps, seed=self.seed, dropout_p=self.dropout_p,
            class_count=self.classes, select_best=self.select_best,
        )

    def build_model(self) -> FusionModel:
        unknown = [k for k in self.kinds if k not in KINDS]
        if unknown or not self.kinds:
            raise UsageError(f"kinds must be a non-empty subset of {list(KINDS)}, got {self.kinds}")
        specs = default_specs(self.feature_dim, tuple(self.input_size), kinds=self.kinds, **self._backbone_overrides())
        return FusionModel(specs, class_count=self.classes, hidden=self.hidden, dropout_p=self.dropout_p, seed=self.seed)

    def _backbone_overrides(self) -> dict:
        over = dict(self.backbones or {})
        allowed = {"stem_channels", "stages", "groups"}
        if set(over) - allowed:
            raise UsageError(f"backbones accepts only {sorted(allowed)}, got {sorted(over)}")
        if "stages" in over:
            over["stages"] = tuple(tuple(s) for s in over["stages"])
        return over


_FLAG_TO_FIELD = {
    "manifest": "manifest", "split": "split", "seed": "seed", "epochs": "epochs", "batch_size": "batch_size",
    "lr": "lr", "classes": "classes", "feature_dim": "feature_dim", "n_val": "n_val", "n_test": "n_test",
}


def _resolve_config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror or exc}") from None
        except ValueError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(base, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
    cfg = RunConfig.from_dict(base)
    for flag, name in _FLAG_TO_FIELD.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


def _load_split(path) -> SplitPlan:
    try:
        return SplitPlan.from_json(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read split plan {path}: {exc.strerror or exc}") from None


def _datasets(cfg: RunConfig, size):
    """(train, val, test) from the manifest + split, or the bundled synthetic benchmark."""
    if cfg.manifest is None:
        if cfg.split is not None:
            raise UsageError("--split needs --manifest")
        if size[0] != size[1]:
            raise UsageError(f"the synthetic dataset is square; input_size {list(size)} is not")
        return synthetic_splits(seed=cfg.synthetic_seed, size=size[0])
    data = load_manifest(cfg.manifest, size=tuple(size), standardize=cfg.standardize)
    plan = _load_split(cfg.split) if cfg.split else split_dataset(data, cfg.n_val, cfg.n_test, cfg.seed)
    plan.validate(len(data))
    return data.subset(plan.train), data.subset(plan.val), data.subset(plan.test)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    """Write the bundled synthetic benchmark as a PGM manifest plus its split plan."""
    out = _out_dir(args)
    n = args.n_train + args.n_val + args.n_test
    full = make_blob_dataset(n, size=args.size, seed=args.seed)
    write_manifest(full, out)
    plan = split_dataset(full, n_val=args.n_val, n_test=args.n_test, seed=args.seed)
    _write(out / "split.json", plan.to_json())
    print(json.dumps({"manifest": str(out / "manifest.csv"), "samples": n, "sizes": plan.sizes()}))
    return 0


def cmd_split(args) -> int:
    cfg = _resolve_config(args)
    if cfg.manifest is None:
        raise UsageError("split needs --manifest")
    data = load_manifest(cfg.manifest, standardize=cfg.standardize, size=tuple(cfg.input_size))
    plan = split_dataset(data, n_val=cfg.n_val, n_test=cfg.n_test, seed=cfg.seed, stratify=args.stratify)
    out = _out_dir(args)
    _write(out / "split.json", plan.to_json())
    train_n, val_n, test_n = plan.sizes()
    print(json.dumps({"train": train_n, "val": val_n, "test": test_n, "seed": cfg.seed}))
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    model = cfg.build_model()
    config = cfg.train_config()
    train_set, val_set, _ = _datasets(cfg, cfg.input_size)
    _write(out / "config.json", json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")

    def stream(entry):
        sys.stdout.write(entry.to_json() + "\n")
        sys.stdout.flush()

    ckpt, record = train(model, train_set, val_set, config, on_epoch=stream)
    _write(out / "train_record.jsonl", record.to_jsonl())
    save_checkpoint(ckpt, out / "best.ckpt")
    return 0


def _model_name(ckpt) -> str:
    kinds = ckpt.config.get("concat_order") or [b["kind"] for b in ckpt.config["backbones"]]
    return "fusion" if len(kinds) > 1 else kinds[0]


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    if args.checkpoint is None:
        raise UsageError("eval needs --checkpoint")
    ckpt = read_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    size = list(model.input_size)
    train_set, val_set, test_set = _datasets(cfg, size)
    dataset = {"train": train_set, "val": val_set, "test": test_set}[args.section]
    cm, report, scores = evaluate(model, dataset)
    name = args.name or _model_name(ckpt)
    out = _out_dir(args)
    _write(out / "metrics.csv", report.to_csv(name))
    _write(out / "metrics.json", report.to_json(name))
    _write(out / "roc.csv", roc_curve(scores, dataset.labels).to_csv())
    print(report.to_csv(name), end="")
    print(json.dumps({"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn}))
    return 0


def _read_rows(paths) -> List[list]:
    rows = []
    for path in paths:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read metrics file {path}: {exc.strerror or exc}") from None
        table = list(csv.reader(io.StringIO(text)))
        if not table or table[0] != CSV_HEADER:
            raise UsageError(f"{path}: header {table[0] if table else None} does not match {CSV_HEADER}")
        for i, row in enumerate(table[1:], start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise UsageError(f"{path}, row {i}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            rows.append(row)
    if not rows:
        raise UsageError("no metric rows to report")
    return rows


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def cmd_report(args) -> int:
    rows = _read_rows(args.rows)
    out = _out_dir(args)
    _write(out / "comparison.csv", _csv([CSV_HEADER] + rows))
    models = [r[0] for r in rows]
    axes = CSV_HEADER[1:]
    radar = [["axis"] + models] + [[axis] + [r[j] for r in rows] for j, axis in enumerate(axes, start=1)]
    _write(out / "radar.csv", _csv(radar))
    for j, axis in enumerate(axes, start=1):
        _write(out / f"bar_{axis.lower().replace('-', '_')}.csv", _csv([["Model", axis]] + [[r[0], r[j]] for r in rows]))
    print(_csv([CSV_HEADER] + rows), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    def show(res):
        status = "ok" if res["passed"] else "FAIL"
        print(f"{res['name']:<22} {res['max_rel_error']:.3e}  (tol {res['tolerance']:.0e})  {status}", flush=True)

    results = run_suite(seeds=range(args.seeds), report=show)
    failed = [r["name"] for r in results if not r["passed"]]
    if failed:
        raise TrainingError(f"gradient check failed for: {', '.join(failed)}")
    print(f"all {len(results)} gradient checks passed")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusenet", description="Parallel-backbone fusion classifier for grayscale scans.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, data=True, training=False):
        p.add_argument("--config", help="JSON RunConfig; flags override its fields")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        if data:
            p.add_argument("--manifest", help="CSV with header path,label (default: bundled synthetic set)")
            p.add_argument("--split", help="split plan JSON from `fusenet split`")
            p.add_argument("--seed", type=int)
        if training:
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--classes", type=int)
            p.add_argument("--feature-dim", type=int)

    p = sub.add_parser("synth", help="write the synthetic blob benchmark as PGM files")
    p.add_argument("--out", default="out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--n-test", type=int, default=100)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="seeded train/val/test split of a manifest")
    common(p)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--stratify", action="store_true")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train and keep the best-validation checkpoint")
    common(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics, JSON report and ROC points for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint written by `fusenet train`")
    p.add_argument("--section", choices=("train", "val", "test"), default="test")
    p.add_argument("--name", help="model name in the report row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge metric rows into comparison and chart CSVs")
    p.add_argument("rows", nargs="+", help="metrics.csv files")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and a small model")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except FusenetError as exc:
        print(f"fusenet: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
