"""Command-line entry points: synth, pretrain, finetune, evaluate, analyze, sweep.

Experiment configs are flat ``key = value`` text files. Values are parsed as
JSON when possible (numbers, booleans, lists) and kept as strings otherwise.
Relative paths resolve against the config file's directory. Recognised keys:

    task                    classification | segmentation | depth
    seed                    integer seed for splits, init, augmentation, masking
    out                     output root (the SSLBENCH_OUT variable takes precedence)
    data.path               dataset directory (or manifest.json) to train on
    data.label              domain-set | general-set, provenance of pretraining data
    data.split              [train, val, test] ratios when the manifest has no split tags
    encoder.arch            conv | vit, other encoder.* keys go to the constructor
    pretraining             none | supervised-proxy | path to an encoder checkpoint
    proxy.data              classification dataset used by supervised-proxy
    proxy.epochs            epochs of the supervised-proxy stage
    train.*                 batch_size, lr, epochs, patience, lr_floor, weight_decay
    ssl.*                   algorithm (mocov3 | barlow | mae | supervised), tau, lambda,
                            gamma, momentum, workers, per_worker_batch
    augment.*               any AugmentConfig field
    loss.grad_weight        weight of the gradient-matching depth term
    loss.grad_scales        number of scales of the gradient-matching term

Exit status is 0 on success, 2 on validation errors and 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import torch

from . import TASK_KINDS
from . import augment as aug
from . import metrics as M
from .analysis import MetricReport, PipelineTag, write_analysis
from .data_ingest import (
    DataError,
    SynthSpec,
    _read_png,
    attach_splits,
    class_weights,
    dataset_hash,
    generate_synthetic_dataset,
    load_manifest,
    load_target,
    split_dataset,
    splits_from_tags,
    write_manifest,
)
from .encoders import ViTEncoder, build_encoder, load_checkpoint, save_checkpoint
from .ssl_losses import SSLConfig
from .task_heads import build_task_model, ssi_align
from .trainer import TrainConfig, evaluate, pretrain, supervised_proxy, train

log = logging.getLogger("sslbench")

FINETUNE_TASKS = ("classification", "segmentation", "depth")
TOP_KEYS = {"task", "seed", "out", "pretraining"}
PREFIXES = {"data", "encoder", "proxy", "train", "ssl", "augment", "loss"}
DATA_KEYS = {"path", "label", "split"}
PROXY_KEYS = {"data", "epochs"}
TRAIN_KEYS = {"batch_size", "lr", "epochs", "patience", "lr_floor", "weight_decay"}
LOSS_KEYS = {"grad_weight", "grad_scales"}
SSL_ALIASES = {"lambda": "lam"}


class ConfigError(ValueError):
    pass


class RunExists(ValueError):
    pass


# --------------------------------------------------------------------------
# config


def parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config(text: str) -> dict[str, Any]:
    cfg: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in cfg:
            raise ConfigError(f"config line {n}: duplicate key {key!r}")
        _check_key(key, n)
        cfg[key] = parse_value(value)
    return cfg


def _check_key(key: str, n: int) -> None:
    if "." not in key:
        if key not in TOP_KEYS:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        return
    prefix, sub = key.split(".", 1)
    allowed = {"data": DATA_KEYS, "proxy": PROXY_KEYS, "train": TRAIN_KEYS, "loss": LOSS_KEYS}
    if prefix not in PREFIXES or (prefix in allowed and sub not in allowed[prefix]):
        raise ConfigError(f"config line {n}: unknown key {key!r}")
    if prefix == "ssl" and sub not in {f.name for f in fields(SSLConfig)} | set(SSL_ALIASES):
        raise ConfigError(f"config line {n}: unknown key {key!r}")
    if prefix == "augment" and sub not in aug.AugmentConfig.__dataclass_fields__:
        raise ConfigError(f"config line {n}: unknown key {key!r}")


def dump_config(cfg: dict[str, Any]) -> str:
    return "".join(f"{k} = {json.dumps(v) if not isinstance(v, str) else v}\n" for k, v in sorted(cfg.items()))


def config_hash(cfg: dict[str, Any]) -> str:
    """Content hash, independent of key order and of the output location."""
    ident = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Experiment:
    cfg: dict[str, Any]
    base: Path
    hash: str

    @classmethod
    def load(cls, path: str | Path) -> "Experiment":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = parse_config(path.read_text())
        return cls(cfg, path.parent.resolve(), config_hash(cfg))

    def get(self, key: str, default: Any = None) -> Any:
        return self.cfg.get(key, default)

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.cfg.items() if k.startswith(p)}

    def path(self, key: str, required: bool = True) -> Path | None:
        v = self.cfg.get(key)
        if v is None:
            if required:
                raise ConfigError(f"missing required key {key!r}")
            return None
        p = Path(v) if Path(v).is_absolute() else self.base / v
        if not p.exists():
            raise ConfigError(f"{key}: path does not exist: {p}")
        return p

    @property
    def seed(self) -> int:
        return int(self.get("seed", 0))

    def out_root(self) -> Path:
        env = os.environ.get("SSLBENCH_OUT")
        if env:
            return Path(env)
        out = self.get("out", "sslbench_out")
        return Path(out) if Path(out).is_absolute() else (self.base / out).resolve()

    def augment(self) -> aug.AugmentConfig:
        try:
            return aug.AugmentConfig.from_dict(self.section("augment"))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"augment: {e}") from e

    def encoder_cfg(self) -> dict[str, Any]:
        enc = self.section("encoder")
        arch = enc.get("arch")
        if arch not in ("conv", "vit"):
            raise ConfigError(f"encoder.arch must be conv or vit, got {arch!r}")
        if arch == "vit":
            enc.setdefault("img_size", self.augment().size)
        return enc

    def train_cfg(self, task: str) -> TrainConfig:
        tc = TrainConfig.desk_defaults(task)
        tc.seed = self.seed
        for k, v in self.section("train").items():
            setattr(tc, k, type(getattr(tc, k))(v))
        loss = self.section("loss")
        if "grad_weight" in loss:
            tc.grad_weight = float(loss["grad_weight"])
        if "grad_scales" in loss:
            tc.grad_scales = int(loss["grad_scales"])
        return tc

    def ssl_cfg(self) -> SSLConfig:
        kw = {SSL_ALIASES.get(k, k): v for k, v in self.section("ssl").items()}
        try:
            return SSLConfig(**kw)
        except TypeError as e:
            raise ConfigError(f"ssl: {e}") from e


def _manifest_path(p: Path) -> Path:
    return p / "manifest.json" if p.is_dir() else p


def _load_data(exp: Experiment, key: str = "data.path"):
    m = load_manifest(_manifest_path(exp.path(key)))
    return m, dataset_hash(m)


def _make_encoder(exp: Experiment) -> torch.nn.Module:
    try:
        return build_encoder(exp.encoder_cfg())
    except TypeError as e:
        raise ConfigError(f"encoder: {e}") from e


# --------------------------------------------------------------------------
# run store


class RunStore:
    """``<root>/runs/<kind>-<config hash>/``; reruns are refused unless forced."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.runs = self.root / "runs"
        self.archive = self.root / "archive"
        self.runs.mkdir(parents=True, exist_ok=True)

    @contextlib.contextmanager
    def locked(self) -> Iterator[None]:
        with open(self.root / ".lock", "a+") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def run_dir(self, kind: str, h: str) -> Path:
        return self.runs / f"{kind}-{h}"

    def begin(self, kind: str, h: str, force: bool = False) -> Path:
        d = self.run_dir(kind, h)
        with self.locked():
            if d.exists():
                if (d / "COMPLETE").exists() and not force:
                    raise RunExists(f"run already exists at {d} (use --force to rerun)")
                if (d / "COMPLETE").exists():
                    self.archive.mkdir(exist_ok=True)
                    k = sum(1 for p in self.archive.iterdir() if p.name.startswith(d.name))
                    shutil.move(str(d), str(self.archive / f"{d.name}-{k}"))
                else:
                    pid = (d / "RUNNING").read_text().strip() if (d / "RUNNING").exists() else ""
                    if pid.isdigit() and _alive(int(pid)) and int(pid) != os.getpid():
                        raise RunExists(f"run in progress at {d} (pid {pid})")
                    shutil.rmtree(d)
            d.mkdir(parents=True)
            (d / "RUNNING").write_text(str(os.getpid()))
        return d

    def complete(self, d: Path) -> None:
        with self.locked():
            (d / "RUNNING").unlink(missing_ok=True)
            (d / "COMPLETE").write_text("")

    def reports(self) -> list[tuple[Path, dict[str, Any]]]:
        out = []
        for p in sorted(self.runs.glob("*/report.json")):
            if (p.parent / "COMPLETE").exists():
                out.append((p, json.loads(p.read_text())))
        return out


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except OSError:
        return False
    return True


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_synth(task: str, n: int, seed: int, out: Path, style: str = "endo", size: int = 64, n_classes: int = 3) -> str:
    spec = SynthSpec(n=n, task=task, height=size, width=size, n_classes=n_classes, style=style)
    m = generate_synthetic_dataset(spec, seed)
    write_manifest(m, out)
    h = dataset_hash(m)
    log.info("wrote %d %s samples to %s (hash %s)", n, task, out, h)
    return h


def cmd_pretrain(config: str | Path, force: bool = False) -> Path:
    exp = Experiment.load(config)
    ssl = exp.ssl_cfg()
    manifest, dhash = _load_data(exp)
    label = exp.get("data.label", "domain-set")
    if label not in ("domain-set", "general-set"):
        raise ConfigError(f"data.label must be domain-set or general-set, got {label!r}")
    torch.manual_seed(exp.seed)
    encoder = _make_encoder(exp)
    if ssl.algorithm == "mae" and not isinstance(encoder, ViTEncoder):
        raise ConfigError("MAE requires token encoder")
    tc = exp.train_cfg("classification")
    acfg = exp.augment()
    store = RunStore(exp.out_root())
    d = store.begin("pretrain", exp.hash, force)
    (d / "config.txt").write_text(dump_config(exp.cfg))
    torch.manual_seed(tc.seed)
    if ssl.algorithm == "supervised":
        res = supervised_proxy(tc, encoder, manifest, acfg, dhash, d / "checkpoint.npz")
    else:
        res = pretrain(tc, ssl, encoder, manifest, acfg, dhash, d / "checkpoint.npz")
    # re-save with the data label so fine-tuning can tag the pipeline
    state, header = load_checkpoint(d / "checkpoint.npz")
    header.update(data_label=label, config_hash=exp.hash)
    header.pop("checkpoint_id", None)
    save_checkpoint(d / "checkpoint.npz", state, header)
    _write_json(d / "record.json", {"losses": res.losses, "header": header, "config_hash": exp.hash})
    store.complete(d)
    log.info("pretrain %s done: %s", ssl.algorithm, d)
    return d


def _resolve_pretraining(exp: Experiment, encoder, tc: TrainConfig, acfg, run_dir: Path) -> dict[str, Any]:
    """Initialise ``encoder`` per the ``pretraining`` key; returns provenance."""
    arch = exp.encoder_cfg()["arch"]
    choice = exp.get("pretraining", "none")
    if choice == "none":
        return {"mode": "random-init", "algorithm": "none", "data_label": "none", "tag": [arch, "none", "none"]}
    if choice == "supervised-proxy":
        proxy, phash = _load_data(exp, "proxy.data")
        ptc = TrainConfig.desk_defaults("classification")
        ptc.seed = tc.seed
        ptc.epochs = int(exp.get("proxy.epochs", ptc.epochs))
        res = supervised_proxy(ptc, encoder, proxy, acfg, phash, run_dir / "proxy.npz")
        return {
            "mode": "supervised-proxy",
            "algorithm": "supervised",
            "dataset_id": phash,
            "checkpoint_id": res.checkpoint_id,
            "tag": [arch, "general-set", "supervised"],
        }
    path = exp.path("pretraining")
    state, header = load_checkpoint(path)
    if header.get("encoder", {}).get("arch") not in (None, arch):
        raise ConfigError(f"checkpoint encoder {header['encoder'].get('arch')!r} does not match encoder.arch {arch!r}")
    try:
        encoder.load_state_dict(state)
    except RuntimeError as e:
        raise ConfigError(f"checkpoint does not fit the configured encoder: {e}") from e
    algo = header.get("algorithm", "unknown")
    algo = "supervised" if algo == "supervised-proxy" else algo
    return {
        "mode": "checkpoint",
        "algorithm": algo,
        "dataset_id": header.get("dataset_id"),
        "checkpoint_id": header.get("checkpoint_id"),
        "tag": [arch, header.get("data_label", "domain-set"), algo],
    }


def cmd_finetune(config: str | Path, force: bool = False) -> Path:
    exp = Experiment.load(config)
    task = exp.get("task")
    if task not in FINETUNE_TASKS:
        raise ConfigError(f"task must be one of {FINETUNE_TASKS}, got {task!r}")
    manifest, dhash = _load_data(exp)
    if manifest.task_kind != task:
        raise ConfigError(f"dataset holds {manifest.task_kind!r} targets, config task is {task!r}")
    tc = exp.train_cfg(task)
    acfg = exp.augment()
    splits = splits_from_tags(manifest)
    if splits is None:
        ratios = tuple(exp.get("data.split", (0.8, 0.1, 0.1)))
        splits = split_dataset(manifest, ratios, seed=exp.seed)
        attach_splits(manifest, splits)
    store = RunStore(exp.out_root())
    d = store.begin("finetune", exp.hash, force)
    (d / "config.txt").write_text(dump_config(exp.cfg))
    torch.manual_seed(tc.seed)
    encoder = _make_encoder(exp)
    prov = _resolve_pretraining(exp, encoder, tc, acfg, d)
    torch.manual_seed(tc.seed)
    n_classes = len(manifest.class_names) if task == "classification" else None
    model = build_task_model(encoder, task, n_classes)
    weights = class_weights(manifest) if task == "classification" else None
    rec, _ = train(tc, model, splits, manifest, task, acfg, weights, d / "checkpoint.npz", {"config_hash": exp.hash, "task": task})
    rec.config_hash = exp.hash
    result = evaluate(model, manifest, splits.test, task, acfg)
    if task == "depth" and tc.grad_weight > 0:
        # the gradient-matching term is this package's own formulation, not a reproduced one
        result["flags"].insert(0, f"loss: artifact gradient-matching term (multi-scale L1, weight {tc.grad_weight}, {tc.grad_scales} scales)")
    report = {
        "task": task,
        "metrics": result["metrics"],
        "flags": result["flags"],
        "provenance": {
            "config_hash": exp.hash,
            "dataset_hash": dhash,
            "checkpoint_id": rec.checkpoint_id,
            "best_epoch": rec.best_epoch,
            "pretraining": prov,
            "split_sizes": list(splits.sizes()),
        },
    }
    _write_json(d / "record.json", rec.to_json())
    _write_json(d / "report.json", report)
    store.complete(d)
    log.info("finetune %s done: %s %s", task, d, report["metrics"])
    return d


def _evaluate_line(task: str, obj: dict, manifest, by_id, base: Path, acfg):
    rid = obj.get("id")
    if rid not in by_id:
        raise DataError(f"unknown record id {rid!r}")
    rec = by_id[rid]
    if task == "classification":
        if "logits" in obj:
            return rec, int(np.argmax(np.asarray(obj["logits"], dtype=float)))
        return rec, int(obj["label"])
    if task == "detection":
        boxes, scores = obj["boxes"], obj["scores"]
        if len(boxes) != len(scores):
            raise DataError("boxes and scores differ in length")
        return rec, [M.ScoredBox(tuple(float(v) for v in b), float(s), rid) for b, s in zip(boxes, scores)]
    if task == "segmentation":
        return rec, _read_png(base / obj["mask_path"]).astype(np.float64) / 65535.0
    if task == "depth":
        raw = _read_png(base / obj["depth_path"]).astype(np.float64) / 65535.0
        align = obj.get("alignment") or {}
        return rec, (raw, align.get("scale"), align.get("shift"))
    raise DataError(f"unknown task {task!r}")


def cmd_evaluate(predictions: str | Path, manifest_path: str | Path, task: str, out: str | Path | None = None) -> dict[str, Any]:
    """Score a JSONL prediction file against a manifest.

    One line per image, keyed by ``id``: ``logits`` or ``label`` for
    classification; ``boxes`` and ``scores`` for detection; ``mask_path`` to a
    16-bit probability PNG for segmentation; ``depth_path`` to a 16-bit raw
    prediction PNG with an optional ``alignment`` object ``{scale, shift}`` for depth. Images without
    a line are not scored, except for detection where their boxes count as misses.
    """
    if task not in TASK_KINDS:
        raise ConfigError(f"task must be one of {TASK_KINDS}, got {task!r}")
    predictions = Path(predictions)
    manifest = load_manifest(_manifest_path(Path(manifest_path)))
    if manifest.task_kind != task:
        raise ConfigError(f"manifest holds {manifest.task_kind!r} targets, not {task!r}")
    by_id = {r.id: r for r in manifest.records}
    acfg = aug.AugmentConfig()
    items = []
    with open(predictions) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise DataError("expected a JSON object")
                items.append(_evaluate_line(task, obj, manifest, by_id, predictions.parent, acfg))
            except (json.JSONDecodeError, DataError, KeyError, TypeError, ValueError, OSError) as e:
                raise DataError(f"{predictions}: line {n}: malformed prediction ({type(e).__name__}: {e})") from e
    if not items:
        raise DataError(f"{predictions}: no predictions")
    flags: list[str] = []
    if task == "classification":
        true = [load_target(manifest, r)["label"] for r, _ in items]
        pred = [p for _, p in items]
        res: dict[str, Any] = M.classification_metrics(M.ConfusionCounts.from_labels(pred, true, len(manifest.class_names)))
    elif task == "detection":
        scored = {r.id for r, _ in items}
        gts = {
            r.id: load_target(manifest, r)["boxes"]
            for r in manifest.records
            if r.split in (None, "test") or r.id in scored
        }
        preds = [b for _, bs in items for b in bs]
        res = M.ap_range(preds, gts)
    elif task == "segmentation":
        res = M.segmentation_metrics([p for _, p in items], [load_target(manifest, r)["mask"] for r, _ in items])
        res.pop("per_image")
    else:
        pairs = []
        for r, (raw, scale, shift) in items:
            tgt = load_target(manifest, r)
            h, w = tgt["depth"].shape
            if scale is None or shift is None:
                if raw.shape[0] != raw.shape[1]:
                    raise DataError(f"{r.id}: unaligned depth predictions must be square network outputs")
                er = aug.eval_record((h, w), "depth", aug.AugmentConfig(size=raw.shape[0]))
                t_net = aug.apply_to_targets(er, tgt["depth"], "depth")
                l_net = aug.apply_to_targets(er, tgt["lens"].astype(np.uint8), "mask").astype(bool)
                sol = ssi_align(torch.from_numpy(raw)[None], torch.from_numpy(t_net)[None], torch.from_numpy(l_net)[None])
                scale, shift = float(sol.scale[0]), float(sol.shift[0])
                if bool(sol.degenerate[0]):
                    flags.append(f"{r.id}: degenerate alignment")
            pred_cm = M.depth_postprocess(raw, float(scale), float(shift), tgt["lens"], h, w)
            pairs.append(M.DepthEvalPair(pred_cm, tgt["depth"] * 10.0, tgt["lens"]))
        res = M.depth_metrics(pairs)
        res.pop("per_image")
        flags.extend(res.pop("flags"))
    report = {
        "task": task,
        "metrics": res,
        "flags": flags,
        "provenance": {"dataset_hash": dataset_hash(manifest), "n_predictions": len(items)},
    }
    if out is not None:
        _write_json(Path(out), report)
    return report


def load_reports(root: str | Path) -> list[MetricReport]:
    reports = []
    for path, r in RunStore(root).reports():
        tag = r.get("provenance", {}).get("pretraining", {}).get("tag")
        if tag is None:
            log.warning("skipping %s: no pipeline tag", path)
            continue
        reports.append(
            MetricReport(
                task=r["task"],
                metrics=r["metrics"],
                tag=PipelineTag(*tag),
                flags=tuple(r.get("flags", ())),
                provenance=r.get("provenance"),
            )
        )
    return reports


def cmd_analyze(store: str | Path, out: str | Path | None = None, plots: bool = True) -> dict[str, Path]:
    reports = load_reports(store)
    if not reports:
        raise DataError(f"no completed fine-tuning reports under {store}")
    out = Path(out) if out else Path(store) / "analysis"
    return write_analysis(reports, out, plots=plots)


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sslbench", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--task", required=True, choices=TASK_KINDS)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--style", choices=("endo", "general"), default="endo")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--n-classes", type=int, default=3)

    for name, helptext in (("pretrain", "self-supervised or proxy pretraining"), ("finetune", "fine-tune and test")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("config", type=Path)
        s.add_argument("--force", action="store_true", help="rerun and archive an existing run")

    s = sub.add_parser("evaluate", help="score a JSONL prediction file")
    s.add_argument("--predictions", type=Path, required=True)
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--task", required=True, choices=TASK_KINDS)
    s.add_argument("--out", type=Path)

    s = sub.add_parser("analyze", help="improvement tables and rankings over a run store")
    s.add_argument("store", type=Path)
    s.add_argument("--out", type=Path)
    s.add_argument("--no-plots", action="store_true")

    s = sub.add_parser("sweep", help="desk-scale sweep over all pipelines")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tasks", nargs="+", choices=FINETUNE_TASKS, default=list(FINETUNE_TASKS))
    s.add_argument("--pipelines", nargs="+", help="subset of pipeline labels, e.g. RN-HK-MC VT-NA-NA")
    s.add_argument("--n-images", type=int, default=74)
    s.add_argument("--pretrain-epochs", type=int, default=5)
    s.add_argument("--finetune-epochs", type=int, default=10)
    s.add_argument("--force", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.cmd == "synth":
            print(cmd_synth(args.task, args.n, args.seed, args.out, args.style, args.size, args.n_classes))
        elif args.cmd == "pretrain":
            print(cmd_pretrain(args.config, args.force))
        elif args.cmd == "finetune":
            d = cmd_finetune(args.config, args.force)
            print((d / "report.json").read_text(), end="")
        elif args.cmd == "evaluate":
            print(json.dumps(cmd_evaluate(args.predictions, args.manifest, args.task, args.out), indent=2, sort_keys=True))
        elif args.cmd == "analyze":
            for k, v in cmd_analyze(args.store, args.out, not args.no_plots).items():
                print(f"{k}\t{v}")
        elif args.cmd == "sweep":
            from .sweep import run_sweep

            res = run_sweep(args.out, seed=args.seed, tasks=args.tasks, pipelines=args.pipelines, n_images=args.n_images,
                            pretrain_epochs=args.pretrain_epochs, finetune_epochs=args.finetune_epochs, force=args.force)
            for k, v in res["analysis"].items():
                print(f"{k}\t{v}")
    except ValueError as e:
        print(f"sslbench: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level runtime failure
        print(f"sslbench: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
