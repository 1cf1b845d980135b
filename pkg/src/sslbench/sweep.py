"""Desk-scale sweep over every pretraining pipeline and fine-tuning task.

Layout under the sweep root::

    data/<name>/          synthetic datasets
    configs/*.txt         generated experiment configs (paths relative to configs/)
    runs/<kind>-<hash>/   run store entries
    analysis/             improvement tables, rankings and figures
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .cli import Experiment, RunStore, cmd_analyze, cmd_finetune, cmd_pretrain, cmd_synth, dump_config

log = logging.getLogger(__name__)

ARCH_LABEL = {"conv": "RN", "vit": "VT"}
DATA_LABEL = {"domain-set": "HK", "general-set": "IN", "none": "NA"}
ALGO_LABEL = {"mocov3": "MC", "barlow": "BT", "mae": "MA", "supervised": "SL", "none": "NA"}
SSL_BY_ARCH = {"conv": ("mocov3", "barlow"), "vit": ("mocov3", "mae")}
ENCODER = {
    "conv": {"encoder.arch": "conv"},
    "vit": {"encoder.arch": "vit", "encoder.window": 4},
}


@dataclass(frozen=True)
class Pipeline:
    arch: str
    data: str
    algorithm: str

    @property
    def label(self) -> str:
        return f"{ARCH_LABEL[self.arch]}-{DATA_LABEL[self.data]}-{ALGO_LABEL[self.algorithm]}"


def all_pipelines() -> list[Pipeline]:
    out = []
    for arch in ("conv", "vit"):
        for algo in SSL_BY_ARCH[arch]:
            for data in ("domain-set", "general-set"):
                out.append(Pipeline(arch, data, algo))
        out.append(Pipeline(arch, "general-set", "supervised"))
        out.append(Pipeline(arch, "none", "none"))
    return out


def _write_config(root: Path, name: str, cfg: dict[str, Any]) -> Path:
    p = root / "configs" / f"{name}.txt"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dump_config(dict(cfg, out="..")))
    return p


def _run(kind: str, cfg_path: Path, force: bool) -> Path:
    exp = Experiment.load(cfg_path)
    store = RunStore(exp.out_root())
    d = store.run_dir(kind, exp.hash)
    if (d / "COMPLETE").exists() and not force:
        log.info("reusing %s", d)
        return d
    fn = cmd_pretrain if kind == "pretrain" else cmd_finetune
    return fn(cfg_path, force=force)


def run_sweep(
    root: str | Path,
    seed: int = 0,
    tasks: Sequence[str] = ("classification", "segmentation", "depth"),
    pipelines: Sequence[str] | None = None,
    n_images: int = 74,
    n_pretrain: int = 64,
    pretrain_epochs: int = 5,
    finetune_epochs: int = 10,
    force: bool = False,
    plots: bool = True,
) -> dict[str, Any]:
    """Generate data, pretrain every encoder once, fine-tune each pipeline on each task, analyse."""
    root = Path(root)
    chosen = all_pipelines()
    if pipelines:
        known = {p.label for p in chosen}
        unknown = set(pipelines) - known
        if unknown:
            raise ValueError(f"unknown pipeline labels {sorted(unknown)}; choose from {sorted(known)}")
        chosen = [p for p in chosen if p.label in set(pipelines)]

    data = root / "data"
    sets = {"domain-set": ("domain", "classification", "endo", n_pretrain), "general-set": ("general", "classification", "general", n_pretrain)}
    for task in tasks:
        sets[task] = (task, task, "endo", n_images)
    for name, task, style, n in sets.values():
        if not (data / name / "manifest.json").exists() or force:
            cmd_synth(task, n, seed, data / name, style=style)

    pre_runs: dict[tuple[str, str, str], Path] = {}
    for p in chosen:
        if p.algorithm == "none":
            continue
        cfg = {
            "seed": seed,
            "data.path": f"../data/{sets[p.data][0]}",
            "data.label": p.data,
            "ssl.algorithm": p.algorithm,
            "ssl.workers": 2,
            "ssl.per_worker_batch": 8,
            "train.epochs": pretrain_epochs,
            "train.batch_size": 16,
            **ENCODER[p.arch],
        }
        path = _write_config(root, f"pretrain_{p.label}", cfg)
        pre_runs[(p.arch, p.data, p.algorithm)] = _run("pretrain", path, force)

    finetuned = []
    for task in tasks:
        for p in chosen:
            cfg = {
                "seed": seed,
                "task": task,
                "data.path": f"../data/{task}",
                "train.epochs": finetune_epochs,
                **ENCODER[p.arch],
            }
            if p.algorithm == "none":
                cfg["pretraining"] = "none"
            else:
                d = pre_runs[(p.arch, p.data, p.algorithm)]
                cfg["pretraining"] = f"../runs/{d.name}/checkpoint.npz"
            path = _write_config(root, f"finetune_{task}_{p.label}", cfg)
            finetuned.append(_run("finetune", path, force))

    paths = cmd_analyze(root, root / "analysis", plots=plots)
    return {"pretrain": pre_runs, "finetune": finetuned, "analysis": paths}
