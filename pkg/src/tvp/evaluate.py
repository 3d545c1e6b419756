"""Validation-set evaluation: oracle accuracy, PSNR fidelity, report files.

Parallelizes over validation items with per-item derived seeds, so results
are independent of worker count; each worker carries its own model clone
because layer instances cache activations during a forward pass.
"""

from __future__ import annotations

import csv
import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import report as report_mod
from .config import RunConfig
from .data import load_manifest, load_video, oracle_eval, parse_instruction
from .model import VideoPredictionModel

ABLATIONS = ("none", "no_mc", "no_de", "no_me", "no_llava",
             "no_adapter", "no_sa", "no_sta", "no_lta", "no_ta")


def worker_count() -> int:
    env = os.environ.get("AID_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 2.0) -> float:
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


@dataclass
class EvalItem:
    id: str
    instruction: str
    follows: bool
    reason: str
    dx: float
    dy: float
    cond_psnr: float
    pred_psnr: float


@dataclass
class MetricsReport:
    instruction_accuracy: float
    cond_psnr: float
    pred_psnr: float
    trainable_param_fraction: float
    ablation: str
    seed: int
    steps: int
    s_v: float
    s_t: float
    num_items: int
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)


def _clone_model(model: VideoPredictionModel) -> VideoPredictionModel:
    clone = VideoPredictionModel(model.config, phase=model.phase)
    clone.store.load_values(model.store, strict=True)
    for p, q in zip(model.store, clone.store):
        q.frozen = p.frozen
    return clone


def apply_ablation(config: RunConfig, ablation: str) -> RunConfig:
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
    if ablation == "none":
        return config
    return replace(config, **{ablation: True}).normalized()


def evaluate_model(model: VideoPredictionModel, corpus_dir: str | Path,
                   ablation: str = "none", seed: int = 0, steps: int | None = None,
                   s_v: float | None = None, s_t: float | None = None,
                   subset: int | None = None, threads: int | None = None,
                   split: str = "val"):
    """Predict every item of the split and judge it with the motion oracle."""
    corpus_dir = Path(corpus_dir)
    manifest = load_manifest(corpus_dir / "manifest.json")
    items = manifest.split_items(split)
    if subset:
        items = items[:subset]
    if not items:
        raise ValueError(f"{split} split is empty")
    k = manifest.k
    eval_config = apply_ablation(model.config, ablation)
    scales = eval_config.guidance(s_v, s_t)
    n_workers = threads if threads is not None else worker_count()
    n_workers = max(1, min(n_workers, len(items)))

    def run_chunk(worker_model, chunk):
        worker_model.config = eval_config
        out = []
        for item in chunk:
            gt = load_video(corpus_dir / item.path)
            rng = np.random.default_rng([seed, zlib.crc32(item.id.encode())])
            pred = worker_model.predict(gt[:k], item.instruction, rng,
                                        scales=scales, steps=steps)
            verdict = oracle_eval(pred, parse_instruction(item.instruction))
            out.append(EvalItem(
                id=item.id,
                instruction=item.instruction,
                follows=verdict.follows,
                reason=verdict.reason,
                dx=verdict.displacement[0],
                dy=verdict.displacement[1],
                cond_psnr=psnr(pred[:k], gt[:k]),
                pred_psnr=psnr(pred[k:], gt[k:]),
            ))
        return out

    chunks = [items[i::n_workers] for i in range(n_workers)]
    if n_workers == 1:
        nested = [run_chunk(_clone_model(model), chunks[0])]
    else:
        models = [_clone_model(model) for _ in range(n_workers)]
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            nested = list(pool.map(run_chunk, models, chunks))
    by_id = {r.id: r for chunk in nested for r in chunk}
    results = [by_id[item.id] for item in items]

    finite = [r.pred_psnr for r in results if np.isfinite(r.pred_psnr)]
    rep = MetricsReport(
        instruction_accuracy=float(np.mean([r.follows for r in results])),
        cond_psnr=float(np.mean([r.cond_psnr for r in results])),
        pred_psnr=float(np.mean(finite)) if finite else float("inf"),
        trainable_param_fraction=model.store.trainable_fraction(),
        ablation=ablation,
        seed=seed,
        steps=steps or model.config.steps,
        s_v=scales.s_v,
        s_t=scales.s_t,
        num_items=len(results),
        config=eval_config.to_dict(),
    )
    return rep, results


def write_report(rep: MetricsReport, results: list[EvalItem], out_dir: str | Path) -> Path:
    """metrics.json plus a per-item CSV and a summary figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "metrics.json"
    json_path.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(asdict(results[0])))
        writer.writeheader()
        for r in results:
            writer.writerow(asdict(r))
    report_mod.eval_summary(rep.to_dict(), [asdict(r) for r in results],
                            out_dir / "eval_summary.png")
    return json_path
