"""Staged experiment pipeline: split -> pretrain -> train-head -> continual -> eval.

Every stage writes its artifacts plus ``stages/<name>.json`` into the run
directory, so later stages (or a resumed run) can pick up from there.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .contrastive import build_model, encode_dataset, load_model, pretrain, save_model
from .continual import (AnchorState, build_replay, compute_fisher, continual_train, load_replay,
                        save_anchor, save_replay)
from .data import Dataset, NormKind, SchemaHint, load_csv, normalize, standardize, subsample, take
from .oodsplit import load_split, read_manifest, save_split, split_dataset, write_manifest
from .predictor import Head, evaluate, load_head, save_head, train_head, train_mlp
from .report import REPORT_NAME, emit_report, new_report

log = logging.getLogger(__name__)

STAGES = ("split", "pretrain", "train-head", "continual", "eval")


class StageError(RuntimeError):
    pass


def stage_seed(seed: int, stage: str) -> int:
    """Per-stage seed derived from the global seed and the stage position."""
    return int(np.random.SeedSequence([seed, STAGES.index(stage)]).generate_state(1)[0])


def prepare_data(cfg: RunConfig) -> Dataset:
    d = cfg.data
    ds = load_csv(d.path, SchemaHint(d.target, d.task, dict(d.kinds), list(d.drop)))
    if d.max_rows:
        ds = subsample(ds, d.max_rows, cfg.seed)
    if d.standardize:
        ds = standardize(ds)
    if d.norm:
        ds = normalize(ds, NormKind(d.norm))
    return ds


class Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.stage_dir = self.out / "stages"
        self._ds: Dataset | None = None

    @property
    def ds(self) -> Dataset:
        if self._ds is None:
            self._ds = prepare_data(self.cfg)
        return self._ds

    def path(self, name: str) -> Path:
        return self.out / name

    # -- stage bookkeeping --------------------------------------------------

    def record_path(self, stage: str) -> Path:
        return self.stage_dir / f"{stage}.json"

    def load_record(self, stage: str) -> dict | None:
        p = self.record_path(stage)
        if not p.is_file():
            return None
        rec = json.loads(p.read_text())
        return rec if rec.get("config_digest") == self.cfg.digest() else None

    def require(self, stage: str) -> dict:
        rec = self.load_record(stage)
        if rec is None:
            raise StageError(f"stage {stage!r} has not completed in {self.out} for this config; "
                             f"run it first (or use run-all)")
        return rec

    def invalidate_after(self, stage: str) -> None:
        """Drop records of later stages; they were built on the old artifacts."""
        for later in STAGES[STAGES.index(stage) + 1:]:
            self.record_path(later).unlink(missing_ok=True)

    def run_stage(self, stage: str) -> dict:
        fn = getattr(self, "stage_" + stage.replace("-", "_"))
        t0 = time.perf_counter()
        result = fn(stage_seed(self.cfg.seed, stage))
        rec = {"stage": stage, "config_digest": self.cfg.digest(),
               "seconds": time.perf_counter() - t0, "result": result}
        self.stage_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.record_path(stage), json.dumps(rec, indent=1, sort_keys=True))
        return rec

    # -- stages ---------------------------------------------------------------

    def stage_split(self, seed: int) -> dict:
        det = replace(self.cfg.detector, proxy=replace(self.cfg.detector.proxy, seed=seed))
        split = split_dataset(self.ds, det)
        rng = np.random.default_rng(seed + 1)
        order = rng.permutation(split.in_indices)
        n_hold = max(1, int(round(self.cfg.data.holdout_fraction * len(order))))
        holdout, train = np.sort(order[:n_hold]), np.sort(order[n_hold:])
        save_split(self.path("split.manifest"), split)
        write_manifest(self.path("holdout.manifest"), {"kind": "holdout"},
                       {"in_train": train, "in_holdout": holdout})
        np.save(self.path("split_scores.npy"), split.scores)
        return {"detector": split.detector, "threshold": split.threshold, "n_in": split.n_in,
                "n_ood": split.n_ood, "n_in_train": len(train), "n_in_holdout": len(holdout)}

    def _indices(self):
        split = load_split(self.path("split.manifest"))
        _, sec = read_manifest(self.path("holdout.manifest"))
        return sec["in_train"], sec["in_holdout"], split.ood_indices

    def stage_pretrain(self, seed: int) -> dict:
        self.require("split")
        train, _, _ = self._indices()
        c = self.cfg.contrastive
        model = build_model(self.ds.d, hidden=c.hidden, latent=c.latent, projection=c.projection,
                            temperature=c.temperature, reconstruction=c.reconstruction, seed=seed)
        model_a, trace = pretrain(model, take(self.ds, train), replace(c.train, seed=seed + 1))
        save_model(self.path("model_a.npz"), model_a)
        return {"loss_trace": trace}

    def stage_train_head(self, seed: int) -> dict:
        self.require("pretrain")
        train, _, _ = self._indices()
        model_a = load_model(self.path("model_a.npz"))
        part = take(self.ds, train)
        head = train_head(encode_dataset(model_a, part), part.target, self.ds.task,
                          replace(self.cfg.predictor.head, seed=seed))
        save_head(self.path("head_a.npz"), head)
        return {"n_train": part.n}

    def stage_continual(self, seed: int) -> dict:
        self.require("train-head")
        train, _, ood = self._indices()
        c = self.cfg.continual
        model_a = load_model(self.path("model_a.npz"))
        replay = build_replay(train, ood, c.s_in_size, c.s_ood_size, seed=seed)
        fisher = compute_fisher(model_a, take(self.ds, replay.s_in), replace(c.fisher, seed=seed + 1))
        anchor = AnchorState.from_model(model_a, fisher, c.lam, c.gamma, c.floor)
        model_b, trace = continual_train(model_a, anchor, replay, self.ds, replace(c.train, seed=seed + 2))
        save_model(self.path("model_b.npz"), model_b)
        save_anchor(self.path("anchor.npz"), anchor)
        save_replay(self.path("replay.manifest"), replay)
        if self.cfg.predictor.refit_after_continual:
            part = take(self.ds, replay.s_in)
            head_b = train_head(encode_dataset(model_b, part), part.target, self.ds.task,
                                replace(self.cfg.predictor.head, seed=seed + 3))
        else:
            head_b = load_head(self.path("head_a.npz"))
        save_head(self.path("head_b.npz"), head_b)
        return {"loss_trace": trace, "fisher": fisher.summary(), "s_in": len(replay.s_in),
                "s_ood": len(replay.s_ood), "head_refit": self.cfg.predictor.refit_after_continual}

    def stage_eval(self, seed: int) -> dict:
        self.require("continual")
        train, holdout, ood = self._indices()
        ds = self.ds
        results = []
        for tag, model_file, head_file in (("M^a", "model_a.npz", "head_a.npz"),
                                           ("M^b", "model_b.npz", "head_b.npz")):
            model, head = load_model(self.path(model_file)), load_head(self.path(head_file))
            for split, idx in (("in", holdout), ("ood", ood)):
                part = take(ds, idx)
                results.append(evaluate(head, encode_dataset(model, part), part.target, split, tag))
        b = self.cfg.baseline
        base = train_mlp(ds.features[train], ds.target[train], ds.task, b.hidden,
                         replace(b.train, seed=seed))
        for split, idx in (("in", holdout), ("ood", ood)):
            results.append(evaluate(base, ds.features[idx], ds.target[idx], split, "baseline"))
        return {"evals": [asdict(r) for r in results]}


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_pipeline(cfg: RunConfig, *, stages: tuple[str, ...] = STAGES, resume: bool = False,
                 emit: bool = True) -> dict:
    """Run ``stages`` in order and return the run report.

    With ``resume`` a stage whose record exists for the same config is
    loaded instead of recomputed.  Completed stages outside ``stages`` are
    folded into the report as well, so single-stage invocations still yield
    a full picture.  On failure the partial report is written and the
    exception re-raised.
    """
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise StageError(f"unknown stage(s) {unknown}; expected one of {list(STAGES)}")
    run = Run(cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    report = new_report(cfg, STAGES)
    try:
        report["dataset"] = _dataset_info(run.ds, cfg)
        for stage in STAGES:
            rec = run.load_record(stage) if (resume or stage not in stages) else None
            if rec is None and stage in stages:
                log.info("running stage %s", stage)
                run.invalidate_after(stage)
                rec = run.run_stage(stage)
            elif rec is not None and stage in stages:
                log.info("resuming: stage %s already complete", stage)
            if rec is not None:
                _merge(report, rec)
    except Exception as exc:
        failed = next((s for s in stages if report["stages"][s]["status"] != "completed"), None)
        report["failed_stage"] = failed
        report["error"] = f"{type(exc).__name__}: {exc}"
        if failed:
            report["stages"][failed]["status"] = "failed"
        if emit:
            emit_report(report, run.out, scores_path=run.path("split_scores.npy"))
        raise
    done = all(report["stages"][s]["status"] == "completed" for s in STAGES)
    report["status"] = "complete" if done else "partial"
    if emit:
        emit_report(report, run.out, scores_path=run.path("split_scores.npy"))
    return report


def _dataset_info(ds: Dataset, cfg: RunConfig) -> dict:
    return {"path": cfg.data.path, "n": ds.n, "d": ds.d, "task": ds.task.kind,
            "n_classes": ds.task.n_classes, "fingerprint": ds.fingerprint()}


def _merge(report: dict, rec: dict) -> None:
    stage, result = rec["stage"], rec["result"]
    report["stages"][stage] = {"status": "completed", "seconds": rec["seconds"]}
    if stage == "split":
        report["split"] = result
    elif stage == "pretrain":
        report["pretrain"] = result
    elif stage == "continual":
        report["continual"] = result
    elif stage == "eval":
        report["evals"] = result["evals"]


def rerender(out: str | Path) -> dict:
    """Re-emit summary, table and figures from an existing report.json."""
    from .report import parse_report
    out = Path(out)
    report = parse_report(out / REPORT_NAME)
    emit_report(report, out, scores_path=out / "split_scores.npy")
    return report
