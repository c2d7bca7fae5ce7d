"""Accuracy reports, dark-condition evaluation and the pretrain -> finetune transfer grid."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig
from .datasets import ActivityClip, darken
from .encoder import MaskedEncoder
from .errors import ArgumentError, ConfigurationError, ProtocolViolation
from .pipeline import (PretrainedModel, build_pretrained, dataset_id, finetune_head, new_encoder,
                       open_dataset, test_clips)
from .temporal import TemporalHead, clip_features, clip_labels, predict

log = logging.getLogger(__name__)

CONDITIONS = ("normal", "dark")


@dataclass
class EvalReport:
    task: str
    condition: str
    correct: int
    total: int
    per_class: dict[int, float]  # true positive rate per class
    num_samples: dict[int, int]
    seeds: tuple[int, ...] = ()
    seed_accuracies: tuple[float, ...] = ()
    gamma: float | None = None
    modalities: tuple[str, ...] = ("wifi", "vision")
    encoder_init: str = "pretrained"  # or "random"
    pretrain_id: str = ""
    finetune_id: str = ""

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.seed_accuracies)) if self.seed_accuracies else self.accuracy

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accuracy"] = self.accuracy
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        d["num_samples"] = {str(k): v for k, v in self.num_samples.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = {k: v for k, v in d.items() if k != "accuracy"}
        d["per_class"] = {int(k): float(v) for k, v in d["per_class"].items()}
        d["num_samples"] = {int(k): int(v) for k, v in d["num_samples"].items()}
        for key in ("seeds", "seed_accuracies", "modalities"):
            d[key] = tuple(d.get(key, ()))
        return cls(**d)

    def label(self) -> str:
        mods = "+".join(self.modalities)
        cond = self.condition if self.condition == "normal" else f"dark(g={self.gamma:g})"
        return f"{self.pretrain_id}->{self.finetune_id} {self.encoder_init} {mods} {cond}"


def _report(task: str, condition: str, y: torch.Tensor, pred: torch.Tensor, **kw) -> EvalReport:
    per_class, counts = {}, {}
    for k in sorted(set(y.tolist())):
        sel = y == k
        counts[k] = int(sel.sum())
        per_class[k] = float((pred[sel] == k).sum()) / counts[k]
    return EvalReport(task, condition, int((pred == y).sum()), len(y), per_class, counts, **kw)


def evaluate(encoder: MaskedEncoder, head: TemporalHead, clips: Sequence[ActivityClip], condition: str = "normal",
             gamma: float = 3.0, *, task: str = "activity", num_subjects: int | None = None, csi_transform=None,
             modalities: Sequence[str] = ("wifi", "vision"), finetune_ids: Sequence[str] = (),
             seed: int | None = None, **report_fields) -> EvalReport:
    """Overall and per-class accuracy of ``head`` on held-out clips.

    Darkening touches only the images. Raises ProtocolViolation if any test clip id
    was also used for finetuning.
    """
    if condition not in CONDITIONS:
        raise ArgumentError(f"condition must be one of {CONDITIONS}, got {condition!r}")
    if not clips:
        raise ConfigurationError("no test clips to evaluate")
    overlap = sorted({c.clip_id for c in clips} & set(finetune_ids))
    if overlap:
        raise ProtocolViolation(f"{len(overlap)} test clips were used for finetuning, e.g. {overlap[:3]}")
    image_transform = (lambda x: darken(x, gamma)) if condition == "dark" else None
    features = clip_features(clips, encoder, csi_transform, image_transform, modalities)
    y = clip_labels(clips, task, num_subjects)
    pred = predict(features, head)
    return _report(task, condition, y, pred, gamma=gamma if condition == "dark" else None,
                   modalities=tuple(modalities), seeds=() if seed is None else (seed,), **report_fields)


def aggregate(reports: Sequence[EvalReport]) -> EvalReport:
    """Pool per-seed reports of one protocol cell; counts add up, seeds are kept."""
    if not reports:
        raise ArgumentError("nothing to aggregate")
    first = reports[0]
    per_class_hits: dict[int, float] = {}
    counts: dict[int, int] = {}
    for r in reports:
        for k, n in r.num_samples.items():
            counts[k] = counts.get(k, 0) + n
            per_class_hits[k] = per_class_hits.get(k, 0.0) + round(r.per_class[k] * n)
    return EvalReport(
        first.task, first.condition, sum(r.correct for r in reports), sum(r.total for r in reports),
        {k: per_class_hits[k] / counts[k] for k in sorted(counts)}, dict(sorted(counts.items())),
        tuple(s for r in reports for s in r.seeds), tuple(r.accuracy for r in reports), first.gamma,
        first.modalities, first.encoder_init, first.pretrain_id, first.finetune_id,
    )


def render_table(reports: Sequence[EvalReport], class_names: Sequence[str] | None = None) -> str:
    """Fixed-width table: one row per report, one column per class, then the average."""
    if not reports:
        return ""
    classes = sorted({k for r in reports for k in r.per_class})
    names = list(class_names) if class_names else [f"c{k}" for k in classes]
    label_w = max(len(r.label()) for r in reports)
    head = f"{'run':<{label_w}} " + " ".join(f"{n:>6}" for n in names) + f" {'avg':>6} {'seeds':>8}"
    lines = [head, "-" * len(head)]
    for r in reports:
        cells = " ".join(f"{100 * r.per_class[k]:6.2f}" if k in r.per_class else f"{'-':>6}" for k in classes)
        seeds = ",".join(str(s) for s in r.seeds)
        lines.append(f"{r.label():<{label_w}} {cells} {100 * r.mean_accuracy:6.2f} {seeds:>8}")
    return "\n".join(lines)


def write_reports(path, reports: Sequence[EvalReport]) -> None:
    """One JSON record per line."""
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_reports(path) -> list[EvalReport]:
    return [EvalReport.from_dict(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# protocol


@dataclass
class ProtocolSpec:
    """One or more grid cells (pretrain dataset x finetune dataset), each run under every seed."""

    pretrain: Sequence[str]
    finetune: Sequence[str]
    config: RunConfig = field(default_factory=RunConfig)
    task: str = "activity"
    conditions: Sequence[str] = ("normal",)
    gamma: float = 3.0
    seeds: Sequence[int] = (1, 2, 3)
    modalities: Sequence[str] = ("wifi", "vision")
    encoder: str = "pretrained"  # "random": same init, pretraining skipped

    def cells(self) -> list[tuple[str, str]]:
        return [(p, f) for p in self.pretrain for f in self.finetune]


def run_protocol(spec: ProtocolSpec, cache: dict | None = None) -> list[EvalReport]:
    """split -> tokenizers -> masked pretraining -> budgeted finetuning -> evaluate, per cell and seed.

    Returns one pooled report per (cell, condition). ``cache`` maps
    (dataset path, seed) to a PretrainedModel so several protocols can share pretraining.
    """
    if spec.encoder not in ("pretrained", "random"):
        raise ArgumentError(f"encoder must be 'pretrained' or 'random', got {spec.encoder!r}")
    if not spec.seeds:
        raise ConfigurationError("protocol needs at least one seed")
    bad = [c for c in spec.conditions if c not in CONDITIONS]
    if bad:
        raise ArgumentError(f"unknown conditions {bad}")
    cache = {} if cache is None else cache
    datasets = {p: open_dataset(p) for p in {*spec.pretrain, *spec.finetune}}
    cfg = spec.config
    out = []
    for pre_path, ft_path in spec.cells():
        pre_ds, ft_ds = datasets[pre_path], datasets[ft_path]
        per_condition: dict[str, list[EvalReport]] = {c: [] for c in spec.conditions}
        for seed in spec.seeds:
            key = (str(Path(pre_path).resolve()), seed)
            if key not in cache:
                log.info("pretraining on %s with seed %d", pre_path, seed)
                cache[key] = build_pretrained(pre_ds, cfg, seed)
            model: PretrainedModel = cache[key]
            encoder = model.encoder if spec.encoder == "pretrained" else new_encoder(model.geometry, cfg, seed)
            head, selection, _ = finetune_head(ft_ds, model, cfg, seed, task=spec.task, encoder=encoder,
                                               modalities=spec.modalities)
            clips = test_clips(ft_ds, cfg)
            for condition in spec.conditions:
                per_condition[condition].append(evaluate(
                    encoder, head, clips, condition, spec.gamma, task=spec.task,
                    num_subjects=ft_ds.manifest.num_subjects, csi_transform=model.normalizer,
                    modalities=spec.modalities, finetune_ids=[c.clip_id for c in selection.clips], seed=seed,
                    encoder_init=spec.encoder, pretrain_id=dataset_id(pre_ds), finetune_id=dataset_id(ft_ds)))
        for condition in spec.conditions:
            report = aggregate(per_condition[condition])
            log.info("%s: %.4f (seeds %s)", report.label(), report.mean_accuracy, report.seed_accuracies)
            out.append(report)
    return out


