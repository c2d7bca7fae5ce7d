"""The two phases wired end to end: tokenizers + masked pretraining, then budgeted finetuning.

Every helper takes a RunConfig and one global seed; component seeds are derived from it.
"""
from __future__ import annotations

import contextlib
import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .datasets import (BudgetSelection, CsiNormalizer, Dataset, FrameSet, load_dataset, segment_frame_set,
                       select_finetune_budget, split_pretrain_test)
from .encoder import (EncoderArch, MaskedEncoder, PretrainSchedule, PretrainTrace, load_encoder, pretrain,
                      save_encoder)
from .errors import CheckpointError, ConfigurationError
from .seeding import derive_seed, torch_generator
from .temporal import FinetuneSchedule, FinetuneTrace, TemporalHead, finetune
from .tokenizer import (PatchGeometry, Tokenizer, TokenizerSchedule, TokenizerTrace, load_tokenizer, patchify,
                        save_tokenizer, train_tokenizer)

log = logging.getLogger(__name__)

WIFI_TOKENIZER = "tokenizer_wifi.bin"
VISION_TOKENIZER = "tokenizer_vision.bin"
ENCODER_CKPT = "encoder.bin"
HEAD_CKPT = "head.bin"
LOSS_TRACE = "loss_trace.csv"
METRICS = "finetune_metrics.csv"
LOCK = "LOCK"


@dataclass
class PretrainedModel:
    geometry: PatchGeometry
    tokenizers: tuple[Tokenizer, Tokenizer]
    encoder: MaskedEncoder
    normalizer: CsiNormalizer
    dataset_id: str = ""
    seed: int = 0
    trace: PretrainTrace = field(default_factory=PretrainTrace)
    tokenizer_traces: tuple[TokenizerTrace, ...] = ()


def dataset_id(dataset: Dataset) -> str:
    return Path(dataset.manifest.root_path).name


def open_dataset(path: str) -> Dataset:
    if not path:
        raise ConfigurationError("no dataset path configured (data.pretrain / data.finetune)")
    if not Path(path).exists():
        raise ConfigurationError(f"dataset not found: {path}")
    return load_dataset(path)


def geometry_for(dataset: Dataset, cfg: RunConfig) -> PatchGeometry:
    m = dataset.manifest
    return PatchGeometry(m.csi_shape, m.image_shape, tuple(cfg.geometry.csi_patch), tuple(cfg.geometry.image_patch))


def check_geometry(geometry: PatchGeometry, dataset: Dataset) -> None:
    m = dataset.manifest
    if tuple(geometry.csi_shape) != tuple(m.csi_shape) or tuple(geometry.image_shape) != tuple(m.image_shape):
        raise ConfigurationError(
            f"checkpoint geometry csi {tuple(geometry.csi_shape)} / image {tuple(geometry.image_shape)} does not "
            f"match dataset {dataset_id(dataset)}: csi {tuple(m.csi_shape)} / image {tuple(m.image_shape)}"
        )


@contextlib.contextmanager
def run_lock(out_dir: Path):
    """Sentinel file guarding a checkpoint directory against a second writer."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / LOCK
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigurationError(f"{out_dir} is locked by another run (remove {path} if that run is dead)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        path.unlink(missing_ok=True)


def new_encoder(geometry: PatchGeometry, cfg: RunConfig, seed: int) -> MaskedEncoder:
    e = cfg.encoder
    arch = EncoderArch(geometry, e.width, e.layers, e.heads, e.ffn_mult,
                       cfg.tokenizer.codebook_size, cfg.tokenizer.codebook_size)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "encoder.init"))
        return MaskedEncoder(arch)


def train_tokenizers(frames: FrameSet, geometry: PatchGeometry, normalizer: CsiNormalizer, cfg: RunConfig,
                     seed: int) -> tuple[tuple[Tokenizer, Tokenizer], tuple[TokenizerTrace, TokenizerTrace]]:
    t = cfg.tokenizer
    out, traces = [], []
    for modality, frames_array in (("wifi", normalizer(frames.csi())), ("vision", frames.images())):
        component = f"tokenizer.{modality}"
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(seed, component))
            tok = Tokenizer(modality, geometry.frame_shape(modality), geometry.patch(modality),
                            t.codebook_size, t.hidden)
        patches = patchify(torch.from_numpy(np.ascontiguousarray(frames_array)), tok.patch).reshape(-1, tok.patch_dim)
        schedule = TokenizerSchedule(lr=t.lr, epochs=t.epochs, batch_size=t.batch_size, tau_start=t.tau_start,
                                     tau_end=t.tau_end, hard_fraction=t.hard_fraction, max_patches=t.max_patches,
                                     seed=derive_seed(seed, component))
        tok, trace = train_tokenizer(patches, tok, schedule)
        log.info("tokenizer[%s] epoch losses %s", modality, ["%.5f" % v for v in trace.epoch_loss])
        out.append(tok)
        traces.append(trace)
    return (out[0], out[1]), (traces[0], traces[1])


def pretrain_schedule(cfg: RunConfig, seed: int) -> PretrainSchedule:
    e = cfg.encoder
    return PretrainSchedule(lr=e.lr, batch_size=e.batch_size, epochs=e.epochs, mask_ratio=e.mask_ratio,
                            weight_decay=e.weight_decay, seed=derive_seed(seed, "encoder.mask"))


def read_loss_trace(path: Path, upto_epoch: int) -> PretrainTrace:
    trace = PretrainTrace()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            epoch = int(row["epoch"])
            if epoch < upto_epoch:
                trace.rows.append((epoch, int(row["step"]), float(row["masked_loss"])))
    for epoch in range(upto_epoch):
        vals = [v for e, _, v in trace.rows if e == epoch]
        if not vals:
            raise CheckpointError(f"{path}: loss trace has no rows for epoch {epoch}")
        trace.epoch_loss.append(float(np.mean(vals)))
    return trace


def _write_trace(path: Path, trace: PretrainTrace) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "masked_loss"])
        for epoch, step, value in trace.rows:
            w.writerow([epoch, step, repr(value)])
    os.replace(tmp, path)


def save_pretrained_tokenizers(out_dir: Path, model: PretrainedModel) -> None:
    tw, tv = model.tokenizers
    save_tokenizer(out_dir / WIFI_TOKENIZER, tw, {"seed": model.seed, "dataset": model.dataset_id},
                   {"csi_low": model.normalizer.low, "csi_high": model.normalizer.high})
    save_tokenizer(out_dir / VISION_TOKENIZER, tv, {"seed": model.seed, "dataset": model.dataset_id})


def load_pretrained(out_dir: Path, encoder_path: Path | None = None) -> PretrainedModel:
    """Tokenizers, CSI normalizer and encoder from a pretraining output directory."""
    out_dir = Path(out_dir)
    encoder_path = encoder_path or out_dir / ENCODER_CKPT
    for p in (out_dir / WIFI_TOKENIZER, out_dir / VISION_TOKENIZER, encoder_path):
        if not p.exists():
            raise ConfigurationError(f"checkpoint not found: {p}")
    tw, hw, aux = load_tokenizer(out_dir / WIFI_TOKENIZER)
    tv, _, _ = load_tokenizer(out_dir / VISION_TOKENIZER)
    if "csi_low" not in aux or "csi_high" not in aux:
        raise CheckpointError(f"{out_dir / WIFI_TOKENIZER}: CSI normalizer arrays missing")
    encoder, header, _ = load_encoder(encoder_path)
    extra = hw.get("extra", {})
    return PretrainedModel(encoder.arch.geometry, (tw, tv), encoder, CsiNormalizer(aux["csi_low"], aux["csi_high"]),
                           extra.get("dataset", ""), int(extra.get("seed", 0)))


def build_pretrained(dataset: Dataset, cfg: RunConfig, seed: int, out_dir: Path | None = None,
                     resume: bool = False) -> PretrainedModel:
    """Split, fit the CSI normalizer, train both tokenizers, then run masked pretraining.

    With ``out_dir`` the tokenizers, the per-epoch encoder checkpoint and the loss
    trace CSV are written there; ``resume`` continues from the saved encoder epoch.
    """
    geometry = geometry_for(dataset, cfg)
    pre, _ = split_pretrain_test(dataset, cfg.data.pretrain_fraction)
    schedule = pretrain_schedule(cfg, seed)
    csi_all, images = pre.csi(), pre.images()
    start_epoch, optimizer, trace = 0, None, PretrainTrace()
    if resume and out_dir is not None and (out_dir / ENCODER_CKPT).exists():
        model = load_pretrained(out_dir)
        check_geometry(model.geometry, dataset)
        model.encoder, header, optimizer = load_encoder(out_dir / ENCODER_CKPT)
        start_epoch = int(header["epoch"])
        trace = read_loss_trace(out_dir / LOSS_TRACE, start_epoch)
        log.info("resuming pretraining at epoch %d", start_epoch)
    else:
        normalizer = CsiNormalizer.fit(csi_all)
        toks, tok_traces = train_tokenizers(pre, geometry, normalizer, cfg, seed)
        model = PretrainedModel(geometry, toks, new_encoder(geometry, cfg, seed), normalizer, dataset_id(dataset),
                                seed, tokenizer_traces=tok_traces)
        if out_dir is not None:
            save_pretrained_tokenizers(out_dir, model)

    def checkpoint(epoch, params, opt, tr):
        if out_dir is not None:
            save_encoder(out_dir / ENCODER_CKPT, params, epoch + 1, opt, {"seed": seed, "dataset": model.dataset_id})
            _write_trace(out_dir / LOSS_TRACE, tr)

    model.encoder, model.trace = pretrain(model.normalizer(csi_all), images, model.tokenizers, model.encoder,
                                          schedule, optimizer=optimizer, start_epoch=start_epoch, trace=trace,
                                          on_epoch=checkpoint)
    return model


def num_classes(dataset: Dataset, task: str) -> int:
    m = dataset.manifest
    return m.num_activities * m.num_subjects if task == "joint" else m.num_activities


def finetune_clips(dataset: Dataset, cfg: RunConfig, task: str) -> BudgetSelection:
    """The labeled budget: earliest clips per class from the pretraining split."""
    pre, _ = split_pretrain_test(dataset, cfg.data.pretrain_fraction)
    clips = segment_frame_set(pre, cfg.finetune.seq_len)
    return select_finetune_budget(clips, cfg.finetune.budget_seconds, dataset.manifest.frame_rate,
                                  num_classes(dataset, task), task, dataset.manifest.num_subjects)


def test_clips(dataset: Dataset, cfg: RunConfig):
    _, test = split_pretrain_test(dataset, cfg.data.pretrain_fraction)
    return segment_frame_set(test, cfg.finetune.seq_len)


def finetune_head(dataset: Dataset, model: PretrainedModel, cfg: RunConfig, seed: int, *, task: str = "activity",
                  encoder: MaskedEncoder | None = None, modalities=("wifi", "vision"),
                  ) -> tuple[TemporalHead, BudgetSelection, FinetuneTrace]:
    check_geometry(model.geometry, dataset)
    f = cfg.finetune
    selection = finetune_clips(dataset, cfg, task)
    encoder = encoder if encoder is not None else model.encoder
    head = TemporalHead(encoder.width, num_classes(dataset, task), f.hidden, f.bypass_sigmoid)
    head.reset_parameters(torch_generator(derive_seed(seed, "head.init")))
    schedule = FinetuneSchedule(lr=f.lr, batch_size=f.batch_size, epochs=f.epochs, seq_len=f.seq_len,
                                freeze_encoder=f.freeze_encoder, standardize=f.standardize,
                                photometric_gammas=tuple(f.photometric_gammas), seed=derive_seed(seed, "head.order"))
    head, trace = finetune(selection.clips, encoder, head, schedule, task=task,
                           num_subjects=dataset.manifest.num_subjects, csi_transform=model.normalizer,
                           modalities=modalities)
    return head, selection, trace


def write_metrics(path: Path, trace: FinetuneTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "train_acc"])
        for epoch, loss, acc in trace.rows:
            w.writerow([epoch, repr(loss), repr(acc)])
