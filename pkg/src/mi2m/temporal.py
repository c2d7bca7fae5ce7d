"""Few-shot finetuning head: frame features from the frozen encoder -> GRU -> linear + softmax."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import blob
from .datasets import ActivityClip, darken
from .encoder import MaskedEncoder
from .errors import ConfigurationError, ShapeError, ValidationError
from .seeding import torch_generator
from .tokenizer import PatchGeometry

log = logging.getLogger(__name__)

HEAD_MAGIC = b"MI2MGRU1"


class TemporalHead(nn.Module):
    """GRU cell with an explicit sigmoid output layer, followed by a linear classifier.

    Parameter names follow the recurrence: ``W_*`` act on the frame feature,
    ``U_*`` on the previous state, ``B_*`` are biases.
    """

    def __init__(self, input_dim: int, num_classes: int, hidden: int = 256, bypass_sigmoid: bool = False):
        super().__init__()
        self.input_dim, self.hidden, self.num_classes = int(input_dim), int(hidden), int(num_classes)
        self.bypass_sigmoid = bool(bypass_sigmoid)
        h, d = self.hidden, self.input_dim
        self.W_r, self.W_z, self.W_h = (nn.Parameter(torch.empty(h, d)) for _ in range(3))
        self.U_r, self.U_z, self.U_h = (nn.Parameter(torch.empty(h, h)) for _ in range(3))
        self.B_r, self.B_z, self.B_h = (nn.Parameter(torch.empty(h)) for _ in range(3))
        self.W_o = nn.Parameter(torch.empty(h, h))
        self.B_o = nn.Parameter(torch.empty(h))
        self.W_c = nn.Parameter(torch.empty(num_classes, h))
        self.B_c = nn.Parameter(torch.empty(num_classes))
        # per-dimension feature standardization, fitted on the finetuning features
        self.register_buffer("feat_mean", torch.zeros(d))
        self.register_buffer("feat_std", torch.ones(d))
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / math.sqrt(self.hidden)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.rand(p.shape, generator=generator, dtype=p.dtype) * 2 * bound - bound)

    @torch.no_grad()
    def fit_standardization(self, features: torch.Tensor) -> None:
        flat = features.reshape(-1, features.shape[-1]).to(self.feat_mean.dtype)
        self.feat_mean.copy_(flat.mean(0))
        self.feat_std.copy_(flat.std(0, unbiased=False).clamp(min=1e-6))

    def state0(self, batch_shape=()) -> torch.Tensor:
        return torch.zeros(*batch_shape, self.hidden, dtype=self.W_r.dtype)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(B, T, d) frame features -> (B, K) class logits from the last step."""
        if features.ndim != 3 or features.shape[-1] != self.input_dim:
            raise ShapeError(f"features {tuple(features.shape)} incompatible with input width {self.input_dim}")
        features = (features - self.feat_mean) / self.feat_std
        s = self.state0(features.shape[:1])
        for t in range(features.shape[1]):
            s = gru_step(features[:, t], s, self)
        return logits(gru_output(s, self), self)


def _lin(W: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return x @ W.T


def gru_step(f_t: torch.Tensor, s_prev: torch.Tensor, params: TemporalHead) -> torch.Tensor:
    if f_t.shape[-1] != params.input_dim or s_prev.shape[-1] != params.hidden:
        raise ShapeError(
            f"gru_step: input width {f_t.shape[-1]} / state width {s_prev.shape[-1]} vs "
            f"({params.input_dim}, {params.hidden})"
        )
    r = torch.sigmoid(_lin(params.W_r, f_t) + _lin(params.U_r, s_prev) + params.B_r)
    z = torch.sigmoid(_lin(params.W_z, f_t) + _lin(params.U_z, s_prev) + params.B_z)
    h = torch.tanh(_lin(params.W_h, f_t) + _lin(params.U_h, r * s_prev) + params.B_h)
    return (1 - z) * s_prev + z * h


def gru_output(s_t: torch.Tensor, params: TemporalHead) -> torch.Tensor:
    if s_t.shape[-1] != params.hidden:
        raise ShapeError(f"state width {s_t.shape[-1]} != {params.hidden}")
    o = _lin(params.W_o, s_t) + params.B_o
    return o if params.bypass_sigmoid else torch.sigmoid(o)


def logits(o_T: torch.Tensor, params: TemporalHead) -> torch.Tensor:
    return _lin(params.W_c, o_T) + params.B_c


def classify(o_T: torch.Tensor, params: TemporalHead) -> torch.Tensor:
    return torch.softmax(logits(o_T, params), dim=-1)


def cross_entropy(p_c: torch.Tensor, y: int) -> torch.Tensor:
    K = p_c.shape[-1]
    if not 0 <= int(y) < K:
        raise ValidationError(f"label {y} outside [0, {K})")
    return -torch.log(p_c[..., int(y)])


# ---------------------------------------------------------------------------
# features


@torch.no_grad()
def extract_features(csi, images, encoder: MaskedEncoder, modalities: Sequence[str] = ("wifi", "vision"),
                     chunk: int = 256) -> torch.Tensor:
    """Mean-pooled hidden vectors of the unmasked frames: (M, ...) -> (M, d)."""
    return _features(csi, images, encoder, modalities, chunk)


def _positions(encoder: MaskedEncoder, modalities: Sequence[str]) -> torch.Tensor:
    parts = []
    if "wifi" in modalities:
        parts.append(torch.arange(encoder.num_wifi))
    if "vision" in modalities:
        parts.append(torch.arange(encoder.num_vision) + encoder.num_wifi)
    if not parts:
        raise ConfigurationError("at least one modality is required")
    return torch.cat(parts)


def _features(csi, images, encoder: MaskedEncoder, modalities: Sequence[str], chunk: int) -> torch.Tensor:
    dtype = next(encoder.parameters()).dtype
    csi = torch.as_tensor(np.asarray(csi) if not isinstance(csi, torch.Tensor) else csi).to(dtype)
    images = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images).to(dtype)
    g = encoder.arch.geometry
    if tuple(csi.shape[1:]) != tuple(g.csi_shape) or tuple(images.shape[1:]) != tuple(g.image_shape):
        raise ValidationError(
            f"frames csi {tuple(csi.shape[1:])} / image {tuple(images.shape[1:])} do not match encoder geometry "
            f"{tuple(g.csi_shape)} / {tuple(g.image_shape)}"
        )
    pos = _positions(encoder, modalities)
    out = []
    for i in range(0, csi.shape[0], chunk):
        pw, pv = encoder.patches(csi[i : i + chunk], images[i : i + chunk])
        x = encoder.embed(pw, pv)[:, pos]
        out.append(encoder.encode(x).mean(dim=1))
    return torch.cat(out) if out else torch.zeros(0, encoder.width, dtype=dtype)


def extract_frame_feature(frame, encoder: MaskedEncoder, geometry: PatchGeometry | None = None) -> torch.Tensor:
    if geometry is not None and geometry != encoder.arch.geometry:
        raise ValidationError("geometry does not match the encoder's")
    return extract_features(np.asarray(frame.csi)[None], np.asarray(frame.image)[None], encoder)[0]


def clip_features(clips: Sequence[ActivityClip], encoder: MaskedEncoder, csi_transform=None, image_transform=None,
                  modalities: Sequence[str] = ("wifi", "vision"), grad: bool = False) -> torch.Tensor:
    """(n_clips, T, d) features for a list of equal-length clips."""
    if not clips:
        return torch.zeros(0, 0, encoder.width)
    T = len(clips[0])
    csi = np.concatenate([c.csi for c in clips])
    img = np.concatenate([c.images for c in clips])
    if csi_transform is not None:
        csi = csi_transform(csi)
    if image_transform is not None:
        img = image_transform(img)
    if grad:
        f = _features(csi, img, encoder, modalities, chunk=len(csi))
    else:
        f = extract_features(csi, img, encoder, modalities)
    return f.reshape(len(clips), T, -1)


# ---------------------------------------------------------------------------
# finetuning


@dataclass
class FinetuneSchedule:
    lr: float = 4e-4
    batch_size: int = 32
    epochs: int = 10
    seq_len: int = 8
    freeze_encoder: bool = True
    standardize: bool = True
    # optional lighting jitter: each training clip is seen once per gamma, images raised to it
    photometric_gammas: tuple[float, ...] = (1.0,)
    seed: int = 0


@dataclass
class FinetuneTrace:
    rows: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, loss, train_acc)


def clip_labels(clips: Sequence[ActivityClip], task: str = "activity", num_subjects: int | None = None) -> torch.Tensor:
    return torch.tensor([c.label(task, num_subjects) for c in clips], dtype=torch.long)


def _gamma_transform(gamma: float, image_transform=None):
    def apply(images):
        out = darken(images, gamma) if gamma != 1.0 else images
        return image_transform(out) if image_transform is not None else out
    return apply


def finetune(clips: Sequence[ActivityClip], encoder: MaskedEncoder, head: TemporalHead,
             schedule: FinetuneSchedule | None = None, *, task: str = "activity", num_subjects: int | None = None,
             csi_transform=None, image_transform=None, modalities: Sequence[str] = ("wifi", "vision"),
             features: torch.Tensor | None = None) -> tuple[TemporalHead, FinetuneTrace]:
    """Train the GRU head (and the encoder too, if not frozen) with cross-entropy on labeled clips.

    ``features`` may carry precomputed frozen features shaped (len(gammas), n_clips, T, d).
    """
    schedule = schedule or FinetuneSchedule()
    if not clips:
        raise ConfigurationError("finetune needs at least one labeled clip")
    bad = [c.clip_id for c in clips if len(c) != schedule.seq_len]
    if bad:
        raise ConfigurationError(f"clips of wrong length (expected {schedule.seq_len}): {bad[:3]}")
    y = clip_labels(clips, task, num_subjects)
    missing = sorted(set(range(head.num_classes)) - set(y.tolist()))
    if missing:
        raise ConfigurationError(f"classes absent from the finetuning budget: {missing}")
    if int(y.max()) >= head.num_classes:
        raise ConfigurationError(f"label {int(y.max())} exceeds head class count {head.num_classes}")
    gammas = tuple(schedule.photometric_gammas) or (1.0,)
    if any(not g > 0 for g in gammas):
        raise ConfigurationError(f"photometric gammas must be positive, got {gammas}")

    frozen = schedule.freeze_encoder
    if frozen and features is None:
        features = torch.stack([clip_features(clips, encoder, csi_transform, _gamma_transform(g, image_transform),
                                              modalities) for g in gammas])
    if schedule.standardize:
        if features is None:
            features = torch.stack([clip_features(clips, encoder, csi_transform,
                                                  _gamma_transform(g, image_transform), modalities) for g in gammas])
        head.fit_standardization(features)
    trainable = list(head.parameters()) + ([] if frozen else list(encoder.parameters()))
    opt = torch.optim.Adam(trainable, lr=schedule.lr)
    gen = torch_generator(schedule.seed)
    # one training item per (gamma, clip) pair
    n_clips = len(clips)
    n = n_clips * len(gammas)
    y_all = y.repeat(len(gammas))
    bs = min(schedule.batch_size, n)
    trace = FinetuneTrace()
    head.train()
    for epoch in range(schedule.epochs):
        order = torch.randperm(n, generator=gen)
        total, correct, seen = 0.0, 0, 0
        for k in range(math.ceil(n / bs)):
            idx = order[k * bs : (k + 1) * bs]
            if frozen:
                x = features.reshape(n, *features.shape[2:])[idx]
            else:
                parts = []
                for i in idx.tolist():
                    g, c = divmod(i, n_clips)
                    parts.append(clip_features([clips[c]], encoder, csi_transform,
                                               _gamma_transform(gammas[g], image_transform), modalities, grad=True))
                x = torch.cat(parts)
            out = head(x.to(head.W_r.dtype))
            loss = F.cross_entropy(out, y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((out.argmax(-1) == y_all[idx]).sum())
            seen += len(idx)
        trace.rows.append((epoch, total / seen, correct / seen))
        log.debug("finetune epoch %d loss %.4f acc %.3f", epoch, total / seen, correct / seen)
    head.eval()
    return head, trace


@torch.no_grad()
def predict(features: torch.Tensor, head: TemporalHead) -> torch.Tensor:
    return head(features.to(head.W_r.dtype)).argmax(dim=-1)


# ---------------------------------------------------------------------------
# checkpoint


def save_head(path, head: TemporalHead, extra: dict | None = None) -> None:
    header = {"kind": "head", "input_dim": head.input_dim, "hidden": head.hidden,
              "num_classes": head.num_classes, "bypass_sigmoid": head.bypass_sigmoid,
              "dtype": str(head.W_r.dtype).replace("torch.", "")}
    if extra:
        header["extra"] = extra
    blob.write_blob(path, HEAD_MAGIC, header, {f"param.{k}": v for k, v in head.state_dict().items()})


def load_head(path) -> tuple[TemporalHead, dict]:
    header, arrays = blob.read_blob(path, HEAD_MAGIC)
    head = TemporalHead(header["input_dim"], header["num_classes"], header["hidden"], header["bypass_sigmoid"])
    head.to(getattr(torch, header.get("dtype", "float32")))
    head.load_state_dict({k[6:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param.")})
    head.eval()
    return head, header
