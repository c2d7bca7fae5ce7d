"""Patch grids and per-modality discrete tokenizers (dVAE trained through a Gumbel-softmax relaxation)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import blob
from .errors import ArgumentError, GeometryError, NumericError, ValidationError
from .seeding import torch_generator

log = logging.getLogger(__name__)

TOKENIZER_MAGIC = b"MI2MTOK1"
DEFAULT_CODEBOOK_SIZE = 8192
MODALITIES = ("wifi", "vision")


@dataclass(frozen=True)
class PatchGeometry:
    """Patch sizes over the (subcarrier, packet) plane of CSI and the (H, W) plane of images."""

    csi_shape: tuple[int, int, int] = (3, 114, 10)
    image_shape: tuple[int, int, int] = (3, 224, 224)
    csi_patch: tuple[int, int] = (6, 5)
    image_patch: tuple[int, int] = (16, 16)

    def __post_init__(self):
        for name, shape, patch in (("csi", self.csi_shape, self.csi_patch), ("image", self.image_shape, self.image_patch)):
            if len(shape) != 3 or len(patch) != 2:
                raise GeometryError(f"{name}: shape must be (C, rows, cols) and patch (rows, cols)")
            if any(p <= 0 for p in patch) or shape[1] % patch[0] or shape[2] % patch[1]:
                raise GeometryError(
                    f"{name} patch {tuple(patch)} does not divide frame dims {tuple(shape[1:])}"
                )

    @property
    def num_wifi(self) -> int:
        return (self.csi_shape[1] // self.csi_patch[0]) * (self.csi_shape[2] // self.csi_patch[1])

    @property
    def num_vision(self) -> int:
        return (self.image_shape[1] // self.image_patch[0]) * (self.image_shape[2] // self.image_patch[1])

    @property
    def num_positions(self) -> int:
        return self.num_wifi + self.num_vision

    def frame_shape(self, modality: str) -> tuple[int, int, int]:
        return tuple(self.csi_shape if modality == "wifi" else self.image_shape)

    def patch(self, modality: str) -> tuple[int, int]:
        return tuple(self.csi_patch if modality == "wifi" else self.image_patch)

    def patch_dim(self, modality: str) -> int:
        c = self.frame_shape(modality)[0]
        r, k = self.patch(modality)
        return c * r * k

    def num_patches(self, modality: str) -> int:
        return self.num_wifi if modality == "wifi" else self.num_vision

    def to_dict(self) -> dict:
        return {"csi_shape": list(self.csi_shape), "image_shape": list(self.image_shape),
                "csi_patch": list(self.csi_patch), "image_patch": list(self.image_patch)}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchGeometry":
        return cls(tuple(d["csi_shape"]), tuple(d["image_shape"]), tuple(d["csi_patch"]), tuple(d["image_patch"]))


def _permute(x, order):
    return x.permute(*order) if isinstance(x, torch.Tensor) else x.transpose(order)


def patchify(x, patch: tuple[int, int]):
    """(C, H, W) -> (N, C*r*c), or batched (B, C, H, W) -> (B, N, C*r*c). Row-major patch order."""
    single = x.ndim == 3
    if single:
        x = x[None]
    B, C, H, W = x.shape
    r, c = patch
    if H % r or W % c:
        raise GeometryError(f"patch {tuple(patch)} does not divide frame dims {(H, W)}")
    out = x.reshape(B, C, H // r, r, W // c, c)
    out = _permute(out, (0, 2, 4, 1, 3, 5)).reshape(B, (H // r) * (W // c), C * r * c)
    return out[0] if single else out


def unpatchify(patches, patch: tuple[int, int], frame_shape: tuple[int, int, int]):
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    C, H, W = frame_shape
    r, c = patch
    if H % r or W % c:
        raise GeometryError(f"patch {tuple(patch)} does not divide frame dims {(H, W)}")
    B = patches.shape[0]
    out = patches.reshape(B, H // r, W // c, C, r, c)
    out = _permute(out, (0, 3, 1, 4, 2, 5)).reshape(B, C, H, W)
    return out[0] if single else out


def gumbel_noise(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    u.clamp_(min=torch.finfo(dtype).tiny, max=1.0 - torch.finfo(dtype).eps)
    return -torch.log(-torch.log(u))


def gumbel_softmax_sample(logits: torch.Tensor, tau: float, noise_seed: int | None = None, *,
                          hard: bool = False, noise: torch.Tensor | None = None,
                          generator: torch.Generator | None = None) -> torch.Tensor:
    """Relaxed categorical sample ``softmax((logits + g) / tau)`` over the last axis.

    ``g`` is Gumbel(0, 1) noise: passed explicitly via ``noise``, drawn from
    ``noise_seed``/``generator``, or from the global RNG otherwise. With ``hard``
    the forward value is the exact one-hot of the argmax while gradients flow
    through the relaxed sample (straight-through).
    """
    if not tau > 0:
        raise ArgumentError(f"temperature must be positive, got {tau}")
    if not torch.isfinite(logits).all():
        raise NumericError("gumbel_softmax_sample: non-finite logits")
    if noise is None:
        if noise_seed is not None:
            generator = torch_generator(noise_seed)
        noise = gumbel_noise(logits.shape, generator, logits.dtype)
    y = torch.softmax((logits + noise) / tau, dim=-1)
    if hard:
        index = y.argmax(dim=-1, keepdim=True)
        y_hard = torch.zeros_like(y).scatter_(-1, index, 1.0)
        y = y_hard - y.detach() + y
    return y


class Tokenizer(nn.Module):
    """dVAE for one modality: two convolution stages each way.

    The first encoder stage has kernel = stride = patch size, so each patch maps to
    one hidden vector and a whole frame yields a grid of per-patch logits. The
    second encoder stage and the first decoder stage are 1x1 convolutions, applied
    here as pointwise linear maps over the patch grid.
    """

    def __init__(self, modality: str, frame_shape, patch, codebook_size: int = DEFAULT_CODEBOOK_SIZE,
                 hidden: int = 64, temperature: float = 1.0):
        super().__init__()
        if modality not in MODALITIES:
            raise ArgumentError(f"modality must be one of {MODALITIES}, got {modality!r}")
        if not temperature > 0:
            raise ArgumentError(f"temperature must be positive, got {temperature}")
        self.modality = modality
        self.frame_shape = tuple(int(s) for s in frame_shape)
        self.patch = tuple(int(p) for p in patch)
        self.codebook_size = int(codebook_size)
        self.hidden = int(hidden)
        self.temperature = float(temperature)
        C = self.frame_shape[0]
        self.enc1 = nn.Conv2d(C, hidden, kernel_size=self.patch, stride=self.patch)
        self.enc2 = nn.Linear(hidden, codebook_size)
        self.dec1 = nn.Linear(codebook_size, hidden)
        self.dec2 = nn.ConvTranspose2d(hidden, C, kernel_size=self.patch, stride=self.patch)
        # encoder input standardization, fitted by init_from_data
        self.register_buffer("in_mean", torch.zeros(self.patch_dim))
        self.register_buffer("in_std", torch.ones(self.patch_dim))

    @property
    def patch_dim(self) -> int:
        return self.frame_shape[0] * self.patch[0] * self.patch[1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.frame_shape[1] // self.patch[0], self.frame_shape[2] // self.patch[1]

    def _as_patches(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 2:
            if x.shape[1] != self.patch_dim:
                raise GeometryError(f"{self.modality} patch length {x.shape[1]} != expected {self.patch_dim}")
            return x
        if x.ndim != 4 or x.shape[1] != self.frame_shape[0] or x.shape[2] % self.patch[0] or x.shape[3] % self.patch[1]:
            raise GeometryError(f"{self.modality} input {tuple(x.shape)} incompatible with patch {self.patch}")
        return patchify(x, self.patch).reshape(-1, self.patch_dim)

    def features(self, patches: torch.Tensor) -> torch.Tensor:
        z = (patches - self.in_mean) / self.in_std
        return F.relu(self.enc1(z.reshape(-1, self.frame_shape[0], *self.patch))).flatten(1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Codebook logits, (B, N, V) for frames (B, C, H, W) or (M, V) for flattened patches."""
        out = self.enc2(self.features(self._as_patches(x)))
        return out if x.ndim == 2 else out.reshape(x.shape[0], -1, self.codebook_size)

    @torch.no_grad()
    def init_from_data(self, patches: torch.Tensor, generator: torch.Generator | None = None,
                       sharpness: float = 2.0, fit_decoder: bool = True) -> None:
        """Data-dependent start: standardize inputs and seed every code with a training patch.

        Code k scores ``h . c_k - |c_k|^2 / 2`` (nearest prototype in first-stage
        feature space) and its decoder path is least-squares fitted to reproduce the
        prototype patch, so every code starts out useful.
        """
        patches = self._as_patches(patches).to(self.in_mean.dtype)
        self.in_mean.copy_(patches.mean(0))
        self.in_std.copy_(patches.std(0, unbiased=False).clamp(min=1e-3))
        V, M = self.codebook_size, patches.shape[0]
        idx = torch.randperm(M, generator=generator)[:V] if M >= V else torch.randint(M, (V,), generator=generator)
        h = self.features(patches[idx])
        scale = sharpness / h.pow(2).sum(1).mean().clamp(min=1e-12)
        self.enc2.weight.copy_(h * scale)
        self.enc2.bias.copy_(-0.5 * h.pow(2).sum(1) * scale)
        if not fit_decoder:
            return
        self.dec1.weight.copy_(h.T)
        self.dec1.bias.zero_()
        # least squares for W and a per-channel bias b: project out span(h), solve b, then W
        C = self.frame_shape[0]
        y = patches[idx]
        ones = torch.ones(V, 1, dtype=h.dtype)
        sol = torch.linalg.lstsq(h, torch.cat([y, ones], dim=1), driver="gelsd").solution
        res = torch.cat([y, ones], dim=1) - h @ sol
        r1, ry = res[:, -1], res[:, :-1]
        denom = float(r1 @ r1)
        if denom > 1e-9 * V:
            bias = (r1 @ ry).reshape(C, -1).mean(1) / denom
        else:  # constant already in span(h)
            bias = torch.zeros(C, dtype=h.dtype)
        per_pixel = bias.repeat_interleave(self.patch[0] * self.patch[1])
        weight = torch.linalg.lstsq(h, y - per_pixel, driver="gelsd").solution
        self.dec2.weight.copy_(weight.reshape(self.hidden, C, *self.patch))
        self.dec2.bias.copy_(bias)

    def decode(self, codes: torch.Tensor, grid: tuple[int, int] | None = None) -> torch.Tensor:
        """Soft or hard codes (B, N, V) -> frames (B, C, H, W); (M, V) -> patches (M, C*r*c)."""
        h = F.relu(self.dec1(codes))
        if codes.ndim == 2:
            return self.dec2(h[:, :, None, None]).reshape(codes.shape[0], -1)
        B, N, _ = codes.shape
        gh, gw = grid or self.grid
        return self.dec2(h.transpose(1, 2).reshape(B, self.hidden, gh, gw))

    def forward(self, x: torch.Tensor, tau: float | None = None, hard: bool = False,
                generator: torch.Generator | None = None) -> torch.Tensor:
        logits = self.logits(x)
        codes = gumbel_softmax_sample(logits, tau or self.temperature, hard=hard, generator=generator)
        return self.decode(codes)


@dataclass
class TokenizerSchedule:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 512
    tau_start: float = 1.0
    tau_end: float = 1.0 / 16
    hard_fraction: float = 1.0 / 3
    max_patches: int = 0  # 0: use every patch
    data_init: bool = True
    seed: int = 0

    def tau_at(self, step: int, total: int) -> float:
        if total <= 1:
            return self.tau_end
        frac = step / (total - 1)
        return self.tau_start * (self.tau_end / self.tau_start) ** frac

    def hard_at(self, step: int, total: int) -> bool:
        return step >= total - math.floor(self.hard_fraction * total)


@dataclass
class TokenizerTrace:
    step_loss: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)


def train_tokenizer(patches, params: Tokenizer, schedule: TokenizerSchedule | None = None
                    ) -> tuple[Tokenizer, TokenizerTrace]:
    """Fit the dVAE by minimizing mean squared reconstruction error (Gaussian log-likelihood).

    ``patches`` is an (M, C*r*c) stream. Temperature anneals geometrically from
    ``tau_start`` to ``tau_end``; the final ``hard_fraction`` of steps use
    straight-through hard codes.
    """
    schedule = schedule or TokenizerSchedule()
    patches = torch.as_tensor(np.asarray(patches) if not isinstance(patches, torch.Tensor) else patches)
    if patches.ndim != 2 or patches.shape[0] == 0:
        raise ArgumentError("train_tokenizer needs a non-empty (M, patch_dim) stream")
    if patches.shape[1] != params.patch_dim:
        raise GeometryError(f"patch length {patches.shape[1]} != tokenizer patch length {params.patch_dim}")
    dtype = next(params.parameters()).dtype
    patches = patches.to(dtype)
    gen = torch_generator(schedule.seed)
    if schedule.max_patches and patches.shape[0] > schedule.max_patches:
        patches = patches[torch.randperm(patches.shape[0], generator=gen)[: schedule.max_patches]]
    if schedule.data_init:
        params.init_from_data(patches, gen)
    opt = torch.optim.Adam(params.parameters(), lr=schedule.lr)
    M = patches.shape[0]
    bs = min(schedule.batch_size, M)
    steps_per_epoch = math.ceil(M / bs)
    total = schedule.epochs * steps_per_epoch
    trace = TokenizerTrace()
    step = 0
    params.train()
    for _ in range(schedule.epochs):
        order = torch.randperm(M, generator=gen)
        losses = []
        for k in range(steps_per_epoch):
            batch = patches[order[k * bs : (k + 1) * bs]]
            tau = schedule.tau_at(step, total)
            logits = params.logits(batch)
            codes = gumbel_softmax_sample(logits, tau, hard=schedule.hard_at(step, total), generator=gen)
            loss = F.mse_loss(params.decode(codes), batch)
            if not torch.isfinite(loss):
                raise NumericError(f"tokenizer loss became non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            trace.step_loss.append(loss.item())
            step += 1
        trace.epoch_loss.append(float(np.mean(losses)))
        log.debug("tokenizer[%s] epoch %d loss %.5f", params.modality, len(trace.epoch_loss), trace.epoch_loss[-1])
    params.temperature = schedule.tau_at(total - 1, total)
    params.eval()
    return params, trace


@dataclass(frozen=True)
class TokenGrid:
    tokens: torch.Tensor  # (N,) int64, or (B, N)
    modality: str
    geometry: PatchGeometry

    def __post_init__(self):
        expected = self.geometry.num_patches(self.modality)
        if self.tokens.shape[-1] != expected:
            raise ValidationError(f"{self.modality} token count {self.tokens.shape[-1]} != {expected}")


def _check_frame(x: torch.Tensor, params: Tokenizer, geometry: PatchGeometry) -> None:
    shape = geometry.frame_shape(params.modality)
    if tuple(x.shape[-3:]) != tuple(shape) or tuple(params.patch) != geometry.patch(params.modality):
        raise GeometryError(
            f"{params.modality} frame {tuple(x.shape[-3:])} / patch {params.patch} do not match geometry "
            f"{tuple(shape)} / {geometry.patch(params.modality)}"
        )


@torch.no_grad()
def tokenize_batch(frames: torch.Tensor, params: Tokenizer, chunk: int = 64) -> torch.Tensor:
    """(B, C, H, W) -> (B, N) argmax codes."""
    dtype = next(params.parameters()).dtype
    frames = torch.as_tensor(frames).to(dtype)
    out = [params.logits(frames[i : i + chunk]).argmax(dim=-1) for i in range(0, frames.shape[0], chunk)]
    return torch.cat(out) if out else torch.zeros((0, 0), dtype=torch.long)


def tokenize(frame, params: Tokenizer, geometry: PatchGeometry) -> TokenGrid:
    x = torch.as_tensor(frame)
    _check_frame(x, params, geometry)
    single = x.ndim == 3
    tokens = tokenize_batch(x[None] if single else x, params)
    return TokenGrid(tokens[0] if single else tokens, params.modality, geometry)


@torch.no_grad()
def detokenize(tokens: TokenGrid, params: Tokenizer, geometry: PatchGeometry) -> torch.Tensor:
    t = tokens.tokens
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= params.codebook_size):
        raise ValidationError(f"token out of range [0, {params.codebook_size})")
    single = t.ndim == 1
    t = t[None] if single else t
    dtype = next(params.parameters()).dtype
    onehot = F.one_hot(t, params.codebook_size).to(dtype)
    C, H, W = geometry.frame_shape(params.modality)
    r, c = geometry.patch(params.modality)
    out = params.decode(onehot, grid=(H // r, W // c))
    return out[0] if single else out


def codebook_usage(tokens: torch.Tensor, codebook_size: int) -> float:
    return torch.unique(tokens).numel() / codebook_size


# ---------------------------------------------------------------------------
# checkpoint


def tokenizer_header(params: Tokenizer, extra: dict | None = None) -> dict:
    header = {
        "kind": "tokenizer",
        "modality": params.modality,
        "frame_shape": list(params.frame_shape),
        "patch": list(params.patch),
        "codebook_size": params.codebook_size,
        "hidden": params.hidden,
        "temperature": params.temperature,
        "dtype": str(next(params.parameters()).dtype).replace("torch.", ""),
    }
    if extra:
        header["extra"] = extra
    return header


def save_tokenizer(path, params: Tokenizer, extra: dict | None = None, arrays: dict | None = None) -> None:
    out = {f"param.{k}": v for k, v in params.state_dict().items()}
    for k, v in (arrays or {}).items():
        out[f"aux.{k}"] = v
    blob.write_blob(path, TOKENIZER_MAGIC, tokenizer_header(params, extra), out)


def load_tokenizer(path) -> tuple[Tokenizer, dict, dict[str, np.ndarray]]:
    header, arrays = blob.read_blob(path, TOKENIZER_MAGIC)
    params = Tokenizer(header["modality"], header["frame_shape"], header["patch"],
                       header["codebook_size"], header["hidden"], header["temperature"])
    params.to(getattr(torch, header.get("dtype", "float32")))
    state = {k[len("param."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param.")}
    params.load_state_dict(state)
    params.eval()
    aux = {k[len("aux."):]: v for k, v in arrays.items() if k.startswith("aux.")}
    return params, header, aux
