"""Masked WiFi-vision modeling: masking, a joint transformer encoder and masked-token prediction."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import blob
from .errors import ArgumentError, ConfigurationError, NumericError, ShapeError, ValidationError
from .seeding import torch_generator
from .tokenizer import PatchGeometry, Tokenizer, patchify, tokenize_batch

log = logging.getLogger(__name__)

ENCODER_MAGIC = b"MI2MENC1"
WIFI, VISION = 0, 1


def mask_count(alpha: float, n: int) -> int:
    """ceil(alpha * n) in exact decimal arithmetic, so 0.4 * 5 masks 2, not 3."""
    return math.ceil(Fraction(repr(float(alpha))) * n)


@dataclass(frozen=True)
class MaskPlan:
    wifi: np.ndarray  # sorted unique patch indices in [0, N_w)
    vision: np.ndarray  # sorted unique patch indices in [0, N_v)
    alpha: float
    seed: int | None
    num_wifi: int
    num_vision: int

    @classmethod
    def empty(cls, num_wifi: int, num_vision: int) -> "MaskPlan":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, 0.0, None, num_wifi, num_vision)

    @property
    def joint_positions(self) -> np.ndarray:
        return np.concatenate([self.wifi, self.vision + self.num_wifi])

    def mask(self) -> torch.Tensor:
        m = torch.zeros(self.num_wifi + self.num_vision, dtype=torch.bool)
        m[torch.as_tensor(self.joint_positions, dtype=torch.long)] = True
        return m


def plan_mask(num_wifi: int, num_vision: int, alpha: float, seed: int) -> MaskPlan:
    """Uniform random masked positions, drawn without replacement per modality."""
    if not 0.0 < alpha < 1.0:
        raise ArgumentError(f"mask ratio must be in (0, 1), got {alpha}")
    rng = np.random.default_rng(seed)
    wifi = np.sort(rng.choice(num_wifi, size=mask_count(alpha, num_wifi), replace=False))
    vision = np.sort(rng.choice(num_vision, size=mask_count(alpha, num_vision), replace=False))
    return MaskPlan(wifi.astype(np.int64), vision.astype(np.int64), alpha, seed, num_wifi, num_vision)


def sample_masks(batch: int, num_wifi: int, num_vision: int, alpha: float,
                 generator: torch.Generator) -> torch.Tensor:
    """Fresh per-sample plans as a boolean (B, N_w + N_v) mask."""
    parts = []
    for n in (num_wifi, num_vision):
        k = mask_count(alpha, n)
        rank = torch.rand(batch, n, generator=generator).argsort(dim=1).argsort(dim=1)
        parts.append(rank < k)
    return torch.cat(parts, dim=1)


def attention(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor, d_k: int) -> torch.Tensor:
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(d_k)) V`` over the key axis."""
    if d_k <= 0:
        raise ShapeError(f"d_k must be positive, got {d_k}")
    if queries.shape[-1] != keys.shape[-1]:
        raise ShapeError(f"query width {queries.shape[-1]} != key width {keys.shape[-1]}")
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeError(f"{keys.shape[-2]} keys but {values.shape[-2]} values")
    scores = queries @ keys.transpose(-2, -1) / math.sqrt(d_k)
    return torch.softmax(scores, dim=-1) @ values


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ConfigurationError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.d_k = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, d = x.shape

        def split(t):
            return t.reshape(B, N, self.heads, self.d_k).transpose(1, 2)

        s = attention(split(self.q(x)), split(self.k(x)), split(self.v(x)), self.d_k)
        return self.out(s.transpose(1, 2).reshape(B, N, d))


class Block(nn.Module):
    # each sublayer is followed by its layer norm (post-norm)
    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.attn = SelfAttention(d, heads)
        self.norm1 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ffn), nn.GELU(), nn.Linear(ffn, d))
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ff(x))


@dataclass(frozen=True)
class EncoderArch:
    geometry: PatchGeometry = field(default_factory=PatchGeometry)
    width: int = 384
    layers: int = 6
    heads: int = 6
    ffn_mult: int = 4
    wifi_codebook: int = 8192
    vision_codebook: int = 8192

    def to_dict(self) -> dict:
        return {"geometry": self.geometry.to_dict(), "width": self.width, "layers": self.layers,
                "heads": self.heads, "ffn_mult": self.ffn_mult, "wifi_codebook": self.wifi_codebook,
                "vision_codebook": self.vision_codebook}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderArch":
        d = dict(d)
        d["geometry"] = PatchGeometry.from_dict(d["geometry"])
        return cls(**d)


class MaskedEncoder(nn.Module):
    """Patch embeddings, mask/positional/modality embeddings, transformer stack and token heads."""

    def __init__(self, arch: EncoderArch):
        super().__init__()
        self.arch = arch
        g, d = arch.geometry, arch.width
        if d % arch.heads:
            raise ConfigurationError(f"width {d} not divisible by heads {arch.heads}")
        self.num_wifi, self.num_vision = g.num_wifi, g.num_vision
        self.wifi_embed = nn.Linear(g.patch_dim("wifi"), d)
        self.vision_embed = nn.Linear(g.patch_dim("vision"), d)
        self.mask_embedding = nn.Parameter(torch.zeros(d))
        self.pos_embedding = nn.Parameter(torch.zeros(g.num_positions, d))
        self.modality_embedding = nn.Parameter(torch.zeros(2, d))
        self.blocks = nn.ModuleList(Block(d, arch.heads, arch.ffn_mult * d) for _ in range(arch.layers))
        self.norm = nn.LayerNorm(d)
        self.wifi_head = nn.Linear(d, arch.wifi_codebook)
        self.vision_head = nn.Linear(d, arch.vision_codebook)
        nn.init.trunc_normal_(self.mask_embedding, std=0.02)
        nn.init.trunc_normal_(self.pos_embedding, std=0.02)
        nn.init.trunc_normal_(self.modality_embedding, std=0.02)

    @property
    def width(self) -> int:
        return self.arch.width

    def modality_ids(self) -> torch.Tensor:
        return torch.cat([torch.full((self.num_wifi,), WIFI), torch.full((self.num_vision,), VISION)])

    def embed(self, wifi_patches: torch.Tensor, vision_patches: torch.Tensor,
              mask: torch.Tensor | None = None) -> torch.Tensor:
        """(B, N_w, Dw), (B, N_v, Dv), optional bool (B, N) -> (B, N, d). WiFi positions come first."""
        tokens = torch.cat([self.wifi_embed(wifi_patches), self.vision_embed(vision_patches)], dim=1)
        if mask is not None:
            tokens = torch.where(mask[..., None], self.mask_embedding.expand_as(tokens), tokens)
        return tokens + self.pos_embedding + self.modality_embedding[self.modality_ids()]

    def encode(self, x: torch.Tensor, check: bool = False) -> torch.Tensor:
        for i, block in enumerate(self.blocks):
            x = block(x)
            if check and not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after block {i}")
        x = self.norm(x)
        if check and not torch.isfinite(x).all():
            raise NumericError("non-finite activations after final norm")
        return x

    def patches(self, csi: torch.Tensor, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        g = self.arch.geometry
        return patchify(csi, g.csi_patch), patchify(images, g.image_patch)

    def forward(self, csi: torch.Tensor, images: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        pw, pv = self.patches(csi, images)
        return self.encode(self.embed(pw, pv, mask))

    def masked_logits(self, hidden: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        Nw = self.num_wifi
        hw = hidden[:, :Nw][mask[:, :Nw]]
        hv = hidden[:, Nw:][mask[:, Nw:]]
        return self.wifi_head(hw), self.vision_head(hv)


EncoderParams = MaskedEncoder


# ---------------------------------------------------------------------------
# single-sample operations


@dataclass
class CorruptedSample:
    embeddings: torch.Tensor  # (N_w + N_v, d)
    mask: torch.Tensor  # bool (N_w + N_v,)
    plan: MaskPlan
    targets: torch.Tensor | None = None  # tokens at plan.joint_positions


def _frame_tensors(frame, params: MaskedEncoder):
    dtype = next(params.parameters()).dtype
    csi = torch.as_tensor(np.asarray(frame.csi)).to(dtype)
    img = torch.as_tensor(np.asarray(frame.image)).to(dtype)
    g = params.arch.geometry
    if tuple(csi.shape) != tuple(g.csi_shape) or tuple(img.shape) != tuple(g.image_shape):
        raise ValidationError(
            f"frame shapes csi {tuple(csi.shape)}, image {tuple(img.shape)} do not match "
            f"geometry {tuple(g.csi_shape)}, {tuple(g.image_shape)}"
        )
    return csi, img


def embed_and_corrupt(frame, plan: MaskPlan, params: MaskedEncoder, geometry: PatchGeometry | None = None,
                      tokens: torch.Tensor | None = None) -> CorruptedSample:
    geometry = geometry or params.arch.geometry
    if (plan.num_wifi, plan.num_vision) != (geometry.num_wifi, geometry.num_vision) \
            or geometry != params.arch.geometry:
        raise ValidationError(
            f"mask plan for ({plan.num_wifi}, {plan.num_vision}) patches does not match geometry "
            f"({geometry.num_wifi}, {geometry.num_vision})"
        )
    csi, img = _frame_tensors(frame, params)
    pw, pv = params.patches(csi[None], img[None])
    mask = plan.mask()
    emb = params.embed(pw, pv, mask[None])[0]
    targets = None
    if tokens is not None:
        targets = torch.as_tensor(tokens)[torch.as_tensor(plan.joint_positions, dtype=torch.long)]
    return CorruptedSample(emb, mask, plan, targets)


def encode(sample: CorruptedSample | torch.Tensor, params: MaskedEncoder) -> torch.Tensor:
    x = sample.embeddings if isinstance(sample, CorruptedSample) else sample
    single = x.ndim == 2
    h = params.encode(x[None] if single else x, check=True)
    return h[0] if single else h


@dataclass
class TokenPredictions:
    wifi: torch.Tensor  # (|M_w|, V_w) probabilities
    vision: torch.Tensor  # (|M_v|, V_v)


def predict_tokens(hidden: torch.Tensor, params: MaskedEncoder, plan: MaskPlan) -> TokenPredictions:
    """Softmax token distributions at the masked positions, using each modality's own head."""
    if hidden.ndim != 2 or hidden.shape[0] != plan.num_wifi + plan.num_vision:
        raise ShapeError(f"hidden shape {tuple(hidden.shape)} incompatible with plan")
    mask = plan.mask()[None]
    lw, lv = params.masked_logits(hidden[None], mask)
    return TokenPredictions(torch.softmax(lw, dim=-1), torch.softmax(lv, dim=-1))


def mi2m_loss(predictions: TokenPredictions | Sequence[torch.Tensor], targets) -> torch.Tensor:
    """Negative mean log-probability of the target tokens over all masked positions.

    ``targets`` is either a (wifi_targets, vision_targets) pair or one tensor laid
    out as WiFi masked positions followed by vision masked positions.
    """
    if isinstance(predictions, TokenPredictions):
        probs = [predictions.wifi, predictions.vision]
    else:
        probs = list(predictions)
    if isinstance(targets, torch.Tensor) or isinstance(targets, np.ndarray):
        t = torch.as_tensor(targets, dtype=torch.long)
        sizes = [p.shape[0] for p in probs]
        if t.shape[0] != sum(sizes):
            raise ValidationError(f"{t.shape[0]} targets for {sum(sizes)} masked positions")
        targets = list(torch.split(t, sizes))
    logps = []
    for p, t in zip(probs, targets):
        t = torch.as_tensor(t, dtype=torch.long)
        if p.shape[0] != t.shape[0]:
            raise ValidationError(f"{t.shape[0]} targets for {p.shape[0]} masked positions")
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= p.shape[-1]):
            raise ValidationError(f"target token out of codebook range [0, {p.shape[-1]})")
        logps.append(torch.log(p.gather(-1, t[:, None])[:, 0]))
    logp = torch.cat(logps)
    if logp.numel() == 0:
        raise ValidationError("mi2m_loss needs at least one masked position")
    return -logp.mean()


def masked_token_loss(params: MaskedEncoder, hidden: torch.Tensor, mask: torch.Tensor,
                      wifi_tokens: torch.Tensor, vision_tokens: torch.Tensor) -> torch.Tensor:
    """Batched, log-softmax form of ``mi2m_loss`` used in training."""
    Nw = params.num_wifi
    lw, lv = params.masked_logits(hidden, mask)
    tw = wifi_tokens[mask[:, :Nw]]
    tv = vision_tokens[mask[:, Nw:]]
    nll = F.cross_entropy(lw, tw, reduction="sum") + F.cross_entropy(lv, tv, reduction="sum")
    return nll / (tw.numel() + tv.numel())


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainSchedule:
    lr: float = 5e-4
    batch_size: int = 128
    epochs: int = 80
    mask_ratio: float = 0.4
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class PretrainTrace:
    rows: list[tuple[int, int, float]] = field(default_factory=list)  # (epoch, step, masked_loss)
    epoch_loss: list[float] = field(default_factory=list)


def check_compatible(tokenizers: tuple[Tokenizer, Tokenizer], params: MaskedEncoder) -> None:
    g = params.arch.geometry
    wifi, vision = tokenizers
    problems = []
    if wifi.modality != "wifi" or vision.modality != "vision":
        problems.append("tokenizers must be ordered (wifi, vision)")
    if tuple(wifi.patch) != g.csi_patch or tuple(wifi.frame_shape) != g.csi_shape:
        problems.append(f"wifi tokenizer {wifi.frame_shape}/{wifi.patch} vs encoder {g.csi_shape}/{g.csi_patch}")
    if tuple(vision.patch) != g.image_patch or tuple(vision.frame_shape) != g.image_shape:
        problems.append(
            f"vision tokenizer {vision.frame_shape}/{vision.patch} vs encoder {g.image_shape}/{g.image_patch}")
    if wifi.codebook_size != params.arch.wifi_codebook or vision.codebook_size != params.arch.vision_codebook:
        problems.append("codebook sizes differ between tokenizers and prediction heads")
    if problems:
        raise ConfigurationError("; ".join(problems))


def make_optimizer(params: nn.Module, lr: float, weight_decay: float = 0.0) -> torch.optim.Adam:
    return torch.optim.Adam(params.parameters(), lr=lr, weight_decay=weight_decay)


def _epoch_generators(seed: int, epoch: int) -> tuple[torch.Generator, torch.Generator]:
    # Per-epoch streams so a resumed run draws the same orders and masks.
    ss = np.random.SeedSequence([int(seed), int(epoch)]).generate_state(2, dtype=np.uint32)
    return torch_generator(int(ss[0])), torch_generator(int(ss[1]))


def pretrain(csi, images, tokenizers: tuple[Tokenizer, Tokenizer], params: MaskedEncoder,
             schedule: PretrainSchedule | None = None, *, optimizer: torch.optim.Optimizer | None = None,
             start_epoch: int = 0, trace: PretrainTrace | None = None,
             on_epoch: Callable[[int, MaskedEncoder, torch.optim.Optimizer, PretrainTrace], None] | None = None,
             target_tokens: tuple[torch.Tensor, torch.Tensor] | None = None,
             ) -> tuple[MaskedEncoder, PretrainTrace]:
    """Masked-token pretraining over single frames.

    ``csi`` is (M, A, S, P) and ``images`` (M, C, H, W) for the pretraining frames.
    Targets are tokenized once up front; every epoch draws a fresh order and fresh
    per-sample mask plans. ``on_epoch`` is called after each epoch (checkpointing).
    """
    schedule = schedule or PretrainSchedule()
    check_compatible(tokenizers, params)
    if not 0.0 < schedule.mask_ratio < 1.0:
        raise ArgumentError(f"mask ratio must be in (0, 1), got {schedule.mask_ratio}")
    dtype = next(params.parameters()).dtype
    csi = torch.as_tensor(np.asarray(csi)).to(dtype)
    images = torch.as_tensor(np.asarray(images)).to(dtype)
    M = csi.shape[0]
    if M == 0 or images.shape[0] != M:
        raise ArgumentError("pretrain needs a non-empty set of paired frames")
    if target_tokens is None:
        target_tokens = (tokenize_batch(csi, tokenizers[0]), tokenize_batch(images, tokenizers[1]))
    tok_w, tok_v = target_tokens
    pw, pv = params.patches(csi, images)
    optimizer = optimizer or make_optimizer(params, schedule.lr, schedule.weight_decay)
    trace = trace or PretrainTrace()
    bs = min(schedule.batch_size, M)
    steps = math.ceil(M / bs)
    step = start_epoch * steps
    params.train()
    for epoch in range(start_epoch, schedule.epochs):
        order_gen, mask_gen = _epoch_generators(schedule.seed, epoch)
        order = torch.randperm(M, generator=order_gen)
        losses = []
        for k in range(steps):
            idx = order[k * bs : (k + 1) * bs]
            mask = sample_masks(len(idx), params.num_wifi, params.num_vision, schedule.mask_ratio, mask_gen)
            hidden = params.encode(params.embed(pw[idx], pv[idx], mask))
            loss = masked_token_loss(params, hidden, mask, tok_w[idx], tok_v[idx])
            if not torch.isfinite(loss):
                raise NumericError(f"masked loss non-finite at epoch {epoch} step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            value = float(loss.item())
            losses.append(value)
            trace.rows.append((epoch, step, value))
            step += 1
        trace.epoch_loss.append(float(np.mean(losses)))
        log.info("pretrain epoch %d/%d masked loss %.4f", epoch + 1, schedule.epochs, trace.epoch_loss[-1])
        if on_epoch is not None:
            on_epoch(epoch, params, optimizer, trace)
    params.eval()
    return params, trace


# ---------------------------------------------------------------------------
# checkpoint


def save_encoder(path, params: MaskedEncoder, epoch: int = 0, optimizer: torch.optim.Optimizer | None = None,
                 extra: dict | None = None) -> None:
    header = {"kind": "encoder", "arch": params.arch.to_dict(), "epoch": int(epoch),
              "dtype": str(next(params.parameters()).dtype).replace("torch.", "")}
    arrays: dict[str, object] = {f"param.{k}": v for k, v in params.state_dict().items()}
    if optimizer is not None:
        state = optimizer.state_dict()
        header["optimizer"] = {"param_groups": state["param_groups"]}
        for idx in sorted(state["state"]):
            for key, value in sorted(state["state"][idx].items()):
                arrays[f"opt.{idx}.{key}"] = value
    if extra:
        header["extra"] = extra
    blob.write_blob(path, ENCODER_MAGIC, header, arrays)


def load_encoder(path, optimizer_lr: float | None = None
                 ) -> tuple[MaskedEncoder, dict, torch.optim.Optimizer | None]:
    header, arrays = blob.read_blob(path, ENCODER_MAGIC)
    params = MaskedEncoder(EncoderArch.from_dict(header["arch"]))
    params.to(getattr(torch, header.get("dtype", "float32")))
    params.load_state_dict({k[6:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param.")})
    params.eval()
    optimizer = None
    if "optimizer" in header:
        groups = header["optimizer"]["param_groups"]
        optimizer = make_optimizer(params, optimizer_lr or groups[0]["lr"])
        state: dict[int, dict] = {}
        for k, v in arrays.items():
            if k.startswith("opt."):
                _, idx, key = k.split(".", 2)
                state.setdefault(int(idx), {})[key] = torch.from_numpy(v)
        for g in groups:
            g["betas"] = tuple(g["betas"])
        optimizer.load_state_dict({"state": state, "param_groups": groups})
    return params, header, optimizer
