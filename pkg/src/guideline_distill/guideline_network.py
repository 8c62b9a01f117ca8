"""Teacher network: 3D patch adapter -> image encoder -> projection -> causal decoder.

Image tokens are prepended to the text tokens of an instruction. Stage one
trains the adapter, the projection and every additive bias in the decoder;
stage two freezes the adapter. Guideline-conditioned features are the mean of
the decoder's final hidden states over all positions.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data_synth import KIND_ORDER, TOY_SHAPE, SequenceKind, Volume, generate_sample
from .domain_adapter import DomainAdapter, inflate_2d_to_3d, n_tokens, pretrain_patch_embed_2d
from .errors import ConfigError, SequenceLengthError, ShapeError, StateError
from .instructions import InstructionRecord, Tokenizer


@dataclass
class GuidelineNetConfig:
    encoder_layers: int = 4
    encoder_dim: int = 128
    encoder_heads: int = 4
    decoder_layers: int = 4
    decoder_dim: int = 128
    decoder_heads: int = 4
    vocab_size: int = 512
    max_seq_len: int = 512
    patch_k: int = 4
    patch_depth: int = 4
    volume_shape: tuple[int, int, int] = TOY_SHAPE
    mlp_ratio: int = 4

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        if self.encoder_dim % self.encoder_heads or self.decoder_dim % self.decoder_heads:
            raise ConfigError("model dims must be divisible by their head counts")
        n_tokens(self.volume_shape, self.kernel)

    @property
    def kernel(self) -> tuple[int, int, int]:
        return (self.patch_depth, self.patch_k, self.patch_k)

    @property
    def tokens_per_volume(self) -> int:
        return n_tokens(self.volume_shape, self.kernel)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["volume_shape"] = list(self.volume_shape)
        return d


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(n, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return table.float()


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, causal: bool) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
        if causal:
            mask = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        att = scores.softmax(dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), causal)
        return x + self.mlp(self.ln2(x))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: GuidelineNetConfig):
        super().__init__()
        self.blocks = nn.ModuleList(Block(cfg.encoder_dim, cfg.encoder_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_layers))
        self.ln = nn.LayerNorm(cfg.encoder_dim)
        self.register_buffer("pos", sinusoidal_positions(cfg.tokens_per_volume, cfg.encoder_dim), persistent=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens + self.pos
        for block in self.blocks:
            x = block(x)
        return self.ln(x)


class TextDecoder(nn.Module):
    def __init__(self, cfg: GuidelineNetConfig):
        super().__init__()
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.decoder_dim)
        self.text_pos = nn.Embedding(cfg.max_seq_len, cfg.decoder_dim)
        self.blocks = nn.ModuleList(Block(cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_layers))
        self.ln_f = nn.LayerNorm(cfg.decoder_dim)
        self.lm_head = nn.Linear(cfg.decoder_dim, cfg.vocab_size)
        self.register_buffer("image_pos", sinusoidal_positions(cfg.max_seq_len, cfg.decoder_dim), persistent=False)

    def forward(self, image_tokens: torch.Tensor, text_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (logits, final hidden states) over the combined sequence."""
        n_img, n_txt = image_tokens.shape[1], text_ids.shape[1]
        img = image_tokens + self.image_pos[:n_img]
        txt = self.tok_emb(text_ids) + self.text_pos.weight[:n_txt]
        x = torch.cat([img, txt], dim=1)
        for block in self.blocks:
            x = block(x, causal=True)
        hidden = self.ln_f(x)
        return self.lm_head(hidden), hidden


class GuidelineNetwork(nn.Module):
    def __init__(self, cfg: GuidelineNetConfig):
        super().__init__()
        self.cfg = cfg
        self.adapter = DomainAdapter(1, cfg.encoder_dim, cfg.kernel)
        self.encoder = ImageEncoder(cfg)
        self.projection = nn.Linear(cfg.encoder_dim, cfg.decoder_dim)
        self.decoder = TextDecoder(cfg)
        self.stage = "init"
        self.apply(_init_weights)

    def encode_images(self, volumes: torch.Tensor) -> torch.Tensor:
        """E(C3D(M)) for a (B, S, D, H, W) batch -> (B, S * tokens_per_volume, encoder_dim)."""
        if volumes.ndim != 5 or tuple(volumes.shape[2:]) != self.cfg.volume_shape:
            raise ShapeError(f"expected (B, S, *{self.cfg.volume_shape}), got {tuple(volumes.shape)}")
        b, s = volumes.shape[:2]
        tokens = self.adapter(volumes.reshape(b * s, 1, *volumes.shape[2:]))
        return self.encoder(tokens).reshape(b, s * tokens.shape[1], -1)

    def visual_prompt(self, volumes: torch.Tensor) -> torch.Tensor:
        """I = P(E(C3D(M)))."""
        return self.projection(self.encode_images(volumes))

    def forward(self, prompt: torch.Tensor, text_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if prompt.shape[1] + text_ids.shape[1] > self.cfg.max_seq_len:
            raise SequenceLengthError(
                f"{prompt.shape[1]} image + {text_ids.shape[1]} text tokens exceed max_seq_len {self.cfg.max_seq_len}"
            )
        return self.decoder(prompt, text_ids)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Embedding)):
        nn.init.normal_(module.weight, std=0.02)
        if getattr(module, "bias", None) is not None:
            nn.init.zeros_(module.bias)


def pretraining_slices(n_samples: int = 48, shape=TOY_SHAPE, seed: int = 1_000_003) -> np.ndarray:
    """2D slices from a held-apart synthetic corpus used to fit the 2D patch stem."""
    out = []
    for i in range(n_samples):
        sample = generate_sample(seed, "pretrain", i, [0.2] * 5, shape)
        for kind in KIND_ORDER:
            out.extend(sample.volumes[kind].data)
    return np.stack(out)


def build_guideline_network(cfg: GuidelineNetConfig, seed: int = 0) -> GuidelineNetwork:
    """Fresh teacher: random transformer weights plus an inflated, data-fitted 2D patch stem."""
    torch.manual_seed(seed)
    model = GuidelineNetwork(cfg)
    w2d = pretrain_patch_embed_2d(pretraining_slices(shape=cfg.volume_shape), cfg.encoder_dim, cfg.patch_k, seed=seed)
    with torch.no_grad():
        w3d = inflate_2d_to_3d(w2d, cfg.patch_depth)
        model.adapter.proj.weight.copy_(torch.from_numpy(w3d.kernel))
        model.adapter.proj.bias.copy_(torch.from_numpy(w3d.bias))
    return model


# ---------------------------------------------------------------- trainable policy

STAGE1, STAGE2 = "stage1", "stage2"


def is_trainable(name: str, stage: str) -> bool:
    """Trainable-parameter policy. Only additive bias vectors count as decoder biases."""
    decoder_bias = name.startswith("decoder.") and name.endswith(".bias")
    if stage == STAGE1:
        return name.startswith("adapter.") or name.startswith("projection.") or decoder_bias
    if stage == STAGE2:
        return name.startswith("projection.") or decoder_bias
    raise ValueError(f"unknown stage {stage!r}")


def apply_policy(model: GuidelineNetwork, stage: str) -> list[str]:
    names = []
    for name, p in model.named_parameters():
        p.requires_grad_(is_trainable(name, stage))
        if p.requires_grad:
            names.append(name)
    return names


# ---------------------------------------------------------------- text batching

@dataclass
class TextBatch:
    ids: torch.Tensor  # (B, T) text ids: BOS prompt target EOS, right padded
    labels: torch.Tensor  # (B, T) next-token labels, -100 where unsupervised
    mask: torch.Tensor  # (B, T) real (non-pad) positions
    lengths: list[int] = field(default_factory=list)


def make_text_batch(records: Sequence[InstructionRecord], tokenizer: Tokenizer, include_target: bool = True) -> TextBatch:
    rows, labels = [], []
    for rec in records:
        prompt = [tokenizer.BOS] + tokenizer.tokenize(rec.prompt)
        target = tokenizer.tokenize(rec.target) if include_target else []
        if target:
            target = target + [tokenizer.EOS]
        ids = prompt + target
        # position t predicts ids[t + 1]; supervise only target (and EOS) predictions
        lab = [-100] * (len(prompt) - 1) + target + [-100]
        rows.append(ids)
        labels.append(lab)
    width = max(len(r) for r in rows)
    ids = torch.full((len(rows), width), tokenizer.PAD, dtype=torch.long)
    lab = torch.full((len(rows), width), -100, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.bool)
    for i, (r, l) in enumerate(zip(rows, labels)):
        ids[i, : len(r)] = torch.tensor(r)
        lab[i, : len(l)] = torch.tensor(l)
        mask[i, : len(r)] = True
    return TextBatch(ids, lab, mask, [len(r) for r in rows])


def captioning_loss(text_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over supervised positions (0 when there are none)."""
    if not (labels != -100).any():
        return text_logits.sum() * 0.0
    return F.cross_entropy(text_logits.reshape(-1, text_logits.shape[-1]), labels.reshape(-1), ignore_index=-100)


@dataclass
class TeacherOutput:
    log_probs: torch.Tensor  # (B, n_img + T, V)
    loss: torch.Tensor
    n_supervised: int
    hidden: torch.Tensor


def volumes_tensor(volumes: Mapping[SequenceKind, Volume] | Sequence[Volume] | Volume | np.ndarray) -> torch.Tensor:
    """(S, D, H, W) tensor; multi-sequence input is ordered T2W, ADC, DWI."""
    if isinstance(volumes, Volume):
        arrays = [volumes.data]
    elif isinstance(volumes, Mapping):
        arrays = [volumes[k].data for k in KIND_ORDER if k in volumes]
    elif isinstance(volumes, np.ndarray):
        arrays = [volumes] if volumes.ndim == 3 else list(volumes)
    else:
        arrays = [v.data for v in volumes]
    return torch.from_numpy(np.stack(arrays).astype(np.float32))


def encode_visual_prompt(model: GuidelineNetwork, volumes) -> torch.Tensor:
    """Visual prompt (n_tokens, decoder_dim) for one sample."""
    with torch.no_grad():
        return model.visual_prompt(volumes_tensor(volumes)[None])[0]


def forward_teacher(
    model: GuidelineNetwork,
    records: InstructionRecord | Sequence[InstructionRecord],
    prompts: torch.Tensor,
    tokenizer: Tokenizer,
) -> TeacherOutput:
    """Teacher-forced pass over image tokens followed by instruction text."""
    if isinstance(records, InstructionRecord):
        records, prompts = [records], prompts[None]
    batch = make_text_batch(records, tokenizer)
    logits, hidden = model(prompts, batch.ids)
    n_img = prompts.shape[1]
    loss = captioning_loss(logits[:, n_img:], batch.labels)
    return TeacherOutput(logits.log_softmax(-1), loss, int((batch.labels != -100).sum()), hidden)


def mean_pool(hidden: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Average over the position axis (second to last), honoring an optional mask."""
    hidden = torch.as_tensor(hidden)
    if mask is None:
        return hidden.mean(dim=-2)
    m = mask.to(hidden.dtype).unsqueeze(-1)
    return (hidden * m).sum(dim=-2) / m.sum(dim=-2)


def extract_picg_features(
    model: GuidelineNetwork,
    records: InstructionRecord | Sequence[InstructionRecord],
    prompts: torch.Tensor,
    tokenizer: Tokenizer,
    allow_untrained: bool = False,
) -> torch.Tensor:
    """Mean of final decoder hidden states over image, prompt and caption positions.

    Raises StateError unless the model finished stage two (the untrained
    reference arm passes ``allow_untrained``).
    """
    if model.stage != STAGE2 and not allow_untrained:
        raise StateError(f"feature extraction needs a stage-2 model, this one is at {model.stage!r}")
    single = isinstance(records, InstructionRecord)
    if single:
        records, prompts = [records], prompts[None]
    batch = make_text_batch(records, tokenizer)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        _, hidden = model(prompts, batch.ids)
    model.train(was_training)
    n_img = prompts.shape[1]
    mask = torch.cat([torch.ones(len(records), n_img, dtype=torch.bool), batch.mask], dim=1)
    feats = mean_pool(hidden, mask)
    return feats[0] if single else feats


def generate(
    model: GuidelineNetwork,
    records: Sequence[InstructionRecord],
    prompts: torch.Tensor,
    tokenizer: Tokenizer,
    max_new: int,
) -> list[str]:
    """Greedy decoding of one answer per record; prompts of a call must share a length."""
    batch = make_text_batch(records, tokenizer, include_target=False)
    if len(set(batch.lengths)) != 1:
        return [generate(model, [r], p[None], tokenizer, max_new)[0] for r, p in zip(records, prompts)]
    ids = batch.ids
    done = torch.zeros(len(records), dtype=torch.bool)
    out: list[list[int]] = [[] for _ in records]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for _ in range(max_new):
            logits, _ = model(prompts, ids)
            nxt = logits[:, -1].argmax(-1)
            for i, t in enumerate(nxt.tolist()):
                if not done[i]:
                    if t == tokenizer.EOS:
                        done[i] = True
                    else:
                        out[i].append(t)
            if bool(done.all()):
                break
            ids = torch.cat([ids, nxt[:, None]], dim=1)
    model.train(was_training)
    return [tokenizer.detokenize(o) for o in out]


def generate_caption(
    model: GuidelineNetwork, record: InstructionRecord, prompt: torch.Tensor, tokenizer: Tokenizer, max_new: int = 48
) -> str:
    if max_new <= 0:
        return ""
    return generate(model, [record], prompt[None], tokenizer, max_new)[0]
