"""Small post-layer-norm transformer encoder with MLM and classification heads.

Parameters are created in a fixed order (the order of ``named_parameters()``), which is
also the tensor order inside checkpoint files:

    embeddings.token, embeddings.position, embeddings.segment, embeddings.norm.{weight,bias}
    layers.{i}.{query,key,value,attn_out}.{weight,bias}, layers.{i}.attn_norm.{weight,bias},
    layers.{i}.ffn_in.{weight,bias}, layers.{i}.ffn_out.{weight,bias}, layers.{i}.ffn_norm.{weight,bias}
    mlm.transform.{weight,bias}, mlm.norm.{weight,bias}, [mlm.decoder (untied only)], mlm.bias
    classifier.hidden.{weight,bias}, classifier.out.{weight,bias}
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tokenizer import NUM_SPECIAL, PAD_ID, EncodedPair

logger = logging.getLogger(__name__)

MAGIC = b"BRKDNLAB"
FORMAT_VERSION = 1
PROB_FLOOR = 1e-12


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_len: int = 128
    hidden_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 512
    dropout_rate: float = 0.1
    num_labels: int = 3
    tie_mlm: bool = True
    seed: int = 0

    def errors(self, prefix: str = "") -> list[str]:
        errs = []
        for name in ("vocab_size", "max_len", "hidden_dim", "num_layers", "num_heads", "ffn_dim"):
            if getattr(self, name) <= 0:
                errs.append(f"{prefix}{name}: must be positive, got {getattr(self, name)}")
        if self.vocab_size <= NUM_SPECIAL:
            errs.append(f"{prefix}vocab_size: must exceed the {NUM_SPECIAL} special tokens")
        if self.max_len < 8:
            errs.append(f"{prefix}max_len: must be at least 8, got {self.max_len}")
        if self.num_heads > 0 and self.hidden_dim % self.num_heads:
            errs.append(
                f"{prefix}hidden_dim, {prefix}num_heads: hidden_dim ({self.hidden_dim}) "
                f"must be divisible by num_heads ({self.num_heads})"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            errs.append(f"{prefix}dropout_rate: must be in [0, 1), got {self.dropout_rate}")
        if self.num_labels != 3:
            errs.append(f"{prefix}num_labels: must be 3")
        return errs

    def validate(self) -> "ModelConfig":
        errs = self.errors()
        if errs:
            raise ModelError("; ".join(errs))
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


@dataclass
class Batch:
    input_ids: torch.Tensor
    segment_ids: torch.Tensor
    attention_mask: torch.Tensor

    def __len__(self) -> int:
        return self.input_ids.shape[0]


def collate(pairs: Sequence[EncodedPair], pad_to: int | None = None) -> Batch:
    """Stack pairs into a batch padded to the longest real length (or ``pad_to``)."""
    width = max(p.length for p in pairs)
    if pad_to is not None:
        width = max(width, pad_to)
    ids = np.full((len(pairs), width), PAD_ID, dtype=np.int64)
    segs = np.ones((len(pairs), width), dtype=np.int64)
    mask = np.zeros((len(pairs), width), dtype=np.int64)
    for row, p in enumerate(pairs):
        n = min(len(p.token_ids), width)
        ids[row, :n] = p.token_ids[:n]
        segs[row, :n] = p.segment_ids[:n]
        mask[row, :n] = p.attention_mask[:n]
    return Batch(torch.from_numpy(ids), torch.from_numpy(segs), torch.from_numpy(mask))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden_dim
        self.num_heads = cfg.num_heads
        self.query = nn.Linear(h, h)
        self.key = nn.Linear(h, h)
        self.value = nn.Linear(h, h)
        self.attn_out = nn.Linear(h, h)
        self.attn_norm = nn.LayerNorm(h, eps=1e-12)
        self.ffn_in = nn.Linear(h, cfg.ffn_dim)
        self.ffn_out = nn.Linear(cfg.ffn_dim, h)
        self.ffn_norm = nn.LayerNorm(h, eps=1e-12)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, t, h = x.shape
        d = h // self.num_heads

        def heads(proj: nn.Linear) -> torch.Tensor:
            return proj(x).view(b, t, self.num_heads, d).transpose(1, 2)

        q, k, v = heads(self.query), heads(self.key), heads(self.value)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, h)
        x = self.attn_norm(x + self.dropout(self.attn_out(ctx)))
        ffn = self.ffn_out(F.gelu(self.ffn_in(x)))
        return self.ffn_norm(x + self.dropout(ffn))


class Embeddings(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.token = nn.Parameter(torch.empty(cfg.vocab_size, cfg.hidden_dim))
        self.position = nn.Parameter(torch.empty(cfg.max_len, cfg.hidden_dim))
        self.segment = nn.Parameter(torch.empty(2, cfg.hidden_dim))
        self.norm = nn.LayerNorm(cfg.hidden_dim, eps=1e-12)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, batch: Batch) -> torch.Tensor:
        t = batch.input_ids.shape[1]
        x = self.token[batch.input_ids] + self.position[:t][None] + self.segment[batch.segment_ids]
        return self.dropout(self.norm(x))


class MLMHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.transform = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.norm = nn.LayerNorm(cfg.hidden_dim, eps=1e-12)
        if not cfg.tie_mlm:
            self.decoder = nn.Parameter(torch.empty(cfg.vocab_size, cfg.hidden_dim))
        self.bias = nn.Parameter(torch.zeros(cfg.vocab_size))


class ClassifierHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.hidden = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.out = nn.Linear(cfg.hidden_dim, cfg.num_labels)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, cls_state: torch.Tensor) -> torch.Tensor:
        return self.out(self.dropout(torch.tanh(self.hidden(self.dropout(cls_state)))))


class BreakdownModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.embeddings = Embeddings(cfg)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))
        self.mlm = MLMHead(cfg)
        self.classifier = ClassifierHead(cfg)

    def check_batch(self, batch: Batch) -> None:
        if batch.input_ids.shape[1] > self.cfg.max_len:
            raise ModelError(f"sequence length {batch.input_ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        if batch.input_ids.numel() and (
            int(batch.input_ids.min()) < 0 or int(batch.input_ids.max()) >= self.cfg.vocab_size
        ):
            raise ModelError("token id out of vocabulary range")

    def encode(self, batch: Batch) -> torch.Tensor:
        self.check_batch(batch)
        x = self.embeddings(batch)
        key_mask = batch.attention_mask.bool()
        for layer in self.layers:
            x = layer(x, key_mask)
        return x

    def classify_logits(self, batch: Batch) -> torch.Tensor:
        return self.classifier(self.encode(batch)[:, 0])

    def decoder_weight(self) -> torch.Tensor:
        return self.embeddings.token if self.cfg.tie_mlm else self.mlm.decoder

    def mlm_logits(self, batch: Batch, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
        """Vocabulary logits at positions ``(rows[i], cols[i])``."""
        rows = torch.as_tensor(rows, dtype=torch.long)
        cols = torch.as_tensor(cols, dtype=torch.long)
        if rows.numel() == 0:
            return torch.zeros(0, self.cfg.vocab_size, dtype=self.embeddings.token.dtype)
        b, t = batch.input_ids.shape
        if int(rows.min()) < 0 or int(rows.max()) >= b or int(cols.min()) < 0 or int(cols.max()) >= t:
            raise ModelError("masked position out of range")
        if not bool(batch.attention_mask[rows, cols].all()):
            raise ModelError("masked position points at padding")
        hidden = self.encode(batch)[rows, cols]
        h = self.mlm.norm(F.gelu(self.mlm.transform(hidden)))
        return h @ self.decoder_weight().T + self.mlm.bias


def _trunc_normal(t: torch.Tensor, gen: torch.Generator, std: float = 0.02) -> None:
    with torch.no_grad():
        nn.init.trunc_normal_(t, mean=0.0, std=std, a=-2 * std, b=2 * std, generator=gen)


def init_params(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> BreakdownModel:
    """Truncated normal(0, 0.02) weights, zero biases, unit layer-norm scales; seeded by cfg.seed."""
    model = BreakdownModel(cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    for name, param in model.named_parameters():
        if name.endswith("norm.weight"):
            nn.init.ones_(param)
        elif name.endswith("bias"):
            nn.init.zeros_(param)
        else:
            _trunc_normal(param, gen)
    return model.to(dtype)


def reinit_classifier(model: BreakdownModel, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for name, param in model.classifier.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(param)
        else:
            _trunc_normal(param, gen)


# -- functional surface ----------------------------------------------------


@dataclass(frozen=True)
class ClassifierOutput:
    probs: tuple[float, float, float]
    logits: tuple[float, float, float]


def forward_encoder(model: BreakdownModel, batch: Batch, train: bool = False) -> torch.Tensor:
    model.train(train)
    return model.encode(batch)


def probs_from_logits(logits: torch.Tensor) -> np.ndarray:
    """Softmax in float64 so each row sums to 1 within 1e-12."""
    x = logits.detach().to(torch.float64)
    return torch.softmax(x, dim=-1).numpy()


def forward_classify(model: BreakdownModel, batch: Batch) -> list[ClassifierOutput]:
    model.eval()
    with torch.no_grad():
        logits = model.classify_logits(batch)
    probs = probs_from_logits(logits)
    lg = logits.to(torch.float64).numpy()
    return [ClassifierOutput(tuple(map(float, p)), tuple(map(float, l))) for p, l in zip(probs, lg)]


def forward_mlm(model: BreakdownModel, batch: Batch, rows, cols, train: bool = False) -> torch.Tensor:
    model.train(train)
    return model.mlm_logits(batch, rows, cols)


def kl_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of KL(target || softmax(logits)), with 0 log 0 = 0."""
    logq = torch.log_softmax(logits, dim=-1)
    floor = math.log(PROB_FLOOR)
    if bool(((target > 0) & (logq < floor)).any()):
        logger.warning("model probability below %g on a supported label; clamping", PROB_FLOOR)
        logq = torch.clamp(logq, min=floor)
    target = target.to(logq.dtype)
    return (torch.special.xlogy(target, target) - target * logq).sum(-1).mean()


def mlm_loss(logits: torch.Tensor, true_ids: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions; 0 when there are none."""
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, torch.as_tensor(true_ids, dtype=torch.long))


def loss_kl(output: ClassifierOutput, target) -> float:
    """KL(target || output.probs) for one example, computed in plain floats."""
    p = target.p if hasattr(target, "p") else target
    total = 0.0
    for pi, qi in zip(p, output.probs):
        if pi > 0:
            if qi < PROB_FLOOR:
                logger.warning("model probability %g below floor; clamping", qi)
                qi = PROB_FLOOR
            total += pi * (math.log(pi) - math.log(qi))
    return total


def loss_mlm(logits, true_ids) -> float:
    return float(mlm_loss(torch.as_tensor(logits), torch.as_tensor(true_ids)))


def backward(model: BreakdownModel, batch: Batch, loss_spec: dict, scale: float = 1.0) -> dict[str, torch.Tensor]:
    """Gradients of one loss w.r.t. every parameter tensor, keyed by parameter name.

    ``loss_spec`` is ``{"kind": "kl", "target": (B, 3) tensor}`` or
    ``{"kind": "mlm", "rows": ..., "cols": ..., "true_ids": ...}``. Dropout is off.
    """
    model.eval()
    model.zero_grad(set_to_none=False)
    if loss_spec["kind"] == "kl":
        loss = kl_loss(model.classify_logits(batch), loss_spec["target"])
    elif loss_spec["kind"] == "mlm":
        logits = model.mlm_logits(batch, loss_spec["rows"], loss_spec["cols"])
        loss = mlm_loss(logits, loss_spec["true_ids"])
    else:
        raise ValueError(f"unknown loss kind {loss_spec['kind']!r}")
    (loss * scale).backward()
    return {
        name: torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        for name, p in model.named_parameters()
    }


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(model: BreakdownModel, path: str | Path, vocab_sha256: str | None = None) -> None:
    """Magic, u32 version, u32 header length, JSON header, then little-endian float32 tensors."""
    tensors = list(model.named_parameters())
    header = {
        "config": model.cfg.to_json(),
        "tensors": [[name, list(p.shape)] for name, p in tensors],
    }
    if vocab_sha256 is not None:
        header["vocab_sha256"] = vocab_sha256
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        f.write(head)
        for _, p in tensors:
            f.write(p.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as f:
        prefix = f.read(len(MAGIC) + 8)
        if len(prefix) < len(MAGIC) + 8 or prefix[: len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, head_len = struct.unpack("<II", prefix[len(MAGIC):])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        head = f.read(head_len)
    if len(head) != head_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        return json.loads(head)
    except json.JSONDecodeError:
        raise CheckpointError(f"{path}: corrupt header") from None


def load_checkpoint(
    path: str | Path, expect: ModelConfig | None = None, vocab_sha256: str | None = None
) -> tuple[BreakdownModel, ModelConfig]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    raw = path.read_bytes()
    header = read_checkpoint_header(path)
    cfg = ModelConfig.from_json(header["config"])
    if expect is not None:
        diffs = [
            f.name
            for f in fields(ModelConfig)
            if f.name not in ("seed", "dropout_rate") and getattr(cfg, f.name) != getattr(expect, f.name)
        ]
        if diffs:
            raise CheckpointError(f"{path}: checkpoint config differs in {', '.join(diffs)}")
    stored_vocab = header.get("vocab_sha256")
    if vocab_sha256 is not None and stored_vocab is not None and stored_vocab != vocab_sha256:
        raise CheckpointError(f"{path}: checkpoint was trained with a different vocabulary")
    model = BreakdownModel(cfg)
    params = dict(model.named_parameters())
    expected = [[n, list(p.shape)] for n, p in params.items()]
    if header["tensors"] != expected:
        raise CheckpointError(f"{path}: tensor layout does not match its config")
    offset = len(MAGIC) + 8 + struct.unpack("<I", raw[len(MAGIC) + 4 : len(MAGIC) + 8])[0]
    total = sum(p.numel() for p in params.values()) * 4
    if len(raw) - offset != total:
        raise CheckpointError(f"{path}: truncated or oversized tensor data ({len(raw) - offset} of {total} bytes)")
    with torch.no_grad():
        for name, p in params.items():
            n = p.numel()
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(p.shape)
            p.copy_(torch.from_numpy(arr.astype(np.float32)))
            offset += n * 4
    return model, cfg
