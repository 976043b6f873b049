"""
Encoder-decoder models and the training recipe.

Two families:
  recurrent   — bidirectional GRU encoder, additive attention, GRU decoder
  transformer — post-norm encoder/decoder stacks, sinusoidal positions

Training:
  1. Build vocabularies from the (interleaved, BPE-applied) training data
  2. Token-capped, length-sorted minibatches, shuffled per epoch with the run seed
  3. Adam + inverse-square-root schedule with linear warm-up
  4. Label-smoothed cross-entropy; validation every N minibatches
  5. Early stopping on dev perplexity, checkpoint selection on dev BLEU
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from errors import ConfigError, DataError, DivergenceError
import utils

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

FAMILIES = ("recurrent", "transformer")
RECURRENT_GRID = {(1024, 512), (512, 512), (512, 256), (256, 256)}
TRANSFORMER_GRID = {(512, 6, 8), (256, 4, 4), (128, 2, 2)}
DEFAULT_BASE_LR = {"recurrent": 0.0004, "transformer": 0.0003}

CHECKPOINT_FORMAT = "interleave-mt-checkpoint"
CHECKPOINT_VERSION = 1


# ─── Vocabulary ───────────────────────────────────────────────────────────────

class Vocabulary:
    """Symbol ↔ index bijection. Indices 0-3 are <pad> <s> </s> <unk>."""

    pad_id, bos_id, eos_id, unk_id = PAD_ID, BOS_ID, EOS_ID, UNK_ID

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if tuple(symbols[:4]) != RESERVED:
            raise DataError(f"vocabulary must start with {RESERVED}, got {symbols[:4]}")
        if len(set(symbols)) != len(symbols):
            raise DataError("vocabulary contains duplicate symbols")
        self.itos: List[str] = symbols
        self.stoi: Dict[str, int] = {s: i for i, s in enumerate(symbols)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def index(self, symbol: str) -> int:
        return self.stoi.get(symbol, UNK_ID)

    def encode(self, tokens: Sequence[str], add_eos: bool = False) -> List[int]:
        ids = [self.index(t) for t in tokens]
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.itos[i] for i in ids]


def build_vocab(corpus: Iterable[Sequence[str]]) -> Vocabulary:
    """Every observed symbol, ordered by frequency (desc) then lexicographically."""
    counts = Counter(tok for tokens in corpus for tok in tokens if tok not in RESERVED)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ordered = sorted(counts, key=lambda s: (-counts[s], s))
    return Vocabulary(list(RESERVED) + ordered)


# ─── Configuration ────────────────────────────────────────────────────────────

@dataclass
class ModelConfig:
    family: str = "transformer"
    hidden_size: Optional[int] = None
    embed_size: Optional[int] = None
    model_dim: Optional[int] = None
    layers: Optional[int] = None
    heads: Optional[int] = None
    tied_embeddings: bool = True
    dropout: float = 0.1
    label_smoothing: float = 0.1
    # refuse sizes outside the published grids
    strict_grid: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r} (expected one of {FAMILIES})")
        recurrent = (self.hidden_size, self.embed_size)
        transformer = (self.model_dim, self.layers, self.heads)
        if self.family == "recurrent":
            if any(v is not None for v in transformer):
                raise ConfigError("recurrent model given transformer sizes (model_dim/layers/heads)")
            if self.hidden_size is None:
                self.hidden_size = 64
            if self.embed_size is None:
                self.embed_size = 32
        else:
            if any(v is not None for v in recurrent):
                raise ConfigError("transformer model given recurrent sizes (hidden_size/embed_size)")
            self.model_dim = 64 if self.model_dim is None else self.model_dim
            self.layers = 2 if self.layers is None else self.layers
            self.heads = 2 if self.heads is None else self.heads
            if self.model_dim % self.heads or self.model_dim % 2:
                raise ConfigError(
                    f"model_dim {self.model_dim} must be even and divisible by heads {self.heads}"
                )
        if any(v is not None and v < 1 for v in self.sizes):
            raise ConfigError(f"model sizes must be positive, got {self.sizes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.strict_grid and not self.on_published_grid:
            raise ConfigError(f"{self.family} sizes {self.sizes} are not on the published grid")

    @property
    def sizes(self) -> Tuple[int, ...]:
        if self.family == "recurrent":
            return (self.hidden_size, self.embed_size)
        return (self.model_dim, self.layers, self.heads)

    @property
    def on_published_grid(self) -> bool:
        grid = RECURRENT_GRID if self.family == "recurrent" else TRANSFORMER_GRID
        return self.sizes in grid


@dataclass
class TrainingConfig:
    base_lr: Optional[float] = None  # None → family default
    warmup_steps: int = 8000
    validate_every: int = 1000
    patience: int = 10
    max_tokens: int = 4500
    adam_betas: Tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    clip_norm: float = 5.0
    max_steps: Optional[int] = None
    max_epochs: Optional[int] = None
    valid_beam: int = 1
    seed: int = 1

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        for name in ("warmup_steps", "validate_every", "max_tokens", "valid_beam"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        for name in ("max_steps", "max_epochs"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.base_lr is not None and self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")

    def for_family(self, family: str) -> "TrainingConfig":
        if self.base_lr is not None:
            return self
        return replace(self, base_lr=DEFAULT_BASE_LR[family])


def lr_at(step: int, cfg: TrainingConfig) -> float:
    """Linear warm-up to base_lr at warmup_steps, then inverse-square-root decay."""
    if step < 1:
        raise ValueError(f"learning-rate step must be >= 1, got {step}")
    if cfg.base_lr is None:
        raise ConfigError("base_lr is unset; call TrainingConfig.for_family first")
    warmup = cfg.warmup_steps
    return cfg.base_lr * min(step / warmup, math.sqrt(warmup / step))


# ─── Models ───────────────────────────────────────────────────────────────────

class RecurrentMemory(NamedTuple):
    annotations: torch.Tensor  # (B, S, 2H)
    keys: torch.Tensor         # (B, S, H)
    mask: torch.Tensor         # (B, S) True on real tokens
    state: torch.Tensor        # (B, H)

    def expand(self, k: int) -> "RecurrentMemory":
        return RecurrentMemory(*(t.expand(k, *t.shape[1:]) for t in self))


class TransformerMemory(NamedTuple):
    states: torch.Tensor    # (B, S, d)
    pad_mask: torch.Tensor  # (B, S) True on padding

    def expand(self, k: int) -> "TransformerMemory":
        return TransformerMemory(*(t.expand(k, *t.shape[1:]) for t in self))


class RecurrentSeq2Seq(nn.Module):
    def __init__(self, mcfg: ModelConfig, src_vocab_size: int, tgt_vocab_size: int):
        super().__init__()
        H, E = mcfg.hidden_size, mcfg.embed_size
        self.config = mcfg
        self.src_vocab_size = src_vocab_size
        self.tgt_vocab_size = tgt_vocab_size

        self.src_embed = nn.Embedding(src_vocab_size, E)
        self.tgt_embed = nn.Embedding(tgt_vocab_size, E)
        self.encoder = nn.GRU(E, H, batch_first=True, bidirectional=True)
        self.init_state = nn.Linear(2 * H, H)
        self.att_query = nn.Linear(H, H, bias=False)
        self.att_key = nn.Linear(2 * H, H)
        self.att_score = nn.Linear(H, 1, bias=False)
        self.cell = nn.GRUCell(E + 2 * H, H)
        self.readout = nn.Linear(H + 2 * H + E, E)
        self.generator = nn.Linear(E, tgt_vocab_size)
        if mcfg.tied_embeddings:
            self.generator.weight = self.tgt_embed.weight
        self.dropout = nn.Dropout(mcfg.dropout)

    def encode(self, src: torch.Tensor) -> RecurrentMemory:
        mask = src != PAD_ID
        lengths = mask.sum(dim=1)
        emb = self.dropout(self.src_embed(src))
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.encoder(packed)
        annotations, _ = pad_packed_sequence(out, batch_first=True, total_length=src.size(1))
        mean = (annotations * mask.unsqueeze(-1)).sum(dim=1) / lengths.unsqueeze(-1).to(annotations.dtype)
        state = torch.tanh(self.init_state(mean))
        return RecurrentMemory(annotations, self.att_key(annotations), mask, state)

    def decode(self, memory: RecurrentMemory, tgt_in: torch.Tensor) -> torch.Tensor:
        state = memory.state
        emb = self.dropout(self.tgt_embed(tgt_in))
        outputs = []
        for t in range(tgt_in.size(1)):
            y = emb[:, t]
            energy = torch.tanh(memory.keys + self.att_query(state).unsqueeze(1))
            scores = self.att_score(energy).squeeze(-1).masked_fill(~memory.mask, float("-inf"))
            alpha = torch.softmax(scores, dim=-1)
            ctx = torch.bmm(alpha.unsqueeze(1), memory.annotations).squeeze(1)
            state = self.cell(torch.cat([y, ctx], dim=-1), state)
            outputs.append(torch.tanh(self.readout(torch.cat([state, ctx, y], dim=-1))))
        return self.generator(self.dropout(torch.stack(outputs, dim=1)))

    def forward(self, src: torch.Tensor, tgt_in: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(src), tgt_in)


def sinusoid(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    position = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=dtype, device=device) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=dtype, device=device)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)
    return table


class TransformerSeq2Seq(nn.Module):
    def __init__(self, mcfg: ModelConfig, src_vocab_size: int, tgt_vocab_size: int):
        super().__init__()
        d, n_layers, heads = mcfg.model_dim, mcfg.layers, mcfg.heads
        self.config = mcfg
        self.src_vocab_size = src_vocab_size
        self.tgt_vocab_size = tgt_vocab_size
        self.scale = math.sqrt(d)

        self.src_embed = nn.Embedding(src_vocab_size, d)
        self.tgt_embed = nn.Embedding(tgt_vocab_size, d)
        enc_layer = nn.TransformerEncoderLayer(d, heads, 4 * d, mcfg.dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(
            enc_layer, n_layers, norm=nn.LayerNorm(d), enable_nested_tensor=False
        )
        dec_layer = nn.TransformerDecoderLayer(d, heads, 4 * d, mcfg.dropout, batch_first=True)
        self.decoder = nn.TransformerDecoder(dec_layer, n_layers, norm=nn.LayerNorm(d))
        self.generator = nn.Linear(d, tgt_vocab_size, bias=False)
        if mcfg.tied_embeddings:
            self.generator.weight = self.tgt_embed.weight
        self.dropout = nn.Dropout(mcfg.dropout)

    def _embed(self, table: nn.Embedding, ids: torch.Tensor) -> torch.Tensor:
        x = table(ids) * self.scale
        return self.dropout(x + sinusoid(ids.size(1), x.size(-1), x.dtype, x.device))

    def encode(self, src: torch.Tensor) -> TransformerMemory:
        pad_mask = src == PAD_ID
        states = self.encoder(self._embed(self.src_embed, src), src_key_padding_mask=pad_mask)
        return TransformerMemory(states, pad_mask)

    def decode(self, memory: TransformerMemory, tgt_in: torch.Tensor) -> torch.Tensor:
        T = tgt_in.size(1)
        causal = torch.triu(torch.ones(T, T, dtype=torch.bool, device=tgt_in.device), diagonal=1)
        out = self.decoder(
            self._embed(self.tgt_embed, tgt_in), memory.states,
            tgt_mask=causal, memory_key_padding_mask=memory.pad_mask,
        )
        return self.generator(out)

    def forward(self, src: torch.Tensor, tgt_in: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(src), tgt_in)


def build_model(mcfg: ModelConfig, src_vocab_size: int, tgt_vocab_size: int) -> nn.Module:
    cls = RecurrentSeq2Seq if mcfg.family == "recurrent" else TransformerSeq2Seq
    model = cls(mcfg, src_vocab_size, tgt_vocab_size)
    for p in model.parameters():
        if p.dim() > 1:
            nn.init.xavier_uniform_(p)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ─── Batches + loss ───────────────────────────────────────────────────────────

@dataclass
class Batch:
    src: torch.Tensor      # (B, S) source ids + </s>, padded
    tgt_in: torch.Tensor   # (B, T) <s> + target ids, padded
    tgt_out: torch.Tensor  # (B, T) target ids + </s>, padded

    @property
    def n_tokens(self) -> int:
        return int((self.tgt_out != PAD_ID).sum())


def _pad(rows: Sequence[Sequence[int]]) -> torch.Tensor:
    width = max(len(r) for r in rows)
    return torch.tensor([list(r) + [PAD_ID] * (width - len(r)) for r in rows], dtype=torch.long)


def make_batch(src_ids: Sequence[Sequence[int]], tgt_ids: Sequence[Sequence[int]]) -> Batch:
    if not src_ids or len(src_ids) != len(tgt_ids):
        raise DataError(f"batch needs equally many sources and targets, got {len(src_ids)}/{len(tgt_ids)}")
    if any(len(t) == 0 for t in tgt_ids):
        raise DataError("zero-length target sequence in batch")
    if any(len(s) == 0 for s in src_ids):
        raise DataError("zero-length source sequence in batch")
    return Batch(
        src=_pad([list(s) + [EOS_ID] for s in src_ids]),
        tgt_in=_pad([[BOS_ID] + list(t) for t in tgt_ids]),
        tgt_out=_pad([list(t) + [EOS_ID] for t in tgt_ids]),
    )


def make_batches(
    src_ids: Sequence[Sequence[int]],
    tgt_ids: Sequence[Sequence[int]],
    max_tokens: int,
    rng: Optional[np.random.Generator] = None,
) -> List[Batch]:
    """
    Length-sorted batches whose target token count (with </s>) stays within
    max_tokens; a single over-long pair gets a batch of its own.
    Batch order is shuffled when an rng is given.
    """
    order = sorted(range(len(src_ids)), key=lambda i: (len(tgt_ids[i]), len(src_ids[i]), i))
    groups: List[List[int]] = []
    current: List[int] = []
    tokens = 0
    for i in order:
        size = len(tgt_ids[i]) + 1
        if current and tokens + size > max_tokens:
            groups.append(current)
            current, tokens = [], 0
        current.append(i)
        tokens += size
    if current:
        groups.append(current)
    if rng is not None:
        groups = [groups[j] for j in rng.permutation(len(groups))]
    return [make_batch([src_ids[i] for i in g], [tgt_ids[i] for i in g]) for g in groups]


def _check_indices(batch: Batch, model: nn.Module):
    for name, tensor, size in (
        ("source", batch.src, model.src_vocab_size),
        ("target", batch.tgt_in, model.tgt_vocab_size),
        ("target", batch.tgt_out, model.tgt_vocab_size),
    ):
        if tensor.numel() and (int(tensor.min()) < 0 or int(tensor.max()) >= size):
            raise DataError(f"{name} index out of vocabulary range [0, {size})")
    if batch.tgt_out.size(1) == 0 or batch.n_tokens == 0:
        raise DataError("zero-length target sequence in batch")


def batch_loss(model: nn.Module, batch: Batch, label_smoothing: Optional[float] = None) -> torch.Tensor:
    """Label-smoothed cross-entropy averaged over non-pad target tokens."""
    eps = model.config.label_smoothing if label_smoothing is None else label_smoothing
    logits = model(batch.src, batch.tgt_in)
    return F.cross_entropy(
        logits.reshape(-1, logits.size(-1)), batch.tgt_out.reshape(-1),
        ignore_index=PAD_ID, label_smoothing=eps,
    )


def loss_and_grads(model: nn.Module, batch: Batch) -> Tuple[float, Dict[str, torch.Tensor]]:
    _check_indices(batch, model)
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch)
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    return float(loss.detach()), grads


def grad_check(mcfg: ModelConfig, eps: float = 1e-6, samples: int = 40, seed: int = 0) -> float:
    """
    Max relative error between analytic gradients and central differences,
    in double precision with dropout off, over a random parameter subset.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = build_model(replace(mcfg, dropout=0.0), 9, 9).double()
    model.eval()

    src = rng.integers(4, 9, size=(2, 5)).tolist()
    tgt = rng.integers(4, 9, size=(2, 4)).tolist()
    batch = make_batch(src, tgt)
    _, grads = loss_and_grads(model, batch)

    params = dict(model.named_parameters())
    coords = [(name, i) for name, p in params.items() for i in range(p.numel())]
    picked = rng.choice(len(coords), size=min(samples, len(coords)), replace=False)

    # perturb via .data: grad mode stays on for every pass
    worst = 0.0
    for j in picked:
        name, i = coords[int(j)]
        flat = params[name].data.view(-1)
        original = flat[i].item()
        flat[i] = original + eps
        plus = batch_loss(model, batch).item()
        flat[i] = original - eps
        minus = batch_loss(model, batch).item()
        flat[i] = original
        numeric = (plus - minus) / (2 * eps)
        analytic = grads[name].view(-1)[i].item()
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
        worst = max(worst, err)
    logger.debug(f"grad_check {mcfg.family} {mcfg.sizes}: max relative error {worst:.2e}")
    return worst


# ─── Checkpoints ──────────────────────────────────────────────────────────────

@dataclass
class Checkpoint:
    model_config: ModelConfig
    training_config: TrainingConfig
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    state_dict: Dict[str, torch.Tensor]
    step: int
    src_tag_kind: Optional[str] = None
    tgt_tag_kind: Optional[str] = None
    dev_bleu: float = 0.0
    dev_ppl: float = float("inf")
    history: List[Tuple[int, float, float]] = field(default_factory=list)


def save_checkpoint(ckpt: Checkpoint, path: str):
    utils.ensure_parent(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(ckpt.model_config),
        "training_config": {**asdict(ckpt.training_config),
                            "adam_betas": list(ckpt.training_config.adam_betas)},
        "src_vocab": list(ckpt.src_vocab.itos),
        "tgt_vocab": list(ckpt.tgt_vocab.itos),
        "state_dict": ckpt.state_dict,
        "step": ckpt.step,
        "src_tag_kind": ckpt.src_tag_kind,
        "tgt_tag_kind": ckpt.tgt_tag_kind,
        "dev_bleu": ckpt.dev_bleu,
        "dev_ppl": ckpt.dev_ppl,
        "history": [list(h) for h in ckpt.history],
    }
    torch.save(payload, path)


def load_checkpoint(path: str) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not an interleave-mt checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {payload.get('version')!r}")
    return Checkpoint(
        model_config=ModelConfig(**payload["model_config"]),
        training_config=TrainingConfig(**payload["training_config"]),
        src_vocab=Vocabulary(payload["src_vocab"]),
        tgt_vocab=Vocabulary(payload["tgt_vocab"]),
        state_dict=payload["state_dict"],
        step=payload["step"],
        src_tag_kind=payload["src_tag_kind"],
        tgt_tag_kind=payload["tgt_tag_kind"],
        dev_bleu=payload["dev_bleu"],
        dev_ppl=payload["dev_ppl"],
        history=[tuple(h) for h in payload["history"]],
    )


def model_from_checkpoint(ckpt: Checkpoint) -> nn.Module:
    model = build_model(ckpt.model_config, len(ckpt.src_vocab), len(ckpt.tgt_vocab))
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model


class Translator:
    """Read-only decoding view of a model: the interface beam search talks to."""

    def __init__(self, model: nn.Module, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                 tgt_tag_kind: Optional[str] = None):
        self.model = model
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.tgt_tag_kind = tgt_tag_kind

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Translator":
        return cls(model_from_checkpoint(ckpt), ckpt.src_vocab, ckpt.tgt_vocab, ckpt.tgt_tag_kind)

    @torch.no_grad()
    def encode(self, src_tokens: Sequence[str]):
        if not src_tokens:
            raise DataError("cannot translate an empty source sentence")
        ids = torch.tensor([self.src_vocab.encode(src_tokens, add_eos=True)], dtype=torch.long)
        return self.model.encode(ids)

    @torch.no_grad()
    def next_log_probs(self, memory, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Log-probabilities (k, V) of the next symbol after each emitted prefix."""
        tgt_in = torch.tensor([[BOS_ID] + list(p) for p in prefixes], dtype=torch.long)
        logits = self.model.decode(memory.expand(len(prefixes)), tgt_in)[:, -1]
        return torch.log_softmax(logits.double(), dim=-1).numpy()


# ─── Training ─────────────────────────────────────────────────────────────────

@torch.no_grad()
def dev_perplexity(model: nn.Module, batches: Sequence[Batch]) -> float:
    model.eval()
    total, tokens = 0.0, 0
    for batch in batches:
        logits = model(batch.src, batch.tgt_in)
        total += F.cross_entropy(
            logits.reshape(-1, logits.size(-1)), batch.tgt_out.reshape(-1),
            ignore_index=PAD_ID, reduction="sum",
        ).item()
        tokens += batch.n_tokens
    return math.exp(total / max(tokens, 1))


def dev_bleu(translator: Translator, dev_src: Sequence[Sequence[str]],
             dev_tgt: Sequence[Sequence[str]], beam: int) -> float:
    """BLEU of decoded dev output after removing tags and undoing BPE."""
    import decode
    import evaluation
    from annotate import strip_tags
    from bpe import bpe_undo

    translator.model.eval()
    hyps = decode.batch_translate(translator, dev_src, decode.Free(), beam=beam)
    hyps = [bpe_undo(strip_tags(h)) for h in hyps]
    refs = [bpe_undo(strip_tags(r)) for r in dev_tgt]
    return evaluation.corpus_bleu(hyps, refs)


def _snapshot(model: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(
    cfg: TrainingConfig,
    mcfg: ModelConfig,
    train_src: Sequence[Sequence[str]],
    train_tgt: Sequence[Sequence[str]],
    dev_src: Sequence[Sequence[str]],
    dev_tgt: Sequence[Sequence[str]],
    src_tag_kind: Optional[str] = None,
    tgt_tag_kind: Optional[str] = None,
) -> Checkpoint:
    """
    Validates at step 0 and every validate_every updates. Stops once dev
    perplexity has not improved for `patience` validations (or at
    max_steps / max_epochs). Returns the validated state with the best dev
    BLEU; ties keep the earliest.
    """
    if len(train_src) != len(train_tgt) or len(dev_src) != len(dev_tgt):
        raise DataError("training or dev corpus is misaligned")
    if not dev_src:
        raise DataError("dev corpus is empty")

    cfg = cfg.for_family(mcfg.family)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    src_vocab = build_vocab(train_src)
    tgt_vocab = build_vocab(train_tgt)
    model = build_model(mcfg, len(src_vocab), len(tgt_vocab))
    translator = Translator(model, src_vocab, tgt_vocab, tgt_tag_kind)
    if not mcfg.on_published_grid:
        logger.warning(f"Training with off-grid {mcfg.family} sizes {mcfg.sizes} (desk scale).")
    logger.info(
        f"Model {mcfg.family} {mcfg.sizes}: {count_parameters(model):,} parameters, "
        f"vocab {len(src_vocab)}/{len(tgt_vocab)}"
    )

    train_src_ids = [src_vocab.encode(s) for s in train_src]
    train_tgt_ids = [tgt_vocab.encode(t) for t in train_tgt]
    dev_batches = make_batches(
        [src_vocab.encode(s) for s in dev_src], [tgt_vocab.encode(t) for t in dev_tgt], cfg.max_tokens
    )

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.base_lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lr_lambda=lambda s: lr_at(s + 1, cfg) / cfg.base_lr
    )

    history: List[Tuple[int, float, float]] = []
    best = {"bleu": -1.0, "ppl": math.inf, "state": None, "step": 0, "state_ppl": math.inf}
    bad_validations = 0

    def validate(step: int) -> bool:
        """Records one validation; True when patience is exhausted."""
        nonlocal bad_validations
        ppl = dev_perplexity(model, dev_batches)
        bleu = dev_bleu(translator, dev_src, dev_tgt, cfg.valid_beam)
        history.append((step, ppl, bleu))
        if ppl < best["ppl"]:
            best["ppl"] = ppl
            bad_validations = 0
        else:
            bad_validations += 1
        if bleu > best["bleu"]:
            best.update(bleu=bleu, state=_snapshot(model), step=step, state_ppl=ppl)
        logger.info(f"step {step}: dev ppl {ppl:.3f}, dev BLEU {bleu:.2f} (no improvement x{bad_validations})")
        return bad_validations >= cfg.patience

    step, epoch = 0, 0
    stop = validate(0)
    last_validated = 0
    while not stop:
        epoch += 1
        if cfg.max_epochs is not None and epoch > cfg.max_epochs:
            break
        for batch in make_batches(train_src_ids, train_tgt_ids, cfg.max_tokens, rng):
            model.train()
            loss = batch_loss(model, batch)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss.item()} at step {step + 1}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            optimizer.step()
            scheduler.step()
            step += 1

            if step % cfg.validate_every == 0:
                last_validated = step
                if validate(step):
                    stop = True
                    break
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
                break
    if step != last_validated:
        validate(step)

    logger.success(f"Training finished at step {step}; best dev BLEU {best['bleu']:.2f} at step {best['step']}")
    return Checkpoint(
        model_config=mcfg,
        training_config=cfg,
        src_vocab=src_vocab,
        tgt_vocab=tgt_vocab,
        state_dict=best["state"],
        step=best["step"],
        src_tag_kind=src_tag_kind,
        tgt_tag_kind=tgt_tag_kind,
        dev_bleu=best["bleu"],
        dev_ppl=best["state_ppl"],
        history=history,
    )
