"""Joint NER + multi-head selection model."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from . import crf as crf_ops
from .data import Example, SchemaSet
from .tags import TagInventory, encode_spans, resolve_overlaps

CHECKPOINT_FORMAT = "jointspo-checkpoint"
CHECKPOINT_VERSION = 1
PAD, UNK = 0, 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    num_tags: int
    num_relations: int
    hidden: int = 64           # d
    char_dim: int = 64
    label_dim: int = 32        # e
    pair_dim: int = 64         # p
    selection_hidden: int = 64
    encoder: str = "lstm"      # "lstm" | "transformer"
    encoder_layers: int = 2
    heads: int = 4
    dropout: float = 0.1
    max_len: int = 128
    label_mode: str = "soft"   # "soft" | "hard"
    scale_by_N: bool = True
    label_only: bool = False
    use_global: bool = True
    output_prior: float | None = None  # initial sigmoid output of the relation heads; None = default init

    def __post_init__(self):
        if self.output_prior is not None and not 0.0 < self.output_prior < 1.0:
            raise ValueError(f"output_prior {self.output_prior} outside (0, 1)")
        if self.encoder not in ("lstm", "transformer"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.label_mode not in ("soft", "hard"):
            raise ValueError(f"unknown label mode {self.label_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class CharVocab:
    def __init__(self, chars: Sequence[str] = ()):
        self.chars = ["<pad>", "<unk>"]
        self._index = {c: i for i, c in enumerate(self.chars)}
        self.extend(chars)

    def extend(self, chars) -> "CharVocab":
        for c in chars:
            if c not in self._index:
                self._index[c] = len(self.chars)
                self.chars.append(c)
        return self

    @classmethod
    def build(cls, texts, base: "CharVocab | None" = None) -> "CharVocab":
        vocab = cls(base.chars[2:] if base else ())
        return vocab.extend(sorted({c for t in texts for c in t} - set(vocab.chars)))

    def __len__(self):
        return len(self.chars)

    def __eq__(self, other):
        return isinstance(other, CharVocab) and self.chars == other.chars

    def encode(self, text: str) -> list[int]:
        return [self._index.get(c, UNK) for c in text]


# --- functional pieces ------------------------------------------------------

def soft_label_embedding(emissions: torch.Tensor, M: torch.Tensor, scale_by_N: bool = True) -> torch.Tensor:
    """Expected label embedding ``softmax(s_i) @ M``, optionally divided by N."""
    out = torch.softmax(emissions, dim=-1) @ M
    return out / M.shape[0] if scale_by_N else out


def hard_label_embedding(tags: torch.Tensor, M: torch.Tensor, scale_by_N: bool = True) -> torch.Tensor:
    out = M[tags]
    return out / M.shape[0] if scale_by_N else out


def selection_loss(logits: torch.Tensor, gold: torch.Tensor, pair_mask: torch.Tensor) -> torch.Tensor:
    """Summed multi-label BCE over valid (i, j, r); per sentence when batched.

    Masked entries are removed with ``where``, so their values (even NaN)
    cannot reach the result.
    """
    valid = pair_mask.bool().unsqueeze(-1).expand_as(logits)
    safe = torch.where(valid, logits, torch.zeros((), dtype=logits.dtype))
    bce = F.binary_cross_entropy_with_logits(safe, gold.to(logits.dtype), reduction="none")
    bce = torch.where(valid, bce, torch.zeros((), dtype=logits.dtype))
    total = bce.sum(dim=tuple(range(-3, 0)))
    if torch.isnan(total).any():
        raise FloatingPointError("NaN in selection loss at an unmasked pair")
    return total


def global_loss(logits: torch.Tensor, gold: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, gold.to(logits.dtype), reduction="none").sum(-1)


# --- modules -----------------------------------------------------------------

class Encoder(nn.Module):
    """Character encoder with a learned summary position prepended at row 0."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.char_dim, padding_idx=PAD)
        self.summary = nn.Parameter(torch.randn(cfg.char_dim) * 0.1)
        self.dropout = nn.Dropout(cfg.dropout)
        if cfg.encoder == "lstm":
            if cfg.hidden % 2:
                raise ValueError("lstm encoder needs an even hidden size")
            self.rnn = nn.LSTM(cfg.char_dim, cfg.hidden // 2, num_layers=cfg.encoder_layers,
                               batch_first=True, bidirectional=True,
                               dropout=cfg.dropout if cfg.encoder_layers > 1 else 0.0)
        else:
            self.position = nn.Embedding(cfg.max_len + 1, cfg.char_dim)
            self.proj = nn.Linear(cfg.char_dim, cfg.hidden)
            layer = nn.TransformerEncoderLayer(cfg.hidden, cfg.heads, 4 * cfg.hidden, cfg.dropout,
                                               activation="gelu", batch_first=True)
            self.transformer = nn.TransformerEncoder(layer, cfg.encoder_layers, enable_nested_tensor=False)

    def forward(self, chars: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, K = chars.shape
        if not 1 <= K <= self.cfg.max_len:
            raise ValueError(f"sequence length {K} outside [1, {self.cfg.max_len}]")
        x = self.embed(chars)
        x = torch.cat([self.summary.expand(B, 1, -1).to(x.dtype), x], dim=1)
        full_mask = torch.cat([torch.ones(B, 1, dtype=torch.bool, device=mask.device), mask.bool()], 1)
        lengths = full_mask.sum(1)
        if self.cfg.encoder == "lstm":
            x = self.dropout(x)
            packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
            out, _ = self.rnn(packed)
            h, _ = pad_packed_sequence(out, batch_first=True, total_length=K + 1)
        else:
            pos = torch.arange(K + 1, device=chars.device)
            x = self.dropout(self.proj(x + self.position(pos)))
            h = self.transformer(x, src_key_padding_mask=~full_mask)
        h = self.dropout(h)
        return h * full_mask.unsqueeze(-1).to(h.dtype)


class PairStack(nn.Module):
    def __init__(self, inp: int, out: int):
        super().__init__()
        self.l1 = nn.Linear(inp, out)
        self.l2 = nn.Linear(out, out)

    def forward(self, x):
        return self.l2(F.gelu(self.l1(x)))


class JointModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.ner_head = nn.Linear(cfg.hidden, cfg.num_tags)
        self.crf = crf_ops.CRF(cfg.num_tags)
        self.label_embedding = nn.Parameter(torch.randn(cfg.num_tags, cfg.label_dim))
        pair_in = cfg.label_dim if cfg.label_only else cfg.hidden + cfg.label_dim
        self.subject_stack = PairStack(pair_in, cfg.pair_dim)
        self.object_stack = PairStack(pair_in, cfg.pair_dim)
        self.sel_u = nn.Linear(cfg.pair_dim, cfg.selection_hidden, bias=False)
        self.sel_v = nn.Linear(cfg.pair_dim, cfg.selection_hidden)
        with warnings.catch_warnings():
            # num_relations = 0 (NER pretraining) leaves these layers empty
            warnings.filterwarnings("ignore", message="Initializing zero-element tensors")
            self.sel_out = nn.Linear(cfg.selection_hidden, cfg.num_relations)
            self.global_head = nn.Linear(cfg.hidden, cfg.num_relations)
        if cfg.output_prior is not None:
            with torch.no_grad():
                b = math.log(cfg.output_prior / (1 - cfg.output_prior))
                self.sel_out.bias.fill_(b)
                self.global_head.bias.fill_(b)

    # individual stages --------------------------------------------------
    def encode(self, chars, mask):
        return self.encoder(chars, mask)

    def ner_logits(self, enc):
        return self.ner_head(enc[:, 1:])

    def label_rows(self, emissions, mask):
        M = self.label_embedding
        if self.cfg.label_mode == "soft":
            return soft_label_embedding(emissions, M, self.cfg.scale_by_N)
        paths = crf_ops.viterbi(emissions, self.crf.transitions, mask)
        tags = torch.zeros(mask.shape, dtype=torch.long, device=emissions.device)
        for b, p in enumerate(paths):
            tags[b, :len(p)] = torch.tensor(p)
        return hard_label_embedding(tags, M, self.cfg.scale_by_N)

    def pair_representations(self, enc, labels):
        x = labels if self.cfg.label_only else torch.cat([enc[:, 1:], labels], dim=-1)
        return self.subject_stack(x), self.object_stack(x)

    def selection_logits(self, hs, ho):
        a = self.sel_u(hs)                     # [B, K, h]
        b = self.sel_v(ho)
        z = torch.tanh(a.unsqueeze(2) + b.unsqueeze(1))   # [B, K(subj), K(obj), h]
        return self.sel_out(z)

    def global_logits(self, enc):
        return self.global_head(enc[:, 0])

    # full passes ----------------------------------------------------------
    def forward(self, chars, mask):
        enc = self.encode(chars, mask)
        emissions = self.ner_logits(enc)
        labels = self.label_rows(emissions, mask)
        hs, ho = self.pair_representations(enc, labels)
        return {"enc": enc, "emissions": emissions, "selection": self.selection_logits(hs, ho),
                "global": self.global_logits(enc)}

    def losses(self, batch: dict) -> dict[str, torch.Tensor]:
        out = self(batch["chars"], batch["mask"])
        mask = batch["mask"]
        l_ner = self.crf.nll(out["emissions"], batch["tags"], mask).mean()
        zero = out["emissions"].sum() * 0
        if self.cfg.num_relations:
            pm = mask.unsqueeze(2) & mask.unsqueeze(1)
            l_rel = selection_loss(out["selection"], batch["pair_y"], pm).mean()
            l_glob = global_loss(out["global"], batch["global_y"]).mean() if self.cfg.use_global else zero
        else:
            l_rel = l_glob = zero
        return {"ner": l_ner, "rel": l_rel, "global": l_glob, "total": l_ner + l_rel + l_glob}

    def combined_loss(self, batch: dict) -> torch.Tensor:
        return self.losses(batch)["total"]

    @torch.no_grad()
    def predict(self, chars, mask):
        """Viterbi tags plus sigmoid selection and global probabilities."""
        was = self.training
        self.eval()
        out = self(chars, mask)
        self.train(was)
        return {
            "tags": self.crf.decode(out["emissions"], mask),
            "selection": torch.sigmoid(out["selection"]),
            "global": torch.sigmoid(out["global"]),
        }


# --- batching -------------------------------------------------------------

def ner_tags(example: Example, inv: TagInventory) -> list[int]:
    return encode_spans(resolve_overlaps(example.gold_spans), len(example.text), inv)


def pair_labels(example: Example, schemas: SchemaSet) -> list[tuple[int, int, int]]:
    """Gold (subject anchor, object anchor, relation) with span-final anchors."""
    return sorted({(t.subject_span[1] - 1, t.object_span[1] - 1, schemas.index(t.predicate))
                   for t in example.gold_triplets})


def collate(examples: Sequence[Example], vocab: CharVocab, inv: TagInventory,
            schemas: SchemaSet | None, dtype=torch.float32) -> dict:
    B = len(examples)
    K = max(len(e.text) for e in examples)
    R = schemas.R if schemas is not None else 0
    chars = torch.zeros(B, K, dtype=torch.long)
    mask = torch.zeros(B, K, dtype=torch.bool)
    tags = torch.zeros(B, K, dtype=torch.long)
    pair_y = torch.zeros(B, K, K, R, dtype=dtype)
    global_y = torch.zeros(B, R, dtype=dtype)
    for b, ex in enumerate(examples):
        L = len(ex.text)
        chars[b, :L] = torch.tensor(vocab.encode(ex.text))
        mask[b, :L] = True
        tags[b, :L] = torch.tensor(ner_tags(ex, inv))
        if R:
            for i, j, r in pair_labels(ex, schemas):
                pair_y[b, i, j, r] = 1
                global_y[b, r] = 1
    return {"chars": chars, "mask": mask, "tags": tags, "pair_y": pair_y, "global_y": global_y}


# --- checkpoints -------------------------------------------------------------

@dataclass
class Bundle:
    """A model with the index spaces it was trained against."""
    model: JointModel
    vocab: CharVocab
    inventory: TagInventory
    schemas: SchemaSet | None
    meta: dict


def save_checkpoint(bundle: Bundle, path: str | Path) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(bundle.model.cfg),
        "vocab": bundle.vocab.chars[2:],
        "entity_types": list(bundle.inventory.entity_types),
        "schemas": [s.to_json() for s in bundle.schemas] if bundle.schemas is not None else None,
        "meta": bundle.meta,
        "state_dict": bundle.model.state_dict(),
    }, path)


def load_checkpoint(path: str | Path, schemas: SchemaSet | None = None,
                    inventory: TagInventory | None = None) -> Bundle:
    """Load and check a checkpoint; mismatched schemas or tag inventory raise."""
    from .data import Schema
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a model checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    inv = TagInventory(blob["entity_types"])
    ck_schemas = None if blob["schemas"] is None else SchemaSet(Schema(**s) for s in blob["schemas"])
    if inventory is not None and inventory != inv:
        raise CheckpointError(f"{path}: tag inventory {inv.tags} != expected {inventory.tags}")
    if schemas is not None and ck_schemas != schemas:
        raise CheckpointError(f"{path}: schema set differs from the one supplied")
    cfg = ModelConfig.from_dict(blob["config"])
    model = JointModel(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return Bundle(model, CharVocab(blob["vocab"]), inv, ck_schemas, blob.get("meta", {}))


def transfer_encoder(target: Bundle, source: Bundle) -> None:
    """Copy encoder weights (and the NER layer when tag inventories agree).

    The target keeps its own tag inventory; the source vocabulary must be a
    prefix of the target's.
    """
    if target.vocab.chars[:len(source.vocab)] != source.vocab.chars:
        raise CheckpointError("pretrained vocabulary is not a prefix of the target vocabulary")
    s_cfg, t_cfg = source.model.cfg, target.model.cfg
    for name in ("hidden", "char_dim", "encoder", "encoder_layers", "heads", "max_len"):
        if getattr(s_cfg, name) != getattr(t_cfg, name):
            raise CheckpointError(f"encoder mismatch on {name}: {getattr(s_cfg, name)} != {getattr(t_cfg, name)}")
    src = source.model.encoder.state_dict()
    dst = target.model.encoder.state_dict()
    for k, v in src.items():
        if k == "embed.weight":
            dst[k][:v.shape[0]] = v
        else:
            dst[k] = v.clone()
    target.model.encoder.load_state_dict(dst)
    if source.inventory == target.inventory:
        target.model.ner_head.load_state_dict(source.model.ner_head.state_dict())
        target.model.crf.load_state_dict(source.model.crf.state_dict())
