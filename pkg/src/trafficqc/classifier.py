"""Attention classifier over multiscale dual encodings, plus ablation heads.

Each block output of the two frozen encoders is flattened and projected to
a common width (1024), giving an 8x1024 feature stack: rows 0-3 from the
normal-data encoder (small to large receptive field), rows 4-7 from the
faulty-data encoder. The PNS variant pools the rows with single-head
scaled dot-product self-attention before the MLP; P, N and PN feed the
projected rows straight to the MLP.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import nn
from .vae import VAE

log = logging.getLogger(__name__)

FAULTY = 1  # class index of the positive (faulty) class


class Variant(str, Enum):
    P = "p"
    N = "n"
    PN = "pn"
    PNS = "pns"

    @property
    def uses_positive(self) -> bool:
        return self in (Variant.P, Variant.PN, Variant.PNS)

    @property
    def uses_negative(self) -> bool:
        return self in (Variant.N, Variant.PN, Variant.PNS)

    @property
    def attention(self) -> bool:
        return self is Variant.PNS

    @property
    def label(self) -> str:
        return {"p": "VAE(P)", "n": "VAE(N)", "pn": "VAE(PN)", "pns": "VAE(PNS)"}[self.value]


class ClassifierError(ValueError):
    pass


def self_attention(features, wq, wk, wv):
    """softmax(Q K^T / sqrt(d_k)) V with Q = F Wq, K = F Wk, V = F Wv.

    ``features`` is (..., rows, d). Returns ``(output, weights)`` where
    weights is (..., rows, rows) and each row sums to one.
    """
    q = features @ wq
    k = features @ wk
    v = features @ wv
    scores = q @ k.transpose(-1, -2) / math.sqrt(k.shape[-1])
    weights = nn.softmax(scores, axis=-1)
    return weights @ v, weights


@dataclass(frozen=True)
class ClassifierArch:
    variant: Variant = Variant.PNS
    block_dims: tuple[int, ...] = (16384, 8192, 4096, 2048)
    d_model: int = 1024
    hidden: int = 256
    dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "block_dims", tuple(int(d) for d in self.block_dims))

    @property
    def n_rows(self) -> int:
        return len(self.block_dims) * (int(self.variant.uses_positive) + int(self.variant.uses_negative))

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "block_dims": list(self.block_dims), "d_model": self.d_model,
                "hidden": self.hidden, "dropout": self.dropout}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierArch":
        return cls(Variant(d["variant"]), tuple(d["block_dims"]), d["d_model"], d["hidden"], d["dropout"])


class AttentionClassifier(torch.nn.Module):
    def __init__(self, arch: ClassifierArch = ClassifierArch(), seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.arch = arch
        g = torch.Generator().manual_seed(seed)
        dims = []
        if arch.variant.uses_positive:
            dims += arch.block_dims
        if arch.variant.uses_negative:
            dims += arch.block_dims
        self.projections = torch.nn.ModuleList(nn.Linear(d, arch.d_model, generator=g, dtype=dtype, init="fan_in")
                                               for d in dims)
        if arch.variant.attention:
            d = arch.d_model
            self.wq = torch.nn.Parameter(torch.empty(d, d, dtype=dtype))
            self.wk = torch.nn.Parameter(torch.empty(d, d, dtype=dtype))
            self.wv = torch.nn.Parameter(torch.empty(d, d, dtype=dtype))
            for w in (self.wq, self.wk, self.wv):
                nn.fan_in_uniform_(w, d, g)
        self.fc1 = nn.Linear(arch.n_rows * arch.d_model, arch.hidden, generator=g, dtype=dtype, init="fan_in")
        self.fc2 = nn.Linear(arch.hidden, 2, generator=g, dtype=dtype, init="fan_in")

    def feature_stack(self, block_features: Sequence[torch.Tensor]) -> torch.Tensor:
        """Project flattened block features (one tensor per row) to (B, rows, d_model)."""
        if len(block_features) != len(self.projections):
            raise ClassifierError(
                f"variant {self.arch.variant.value} expects {len(self.projections)} block features, "
                f"got {len(block_features)}"
            )
        rows = [proj(f.flatten(1)) for proj, f in zip(self.projections, block_features)]
        return torch.stack(rows, dim=1)

    def forward(self, block_features: Sequence[torch.Tensor], generator: torch.Generator | None = None):
        stack = self.feature_stack(block_features)
        if self.arch.variant.attention:
            stack, _ = self_attention(stack, self.wq, self.wk, self.wv)
        h = nn.relu(self.fc1(stack.flatten(1)))
        h = nn.dropout(h, self.arch.dropout, self.training, generator)
        return self.fc2(h)


# -- frozen feature extraction ---------------------------------------------------

def check_encoder_compat(encoder: VAE, arch: ClassifierArch):
    if tuple(encoder.arch.block_dims()) != arch.block_dims:
        raise ClassifierError(
            f"encoder block sizes {encoder.arch.block_dims()} do not match classifier {list(arch.block_dims)}"
        )


@torch.no_grad()
def encoder_block_features(encoder: VAE, images, batch_size: int = 256) -> list[torch.Tensor]:
    """Flattened post-pool outputs of every encoder block, eval mode."""
    encoder.eval()
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if images.dim() == 3:
        images = images.unsqueeze(1)
    chunks = []
    for s in range(0, images.shape[0], batch_size):
        _, _, feats = encoder.encode(images[s:s + batch_size])
        chunks.append([f.flatten(1) for f in feats])
    return [torch.cat([c[i] for c in chunks]) for i in range(len(encoder.blocks))]


def variant_features(variant: Variant, feats_p: list | None, feats_n: list | None) -> list[torch.Tensor]:
    variant = Variant(variant)
    rows = []
    if variant.uses_positive:
        if feats_p is None:
            raise ClassifierError(f"variant {variant.value} needs the positive encoder")
        rows += list(feats_p)
    if variant.uses_negative:
        if feats_n is None:
            raise ClassifierError(f"variant {variant.value} needs the negative encoder")
        rows += list(feats_n)
    return rows


def extract_features(image, enc_p: VAE, enc_n: VAE, clf: AttentionClassifier) -> torch.Tensor:
    """8x1024 (or 4x1024 for P/N) feature stack of one image."""
    if clf.arch.variant.uses_positive:
        check_encoder_compat(enc_p, clf.arch)
    if clf.arch.variant.uses_negative:
        check_encoder_compat(enc_n, clf.arch)
    img = np.asarray(image, dtype=np.float32)[None]
    fp = encoder_block_features(enc_p, img) if clf.arch.variant.uses_positive else None
    fn = encoder_block_features(enc_n, img) if clf.arch.variant.uses_negative else None
    with torch.no_grad():
        return clf.feature_stack(variant_features(clf.arch.variant, fp, fn))[0]


@torch.no_grad()
def predict_proba(clf: AttentionClassifier, block_features: Sequence[torch.Tensor], batch_size: int = 256) -> np.ndarray:
    """Eval-mode probability of the faulty class for every item."""
    clf.eval()
    n = block_features[0].shape[0]
    out = []
    for s in range(0, n, batch_size):
        logits = clf([f[s:s + batch_size] for f in block_features])
        out.append(torch.softmax(logits.double(), dim=1)[:, FAULTY])
    return torch.cat(out).numpy() if out else np.zeros(0)


def classify(image, enc_p: VAE, enc_n: VAE, clf: AttentionClassifier, training: bool = False, seed: int = 0):
    """Logits and faulty-class probability for one image.

    With ``training=True`` dropout is active and drawn from ``seed``.
    """
    img = np.asarray(image, dtype=np.float32)[None]
    for enc, used in ((enc_p, clf.arch.variant.uses_positive), (enc_n, clf.arch.variant.uses_negative)):
        if used:
            check_encoder_compat(enc, clf.arch)
    fp = encoder_block_features(enc_p, img) if clf.arch.variant.uses_positive else None
    fn = encoder_block_features(enc_n, img) if clf.arch.variant.uses_negative else None
    clf.train(training)
    with torch.no_grad():
        logits = clf(variant_features(clf.arch.variant, fp, fn), generator=torch.Generator().manual_seed(seed))[0]
    clf.eval()
    prob = torch.softmax(logits.double(), dim=0)
    return logits, float(prob[FAULTY])


# -- training ------------------------------------------------------------------------

@dataclass
class ClassifierHyper:
    lr: float = 1e-5
    batch_size: int = 32
    epochs: int = 20
    d_model: int = 1024
    hidden: int = 256
    dropout: float = 0.5


@dataclass
class ClassifierTrainResult:
    model: AttentionClassifier
    best_epoch: int
    best_val_accuracy: float
    history: list[dict] = field(default_factory=list)


@torch.no_grad()
def _loss_and_accuracy(clf, feats, labels, batch_size=256):
    clf.eval()
    total = correct = 0.0
    n = labels.shape[0]
    for s in range(0, n, batch_size):
        logits = clf([f[s:s + batch_size] for f in feats])
        y = labels[s:s + batch_size]
        total += F.cross_entropy(logits, y, reduction="sum").item()
        correct += (logits.argmax(1) == y).sum().item()
    return total / n, correct / n


def train_classifier(train_feats: Sequence[torch.Tensor], train_labels, val_feats: Sequence[torch.Tensor], val_labels,
                     arch: ClassifierArch, hyper: ClassifierHyper = ClassifierHyper(), seed: int = 0,
                     log_rows: list | None = None) -> ClassifierTrainResult:
    """Cross-entropy training of the head on precomputed frozen-encoder features.

    Labels are 0 (normal) / 1 (faulty). Keeps the epoch with the best
    validation accuracy (earliest on ties).
    """
    y_train = torch.as_tensor(np.asarray(train_labels), dtype=torch.long)
    y_val = torch.as_tensor(np.asarray(val_labels), dtype=torch.long)
    if set(y_train.unique().tolist()) != {0, 1}:
        raise ClassifierError("training split must contain both normal and faulty examples")
    model = AttentionClassifier(arch, seed=seed)
    store = nn.ParamStore.from_module(model)
    gen = torch.Generator().manual_seed(seed + 1)
    history = log_rows if log_rows is not None else []

    best_acc, best_epoch, best_state = -1.0, 0, None
    n = y_train.shape[0]
    for epoch in range(1, hyper.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=gen)
        running = 0.0
        for s in range(0, n, hyper.batch_size):
            idx = order[s:s + hyper.batch_size]
            logits = model([f[idx] for f in train_feats], generator=gen)
            loss = F.cross_entropy(logits, y_train[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite classifier loss at epoch {epoch}")
            store.zero_grad()
            loss.backward()
            nn.adam_step(store, hyper.lr)
            running += loss.item() * idx.shape[0]
        train_loss, train_acc = _loss_and_accuracy(model, train_feats, y_train)
        val_loss, val_acc = _loss_and_accuracy(model, val_feats, y_val)
        history.append({"epoch": epoch, "split": "train", "loss": train_loss, "accuracy": train_acc})
        history.append({"epoch": epoch, "split": "validation", "loss": val_loss, "accuracy": val_acc})
        log.info("classifier %s epoch %d train loss %.5f acc %.4f | val loss %.5f acc %.4f",
                 arch.variant.value, epoch, train_loss, train_acc, val_loss, val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return ClassifierTrainResult(model, best_epoch, best_acc, history)
