"""Convolutional VAE used as a frozen multiscale encoder.

Encoder: four blocks of (conv3x3-BN-ReLU) x2 + maxpool, widths 16/32/64/128,
so a 1x64x64 image flattens to 128*4*4 = 2048 before the two 2048->64
latent heads. The decoder mirrors it with 2x2 stride-2 transposed
convolutions and ends in a sigmoid.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import nn
from .datagen import split_indices

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class VaeArch:
    image_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 128)
    latent_dim: int = 64
    decoder_widths: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.decoder_widths is None:
            # 128 -> 64 -> 32 -> 16 -> 16 for the default widths
            dec = tuple(reversed(self.widths[:-1])) + (self.widths[0],)
            object.__setattr__(self, "decoder_widths", dec)
        else:
            object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if self.image_size % (2 ** len(self.widths)):
            raise ValueError(f"image size {self.image_size} not divisible by 2**{len(self.widths)}")
        if len(self.decoder_widths) != len(self.widths):
            raise ValueError("decoder needs one width per encoder block")

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 2 ** len(self.widths)

    @property
    def flat_dim(self) -> int:
        return self.widths[-1] * self.bottleneck_size**2

    def block_shapes(self) -> list[tuple[int, int, int]]:
        return [(w, self.image_size // 2 ** (i + 1), self.image_size // 2 ** (i + 1)) for i, w in enumerate(self.widths)]

    def block_dims(self) -> list[int]:
        return [c * h * w for c, h, w in self.block_shapes()]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "VaeArch":
        return cls(image_size=d["image_size"], widths=tuple(d["widths"]), latent_dim=d["latent_dim"],
                   decoder_widths=tuple(d["decoder_widths"]))


class EncoderBlock(torch.nn.Module):
    def __init__(self, cin, cout, generator=None, dtype=torch.float32):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, generator=generator, dtype=dtype)
        self.bn1 = nn.BatchNorm2d(cout, dtype=dtype)
        self.conv2 = nn.Conv2d(cout, cout, generator=generator, dtype=dtype)
        self.bn2 = nn.BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        x = nn.relu(self.bn1(self.conv1(x)))
        x = nn.relu(self.bn2(self.conv2(x)))
        return nn.maxpool2d(x)


class DecoderBlock(torch.nn.Module):
    """x2 upsampling transposed conv, then a size-preserving 3x3 transposed conv."""

    def __init__(self, cin, cout, final=False, generator=None, dtype=torch.float32):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, kernel_size=2, stride=2, generator=generator, dtype=dtype)
        self.bn1 = nn.BatchNorm2d(cout, dtype=dtype)
        self.refine = nn.ConvTranspose2d(cout, cout, kernel_size=3, stride=1, padding=1, generator=generator, dtype=dtype)
        self.bn2 = nn.BatchNorm2d(cout, dtype=dtype)
        self.out = nn.Conv2d(cout, 1, generator=generator, dtype=dtype) if final else None

    def forward(self, x):
        x = nn.relu(self.bn1(self.up(x)))
        x = nn.relu(self.bn2(self.refine(x)))
        if self.out is not None:
            x = self.out(x)
        return x


class VAE(torch.nn.Module):
    def __init__(self, arch: VaeArch = VaeArch(), seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.arch = arch
        g = torch.Generator().manual_seed(seed)
        chans = (1,) + arch.widths
        self.blocks = torch.nn.ModuleList(
            EncoderBlock(chans[i], chans[i + 1], g, dtype) for i in range(len(arch.widths))
        )
        self.mu_head = nn.Linear(arch.flat_dim, arch.latent_dim, generator=g, dtype=dtype)
        self.logvar_head = nn.Linear(arch.flat_dim, arch.latent_dim, generator=g, dtype=dtype)
        self.dec_fc = nn.Linear(arch.latent_dim, arch.flat_dim, generator=g, dtype=dtype)
        dchans = (arch.widths[-1],) + arch.decoder_widths
        n = len(arch.decoder_widths)
        self.dec_blocks = torch.nn.ModuleList(
            DecoderBlock(dchans[i], dchans[i + 1], final=(i == n - 1), generator=g, dtype=dtype) for i in range(n)
        )

    def encode(self, x):
        """Returns ``(mu, logvar, block_features)``; block features are post-pool."""
        size = self.arch.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (1, size, size):
            raise nn.ShapeError(f"encoder expects (B, 1, {size}, {size}) images, got {tuple(x.shape)}")
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        h = x.flatten(1)
        return self.mu_head(h), self.logvar_head(h), feats

    def decode(self, z):
        if z.dim() != 2 or z.shape[1] != self.arch.latent_dim:
            raise nn.ShapeError(f"decoder expects (B, {self.arch.latent_dim}) latents, got {tuple(z.shape)}")
        s = self.arch.bottleneck_size
        x = nn.relu(self.dec_fc(z)).view(-1, self.arch.widths[-1], s, s)
        for block in self.dec_blocks:
            x = block(x)
        return nn.sigmoid(x)

    def forward(self, x, eps=None, generator=None):
        mu, logvar, _ = self.encode(x)
        z = reparameterize(mu, logvar, eps=eps, generator=generator)
        return self.decode(z), mu, logvar

    def encoder_modules(self):
        return [self.blocks, self.mu_head, self.logvar_head]


def reparameterize(mu, logvar, eps=None, generator=None):
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) unless given."""
    if eps is None:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eps


def kl_divergence(mu, logvar):
    """Closed-form KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims, batch mean."""
    return torch.mean(-0.5 * torch.sum(1 + logvar - mu * mu - torch.exp(logvar), dim=1))


def vae_loss(x, x_hat, mu, logvar, alpha: float = 1.0):
    if x.shape != x_hat.shape:
        raise nn.ShapeError(f"reconstruction shape {tuple(x_hat.shape)} != input {tuple(x.shape)}")
    return torch.mean((x - x_hat) ** 2) + alpha * kl_divergence(mu, logvar)


@dataclass
class VaeHyper:
    # the pixel-mean MSE is 4096x smaller than a per-image sum; with alpha = 1 the
    # KL term wins and every latent dim collapses to the prior
    alpha: float = 1.0 / 4096
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 20
    early_stop_patience: int = 5

    def validate(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 0:
            raise ValueError("batch_size and max_epochs must be >= 1, patience >= 0")


@dataclass
class VaeTrainResult:
    model: VAE
    best_epoch: int
    best_val_loss: float
    history: list[dict] = field(default_factory=list)


def _as_batch(images) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(images, dtype=np.float32))
    return t.unsqueeze(1) if t.dim() == 3 else t


@torch.no_grad()
def evaluate_loss(model: VAE, images: torch.Tensor, alpha: float, batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode (loss, reconstruction MSE) with z = mu."""
    model.eval()
    total = mse = 0.0
    for s in range(0, images.shape[0], batch_size):
        x = images[s:s + batch_size]
        mu, logvar, _ = model.encode(x)
        x_hat = model.decode(mu)
        n = x.shape[0]
        batch_mse = torch.mean((x - x_hat) ** 2).item()
        total += n * (batch_mse + alpha * kl_divergence(mu, logvar).item())
        mse += n * batch_mse
    return total / images.shape[0], mse / images.shape[0]


def train_vae(images, hyper: VaeHyper = VaeHyper(), seed: int = 0, split_seed: int = 0,
              arch: VaeArch = VaeArch(), log_rows: list | None = None) -> VaeTrainResult:
    """Fit a VAE with Adam and early stopping on validation loss.

    ``images`` is the whole dataset; it is split 60/20/20 with
    ``split_seed`` and the test part is left untouched. The returned model
    holds the weights of the epoch with the lowest validation loss.
    """
    hyper.validate()
    data = _as_batch(images)
    if data.shape[0] == 0:
        raise TrainingError("cannot train a VAE on an empty dataset")
    tr_idx, va_idx, _ = split_indices(data.shape[0], split_seed)
    train, val = data[torch.as_tensor(tr_idx)], data[torch.as_tensor(va_idx)]
    if val.shape[0] == 0:
        val = train

    model = VAE(arch, seed=seed)
    store = nn.ParamStore.from_module(model)
    gen = torch.Generator().manual_seed(seed + 1)
    history = log_rows if log_rows is not None else []

    best_loss, best_epoch, best_state, bad_epochs = math.inf, 0, copy.deepcopy(model.state_dict()), 0
    for epoch in range(1, hyper.max_epochs + 1):
        model.train()
        order = torch.randperm(train.shape[0], generator=gen)
        running = 0.0
        for s in range(0, train.shape[0], hyper.batch_size):
            x = train[order[s:s + hyper.batch_size]]
            if x.shape[0] < 2:
                continue  # batch norm needs more than one item
            x_hat, mu, logvar = model(x, generator=gen)
            loss = vae_loss(x, x_hat, mu, logvar, hyper.alpha)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite VAE loss at epoch {epoch}, batch starting {s}: "
                    f"loss={loss.item()}, |mu|max={mu.abs().max().item():.3g}, logvar max={logvar.max().item():.3g}"
                )
            store.zero_grad()
            loss.backward()
            nn.adam_step(store, hyper.lr)
            running += loss.item() * x.shape[0]
        train_loss = running / train.shape[0]
        val_loss, val_mse = evaluate_loss(model, val, hyper.alpha)
        history.append({"epoch": epoch, "split": "train", "loss": train_loss})
        history.append({"epoch": epoch, "split": "validation", "loss": val_loss, "mse": val_mse})
        log.info("vae epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best_loss, best_epoch, bad_epochs = val_loss, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad_epochs += 1
            if bad_epochs >= hyper.early_stop_patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    return VaeTrainResult(model, best_epoch, best_loss, history)


def freeze(model: VAE) -> VAE:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
