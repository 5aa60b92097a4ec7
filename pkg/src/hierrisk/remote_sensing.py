from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from hierrisk import storage
from hierrisk.config import HyperParams
from hierrisk.objective import NonFiniteLossError
from hierrisk.window import DataError

logger = logging.getLogger(__name__)

ENCODER_VERSION = 1
MAX_HALVINGS = 10


def tiles_to_tensor(images: np.ndarray | torch.Tensor, size: int | None = None) -> torch.Tensor:
    """(N, H, W, C) tiles in [0, 1] -> (N, C, H, W) float tensor, resized to `size`."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.ndim != 4:
        raise DataError(f"RS tiles must be (N, H, W, C), got shape {tuple(x.shape)}")
    x = x.permute(0, 3, 1, 2).contiguous()
    if size is not None and x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x


class RSEnhancer(nn.Module):
    """Stacked conv -> ReLU -> max-pool layers, then FC to d_a channels per region."""

    def __init__(self, in_channels: int, conv_channels: Sequence[int], tile: int, d_a: int):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_channels
        for c in conv_channels:
            layers += [nn.Conv2d(prev, c, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            prev = c
        self.features = nn.Sequential(*layers)
        side = tile // (2 ** len(conv_channels))
        if side < 1:
            raise DataError(f"tile {tile} too small for {len(conv_channels)} pooling layers")
        self.fc = nn.Linear(prev * side * side, d_a)
        self.tile = tile

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.tile, self.tile):
            raise DataError(f"expected {self.tile}x{self.tile} tiles, got {tuple(x.shape[-2:])}")
        return self.fc(self.features(x).flatten(1))


def encode_rs_features(images: np.ndarray | torch.Tensor, enhancer: RSEnhancer) -> torch.Tensor:
    """Tensors are taken as (N, C, H, W); arrays as (N, H, W, C) tiles."""
    x = images if isinstance(images, torch.Tensor) else tiles_to_tensor(images, enhancer.tile)
    return enhancer(x.to(next(enhancer.parameters()).dtype))


def _encoder_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.ReLU(),
    )


def _decoder_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_in, 3, padding=1),
        nn.ReLU(),
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.ReLU(),
    )


class ConvAutoencoder(nn.Module):
    def __init__(self, in_channels: int = 3, channels: Sequence[int] = (8, 16)):
        super().__init__()
        widths = [in_channels, *channels]
        self.channels = tuple(channels)
        self.in_channels = in_channels
        self.encoder = nn.Sequential(
            *(_encoder_block(a, b) for a, b in zip(widths[:-1], widths[1:]))
        )
        rev = widths[::-1]
        self.decoder = nn.Sequential(*(_decoder_block(a, b) for a, b in zip(rev[:-1], rev[1:])))

    @property
    def embedding_width(self) -> int:
        return self.channels[-1]

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


def pixel_loss(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    """Mean squared per-pixel error."""
    if x.shape != x_rec.shape:
        raise DataError(f"reconstruction shape {tuple(x_rec.shape)} vs {tuple(x.shape)}")
    return F.mse_loss(x_rec, x)


def autoencoder_losses(
    model: ConvAutoencoder, x: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(loss_pp, loss_feat); the input's encoding is the fixed target of loss_feat."""
    x_rec = model(x)
    target = model.encode(x).detach()
    return pixel_loss(x, x_rec), F.mse_loss(model.encode(x_rec), target)


@dataclass
class PretrainResult:
    model: ConvAutoencoder
    losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)


def _objective(model: ConvAutoencoder, x: torch.Tensor) -> torch.Tensor:
    loss_pp, loss_feat = autoencoder_losses(model, x)
    return loss_pp + loss_feat


def descent_step(model: ConvAutoencoder, x: torch.Tensor, lr: float) -> tuple[float, float, float]:
    """
    One full-batch gradient step with backtracking.

    The step size is halved until the loss does not increase; after
    MAX_HALVINGS the parameters are left unchanged. Returns
    (loss_before, loss_after, step_size_used).
    """
    model.zero_grad(set_to_none=True)
    before = _objective(model, x)
    if not torch.isfinite(before):
        raise NonFiniteLossError(f"autoencoder loss is {float(before)}")
    before.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    saved = [p.detach().clone() for p in params]
    grads = [p.grad.detach().clone() for p in params]
    loss_before = float(before.detach())
    step = lr
    for _ in range(MAX_HALVINGS + 1):
        with torch.no_grad():
            for p, p0, g in zip(params, saved, grads):
                p.copy_(p0 - step * g)
            after = float(_objective(model, x))
        if np.isfinite(after) and after <= loss_before:
            return loss_before, after, step
        step /= 2
    with torch.no_grad():
        for p, p0 in zip(params, saved):
            p.copy_(p0)
    return loss_before, loss_before, 0.0


def pretrain_autoencoder(
    images: np.ndarray | torch.Tensor,
    h: HyperParams,
    *,
    epochs: int | None = None,
    out_dir: str | Path | None = None,
) -> PretrainResult:
    """Fit the autoencoder on all tiles by backtracking gradient descent."""
    x = images if isinstance(images, torch.Tensor) else tiles_to_tensor(images, h.rs_tile)
    if x.shape[0] < 1:
        raise DataError("pre-training needs at least one image")
    torch.manual_seed(h.seed)
    model = ConvAutoencoder(in_channels=int(x.shape[1]), channels=h.ae_channels)
    result = PretrainResult(model=model)
    lr = h.ae_learning_rate
    for epoch in range(1, (h.ae_epochs if epochs is None else epochs) + 1):
        try:
            _, after, used = descent_step(model, x, lr)
        except NonFiniteLossError:
            if out_dir is not None:
                storage.dump_diagnostics(
                    out_dir,
                    "pretrain",
                    {"epoch": epoch, "learning_rate": lr, "losses": result.losses},
                )
            raise
        result.losses.append(after)
        result.learning_rates.append(used)
        logger.info("pretrain epoch=%d loss=%.6f step=%.3g", epoch, after, used)
        # Grow after a full step, otherwise continue from the accepted size.
        if used == lr:
            lr = 2 * used
        elif used > 0:
            lr = used
    return result


@torch.no_grad()
def embed_rs(images: np.ndarray | torch.Tensor, model: ConvAutoencoder, tile: int) -> np.ndarray:
    """One row per region: the encoder bottleneck averaged over space."""
    x = images if isinstance(images, torch.Tensor) else tiles_to_tensor(images, tile)
    if x.shape[1] != model.in_channels:
        raise DataError(f"tiles have {x.shape[1]} channels, encoder expects {model.in_channels}")
    model.eval()
    code = model.encode(x.to(torch.float32))
    return code.mean(dim=(2, 3)).double().numpy()


def save_encoder(path: str | Path, model: ConvAutoencoder) -> Path:
    return storage.save_checkpoint(
        path,
        {
            "version": ENCODER_VERSION,
            "in_channels": model.in_channels,
            "channels": list(model.channels),
            "state_dict": model.state_dict(),
        },
    )


def load_encoder(path: str | Path, h: HyperParams | None = None) -> ConvAutoencoder:
    payload = storage.load_checkpoint(path)
    if payload.get("version") != ENCODER_VERSION:
        raise DataError(f"{path}: unsupported encoder version {payload.get('version')}")
    channels = tuple(int(c) for c in payload["channels"])
    if h is not None and channels != h.ae_channels:
        raise DataError(f"{path}: encoder channels {channels} differ from config {h.ae_channels}")
    model = ConvAutoencoder(in_channels=int(payload["in_channels"]), channels=channels)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
