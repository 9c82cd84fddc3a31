"""Latent codec interface between image space [0,1] and diffusion latent space.

The default is the affine identity codec (pixel-space diffusion at toy
resolution): z = 2x - 1, x = clamp((z + 1) / 2, 0, 1). A learned autoencoder
can be plugged in behind the same encode/decode pair.
"""

import torch


class IdentityCodec:
    """Affine map to the symmetric range; decode clamps back to [0,1]."""

    def __init__(self, image_size: int, channels: int = 3):
        self.image_size = image_size
        self.channels = channels
        self.latent_channels = channels
        self.latent_size = image_size

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(
                f"expected [B,{self.channels},H,W] image tensor, got {tuple(x.shape)}"
            )
        return 2.0 * x - 1.0

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ValueError(
                f"expected [B,{self.latent_channels},H,W] latent tensor, got {tuple(z.shape)}"
            )
        return torch.clamp((z + 1.0) / 2.0, 0.0, 1.0)
