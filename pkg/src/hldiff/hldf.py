"""Hybrid-level fine-tuning objective and training loop.

The latent-space noise-prediction loss runs every step. Every `interval`
steps (1-indexed, step % N == 0) the trainer additionally generates images
through the guided sampler with the batch's own captions, decodes them, and
adds a pixel-space color-consistency penalty

    sum_c [ (mu_c(gen) - mu_c(real))^2 + (sd_c(gen) - sd_c(real))^2 ]

averaged over the batch, weighted by 1/(sampler steps). Gradients reach the
adapter parameters through both terms, including through every sampler step.
"""

import json
import math
import time
from dataclasses import dataclass

import torch

from .bundle import DenoiserBundle
from .lora import LoraSet
from .sampler import SamplerConfig, sample
from .schedule import NoiseSchedule, diffusion_loss, forward_noise
from .seeding import SeedStreams


@dataclass
class ColorStats:
    """Per-image per-channel spatial mean and population standard deviation."""

    mu: torch.Tensor  # [B, C]
    sd: torch.Tensor  # [B, C]


def color_stats(x: torch.Tensor) -> ColorStats:
    if x.ndim != 4:
        raise ValueError(f"expected [B,C,H,W], got {tuple(x.shape)}")
    if x.shape[2] * x.shape[3] < 2:
        raise ValueError(f"degenerate spatial size {x.shape[2]}x{x.shape[3]}")
    mu = x.mean(dim=(2, 3))
    sd = torch.sqrt(x.var(dim=(2, 3), unbiased=False))  # divisor H*W
    return ColorStats(mu=mu, sd=sd)


def color_loss(x_gen: torch.Tensor, x_real: torch.Tensor) -> torch.Tensor:
    """Zero iff per-image per-channel means and stds all match."""
    if x_gen.shape != x_real.shape:
        raise ValueError(
            f"shape mismatch: gen {tuple(x_gen.shape)} vs real {tuple(x_real.shape)}"
        )
    g = color_stats(x_gen)
    r = color_stats(x_real)
    per_image = ((g.mu - r.mu) ** 2 + (g.sd - r.sd) ** 2).sum(dim=1)
    return per_image.mean()


def gate_fires(step: int, interval: int | None) -> bool:
    """1-indexed modular gate; never fires when the interval is disabled."""
    if step < 1:
        raise ValueError(f"step counter is 1-indexed, got {step}")
    if interval is None:
        return False
    if interval < 1:
        raise ValueError(f"interval must be >= 1, got {interval}")
    return step % interval == 0


@dataclass
class HldfConfig:
    interval: int | None = 500     # color-term period N; None = plain fine-tune
    sampler_steps: int = 20        # M; the color term is weighted 1/M
    guidance: float = 4.5
    lr: float = 1e-4
    epochs: int = 10
    batch: int = 1
    rank: int = 8
    caption_dropout: float = 0.1
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    truncate_sampler_grad: bool = False  # stop gradients before the solver loop

    def __post_init__(self):
        if self.interval is not None and self.interval < 1:
            raise ValueError(f"interval must be >= 1, got {self.interval}")
        if self.sampler_steps < 1:
            raise ValueError(f"sampler_steps must be >= 1, got {self.sampler_steps}")


@dataclass
class StepRecord:
    step: int
    loss_diffusion: float
    loss_color: float | None
    total: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "loss_diffusion": self.loss_diffusion,
                "loss_color": self.loss_color,
                "total": self.total,
                "wall_time": self.wall_time,
            }
        )


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, loss_diffusion: float, loss_color):
        super().__init__(
            f"non-finite loss at step {step}: "
            f"diffusion={loss_diffusion}, color={loss_color}"
        )
        self.step = step


class HldfTrainer:
    """Single-writer training loop over a bundle with (usually) LoRA params.

    Randomness is drawn from named streams: "noise" for timesteps and forward
    noise, "dropout" for caption dropout, "sampler" for generation noise on
    gated steps. The sampler stream is untouched unless the gate fires, so a
    disabled gate is draw-for-draw identical to a plain fine-tune.
    """

    def __init__(self, bundle: DenoiserBundle, sched: NoiseSchedule, cfg: HldfConfig,
                 streams: SeedStreams, adapters: LoraSet | None = None,
                 recompute_in_backward: bool = True):
        self.bundle = bundle
        self.sched = sched
        self.cfg = cfg
        self.streams = streams
        self.adapters = adapters
        if adapters is not None:
            self.params = list(adapters.parameters())
        else:
            self.params = [p for p in bundle.parameters() if p.requires_grad]
        if not self.params:
            raise ValueError("nothing to train: no trainable parameters")
        self.opt = torch.optim.AdamW(self.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.sampler_cfg = SamplerConfig(
            steps=cfg.sampler_steps,
            guidance=cfg.guidance,
            recompute_in_backward=recompute_in_backward,
        )
        self.color_evals = 0

    def _eps_fn(self, batch: int):
        def eps_fn(z, t, emb):
            tt = torch.full((batch,), t, dtype=torch.long, device=z.device)
            return self.bundle.predict_eps(z, tt, emb)

        return eps_fn

    def generate(self, captions: list[str], z_T: torch.Tensor,
                 truncate_grad: bool = False) -> torch.Tensor:
        """Images sampled with the training-time sampler settings."""
        B = len(captions)
        cond = self.bundle.encode_text(captions)
        uncond = self.bundle.encode_uncond(B)
        z = sample(self._eps_fn(B), cond, uncond, self.sampler_cfg, self.sched, z_T,
                   truncate_grad=truncate_grad)
        return self.bundle.decode_latent(z)

    def train_step(self, images: torch.Tensor, captions: list[str], step: int) -> StepRecord:
        t_start = time.perf_counter()
        B = images.shape[0]
        if len(captions) != B:
            raise ValueError(f"{len(captions)} captions for batch of {B}")

        noise_gen = self.streams.generator("noise")
        z0 = self.bundle.encode_image(images)
        t = torch.randint(1, self.sched.T + 1, (B,), generator=noise_gen)
        eps = torch.randn(z0.shape, generator=noise_gen, dtype=z0.dtype)

        train_captions = captions
        if self.cfg.caption_dropout > 0:
            drop = torch.rand(B, generator=self.streams.generator("dropout"))
            train_captions = [
                "" if drop[i] < self.cfg.caption_dropout else c
                for i, c in enumerate(captions)
            ]

        z_t = forward_noise(z0, eps, t, self.sched)
        cond = self.bundle.encode_text(train_captions)
        eps_hat = self.bundle.predict_eps(z_t, t, cond)
        l_diff = diffusion_loss(eps_hat, eps)

        l_color = None
        total = l_diff
        if gate_fires(step, self.cfg.interval):
            z_T = torch.randn(z0.shape, generator=self.streams.generator("sampler"),
                              dtype=z0.dtype)
            x_gen = self.generate(captions, z_T,
                                  truncate_grad=self.cfg.truncate_sampler_grad)
            l_color = color_loss(x_gen, images)
            total = l_diff + (1.0 / self.cfg.sampler_steps) * l_color
            self.color_evals += 1

        lc_val = None if l_color is None else float(l_color.detach())
        if not math.isfinite(float(total.detach())):
            raise NonFiniteLossError(step, float(l_diff.detach()), lc_val)

        self.opt.zero_grad(set_to_none=True)
        total.backward()
        if self.cfg.clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(self.params, self.cfg.clip_norm)
        self.opt.step()

        return StepRecord(
            step=step,
            loss_diffusion=float(l_diff.detach()),
            loss_color=lc_val,
            total=float(total.detach()),
            wall_time=time.perf_counter() - t_start,
        )

    def run(self, batches, log_file=None, start_step: int = 1, max_steps: int | None = None,
            on_step=None) -> list[StepRecord]:
        """Drive train_step over an iterable of (images, captions) batches."""
        records = []
        step = start_step
        for images, captions in batches:
            if max_steps is not None and step >= start_step + max_steps:
                break
            rec = self.train_step(images, captions, step)
            records.append(rec)
            if log_file is not None:
                log_file.write(rec.to_json() + "\n")
            if on_step is not None:
                on_step(rec)
            step += 1
        return records
