"""Generated-vs-real distribution metrics with pluggable feature extractors.

Fréchet distance between Gaussian fits (the FID family; swapping the
extractor gives the KFD/HFD variants) and the unbiased kernel distance
with the standard degree-3 polynomial kernel, averaged over random subsets.
Features can come from a bundled extractor or from precomputed feature
files, so external extractors need no model code here.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

# relative eigenvalue tolerance: more negative than this means the input
# covariance was not a covariance
EIG_REJECT = 1e-6

FEATURE_MAGIC = b"HLFEAT01"


@dataclass
class FeatureSet:
    features: np.ndarray  # [n, d] float
    extractor_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be [n,d], got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass
class MetricReport:
    fd: float
    kid_mean: float
    kid_std: float
    extractor_id: str
    n_real: int
    n_gen: int
    kid_subsets: int
    kid_subset_size: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MetricReport":
        with open(path) as f:
            return cls(**json.load(f))


def _check_pair(real: FeatureSet, gen: FeatureSet):
    if real.d != gen.d:
        raise ValueError(f"feature dims differ: {real.d} vs {gen.d}")


def _sqrt_eigs(mat: np.ndarray, what: str) -> np.ndarray:
    """Eigenvalues of a nominally-PSD matrix, clamped at 0; sqrt applied."""
    sym = (mat + mat.T) / 2.0
    w = np.linalg.eigvalsh(sym)
    if w.min() < 0:
        # jitter once when roundoff pushes eigenvalues just below zero
        w = np.linalg.eigvalsh(sym + 1e-10 * np.eye(sym.shape[0]))
    tol = EIG_REJECT * max(1.0, float(np.abs(w).max()))
    if w.min() < -tol:
        raise ValueError(f"{what} has negative eigenvalue {w.min():.3e}")
    return np.sqrt(np.clip(w, 0.0, None))


def _sqrtm_psd(mat: np.ndarray, what: str) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    w, v = np.linalg.eigh(sym)
    if w.min() < 0:
        sym = sym + 1e-10 * np.eye(sym.shape[0])
        w, v = np.linalg.eigh(sym)
    tol = EIG_REJECT * max(1.0, float(np.abs(w).max()))
    if w.min() < -tol:
        raise ValueError(f"{what} has negative eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(real: FeatureSet, gen: FeatureSet) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), sample covariances.

    The cross term uses the symmetric route sqrt(S1)·S2·sqrt(S1), whose
    eigenvalues match those of S1·S2 but stay real under roundoff.
    """
    _check_pair(real, gen)
    if real.n < 2 or gen.n < 2:
        raise ValueError("need n >= 2 on both sides for a covariance")
    x, y = real.features, gen.features
    mu1, mu2 = x.mean(axis=0), y.mean(axis=0)
    s1 = np.cov(x, rowvar=False).reshape(real.d, real.d)
    s2 = np.cov(y, rowvar=False).reshape(real.d, real.d)
    root1 = _sqrtm_psd(s1, "real covariance")
    cross = _sqrt_eigs(root1 @ s2 @ root1, "covariance product")
    mean_term = float(np.sum((mu1 - mu2) ** 2))
    trace_term = float(np.trace(s1) + np.trace(s2) - 2.0 * cross.sum())
    return mean_term + trace_term


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """k(a, b) = (a.b / d + 1)^3 for rows of x against rows of y."""
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("unbiased estimator needs at least 2 points per side")
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


def kid(real: FeatureSet, gen: FeatureSet, subsets: int = 100,
        subset_size: int | None = None, seed: int = 0):
    """(mean, std) of the unbiased MMD^2 over seeded random subsets."""
    _check_pair(real, gen)
    if subset_size is None:
        subset_size = min(1000, real.n, gen.n)
    if subset_size < 2:
        raise ValueError("subset_size must be >= 2")
    if subset_size > min(real.n, gen.n):
        raise ValueError(
            f"subset_size {subset_size} exceeds set sizes "
            f"({real.n}, {gen.n})"
        )
    rng = np.random.default_rng(seed)
    values = np.empty(subsets)
    for i in range(subsets):
        rx = real.features[rng.choice(real.n, subset_size, replace=False)]
        gy = gen.features[rng.choice(gen.n, subset_size, replace=False)]
        values[i] = mmd2_unbiased(rx, gy)
    return float(values.mean()), float(values.std())


class ChannelStatsExtractor:
    """Per-channel mean and population std of each image, d = 2C."""

    def __init__(self, channels: int = 3):
        self.channels = channels
        self.extractor_id = f"channel-stats-v1-c{channels}"

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        if images.ndim != 4 or images.shape[1] != self.channels:
            raise ValueError(f"expected [B,{self.channels},H,W], got {tuple(images.shape)}")
        mu = images.mean(dim=(2, 3))
        sd = images.var(dim=(2, 3), unbiased=False).sqrt()
        return torch.cat([mu, sd], dim=1).detach().cpu().double().numpy()


class TinyCnnExtractor:
    """Small random-weight conv net, deterministic for a given seed.

    Random projections preserve distributional differences well enough for
    desk-scale comparisons; the seed is part of the extractor id so feature
    files from different instantiations never silently mix.
    """

    def __init__(self, seed: int = 0, width: int = 16):
        self.extractor_id = f"tiny-cnn-v1-s{seed}-w{width}"
        gen = torch.Generator().manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(3, width // 2, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(width // 2, width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
        )
        for p in self.net.parameters():
            if p.ndim >= 2:
                nn.init.xavier_uniform_(p, generator=gen)
            else:
                p.data.zero_()
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected [B,3,H,W], got {tuple(images.shape)}")
        with torch.no_grad():
            out = self.net(images).flatten(1)
        return out.cpu().double().numpy()


def extract_features(images: torch.Tensor, extractor,
                     batch_size: int = 64) -> FeatureSet:
    """Run the extractor over images in bounded batches."""
    chunks = []
    for i in range(0, images.shape[0], batch_size):
        chunks.append(extractor(images[i:i + batch_size]))
    return FeatureSet(np.concatenate(chunks, axis=0), extractor.extractor_id)


def save_features(fs: FeatureSet, path):
    """Binary container: magic, extractor id, shape, row-major float32."""
    ident = fs.extractor_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<I", len(ident)))
        f.write(ident)
        f.write(struct.pack("<II", fs.n, fs.d))
        f.write(fs.features.astype("<f4").tobytes(order="C"))


def load_features(path) -> FeatureSet:
    with open(path, "rb") as f:
        magic = f.read(len(FEATURE_MAGIC))
        if magic != FEATURE_MAGIC:
            raise ValueError(f"not a feature file (magic {magic!r})")
        (id_len,) = struct.unpack("<I", f.read(4))
        ident = f.read(id_len).decode("utf-8")
        n, d = struct.unpack("<II", f.read(8))
        raw = f.read(n * d * 4)
        if len(raw) != n * d * 4:
            raise ValueError("feature file truncated")
        feats = np.frombuffer(raw, dtype="<f4").reshape(n, d)
    return FeatureSet(feats, ident)


def compute_report(real: FeatureSet, gen: FeatureSet, subsets: int = 100,
                   subset_size: int | None = None, seed: int = 0) -> MetricReport:
    if real.extractor_id != gen.extractor_id:
        raise ValueError(
            f"extractor mismatch: {real.extractor_id} vs {gen.extractor_id}"
        )
    fd = frechet_distance(real, gen)
    if subset_size is None:
        subset_size = min(1000, real.n, gen.n)
    kid_mean, kid_std = kid(real, gen, subsets, subset_size, seed)
    return MetricReport(
        fd=fd, kid_mean=kid_mean, kid_std=kid_std,
        extractor_id=real.extractor_id, n_real=real.n, n_gen=gen.n,
        kid_subsets=subsets, kid_subset_size=subset_size,
    )


def plot_series(steps, values, label: str, out_path):
    """Score-versus-step curve written as an image file."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, values, marker="o")
    ax.set_xlabel("training step")
    ax.set_ylabel(label)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
