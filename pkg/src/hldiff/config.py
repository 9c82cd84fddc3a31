"""Run configuration: nested dataclasses, YAML loading, dotted overrides.

Unknown keys are rejected with the offending path so typos fail loudly
instead of training with a silently ignored setting. Overrides are applied
to the raw dict before construction, so validation always sees the final
values.
"""

import dataclasses
from dataclasses import dataclass, field

import yaml


@dataclass
class ScheduleConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"


@dataclass
class ModelConfig:
    latent_channels: int = 3
    latent_size: int = 32
    patch_size: int = 4
    hidden_dim: int = 64
    depth: int = 2
    heads: int = 4
    cond_dim: int = 32
    cond_max_tokens: int = 120
    vocab_size: int = 4096


@dataclass
class LoraConfig:
    rank: int = 8
    scale: float = 1.0
    include_text: bool = True


@dataclass
class TrainConfig:
    interval: int = 500           # color-loss gate period N; 0 disables the gate
    sampler_steps: int = 20       # M
    guidance: float = 4.5         # w
    lr: float = 1e-4
    epochs: int = 10
    batch: int = 1
    caption_dropout: float = 0.1
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    truncate_sampler_grad: bool = False
    checkpoint_every: int = 5     # epochs between checkpoints
    max_steps: int = 0            # 0 = no cap
    pretrain: bool = False        # train the full bundle instead of adapters
    base_checkpoint: str = ""     # denoiser weights to start from
    prefetch: int = 0


@dataclass
class SampleConfig:
    steps: int = 20
    guidance: float = 4.5
    spacing: str = "uniform_t"
    batch: int = 1


@dataclass
class DataConfig:
    root: str = ""
    split_ratio: float = 0.8
    split_seed: int = 0
    image_size: int = 32
    manifest: str = ""            # default: <root>/manifest.jsonl
    captions: str = ""            # default: <root>/captions.jsonl


@dataclass
class VsgConfig:
    endpoint: str = ""
    model: str = "default"
    auth_env: str = ""
    auth_header: str = "Authorization"
    parallelism: int = 4
    retries: int = 3
    timeout: float = 60.0
    mock: bool = False
    mock_caption_tokens: int = 40
    mock_simplify_tokens: int = 100
    simple_caption: bool = False
    metadata: str = ""            # default: <root>/dataset_meta.json


@dataclass
class MetricConfig:
    extractor: str = "channel-stats"   # channel-stats | tiny-cnn
    cnn_seed: int = 0
    subsets: int = 100
    subset_size: int = 0               # 0 = min(1000, n)
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/run"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    vsg: VsgConfig = field(default_factory=VsgConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)


_SECTIONS = {
    "schedule": ScheduleConfig,
    "model": ModelConfig,
    "lora": LoraConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "data": DataConfig,
    "vsg": VsgConfig,
    "metrics": MetricConfig,
}


def _build_section(cls, d: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in names:
            raise ValueError(f"unknown config key '{path}{key}'")
    return cls(**d)


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ValueError(f"config root must be a mapping, got {type(d).__name__}")
    top_names = {f.name for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    for key, value in d.items():
        if key not in top_names:
            raise ValueError(f"unknown config key {key!r}")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be a mapping")
            kwargs[key] = _build_section(_SECTIONS[key], value, f"{key}.")
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_yaml(path) -> dict:
    with open(path) as f:
        d = yaml.safe_load(f)
    return d or {}


def save_yaml(cfg: RunConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(to_dict(cfg), f, sort_keys=True)


def _parse_scalar(raw: str):
    value = yaml.safe_load(raw)
    # yaml leaves dotless exponent forms like "5e-5" as strings
    if isinstance(value, str):
        for cast in (int, float):
            try:
                return cast(value)
            except ValueError:
                pass
    return value


def set_dotted(d: dict, dotted: str, raw_value: str):
    """Apply one `a.b.c=value` override into the raw config dict."""
    parts = dotted.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot descend into {dotted!r}: {p!r} is a scalar")
    node[parts[-1]] = _parse_scalar(raw_value)


def build_config(yaml_path=None, overrides=()) -> RunConfig:
    """defaults <- yaml file <- key=value overrides, then strict build."""
    d = load_yaml(yaml_path) if yaml_path else {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        set_dotted(d, key.strip(), value)
    return from_dict(d)
