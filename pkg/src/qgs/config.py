"""Run configuration: defaults, TOML loading, strict key validation."""

import dataclasses
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .datagen import GeneratorConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_f: int = 16
    d_b: int = 16
    d_h: int = 64
    d_z: int = 64
    num_layers: int = 2
    l_max: int = 1024
    dropout_rate: float = 0.1
    temperature: float = 0.1
    gamma_init: float = 0.95
    per_dim_gamma: bool = False
    encoder_variant: str = "linear"           # or "quadratic_reference"
    objective: str = "query_conditioned"      # or "item_only"
    use_hfg: bool = True
    use_context_features: bool = True
    lambda_infonce: float = 1.0
    gen_score_weight: float = 8.0             # weight of the generative similarity in ranking
    dnn_width: int = 64
    d_e: int = 16
    hfg_heads: int = 8
    hfg_ffn_mult: int = 4
    d_o: int = 128
    tower_width: int = 64
    external_embeddings: str = ""             # optional checkpoint with ext_cls/ext_sep


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 10
    learning_rate: float = 0.01
    seed: int = 0
    eval_fraction: float = 0.1
    variant: str = "full"
    threads: int = 1
    grad_clip: float = 0.0  # 0 disables clipping


@dataclass
class BenchConfig:
    lengths: list = field(default_factory=lambda: [128, 256, 512, 1024, 2048])
    d_h: int = 64
    num_layers: int = 2
    warmup_iters: int = 3
    measured_iters: int = 20
    variants: list = field(default_factory=lambda: ["linear", "quadratic"])
    compare_backends: bool = False
    stream_positions: list = field(default_factory=lambda: [10, 100, 1000])

    def __post_init__(self):
        if self.measured_iters < 20:
            raise ConfigError("measured_iters must be >= 20")


ABLATION_VARIANTS = ("full", "item_only", "no_hfg", "no_context_features", "quadratic_encoder")


@dataclass
class AblateConfig:
    variants: list = field(default_factory=lambda: list(ABLATION_VARIANTS))
    # optional Table-4-style scaling sweep: list of [num_layers, session_len]
    scaling: list = field(default_factory=list)


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    out_dir: str = "out"
    dataset_path: str = ""  # if empty, data is generated from [generator]


_SECTIONS = {
    "generator": GeneratorConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "bench": BenchConfig,
    "ablate": AblateConfig,
}


def _build_section(cls, values, section):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}"
        )
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [{section}] config: {e}")


def load_config(path=None) -> RunConfig:
    raw = {}
    if path is not None:
        with open(path, "rb") as f:
            try:
                raw = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"{path}: {e}")
    cfg = RunConfig()
    for key, values in raw.items():
        if key in _SECTIONS:
            if not isinstance(values, dict):
                raise ConfigError(f"[{key}] must be a section")
            setattr(cfg, key, _build_section(_SECTIONS[key], values, key))
        elif key in ("out_dir", "dataset_path"):
            setattr(cfg, key, str(values))
        else:
            raise ConfigError(f"unknown top-level key: {key}")
    return cfg


def resolve_text(cfg: RunConfig) -> str:
    """Fully resolved config, one key per line, for the resolved_config echo."""
    lines = []
    for top in ("out_dir", "dataset_path"):
        lines.append(f"{top} = {getattr(cfg, top)!r}")
    for section, cls in _SECTIONS.items():
        lines.append(f"\n[{section}]")
        obj = getattr(cfg, section)
        for f in fields(cls):
            lines.append(f"{f.name} = {getattr(obj, f.name)!r}")
    return "\n".join(lines) + "\n"


def default_help_text() -> str:
    """Every config key with its default, for --help."""
    lines = ["config keys (TOML sections) and defaults:"]
    lines.append("  out_dir = 'out'  |  dataset_path = '' (generate from [generator])")
    for section, cls in _SECTIONS.items():
        defaults = cls()
        keys = ", ".join(f"{f.name}={getattr(defaults, f.name)!r}" for f in fields(cls))
        lines.append(f"  [{section}]: {keys}")
    return "\n".join(lines)


def apply_variant(model_cfg: ModelConfig, variant: str) -> ModelConfig:
    """Model config for one ablation variant (exactly one flag differs)."""
    cfg = dataclasses.replace(model_cfg)
    if variant == "full":
        pass
    elif variant == "item_only":
        cfg.objective = "item_only"
    elif variant == "no_hfg":
        cfg.use_hfg = False
    elif variant == "no_context_features":
        cfg.use_context_features = False
    elif variant == "quadratic_encoder":
        cfg.encoder_variant = "quadratic_reference"
    elif variant == "external_embedder":
        if not cfg.external_embeddings:
            raise ConfigError("external_embedder variant needs model.external_embeddings")
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    return cfg
