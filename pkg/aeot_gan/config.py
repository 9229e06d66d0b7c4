from __future__ import annotations

import dataclasses as dc
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml


class ConfigError(ValueError):
    pass


# (R, T_inner) per dataset family
SCHEDULE_PRESETS: Dict[str, Tuple[float, int]] = {
    "mnist": (15.0, 3),
    "cifar10": (25.0, 10),
    "celeba": (15.0, 5),
}


@dc.dataclass
class DataConfig:
    kind: str = "gaussian-mixture"  # gaussian-mixture | segments | two-rings | idx | csv
    params: Dict[str, Any] = dc.field(default_factory=dict)
    path: str = ""  # idx / csv source
    limit: int = 0  # keep the first N points of a file source (0 = all)


@dc.dataclass
class AutoencoderConfig:
    latent_dim: int = 2
    hidden: List[int] = dc.field(default_factory=lambda: [64, 64])
    activation: str = "leaky_relu"
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    mse_threshold: float = 1e-3


@dc.dataclass
class OtConfig:
    epsilon: Optional[float] = None  # None -> choose from expected_modes
    expected_modes: int = 3
    mc_samples: int = 100_000
    step_size: Optional[float] = None  # None -> 1e-3 (adam) or 0.25 (sgd)
    max_iterations: int = 2000
    tolerance: Optional[float] = None  # None -> 0.2 / n
    verify_samples: int = 1_000_000
    optimizer: str = "adam"
    patience: int = 25
    decay: float = 0.5
    neighbor_count: Optional[int] = None  # None -> d + 1
    normalize: bool = True  # solve on codes fitted into [margin, 1 - margin]^d
    normalize_margin: float = 0.05
    chunk_size: int = 65536
    workers: int = 1


@dc.dataclass
class GanConfig:
    preset: str = ""  # mnist | cifar10 | celeba
    lr_g: float = 2e-5
    R: float = 15.0
    T_inner: int = 3
    beta: float = 2000.0
    alpha_hidden: float = 0.06
    alpha_last_numerator: float = 2.0
    use_feature_loss: bool = True
    batch_size: int = 64
    epochs: int = 500
    fake_ratio: int = 3  # generated : reconstructed
    disc_hidden: List[int] = dc.field(default_factory=lambda: [64, 64])
    latent_source: str = "ot"  # ot | gaussian


@dc.dataclass
class EvalConfig:
    samples: int = 10_000
    w2_samples: int = 512
    mode_radius: Optional[float] = None  # None -> radius stored with the dataset modes
    uniformity_samples: int = 100_000


@dc.dataclass
class LoggingConfig:
    level: str = "INFO"
    file: str = ""


@dc.dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "./runs"
    data: DataConfig = dc.field(default_factory=DataConfig)
    autoencoder: AutoencoderConfig = dc.field(default_factory=AutoencoderConfig)
    ot: OtConfig = dc.field(default_factory=OtConfig)
    gan: GanConfig = dc.field(default_factory=GanConfig)
    eval: EvalConfig = dc.field(default_factory=EvalConfig)
    logging: LoggingConfig = dc.field(default_factory=LoggingConfig)

    @staticmethod
    def from_mapping(d: Dict[str, Any]) -> "RunConfig":
        try:
            gan_map = dict(d.get("gan", {}) or {})
            preset = str(gan_map.get("preset", "") or "").lower()
            if preset:
                if preset not in SCHEDULE_PRESETS:
                    raise ConfigError(f"unknown gan.preset '{preset}'")
                R, T = SCHEDULE_PRESETS[preset]
                gan_map.setdefault("R", R)
                gan_map.setdefault("T_inner", T)
            cfg = RunConfig(
                seed=int(d.get("seed", 0)),
                out_dir=str(d.get("out_dir", "./runs")),
                data=DataConfig(**(d.get("data", {}) or {})),
                autoencoder=AutoencoderConfig(**(d.get("autoencoder", {}) or {})),
                ot=OtConfig(**(d.get("ot", {}) or {})),
                gan=GanConfig(**gan_map),
                eval=EvalConfig(**(d.get("eval", {}) or {})),
                logging=LoggingConfig(**(d.get("logging", {}) or {})),
            )
        except TypeError as e:
            raise ConfigError(f"invalid configuration key: {e}") from e
        cfg.validate()
        return cfg

    def to_mapping(self) -> Dict[str, Any]:
        return dc.asdict(self)

    def validate(self) -> None:
        ae, ot, gan, ev = self.autoencoder, self.ot, self.gan, self.eval
        checks = [
            (ot.epsilon is None or ot.epsilon > 0, "ot.epsilon must be > 0"),
            (ot.expected_modes >= 1, "ot.expected_modes must be >= 1"),
            (ot.mc_samples > 0 and ot.verify_samples > 0, "ot sample counts must be positive"),
            (ot.max_iterations > 0, "ot.max_iterations must be positive"),
            (ot.patience >= 1, "ot.patience must be >= 1"),
            (ot.tolerance is None or ot.tolerance > 0, "ot.tolerance must be > 0"),
            (ot.optimizer in ("adam", "sgd"), "ot.optimizer must be adam or sgd"),
            (0.0 <= ot.normalize_margin < 0.5, "ot.normalize_margin must be in [0, 0.5)"),
            (ae.latent_dim >= 1, "autoencoder.latent_dim must be >= 1"),
            (ae.epochs > 0 and ae.batch_size > 0, "autoencoder counts must be positive"),
            (gan.beta >= 0, "gan.beta must be >= 0"),
            (gan.alpha_hidden >= 0 and gan.alpha_last_numerator >= 0, "gan.alpha must be >= 0"),
            (gan.R > 1, "gan.R must be > 1"),
            (gan.T_inner >= 1, "gan.T_inner must be >= 1"),
            (gan.lr_g > 0, "gan.lr_g must be > 0"),
            (gan.fake_ratio >= 1, "gan.fake_ratio must be >= 1"),
            (gan.batch_size > 0 and gan.batch_size % (gan.fake_ratio + 1) == 0,
             "gan.batch_size must be divisible by fake_ratio + 1"),
            (gan.epochs >= 0, "gan.epochs must be >= 0"),
            (gan.latent_source in ("ot", "gaussian"), "gan.latent_source must be ot or gaussian"),
            (ev.samples > 0 and ev.w2_samples > 0, "eval sample counts must be positive"),
            (ev.mode_radius is None or ev.mode_radius > 0, "eval.mode_radius must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config '{path}': {e}") from e
    if path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        # default YAML
        data = yaml.safe_load(text)
    return RunConfig.from_mapping(data or {})
