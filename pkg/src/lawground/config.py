"""Flat key=value configuration with dotted keys.

Every training-protocol constant is a default here and can be overridden by
a config file line like `optim.lr_backbone = 1e-3` or `# comment`. Unknown
keys and untypeable values raise ConfigError.
"""

from dataclasses import dataclass, fields

from .errors import ConfigError
from .losses import MODES


@dataclass
class TrainConfig:
    data_path: str = ""
    image_size: int = 64
    patch: int = 8
    d_model: int = 64
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    text_width: int = 64
    text_layers: int = 2
    text_heads: int = 4
    max_len: int = 40
    groups: int = 4
    rank_dw: int = 8
    reduction_r: int = 16
    pool_dim: int = 32
    threshold: float = 0.35
    loss_l1: float = 1.0
    loss_giou: float = 1.0
    loss_focal: float = 4.0
    loss_dice: float = 4.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lr_backbone: float = 4e-5
    lr_rest: float = 4e-4
    weight_decay: float = 1e-4
    decay_factor: float = 0.1
    decay_step: int = 0          # 0 -> two thirds of train.steps
    steps: int = 3000
    batch_size: int = 16
    seed: int = 0
    mode: str = "multitask"
    eval_every: int = 250
    log_every: int = 50
    flip_prob: float = 0.5
    lawg_enabled: bool = True
    lap_enabled: bool = True
    mth_enabled: bool = True


# dotted config key -> dataclass attribute
KEYMAP = {
    "data.path": "data_path",
    "model.image_size": "image_size",
    "model.patch": "patch",
    "model.d_model": "d_model",
    "model.blocks": "blocks",
    "model.heads": "heads",
    "model.mlp_ratio": "mlp_ratio",
    "text.width": "text_width",
    "text.layers": "text_layers",
    "text.heads": "text_heads",
    "text.max_len": "max_len",
    "law.groups": "groups",
    "law.rank_dw": "rank_dw",
    "law.reduction_r": "reduction_r",
    "head.pool_dim": "pool_dim",
    "head.threshold": "threshold",
    "loss.l1": "loss_l1",
    "loss.giou": "loss_giou",
    "loss.focal": "loss_focal",
    "loss.dice": "loss_dice",
    "loss.focal_alpha": "focal_alpha",
    "loss.focal_gamma": "focal_gamma",
    "optim.lr_backbone": "lr_backbone",
    "optim.lr_rest": "lr_rest",
    "optim.weight_decay": "weight_decay",
    "optim.decay_factor": "decay_factor",
    "optim.decay_step": "decay_step",
    "train.steps": "steps",
    "train.batch_size": "batch_size",
    "train.seed": "seed",
    "train.mode": "mode",
    "train.eval_every": "eval_every",
    "train.log_every": "log_every",
    "train.flip_prob": "flip_prob",
    "ablation.lawg_enabled": "lawg_enabled",
    "ablation.lap_enabled": "lap_enabled",
    "ablation.mth_enabled": "mth_enabled",
}

_ATTR_TO_KEY = {attr: key for key, attr in KEYMAP.items()}
_TYPES = {f.name: type(f.default) for f in fields(TrainConfig)}


def _parse_value(key, attr, raw):
    kind = _TYPES[attr]
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"bad value for {key}: {raw!r} (expected {kind.__name__})") from None


def parse_config_text(text, base=None):
    cfg = base or TrainConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        attr = KEYMAP.get(key)
        if attr is None:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, attr, _parse_value(key, attr, raw))
    return cfg


def load_config(path, base=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, base=base)


def config_to_text(cfg):
    """Canonical serialization (checkpoint echo); field order is fixed."""
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{_ATTR_TO_KEY[f.name]} = {value}")
    return "\n".join(lines) + "\n"


def validate(cfg):
    if cfg.mode not in MODES:
        raise ConfigError(f"train.mode must be one of {MODES}, got {cfg.mode!r}")
    if not cfg.mth_enabled and cfg.mode != "rec":
        cfg.mode = "rec"  # no mask branch, nothing to segment
    if cfg.image_size % cfg.patch:
        raise ConfigError("model.image_size must be divisible by model.patch")
    if cfg.text_width % cfg.groups:
        raise ConfigError("law.groups must divide text.width")
    if cfg.text_width % cfg.reduction_r:
        raise ConfigError("law.reduction_r must divide text.width")
    if not 0.0 < cfg.threshold < 1.0:
        raise ConfigError("head.threshold must lie in (0, 1)")
    if cfg.batch_size < 1 or cfg.steps < 0:
        raise ConfigError("train.batch_size must be >= 1 and train.steps >= 0")
    if cfg.decay_step == 0:
        cfg.decay_step = (2 * cfg.steps) // 3
    return cfg
