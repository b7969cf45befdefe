"""End-to-end grounding model: text encoder -> weight generator -> visual
backbone -> box/mask head, with the three component toggles used by the
ablation arms.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .head import MultitaskHead
from .law import build_law_params, generate_all
from .params import ParamStore
from .tensor import Tensor
from .text import TextEncoder, tokenize
from .vit import VisualBackbone

BACKBONE_PREFIXES = ("text.", "vit.")


@dataclass
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    d_model: int = 64
    blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    d_text: int = 64
    text_layers: int = 2
    text_heads: int = 4
    max_len: int = 40
    groups: int = 4
    rank_dw: int = 8
    reduction: int = 16
    pool_dim: int = 32
    threshold: float = 0.35
    lawg_enabled: bool = True
    lap_enabled: bool = True
    mth_enabled: bool = True


@dataclass
class Prediction:
    box: Tensor                     # (4,) normalized cx, cy, w, h
    mask: object = None             # MaskPrediction or None
    visual: object = None           # VisualFeatures
    alphas: list = field(default_factory=list)  # per-layer (G, L) token attention
    attention: list = field(default_factory=list)  # per-layer (H, T, T) probs
    pool_attention: object = None   # (side, side) Tensor or None


class GroundingModel:
    def __init__(self, config, vocab, seed=0):
        self.config = config
        self.vocab = vocab
        self.store = ParamStore(seed)
        self.text = TextEncoder(
            self.store, vocab_size=len(vocab), width=config.d_text,
            layers=config.text_layers, heads=config.text_heads,
            max_len=config.max_len)
        self.backbone = VisualBackbone(
            self.store, image_size=config.image_size, patch=config.patch,
            d_model=config.d_model, blocks=config.blocks, heads=config.heads,
            mlp_ratio=config.mlp_ratio)
        self.law = None
        if config.lawg_enabled:
            self.law = build_law_params(
                self.store, self.backbone, d_l=config.d_text,
                groups=config.groups, reduction=config.reduction,
                rank_dw=config.rank_dw)
        self.head = MultitaskHead(
            self.store, d_model=config.d_model, d_text=config.d_text,
            pool_dim=config.pool_dim, stride=config.patch,
            lap_enabled=config.lap_enabled, mask_enabled=config.mth_enabled)

    def tokenize(self, expression):
        return tokenize(expression, self.vocab, self.config.max_len)

    def image_tensor(self, rgb_uint8, requires_grad=False):
        """(H, W, 3) uint8 -> (3, H, W) float tensor in [0, 1]."""
        arr = np.transpose(rgb_uint8.astype(np.float64) / 255.0, (2, 0, 1))
        return Tensor(arr, requires_grad=requires_grad)

    def forward(self, image, tokens, collect_attention=False,
                use_static_weights=False):
        """Full forward pass for one (image, expression) pair.

        use_static_weights bypasses weight generation and runs the backbone
        on its own static projections (the reference path for the
        zero-initialized dynamic term).
        """
        feats = self.text.encode(tokens)
        alphas = []
        if self.law is not None and not use_static_weights:
            weights, alpha_tensors = generate_all(feats.feats, feats.mask, self.law)
            alphas = [a.data for a in alpha_tensors]
        else:
            weights = self.backbone.static_weights()
        visual, attn = self.backbone.forward(image, weights,
                                             collect_attention=collect_attention)
        cls_feat = feats.cls
        pool_map = None
        if self.head.lap_enabled:
            pooled, pool_map = self.head.lap_pool(visual, cls_feat)
        else:
            pooled = self.head.average_pool(visual)
        box = self.head.predict_box(pooled)
        mask = self.head.predict_mask(visual, cls_feat) if self.head.mask_enabled else None
        return Prediction(box=box, mask=mask, visual=visual, alphas=alphas,
                          attention=attn or [], pool_attention=pool_map)

    def parameter_groups(self):
        """(backbone, rest) parameter lists for the two step sizes."""
        backbone, rest = [], []
        for name, p in self.store.items():
            (backbone if name.startswith(BACKBONE_PREFIXES) else rest).append((name, p))
        return backbone, rest

    def num_generator_params(self):
        return self.store.num_values("law.")

    def check_config(self):
        c = self.config
        if c.mth_enabled is False and c.lap_enabled is False and not c.lawg_enabled:
            raise ConfigError("at least one component must stay enabled")
