"""Dataclass configs and named profiles.

The toy profile is the tested default: mechanism checks, not capacity, are the
point. The full-scale profile mirrors the production-sized dimensions and is
provided for completeness; it is far too heavy for the desk-scale suite.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass(frozen=True)
class WorldConfig:
    n_viewpoints: int = 12
    n_rooms: int = 4
    n_objects: int = 10
    branching: int = 3
    feature_dim: int = 24
    box_feature_dim: int = 16
    seed: int = 0
    multiview_prob: float = 0.3
    feature_noise: float = 0.1
    grid_pitch_m: float = 3.4
    grid_jitter_m: float = 0.9
    extra_edge_max_m: float = 6.0


@dataclass(frozen=True)
class EncoderConfig:
    lang_dim: int = 32
    vis_dim: int = 32
    pooled_dim: int = 32
    heads: int = 4
    ff_mult: int = 2
    n_lang_blocks: int = 2
    n_vis_blocks: int = 2
    n_align_blocks: int = 1
    max_tokens: int = 24  # includes the leading CLS slot


@dataclass(frozen=True)
class DecoderConfig:
    hidden_dim: int = 32          # LSTM/memory state width
    context_dim: int = 32         # BiLSTM output width (instruction context rows)
    grounded_dim: int = 32        # output width of the shared candidate MLP
    tile_factor: int = 4          # trig angle block is 4 * tile_factor wide
    top_k: int = 3                # boxes averaged into a view comprehension
    n_mem_blocks: int = 3
    n_state_blocks: int = 3
    mem_heads: int = 4
    g_hidden: tuple[int, ...] = (48,)
    head_hidden: int = 16         # progress / value head hidden width
    keep_cls_row: bool = True     # keep the pooled-token row in the context sequence
    max_decode_len: int = 8
    lambda_sg: float = 1.0
    lambda_og: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 400
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 5e-4
    grad_clip: float = 40.0
    discount: float = 0.9
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    value_coef: float = 0.5
    eval_every: int = 100
    seed: int = 0
    progress_literal_distance: bool = False  # flag: regress remaining distance, not progress made


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 3
    lr: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float = 40.0
    batch_size: int = 8
    seed: int = 0


def toy_profile() -> dict:
    return {
        "world": WorldConfig(),
        "encoder": EncoderConfig(),
        "decoder": DecoderConfig(),
        "train": TrainConfig(),
        "pretrain": PretrainConfig(),
    }


def paper_profile() -> dict:
    """Full-scale dimensions; provided as a named profile, not a test target."""
    return {
        "world": WorldConfig(n_viewpoints=60, n_rooms=10, n_objects=40,
                             feature_dim=2048, box_feature_dim=1024),
        "encoder": EncoderConfig(lang_dim=768, vis_dim=1024, pooled_dim=1024,
                                 heads=8, n_lang_blocks=12, n_vis_blocks=6,
                                 n_align_blocks=6, max_tokens=40),
        "decoder": DecoderConfig(hidden_dim=512, context_dim=1024, grounded_dim=1024,
                                 tile_factor=32, top_k=3, n_mem_blocks=3,
                                 n_state_blocks=3, mem_heads=8, g_hidden=(2048,),
                                 max_decode_len=40),
        "train": TrainConfig(iterations=13000, batch_size=64, lr=1e-4,
                             weight_decay=5e-4, grad_clip=40.0, discount=0.9),
        "pretrain": PretrainConfig(epochs=10, lr=4e-5, batch_size=32),
    }


PROFILES = {"toy": toy_profile, "paper": paper_profile}


_CONFIG_TYPES = {
    "world": WorldConfig,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "train": TrainConfig,
    "pretrain": PretrainConfig,
}


def profile_to_dict(profile: dict) -> dict:
    out = {}
    for key, cfg in profile.items():
        d = dataclasses.asdict(cfg)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        out[key] = d
    return out


def profile_from_dict(data: dict) -> dict:
    profile = {}
    for key, values in data.items():
        cls = _CONFIG_TYPES[key]
        kwargs = dict(values)
        for f in dataclasses.fields(cls):
            if f.name in kwargs and isinstance(kwargs[f.name], list):
                kwargs[f.name] = tuple(kwargs[f.name])
        profile[key] = cls(**kwargs)
    return profile


def save_profile(path: str | Path, profile: dict) -> None:
    Path(path).write_text(json.dumps(profile_to_dict(profile), indent=2, sort_keys=True) + "\n")


def load_profile(path: str | Path) -> dict:
    return profile_from_dict(json.loads(Path(path).read_text()))
