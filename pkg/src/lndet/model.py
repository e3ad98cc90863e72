"""The two network paths and their fusion.

SegNet: 4-level 3D U-Net with deep-supervision heads (2-channel softmax at
full, 1/2, 1/4, 1/8 resolution) whose decoder features also feed the
detection path. DetNet: conv embedding plus windowed multi-head
self-attention encoder stages, a decoder whose skip connections pass through
AutoFusion (concat seg decoder features, project, residual-refine), and a
7-channel head: Gaussian heatmap (sigmoid), box sizes (softplus), sub-voxel
center offsets (sigmoid - 0.5, matching the (-0.5, 0.5] target range).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .targets import ENCODER_VERSION

CHECKPOINT_FORMAT = 1
_DOWN_FACTOR = 8  # 2^(levels-1), input dims must divide


@dataclass(frozen=True)
class SegPathConfig:
    levels: int = 4
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 2
    deep_supervision: bool = True

    def __post_init__(self):
        if self.levels != 4:
            raise ValueError("segmentation path is fixed at 4 levels")
        if self.in_channels != 1 or self.out_channels != 2:
            raise ValueError("segmentation path expects 1 input and 2 output channels")
        if self.base_channels < 2:
            raise ValueError("base_channels must be >= 2")

    def channel_widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2 ** i for i in range(self.levels))


@dataclass(frozen=True)
class DetPathConfig:
    levels: int = 4
    base_channels: int = 8
    attention_window: tuple[int, int, int] = (4, 4, 4)
    attention_heads: int = 2
    head_channels: int = 7
    atf_enabled: bool = True

    def __post_init__(self):
        if self.levels != 4:
            raise ValueError("detection path is fixed at 4 levels")
        if self.head_channels != 7:
            raise ValueError("detection head is fixed at 7 channels")
        if len(self.attention_window) != 3 or any(w < 1 for w in self.attention_window):
            raise ValueError(f"bad attention_window {self.attention_window}")
        if self.attention_heads < 1:
            raise ValueError("attention_heads must be >= 1")
        if self.base_channels < 2 or (2 * self.base_channels) % self.attention_heads:
            raise ValueError("attention channel widths must divide attention_heads")

    def channel_widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2 ** i for i in range(self.levels))


@dataclass
class SegOutput:
    """prob: per-level foreground probabilities [B,1,...], full res first.
    logits: matching 2-channel pre-softmax maps. decoder_features: per-level
    decoder outputs (deepest = bottleneck), consumed by AutoFusion."""
    prob: list[torch.Tensor]
    logits: list[torch.Tensor]
    decoder_features: list[torch.Tensor]


@dataclass
class DetOutput:
    heatmap: torch.Tensor   # [B,1,X,Y,Z] in [0,1]
    whd: torch.Tensor       # [B,3,X,Y,Z] >= 0
    offsets: torch.Tensor   # [B,3,X,Y,Z] in (-0.5, 0.5)


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


def _check_input(x: torch.Tensor, in_channels: int) -> None:
    if x.dim() != 5 or x.shape[1] != in_channels:
        raise ValueError(f"expected [B,{in_channels},X,Y,Z] input, got {tuple(x.shape)}")
    if any(s % _DOWN_FACTOR for s in x.shape[2:]):
        raise ValueError(f"input dims {tuple(x.shape[2:])} must divide {_DOWN_FACTOR}")


def _up2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="nearest")


class SegNet(nn.Module):
    def __init__(self, config: SegPathConfig = SegPathConfig()):
        super().__init__()
        self.config = config
        c = config.channel_widths()
        self.enc0 = _conv_block(config.in_channels, c[0])
        self.enc1 = _conv_block(c[0], c[1], stride=2)
        self.enc2 = _conv_block(c[1], c[2], stride=2)
        self.enc3 = _conv_block(c[2], c[3], stride=2)
        # reduce channels at the coarse side before upsampling, then fuse the skip
        self.reduce3 = nn.Conv3d(c[3], c[2], 1)
        self.dec2 = _conv_block(2 * c[2], c[2])
        self.reduce2 = nn.Conv3d(c[2], c[1], 1)
        self.dec1 = _conv_block(2 * c[1], c[1])
        self.reduce1 = nn.Conv3d(c[1], c[0], 1)
        self.dec0 = _conv_block(2 * c[0], c[0])
        self.heads = nn.ModuleList(
            nn.Conv3d(ci, config.out_channels, 1) for ci in c)

    def forward(self, x: torch.Tensor) -> SegOutput:
        _check_input(x, self.config.in_channels)
        e0 = self.enc0(x)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([_up2(self.reduce3(e3)), e2], dim=1))
        d1 = self.dec1(torch.cat([_up2(self.reduce2(d2)), e1], dim=1))
        d0 = self.dec0(torch.cat([_up2(self.reduce1(d1)), e0], dim=1))
        features = [d0, d1, d2, e3]
        logits = [head(f) for head, f in zip(self.heads, features)]
        prob = [torch.softmax(l, dim=1)[:, 1:2] for l in logits]
        return SegOutput(prob=prob, logits=logits, decoder_features=features)


class WindowAttention3D(nn.Module):
    """Non-shifted multi-head self-attention inside non-overlapping 3D
    windows, with a small MLP; windows clamp to the feature resolution when
    the map is smaller than the window."""

    def __init__(self, dim: int, window: tuple[int, int, int], heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.window = tuple(window)
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def _attend(self, tokens: torch.Tensor) -> torch.Tensor:
        n, t, c = tokens.shape
        hd = c // self.heads
        q, k, v = self.qkv(tokens).reshape(n, t, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * hd ** -0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, t, c)
        return self.proj(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, *spatial = x.shape
        w = tuple(min(wd, s) for wd, s in zip(self.window, spatial))
        if any(s % wd for s, wd in zip(spatial, w)):
            raise ValueError(f"feature dims {tuple(spatial)} not divisible by window {w}")
        nx, ny, nz = (s // wd for s, wd in zip(spatial, w))
        # [B,C,X,Y,Z] -> [B*nwin, wx*wy*wz, C]
        t = x.reshape(b, c, nx, w[0], ny, w[1], nz, w[2])
        t = t.permute(0, 2, 4, 6, 3, 5, 7, 1).reshape(b * nx * ny * nz, w[0] * w[1] * w[2], c)
        t = t + self._attend(self.norm1(t))
        t = t + self.mlp(self.norm2(t))
        t = t.reshape(b, nx, ny, nz, w[0], w[1], w[2], c)
        return t.permute(0, 7, 1, 4, 2, 5, 3, 6).reshape(b, c, *spatial)


class AutoFusion(nn.Module):
    """Feature-level fusion of a det-path encoder map with the seg-path
    decoder map of the same level: channel concat, 1x1 projection to the det
    width, then a two-conv residual branch on the projection. Zeroing the
    branch leaves exactly the projection."""

    def __init__(self, det_channels: int, seg_channels: int):
        super().__init__()
        hidden = max(det_channels // 2, 4)
        self.proj = nn.Conv3d(det_channels + seg_channels, det_channels, 1)
        self.res1 = nn.Conv3d(det_channels, hidden, 3, padding=1)
        self.res2 = nn.Conv3d(hidden, det_channels, 3, padding=1)

    def forward(self, det_enc: torch.Tensor, seg_dec: torch.Tensor) -> torch.Tensor:
        if det_enc.shape[2:] != seg_dec.shape[2:]:
            raise ValueError(
                f"spatial mismatch {tuple(det_enc.shape[2:])} vs {tuple(seg_dec.shape[2:])}")
        p = self.proj(torch.cat([det_enc, seg_dec], dim=1))
        return p + self.res2(F.relu(self.res1(p)))


class DetNet(nn.Module):
    """Detection path. Encoder: conv embed at full resolution, then three
    strided-conv + windowed-attention stages. Decoder consumes
    [upsampled deeper features || skip] where the skip is AutoFusion(det
    encoder, seg decoder) when fusion is enabled and the raw encoder map
    otherwise."""

    def __init__(self, config: DetPathConfig = DetPathConfig(),
                 seg_config: SegPathConfig = SegPathConfig()):
        super().__init__()
        self.config = config
        self.seg_config = seg_config
        c = config.channel_widths()
        sc = seg_config.channel_widths()
        self.embed = _conv_block(1, c[0])
        self.down1 = _conv_block(c[0], c[1], stride=2)
        self.attn1 = WindowAttention3D(c[1], config.attention_window, config.attention_heads)
        self.down2 = _conv_block(c[1], c[2], stride=2)
        self.attn2 = WindowAttention3D(c[2], config.attention_window, config.attention_heads)
        self.down3 = _conv_block(c[2], c[3], stride=2)
        self.attn3 = WindowAttention3D(c[3], config.attention_window, config.attention_heads)
        self.fuse = nn.ModuleList(AutoFusion(c[i], sc[i]) for i in range(4))
        self.dec3 = _conv_block(2 * c[3], c[3])
        self.reduce3 = nn.Conv3d(c[3], c[2], 1)
        self.dec2 = _conv_block(2 * c[2], c[2])
        self.reduce2 = nn.Conv3d(c[2], c[1], 1)
        self.dec1 = _conv_block(2 * c[1], c[1])
        self.reduce1 = nn.Conv3d(c[1], c[0], 1)
        self.dec0 = _conv_block(2 * c[0], c[0])
        self.head = nn.Conv3d(c[0], config.head_channels, 1)

    def forward(self, x: torch.Tensor, seg: SegOutput) -> DetOutput:
        _check_input(x, 1)
        if seg is None or len(seg.decoder_features) != 4:
            raise ValueError("detection forward requires the 4 seg decoder feature levels")
        for i, f in enumerate(seg.decoder_features):
            if tuple(f.shape[2:]) != tuple(s // 2 ** i for s in x.shape[2:]):
                raise ValueError(f"seg feature level {i} has shape {tuple(f.shape[2:])}, "
                                 f"inconsistent with input {tuple(x.shape[2:])}")
        e = [self.embed(x)]
        e.append(self.attn1(self.down1(e[0])))
        e.append(self.attn2(self.down2(e[1])))
        e.append(self.attn3(self.down3(e[2])))
        if self.config.atf_enabled:
            skips = [self.fuse[i](e[i], seg.decoder_features[i]) for i in range(4)]
        else:
            skips = e
        d3 = self.dec3(torch.cat([e[3], skips[3]], dim=1))
        d2 = self.dec2(torch.cat([_up2(self.reduce3(d3)), skips[2]], dim=1))
        d1 = self.dec1(torch.cat([_up2(self.reduce2(d2)), skips[1]], dim=1))
        d0 = self.dec0(torch.cat([_up2(self.reduce1(d1)), skips[0]], dim=1))
        raw = self.head(d0)
        return DetOutput(heatmap=torch.sigmoid(raw[:, 0:1]),
                         whd=F.softplus(raw[:, 1:4]),
                         offsets=torch.sigmoid(raw[:, 4:7]) - 0.5)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _config_to_dict(config) -> dict:
    d = dataclasses.asdict(config)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def _seg_config_from_dict(d: dict) -> SegPathConfig:
    return SegPathConfig(**d)


def _det_config_from_dict(d: dict) -> DetPathConfig:
    d = dict(d)
    d["attention_window"] = tuple(d["attention_window"])
    return DetPathConfig(**d)


def save_checkpoint(path, model: nn.Module, seed: int, seg_ref: str | None = None,
                    extra: dict | None = None) -> None:
    """Versioned checkpoint: format tag, path kind, full config, target
    encoder version, seed, and parameters. Det checkpoints carry the seg
    config they were built against plus an optional seg checkpoint
    reference."""
    if isinstance(model, SegNet):
        kind = "seg"
        payload_cfg = {"config": _config_to_dict(model.config)}
    elif isinstance(model, DetNet):
        kind = "det"
        payload_cfg = {"config": _config_to_dict(model.config),
                       "seg_config": _config_to_dict(model.seg_config)}
    else:
        raise ValueError(f"cannot checkpoint {type(model).__name__}")
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "encoder_version": ENCODER_VERSION,
        "seed": int(seed),
        "seg_ref": seg_ref,
        "extra": dict(extra or {}),
        "state_dict": model.state_dict(),
        **payload_cfg,
    }
    torch.save(payload, path)


def load_checkpoint(path, kind: str) -> tuple[nn.Module, dict]:
    """Rebuild the model from its stored config; fails on format, kind, or
    encoder-version mismatch rather than loading silently wrong weights."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    if payload.get("kind") != kind:
        raise ValueError(f"checkpoint holds a {payload.get('kind')!r} model, expected {kind!r}")
    if payload.get("encoder_version") != ENCODER_VERSION:
        raise ValueError(
            f"checkpoint targets encoder {payload.get('encoder_version')!r}, "
            f"current is {ENCODER_VERSION!r}")
    if kind == "seg":
        model: nn.Module = SegNet(_seg_config_from_dict(payload["config"]))
    else:
        model = DetNet(_det_config_from_dict(payload["config"]),
                       _seg_config_from_dict(payload["seg_config"]))
    model.load_state_dict(payload["state_dict"])
    meta = {k: payload.get(k) for k in ("kind", "seed", "seg_ref", "extra", "encoder_version")}
    return model, meta
