"""U-shaped S3TU-Net assembly, configuration and checkpoints."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .blocks import D2BRConv, DoubleConv, DropBlockParams, DWFConv
from .nn import Conv2d, ConvTranspose2d, Module
from .rmsvit import RmSvitConfig, RMSViT
from .s2mlp import S2MLPLink
from .serialize import FormatError, read_tensor, write_tensor

DEPTH = 3
CHECKPOINT_MAGIC = b"S3TUCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    in_channels: int = 1
    base_channels: int = 16
    depth: int = DEPTH
    input_size: tuple[int, int] = (128, 128)
    rm_svit: RmSvitConfig = field(default_factory=RmSvitConfig)
    dropblock: DropBlockParams = field(default_factory=DropBlockParams)
    lka_repeats: int = 1
    # Ablation switches: structured conv blocks, RM-SViT bottleneck, S2-MLP skip links.
    use_structured: bool = True
    use_rmsvit: bool = True
    use_s2link: bool = True

    def __post_init__(self):
        if isinstance(self.rm_svit, dict):
            self.rm_svit = RmSvitConfig(**self.rm_svit)
        if isinstance(self.dropblock, dict):
            self.dropblock = DropBlockParams(**self.dropblock)
        self.input_size = tuple(int(s) for s in self.input_size)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth + 1)]

    @property
    def bottleneck_size(self) -> tuple[int, int]:
        h, w = self.input_size
        return h // 2 ** self.depth, w // 2 ** self.depth

    def validate(self) -> None:
        problems = []
        if self.depth != DEPTH:
            problems.append(f"depth must be {DEPTH}, got {self.depth}")
        if self.in_channels < 1 or self.base_channels < 1:
            problems.append("in_channels and base_channels must be positive")
        h, w = self.input_size
        f = 2 ** self.depth
        if h % f or w % f:
            problems.append(f"input size {h}x{w} not divisible by 2^{self.depth} = {f}")
        bh, bw = self.bottleneck_size
        if self.use_rmsvit and not (h % f or w % f):
            gh, gw = self.rm_svit.grid
            if bh % gh or bw % gw:
                problems.append(f"RM-SViT grid {gh}x{gw} does not divide bottleneck map {bh}x{bw}")
            if self.channels[-1] % self.rm_svit.heads:
                problems.append(
                    f"RM-SViT heads={self.rm_svit.heads} does not divide "
                    f"bottleneck channels {self.channels[-1]}"
                )
        if self.use_structured and not (h % f or w % f):
            if self.dropblock.block_size > min(bh, bw):
                problems.append(
                    f"DropBlock block_size {self.dropblock.block_size} exceeds the smallest "
                    f"feature map {bh}x{bw}"
                )
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["rm_svit"]["grid"] = list(self.rm_svit.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class _Slot(Module):
    """Holds one named sub-block so parameter names read e.g. ``enc0.dwf.conv1.w``."""

    def __init__(self, name: str, block: Module | None):
        super().__init__()
        self.slot = name
        if block is not None:
            setattr(self, name, block)

    @property
    def block(self):
        return getattr(self, self.slot, None)

    def forward(self, x, rng=None):
        block = self.block
        return x if block is None else block(x, rng)


class UpStage(Module):
    def __init__(self, in_ch, out_ch, rng, block_name, block):
        super().__init__()
        self.tconv = ConvTranspose2d(in_ch, out_ch, rng)
        self.slot = block_name
        setattr(self, block_name, block)

    def forward(self, skip, x, rng=None):
        up = self.tconv(x)
        return getattr(self, self.slot)(ops.concat([skip, up], axis=1), rng)


class S3TUNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels
        db = cfg.dropblock

        def mid_block(cin, cout):
            if cfg.use_structured:
                return "d2br", D2BRConv(cin, cout, rng, db.block_size, db.drop_prob)
            return "conv", DoubleConv(cin, cout, rng)

        def head_block(cin, cout):
            if cfg.use_structured:
                return "dwf", DWFConv(cin, cout, rng, cfg.lka_repeats)
            return "conv", DoubleConv(cin, cout, rng)

        self.enc0 = _Slot(*head_block(cfg.in_channels, ch[0]))
        self.enc1 = _Slot(*mid_block(ch[0], ch[1]))
        self.enc2 = _Slot(*mid_block(ch[1], ch[2]))
        self.enc3 = _Slot(*mid_block(ch[2], ch[3]))
        self.bottleneck = _Slot("rmsvit", RMSViT(ch[3], cfg.rm_svit, rng) if cfg.use_rmsvit else None)
        self.dec = _Slot(*head_block(ch[3], ch[3]))
        self.up2 = UpStage(ch[3], ch[2], rng, *mid_block(2 * ch[2], ch[2]))
        self.skip2 = _Slot("s2link", S2MLPLink(ch[2], rng) if cfg.use_s2link else None)
        self.up1 = UpStage(ch[2], ch[1], rng, *mid_block(2 * ch[1], ch[1]))
        self.skip1 = _Slot("s2link", S2MLPLink(ch[1], rng) if cfg.use_s2link else None)
        self.up0 = UpStage(ch[1], ch[0], rng, *mid_block(2 * ch[0], ch[0]))
        self.skip0 = _Slot("s2link", S2MLPLink(ch[0], rng) if cfg.use_s2link else None)
        self.out = Conv2d(ch[0], 1, 1, rng)

    def check_input(self, x) -> None:
        expected = (self.cfg.in_channels,) + self.cfg.input_size
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ops.ShapeError(f"model expects N x {' x '.join(map(str, expected))} input, got {x.shape}")

    def forward(self, x, rng=None, return_features: bool = False):
        self.check_input(x)
        e0 = self.enc0(x, rng)
        e1 = self.enc1(ops.maxpool2d(e0), rng)
        e2 = self.enc2(ops.maxpool2d(e1), rng)
        e3 = self.enc3(ops.maxpool2d(e2), rng)
        d3 = self.dec(self.bottleneck(e3, rng), rng)
        d2 = self.up2(self.skip2(e2, rng), d3, rng)
        d1 = self.up1(self.skip1(e1, rng), d2, rng)
        d0 = self.up0(self.skip0(e0, rng), d1, rng)
        out = ops.sigmoid(self.out(d0))
        if return_features:
            return out, {"enc": [e0, e1, e2, e3], "dec": [d0, d1, d2, d3]}
        return out


def build(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> S3TUNet:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return S3TUNet(cfg, rng)


def forward(model: S3TUNet, x, training: bool = False, rng=None):
    model.train(training)
    return model(x, rng)


def parameter_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: S3TUNet, path, extra: dict | None = None) -> None:
    """Write config header plus every parameter and buffer as named tensor records.

    Layout: magic | u32 version | u64 header length | JSON header | per tensor
    (u32 name length, utf-8 name, tensor record).
    """
    state = model.state_dict()
    header = json.dumps({
        "model_config": model.cfg.to_dict(),
        "tensors": list(state),
        "extra": extra or {},
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for name, arr in state.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(fh, arr)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Decode a checkpoint into (header, name -> array) without building a model."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
        raw = fh.read(12)
        if len(raw) != 12:
            raise FormatError(f"{path}: truncated checkpoint header")
        version, hlen = struct.unpack("<IQ", raw)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        hbytes = fh.read(hlen)
        if len(hbytes) != hlen:
            raise FormatError(f"{path}: truncated checkpoint header")
        try:
            header = json.loads(hbytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt checkpoint header ({exc})") from None
        tensors = {}
        for expected in header["tensors"]:
            raw = fh.read(4)
            if len(raw) != 4:
                raise FormatError(f"{path}: truncated before tensor {expected!r}")
            (nlen,) = struct.unpack("<I", raw)
            name = fh.read(nlen).decode("utf-8", errors="replace")
            if name != expected:
                raise FormatError(f"{path}: expected tensor {expected!r}, found {name!r}")
            try:
                tensors[name] = read_tensor(fh)
            except FormatError as exc:
                raise FormatError(f"{path}: tensor {name!r}: {exc}") from None
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last tensor")
    return header, tensors


def load_checkpoint(path) -> S3TUNet:
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    model = build(cfg, 0)
    model.load_state_dict(tensors)
    model.eval()
    return model
