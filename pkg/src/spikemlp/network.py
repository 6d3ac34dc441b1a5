"""Multi-stage spiking MLP network, parameter counting and checkpoints."""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .blocks import ChannelBlock, Head, PatchPartition, SpeCell, TokenBlock
from .config import ConfigError, NetworkConfig, RunConfig
from .layers import BatchNorm
from .neuron import LifParams, LifSite
from .tensor import Parameter, Tensor, no_grad, reshape


class Stage:
    def __init__(self, index: int, cfg: NetworkConfig, lif: LifParams, rng: np.random.Generator):
        self.index = index
        self.name = f"stage{index + 1}"
        c = cfg.stage_channels(index)
        h, w = cfg.stage_size(index)
        self.spe = SpeCell(c // 2, c, lif, f"{self.name}.spe", rng) if index > 0 else None
        self.mixers = []
        for m in range(cfg.stage_layers[index]):
            prefix = f"{self.name}.mixer{m}"
            self.mixers.append((TokenBlock(c, h, w, lif, f"{prefix}.token", rng),
                                ChannelBlock(c, cfg.alpha, lif, f"{prefix}.channel", rng)))
        last = index == cfg.num_stages - 1
        self.exit = None if last else LifSite(f"{self.name}.exit", lif)

    def blocks(self):
        if self.spe is not None:
            yield self.spe
        for tok, ch in self.mixers:
            yield tok
            yield ch


class Network:
    def __init__(self, cfg: NetworkConfig):
        self.config = cfg
        lif = LifParams(cfg.tau, cfg.v_th, cfg.surrogate_slope, cfg.detach_reset)
        rng = np.random.default_rng(cfg.seed)
        h, w = cfg.stage_size(0)
        self.patch = PatchPartition(cfg.in_channels, cfg.c1, cfg.patch_size, lif, "stage1.patch", rng)
        self.stages = [Stage(s, cfg, lif, rng) for s in range(cfg.num_stages)]
        last = cfg.num_stages - 1
        hl, wl = cfg.stage_size(last)
        self.head = Head(cfg.stage_channels(last), hl, wl, cfg.num_classes, lif, "head", rng, pool=cfg.head_pool)
        self.dtype = np.float64
        self.is_folded = False

    @property
    def T(self) -> int:
        return self.config.T

    def blocks(self):
        yield self.patch
        for st in self.stages:
            yield from st.blocks()
        yield self.head

    def sites(self) -> list[LifSite]:
        out = list(self.patch.sites())
        for st in self.stages:
            for b in st.blocks():
                out.extend(b.sites())
            if st.exit is not None:
                out.append(st.exit)
        out.extend(self.head.sites())
        return out

    def parameters(self) -> list[Parameter]:
        return [p for b in self.blocks() for p in b.parameters()]

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for b in self.blocks():
            out.update(b.buffers())
        return out

    def batchnorms(self) -> list[BatchNorm]:
        return [proj.bn for b in self.blocks() for _, proj in b.projections() if proj.bn is not None]

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def train(self) -> "Network":
        for bn in self.batchnorms():
            bn.training = True
        return self

    def eval(self) -> "Network":
        for bn in self.batchnorms():
            bn.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_head_pool(self, pool: bool) -> None:
        self.head.pool = pool

    def fold(self, dtype=np.float32) -> "Network":
        """Copy of this network with every BN absorbed into its layer (eval statistics)."""
        net = copy.deepcopy(self)
        for b in net.blocks():
            b.fold(dtype)
        net.dtype = dtype
        net.is_folded = True
        return net

    def forward(self, images, T: int | None = None) -> Tensor:
        """Logits for every simulation step, shape [T x B x num_classes]."""
        T = self.config.T if T is None else T
        if T <= 0:
            raise ValueError(f"T must be positive, got {T}")
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        elif images.dtype != self.dtype:
            images = Tensor(images.data.astype(self.dtype))
        cfg = self.config
        b = images.shape[0]
        if images.shape[1:] != (cfg.in_channels,) + tuple(cfg.img_size):
            raise ValueError(f"expected images [B x {cfg.in_channels} x {cfg.img_size[0]} x {cfg.img_size[1]}], "
                             f"got {images.shape}")
        spikes, anchor = self.patch(images, T)
        x = anchor
        for st in self.stages:
            if st.spe is not None:
                spikes, anchor = st.spe(spikes, T)
                x = anchor
            prev = None
            for m, (tok, ch) in enumerate(st.mixers):
                first = m == 0
                y = tok(x, anchor, T, cfg.skips, spikes=spikes if first else None, prev=prev, first=first)
                x = ch(y, anchor, T, cfg.skips)
                prev = x
            if st.exit is not None:
                spikes = st.exit(x, T)
        logits = self.head(x, T)
        return reshape(logits, (T, b, cfg.num_classes))

    __call__ = forward

    def predict(self, images, T: int | None = None, batch_size: int = 64) -> np.ndarray:
        """Time-averaged logits, evaluated without recording a tape."""
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i:i + batch_size], T).data.mean(axis=0))
        return np.concatenate(out, axis=0)


def build(cfg: NetworkConfig) -> Network:
    return Network(cfg)


def count_params(cfg: NetworkConfig) -> int:
    """Closed-form parameter count (weights + BN affine) without building the network."""
    total = cfg.in_channels * cfg.c1 * cfg.patch_size ** 2 + 2 * cfg.c1
    for s, n_mix in enumerate(cfg.stage_layers):
        c = cfg.stage_channels(s)
        h, w = cfg.stage_size(s)
        if s > 0:
            node = c // 3
            total += 3 * ((c // 2) * node * 9 + 2 * node)
            total += 2 * (node * node * 9 + 2 * node)
        token = h * h + 2 * h + w * w + 2 * w + 3 * c * c + 2 * c
        channel = 2 * cfg.alpha * c * c + 2 * cfg.alpha * c + 2 * c
        total += n_mix * (token + channel)
    c = cfg.stage_channels(cfg.num_stages - 1)
    h, w = cfg.stage_size(cfg.num_stages - 1)
    hw = h * w
    total += hw * hw + 2 * hw + cfg.num_classes * c
    return total


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   b"SMLX" | u32 version | u32 meta_len | meta (canonical text) | u32 n_blobs
#   per blob: u32 name_len | name | u8 itemsize (4 or 8) | u32 rank | u32 dims[rank] | raw values

MAGIC = b"SMLX"
VERSION = 1
_OPTIM_PREFIX = "optim.velocity."


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    run: RunConfig
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    folded: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> NetworkConfig:
        return self.run.network

    def velocities(self) -> dict[str, np.ndarray]:
        n = len(_OPTIM_PREFIX)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(_OPTIM_PREFIX)}

    def to_bytes(self) -> bytes:
        meta = self.run.to_dict()
        meta.update(self.extra)
        meta["ckpt_epoch"] = self.epoch
        meta["ckpt_folded"] = self.folded
        meta_b = cfgmod.dumps(meta).encode()
        parts = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in (np.float32, np.float64):
                raise CheckpointError(f"blob {name!r}: unsupported dtype {arr.dtype}")
            nb = name.encode()
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            parts.append(struct.pack("<I", len(nb)) + nb)
            parts.append(struct.pack("<BI", arr.dtype.itemsize, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(le).tobytes())
        return b"".join(parts)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        pos = 0

        def take(n: int, what: str) -> bytes:
            nonlocal pos
            if pos + n > len(buf):
                raise CheckpointError(f"truncated checkpoint while reading {what}")
            out = buf[pos:pos + n]
            pos += n
            return out

        if take(4, "magic") != MAGIC:
            raise CheckpointError("bad magic: not a spikemlp checkpoint")
        version, meta_len = struct.unpack("<II", take(8, "header"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        try:
            meta = cfgmod.loads(take(meta_len, "metadata").decode())
        except (UnicodeDecodeError, ConfigError) as e:
            raise CheckpointError(f"corrupt metadata: {e}") from None
        epoch = int(meta.pop("ckpt_epoch", 0))
        folded = bool(meta.pop("ckpt_folded", False))
        extra = {k: meta.pop(k) for k in list(meta) if k.startswith("ckpt_")}
        try:
            run = RunConfig.from_dict(meta)
        except ConfigError as e:
            raise CheckpointError(f"checkpoint config invalid: {e}") from None
        (n_blobs,) = struct.unpack("<I", take(4, "blob count"))
        tensors = {}
        for i in range(n_blobs):
            (name_len,) = struct.unpack("<I", take(4, f"blob {i} name length"))
            name = take(name_len, f"blob {i} name").decode(errors="replace")
            itemsize, rank = struct.unpack("<BI", take(5, f"blob {name!r} header"))
            if itemsize not in (4, 8):
                raise CheckpointError(f"blob {name!r}: bad item size {itemsize}")
            if rank > 8:
                raise CheckpointError(f"blob {name!r}: implausible rank {rank}")
            dims = struct.unpack(f"<{rank}I", take(4 * rank, f"blob {name!r} dims"))
            count = int(np.prod(dims, dtype=np.int64))
            raw = take(count * itemsize, f"blob {name!r} values")
            dt = np.dtype("<f4" if itemsize == 4 else "<f8")
            tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        if pos != len(buf):
            raise CheckpointError(f"{len(buf) - pos} trailing bytes after last blob (corrupt blob length?)")
        return cls(run, tensors, epoch, folded, extra)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def checkpoint_of(net: Network, run: RunConfig | None = None, epoch: int = 0,
                  velocities: dict[str, np.ndarray] | None = None) -> Checkpoint:
    run = run if run is not None else RunConfig(network=net.config)
    if run.network != net.config:
        run = run.replace(network=net.config)
    tensors = {name: p.data for name, p in net.named_parameters().items()}
    tensors.update(net.buffers())
    for name, v in (velocities or {}).items():
        tensors[_OPTIM_PREFIX + name] = v
    return Checkpoint(run, tensors, epoch, net.is_folded)


def save_checkpoint(net: Network, path: str | Path, run: RunConfig | None = None, epoch: int = 0,
                    velocities: dict[str, np.ndarray] | None = None) -> Checkpoint:
    ckpt = checkpoint_of(net, run, epoch, velocities)
    ckpt.save(path)
    return ckpt


def network_from_checkpoint(ckpt: Checkpoint, T: int | None = None) -> Network:
    """Rebuild the architecture and restore every parameter and running statistic.

    Everything is validated before anything is assigned, so a bad blob leaves no
    half-loaded network behind.
    """
    cfg = ckpt.config if T is None else ckpt.config.replace(T=T)
    net = Network(cfg)
    if ckpt.folded:
        net = net.fold()
    params = net.named_parameters()
    bufs = net.buffers()
    expected = set(params) | set(bufs)
    stored = {k for k in ckpt.tensors if not k.startswith(_OPTIM_PREFIX)}
    missing, unexpected = expected - stored, stored - expected
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
    if unexpected:
        raise CheckpointError(f"checkpoint has unknown tensors: {sorted(unexpected)[:5]}")
    for name in sorted(expected):
        want = params[name].shape if name in params else bufs[name].shape
        got = ckpt.tensors[name].shape
        if tuple(want) != tuple(got):
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {got}, network {want}")
    dtype = np.float32 if ckpt.folded else np.float64
    for name, p in params.items():
        p.data = np.array(ckpt.tensors[name], dtype=dtype)
        p.zero_grad()
    for name, buf in bufs.items():
        buf[...] = ckpt.tensors[name]
    if ckpt.folded:
        net.head.fold(dtype)  # rederive the per-position classifier from the restored weights
    return net


def load_checkpoint(path: str | Path, T: int | None = None) -> tuple[Network, Checkpoint]:
    ckpt = Checkpoint.load(path)
    return network_from_checkpoint(ckpt, T), ckpt


def reload_with_T(path: str | Path, T: int) -> Network:
    """Time-inheritance reload: same weights and statistics, new number of steps."""
    if T <= 0:
        raise ConfigError(f"T must be positive, got {T}")
    net, _ = load_checkpoint(path, T)
    return net
