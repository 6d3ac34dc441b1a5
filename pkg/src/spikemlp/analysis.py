"""Multiplication-free inference audit, operation counting, spike rates, energy and weight export.

The audit runs a folded network with an instrumented interpreter attached to
every weighted op. Each scalar multiply is classified by its operands: if either
is exactly 0.0 or 1.0 it is real x binary, otherwise real x real. Additions are
counted as accumulated nonzero products (a zero product costs nothing).
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import TokenBlock
from .config import NetworkConfig
from .layers import im2col, trace_ops
from .network import Network
from .neuron import observe_spikes
from .tensor import no_grad

ENERGY_PER_ADD = 0.9e-12  # J, 45 nm CMOS
ENERGY_PER_MAC = 4.6e-12  # J

PATCH_LAYER = "stage1.patch.conv"
CLASSIFIER_LAYER = "head.classifier"


class NotFoldedError(RuntimeError):
    pass


class MfiViolation(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# instrumented interpreter


@dataclass
class LayerCount:
    layer: str
    step: int  # -1: static input evaluated once for all steps
    adds: int = 0
    mult_real_real: int = 0
    mult_real_binary: int = 0
    bias_adds: int = 0
    dense: int = 0
    input_nonzero: int = 0
    input_size: int = 0

    @property
    def multiplies(self) -> int:
        return self.mult_real_real + self.mult_real_binary

    def merge(self, other: "LayerCount") -> None:
        for f in ("adds", "mult_real_real", "mult_real_binary", "bias_adds", "dense", "input_nonzero",
                  "input_size"):
            setattr(self, f, getattr(self, f) + getattr(other, f))


@dataclass
class OpTrace:
    counts: dict[tuple[str, int], LayerCount] = field(default_factory=dict)
    samples: int = 0

    def entry(self, layer: str, step: int) -> LayerCount:
        key = (layer, step)
        if key not in self.counts:
            self.counts[key] = LayerCount(layer, step)
        return self.counts[key]

    def merge(self, other: "OpTrace") -> "OpTrace":
        out = OpTrace(samples=self.samples + other.samples)
        for src in (self, other):
            for key, c in src.counts.items():
                out.entry(*key).merge(c)
        return out

    def per_layer(self) -> dict[str, LayerCount]:
        out: dict[str, LayerCount] = {}
        for (layer, _), c in self.counts.items():
            if layer not in out:
                out[layer] = LayerCount(layer, -1)
            out[layer].merge(c)
        return out

    def total(self, field_name: str, exclude=()) -> int:
        return sum(getattr(c, field_name) for c in self.counts.values() if c.layer not in exclude)


def _nonbinary(a: np.ndarray) -> np.ndarray:
    return ~((a == 0) | (a == 1))


class Tracer:
    """Receives every weighted op of a forward pass and counts its scalar operations."""

    def __init__(self, T: int, batch: int):
        self.T = T
        self.batch = batch
        self.trace = OpTrace(samples=batch)

    def _steps(self, x: np.ndarray):
        n = x.shape[0]
        if n == self.T * self.batch:
            for t in range(self.T):
                yield t, x[t * self.batch:(t + 1) * self.batch]
        elif n == self.batch:
            yield -1, x
        else:
            raise ValueError(f"cannot split leading axis {n} into T={self.T} x batch={self.batch}")

    def linear(self, name, w, x, axis, has_bias):
        nb_w = _nonbinary(w).sum(axis=0).astype(np.int64)
        nz_w = (w != 0).sum(axis=0).astype(np.int64)
        d_out = w.shape[0]
        for t, xt in self._steps(x):
            xm = np.moveaxis(xt, axis, 0).reshape(w.shape[1], -1)
            nb_x = _nonbinary(xm).sum(axis=1).astype(np.int64)
            nz_x = (xm != 0).sum(axis=1).astype(np.int64)
            total = d_out * xm.size
            rr = int(nb_w @ nb_x)
            c = self.trace.entry(name, t)
            c.mult_real_real += rr
            c.mult_real_binary += total - rr
            c.adds += int(nz_w @ nz_x)
            c.dense += total
            c.input_nonzero += int(nz_x.sum())
            c.input_size += xm.size
            if has_bias:
                c.bias_adds += xm.size // w.shape[1] * d_out

    def conv(self, name, w, x, stride, padding, has_bias):
        c_out, c_in, k, _ = w.shape
        wm = w.reshape(c_out, -1)
        nb_w = _nonbinary(wm).sum(axis=0).astype(np.int64)
        nz_w = (wm != 0).sum(axis=0).astype(np.int64)
        valid, _, _ = im2col(np.ones((1, c_in) + x.shape[2:]), k, stride, padding)
        valid_taps = int(valid.sum())
        for t, xt in self._steps(x):
            cols, ho, wo = im2col(xt, k, stride, padding)
            nb_x = _nonbinary(cols).sum(axis=0).astype(np.int64)
            nz_x = (cols != 0).sum(axis=0).astype(np.int64)
            total = c_out * valid_taps * xt.shape[0]
            rr = int(nb_w @ nb_x)
            c = self.trace.entry(name, t)
            c.mult_real_real += rr
            c.mult_real_binary += total - rr
            c.adds += int(nz_w @ nz_x)
            c.dense += total
            c.input_nonzero += int((xt != 0).sum())
            c.input_size += xt.size
            if has_bias:
                c.bias_adds += xt.shape[0] * c_out * ho * wo

    def batchnorm(self, name, x):
        for t, xt in self._steps(x):
            rr = int(_nonbinary(xt).sum())
            c = self.trace.entry(name, t)
            c.mult_real_real += rr
            c.mult_real_binary += xt.size - rr


def trace_forward(net: Network, images: np.ndarray, T: int | None = None) -> OpTrace:
    T = net.config.T if T is None else T
    tracer = Tracer(T, len(images))
    with no_grad(), trace_ops(tracer):
        net.forward(images, T)
    return tracer.trace


def _batches(images: np.ndarray, batch_size: int):
    return [images[i:i + batch_size] for i in range(0, len(images), batch_size)]


@dataclass
class AuditReport:
    trace: OpTrace
    violations: dict[str, int]
    input_layer_macs: int
    classifier_real_real: int
    head_pool: bool

    @property
    def passed(self) -> bool:
        return not self.violations

    def summary(self) -> dict:
        return {
            "passed": self.passed,
            "violations": self.violations,
            "input_layer_real_real": self.input_layer_macs,
            "classifier_real_real": self.classifier_real_real,
            "classifier_mode": "pooled" if self.head_pool else "per-position spikes",
            "mult_real_real": self.trace.total("mult_real_real"),
            "mult_real_binary": self.trace.total("mult_real_binary"),
            "adds": self.trace.total("adds"),
            "samples": self.trace.samples,
        }


def audit_mfi(net: Network, batches, T: int | None = None, workers: int = 1) -> AuditReport:
    """Run ``batches`` through the folded ``net`` and flag every real x real multiply.

    The patch layer (raw image input) is expected to be real x real. The pooled
    classifier is reported separately and is not a violation.
    """
    if not net.is_folded:
        raise NotFoldedError("fold first: batch norm in eval mode still applies real-valued scaling")
    batches = [np.asarray(b) for b in batches]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            traces = list(pool.map(lambda b: trace_forward(net, b, T), batches))
    else:
        traces = [trace_forward(net, b, T) for b in batches]
    trace = OpTrace()
    for tr in traces:  # index-ordered reduction
        trace = trace.merge(tr)
    per_layer = trace.per_layer()
    violations = {name: c.mult_real_real for name, c in per_layer.items()
                  if c.mult_real_real and name not in (PATCH_LAYER, CLASSIFIER_LAYER)}
    cls = per_layer.get(CLASSIFIER_LAYER)
    cls_rr = cls.mult_real_real if cls else 0
    if cls_rr and not net.head.pool:
        violations[CLASSIFIER_LAYER] = cls_rr
    patch = per_layer.get(PATCH_LAYER)
    return AuditReport(trace, violations, patch.mult_real_real if patch else 0, cls_rr, net.head.pool)


# ---------------------------------------------------------------------------
# spike rates


@dataclass
class SpikeRates:
    sites: dict[str, tuple[float, int]]  # name -> (spikes, elements including T)
    layer_inputs: dict[str, tuple[int, int]]  # weighted layer -> (nonzero inputs, input elements)
    T: int
    trace: OpTrace = field(default_factory=OpTrace)

    def rate(self, site: str) -> float:
        s, n = self.sites[site]
        return s / n if n else 0.0

    @property
    def per_site(self) -> dict[str, float]:
        return {k: self.rate(k) for k in self.sites}

    @property
    def mean(self) -> float:
        spikes = sum(s for s, _ in self.sites.values())
        n = sum(n for _, n in self.sites.values())
        return spikes / n if n else 0.0

    @property
    def per_layer_input(self) -> dict[str, float]:
        return {k: nz / n if n else 0.0 for k, (nz, n) in self.layer_inputs.items()}

    def per_stage(self) -> dict[str, float]:
        groups: dict[str, list[float]] = {}
        for name, (s, n) in self.sites.items():
            groups.setdefault(name.split(".")[0], [0.0, 0])
            groups[name.split(".")[0]][0] += s
            groups[name.split(".")[0]][1] += n
        return {k: s / n if n else 0.0 for k, (s, n) in groups.items()}

    def per_mixer(self) -> list[tuple[str, float]]:
        """(stage.mixerN, rate) in network order, for a per-block rate plot."""
        groups: dict[str, list[float]] = {}
        for name, (s, n) in self.sites.items():
            parts = name.split(".")
            key = ".".join(parts[:2]) if len(parts) > 2 and parts[1].startswith("mixer") else parts[0] + "." + parts[1]
            g = groups.setdefault(key, [0.0, 0])
            g[0] += s
            g[1] += n
        return [(k, s / n if n else 0.0) for k, (s, n) in groups.items()]


def measure_spike_rate(net: Network, images: np.ndarray, T: int | None = None, batch_size: int = 64) -> SpikeRates:
    """Per-site and per-layer-input spike rates over ``images`` in eval mode."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("spike rate needs a nonempty sample")
    T = net.config.T if T is None else T
    sites: dict[str, list] = {}

    def on_spikes(name, spikes, steps):
        acc = sites.setdefault(name, [0.0, 0])
        acc[0] += float(spikes.sum())
        acc[1] += spikes.size

    was_training = [bn.training for bn in net.batchnorms()]
    net.eval()
    trace = OpTrace()
    try:
        with observe_spikes(on_spikes):
            for b in _batches(images, batch_size):
                trace = trace.merge(trace_forward(net, b, T))
    finally:
        for bn, t in zip(net.batchnorms(), was_training):
            bn.training = t
    layer_inputs = {name: (c.input_nonzero, c.input_size) for name, c in trace.per_layer().items()
                    if c.dense}
    return SpikeRates({k: (v[0], v[1]) for k, v in sites.items()}, layer_inputs, T, trace)


# ---------------------------------------------------------------------------
# closed-form accumulation counts and the sTA estimate


def _valid_taps(n: int, k: int, stride: int, pad: int) -> int:
    out = (n + 2 * pad - k) // stride + 1
    return sum(len(range(max(0, i * stride - pad), min(n, i * stride - pad + k))) for i in range(out))


@dataclass(frozen=True)
class LayerGeometry:
    name: str
    kind: str  # "synaptic" (spike-fed accumulate) or "mac" (real-valued input)
    A: int  # dense accumulations per sample per step
    static: bool = False  # evaluated once per sample rather than every step


def accumulation_counts(cfg: NetworkConfig, head_pool: bool | None = None) -> dict[str, LayerGeometry]:
    """Dense accumulation count A of every weighted layer, derived from the configuration alone."""
    head_pool = cfg.head_pool if head_pool is None else head_pool
    out: dict[str, LayerGeometry] = {}

    def add(name, kind, a, static=False):
        out[name] = LayerGeometry(name, kind, int(a), static)

    p = cfg.patch_size
    h0, w0 = cfg.stage_size(0)
    add(PATCH_LAYER, "mac", cfg.c1 * cfg.in_channels * p * p * h0 * w0, static=True)
    for s, n_mix in enumerate(cfg.stage_layers):
        c = cfg.stage_channels(s)
        h, w = cfg.stage_size(s)
        stage = f"stage{s + 1}"
        if s > 0:
            node, c_in = c // 3, c // 2
            hi, wi = cfg.stage_size(s - 1)
            taps_in = _valid_taps(hi, 3, 2, 1) * _valid_taps(wi, 3, 2, 1)
            taps_edge = _valid_taps(h, 3, 1, 1) * _valid_taps(w, 3, 1, 1)
            for tag in ("in1", "in2", "in3"):
                add(f"{stage}.spe.{tag}", "synaptic", node * c_in * taps_in)
            for tag in ("e12", "e23"):
                add(f"{stage}.spe.{tag}", "synaptic", node * node * taps_edge)
        for m in range(n_mix):
            tok, ch = f"{stage}.mixer{m}.token", f"{stage}.mixer{m}.channel"
            add(f"{tok}.w_h", "synaptic", h * h * c * w)
            add(f"{tok}.w_w", "synaptic", w * w * c * h)
            add(f"{tok}.w_f", "synaptic", c * 3 * c * h * w)
            add(f"{ch}.w_c1", "synaptic", cfg.alpha * c * c * h * w)
            add(f"{ch}.w_c2", "synaptic", c * cfg.alpha * c * h * w)
    last = cfg.num_stages - 1
    c = cfg.stage_channels(last)
    h, w = cfg.stage_size(last)
    add("head.w_hw", "synaptic", (h * w) ** 2 * c)
    if head_pool:
        add(CLASSIFIER_LAYER, "mac", cfg.num_classes * c)
    else:
        add(CLASSIFIER_LAYER, "synaptic", cfg.num_classes * c * h * w)
    return out


def sta(s: float, T: int, A: float) -> float:
    return s * T * A


def count_additions(cfg: NetworkConfig, layer_rates: dict[str, float], T: int,
                    head_pool: bool | None = None) -> dict[str, float]:
    """Additions per sample for every spike-fed layer: s * T * A."""
    geo = accumulation_counts(cfg, head_pool)
    synaptic = {k for k, g in geo.items() if g.kind == "synaptic"}
    missing = synaptic - set(layer_rates)
    if missing:
        raise ValueError(f"rates do not match the architecture; missing {sorted(missing)[:5]}")
    for k, s in layer_rates.items():
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"rate for {k} outside [0, 1]: {s}")
    return {k: sta(layer_rates[k], T, geo[k].A) for k in sorted(synaptic)}


def count_macs(cfg: NetworkConfig, T: int, head_pool: bool | None = None) -> dict[str, int]:
    """Real-valued multiply-accumulates per sample (static input layer counted once)."""
    geo = accumulation_counts(cfg, head_pool)
    return {k: g.A * (1 if g.static else T) for k, g in geo.items() if g.kind == "mac"}


def estimate_energy(adds: float, macs: float) -> float:
    if adds < 0 or macs < 0:
        raise ValueError("operation counts must be nonnegative")
    return ENERGY_PER_ADD * adds + ENERGY_PER_MAC * macs


# Table of published computation costs: (adds, mults, reported energy in J).
PUBLISHED_COSTS = {
    "SparseMLP (ANN)": (2.50e9, 2.50e9, 13.75e-3),
    "SpikFormer": (11.09e9, 0.0, 11.58e-3),
    "Spiking ResNet-34": (1.85e9, 118e6, 2.21e-3),
    "Spiking MLP-SPE-T": (1.18e9, 12e6, 1.12e-3),
}


def check_published_costs(rel_tol: float = 0.01) -> dict[str, dict]:
    """Recompute each published energy figure; rows the two-constant model cannot reproduce are flagged."""
    out = {}
    for name, (adds, macs, reported) in PUBLISHED_COSTS.items():
        e = estimate_energy(adds, macs)
        out[name] = {"estimate_J": e, "reported_J": reported,
                     "consistent": abs(e - reported) <= rel_tol * reported}
    return out


@dataclass
class CostReport:
    T: int
    params: int
    samples: int
    site_rates: dict[str, float]
    mean_rate: float
    layer_rates: dict[str, float]
    adds: dict[str, float]
    macs: dict[str, int]
    instrumented_adds: dict[str, float]
    head_pool: bool

    @property
    def total_adds(self) -> float:
        return float(sum(self.adds.values()))

    @property
    def total_macs(self) -> int:
        return int(sum(self.macs.values()))

    @property
    def energy_joules(self) -> float:
        return estimate_energy(self.total_adds, self.total_macs)

    @property
    def total_instrumented_adds(self) -> float:
        return float(sum(self.instrumented_adds.values()))

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "params": self.params,
            "samples": self.samples,
            "mean_spike_rate": self.mean_rate,
            "site_rates": self.site_rates,
            "layer_input_rates": self.layer_rates,
            "adds_sta": self.adds,
            "adds_instrumented": self.instrumented_adds,
            "macs": self.macs,
            "total_adds_sta": self.total_adds,
            "total_adds_instrumented": self.total_instrumented_adds,
            "total_macs": self.total_macs,
            "energy_joules": self.energy_joules,
            "classifier_mode": "pooled" if self.head_pool else "per-position spikes",
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def cost_report(net: Network, images: np.ndarray, T: int | None = None, batch_size: int = 64) -> CostReport:
    """Spike rates, sTA additions, instrumented additions, MACs and energy per sample."""
    T = net.config.T if T is None else T
    rates = measure_spike_rate(net, images, T, batch_size)
    geo = accumulation_counts(net.config, net.head.pool)
    layer_rates = {k: v for k, v in rates.per_layer_input.items() if geo.get(k) and geo[k].kind == "synaptic"}
    adds = count_additions(net.config, layer_rates, T, net.head.pool)
    n = len(images)
    exact = {k: c.adds / n for k, c in rates.trace.per_layer().items() if k in adds}
    return CostReport(T, net.num_params(), n, rates.per_site, rates.mean, layer_rates, adds,
                      count_macs(net.config, T, net.head.pool), exact, net.head.pool)


# ---------------------------------------------------------------------------
# weight export


def find_token_block(net: Network, path: str) -> TokenBlock:
    """Resolve ``stageS.mixerM.token`` (1-based stage, 0-based mixer) to its block."""
    parts = path.split(".")
    try:
        if len(parts) != 3 or parts[2] != "token":
            raise ValueError
        s = int(parts[0].removeprefix("stage")) - 1
        m = int(parts[1].removeprefix("mixer"))
        if s < 0 or m < 0:
            raise ValueError
        return net.stages[s].mixers[m][0]
    except (ValueError, IndexError):
        raise KeyError(f"unknown token block path {path!r} (expected e.g. 'stage1.mixer0.token')") from None


def token_weights(net: Network, path: str) -> dict[str, np.ndarray]:
    blk = find_token_block(net, path)
    return {"w_h": np.array(blk.w_h.layer.weight.data), "w_w": np.array(blk.w_w.layer.weight.data)}


def receptive_field(w_h: np.ndarray, w_w: np.ndarray, row: int, col: int) -> np.ndarray:
    """Effective H x W spatial weighting seen by output position (row, col): outer(w_h[row], w_w[col])."""
    return np.outer(w_h[row], w_w[col])


def to_pgm(matrix: np.ndarray) -> bytes:
    """8-bit binary portable graymap (P5), min..max mapped to 0..255."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("PGM export needs a 2-d matrix")
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo) * 255.0
    pix = np.rint(scaled).astype(np.uint8)
    return f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode() + pix.tobytes()


def read_pgm(buf: bytes) -> np.ndarray:
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def write_matrix(matrix: np.ndarray, out_path: str | Path, fmt: str) -> Path:
    out_path = Path(out_path)
    if fmt == "csv":
        np.savetxt(out_path, np.asarray(matrix, dtype=np.float64), delimiter=",", fmt="%.17g")
    elif fmt == "pgm":
        out_path.write_bytes(to_pgm(matrix))
    else:
        raise ValueError(f"unknown export format {fmt!r} (csv or pgm)")
    return out_path


def export_token_weights(net: Network, block: str, out_path: str | Path, fmt: str = "csv",
                         rf: tuple[int, int] | None = None) -> list[Path]:
    """Write axial token weights of ``block``.

    ``block`` may name one matrix (``stage1.mixer0.token.w_h``) or the whole
    token block, in which case both matrices are written next to ``out_path``
    with ``_w_h`` / ``_w_w`` suffixes. With ``rf=(row, col)`` a single receptive
    field image is written instead.
    """
    out_path = Path(out_path)
    which = None
    if block.endswith((".w_h", ".w_w")):
        block, which = block.rsplit(".", 1)
    mats = token_weights(net, block)
    if rf is not None:
        return [write_matrix(receptive_field(mats["w_h"], mats["w_w"], *rf), out_path, fmt)]
    if which is not None:
        return [write_matrix(mats[which], out_path, fmt)]
    return [write_matrix(mats[k], out_path.with_name(f"{out_path.stem}_{k}{out_path.suffix}"), fmt)
            for k in ("w_h", "w_w")]


def band_fraction(w: np.ndarray, band: int = 2) -> float:
    """Share of total |w| within ``band`` of the diagonal: how local an axial weight is."""
    w = np.abs(np.asarray(w))
    i, j = np.indices(w.shape)
    total = w.sum()
    return float(w[np.abs(i - j) <= band].sum() / total) if total else 0.0
