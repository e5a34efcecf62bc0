"""The completion network: grid-feature head, edge generator, shape encoder,
refinement decoder, and per-cell point generation, wired onto the autodiff
tape.

Architecture summary (base widths at channel scale 1, resolution R):

* grid head: per pyramid scale, corner-offset features (24 per point) pass
  through linear -> batch norm -> ReLU -> linear and are mean-scattered into
  that scale's grid; channels (32, 64, 64, 128, 128) scaled and clamped >= 4.
* edge generator: two stride-2 conv blocks down to R/4, three residual
  blocks (first conv dilated x2), two transposed-conv blocks back up, with
  sigmoid occupancy heads at R/2 and R plus a density/offset head emitting
  an edge point cloud.
* shape encoder: log2(R)-1 blocks of conv/conv/BN/ReLU/maxpool doubling
  channels while halving extent, then a kernel-2 valid conv collapsing 2^3
  to the latent z (length = first-scale channels * R).
* refinement decoder: log2(R) cells from 2^3 up to R^3; each cell
  concatenates (upsampled previous, matching-scale grid feature, edge grids
  at the two finest scales), then applies two conv+AdaIN+ReLU stages.
* point generator: sigmoid occupancy p_c, masked softmax density over cells
  with p_c > 0.5, largest-remainder allocation of the requested point count,
  feature folding with two fresh uniform values per point, and a tanh offset
  head bounded to one cell width per axis (hence sqrt(3) widths in norm).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from . import voxelize
from .geometry import PointCloud
from .metrics import LossWeights
from .voxelize import GridSpec

GRID_CHANNEL_BASE = (32, 64, 64, 128, 128)
DECODER_WIDTH_BASE = (128, 128, 64, 32, 32)
EDGE_ENC_BASE = (64, 128)
EDGE_DEC_BASE = 32
OCC_THRESHOLD = 0.5

# Teacher-forcing mix: fraction of training tapes whose point generator runs
# on the partial input's own cells instead of the ground-truth support, so
# the chamfer loss directly trains completion from the visible region. The
# fraction ramps in over early steps; switching it on from step one floods
# the decoder with large gradients before the offsets are coherent.
TF_MIX = 0.5
TF_MIX_RAMP = (100, 300)

# Init gain on the finest grid head's output layer. The full-resolution
# feature grid is sparse (only cells holding input points are nonzero), and
# at small channel scales its contribution to the decoder concat is a
# percent-level fraction of the dense upsampled stream, too faint for the
# occupancy head to latch onto within a desk-scale step budget. Every
# consumer of this grid sits behind a normalization layer, so the gain only
# shifts relative stream magnitudes at initialization.
PF_EVIDENCE_GAIN = 32.0


def tf_mix_at(step: int) -> float:
    """Marked-support probability used for the training tape at a step."""
    lo, hi = TF_MIX_RAMP
    return TF_MIX * min(1.0, max(0.0, (step - lo) / float(hi - lo)))

CONFIG_KEYS = (
    "resolution",
    "channel_scale",
    "n_in",
    "m_out",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "lambda5",
    "lr",
    "seed",
    "profile",
    "use_edges",
)


def _scaled(base: int, s: float) -> int:
    return max(4, int(round(base * s)))


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    resolution: int = 32
    channel_scale: float = 1.0
    n_in: int = 2048
    m_out: int = 2048
    lambda1: float = 1e4
    lambda2: float = 300.0
    lambda3: float = 100.0
    lambda4: float = 1e10
    lambda5: float = 0.3
    lr: float = 0.0007
    seed: int = 0
    profile: str = "default"
    use_edges: bool = True

    def __post_init__(self):
        r = self.resolution
        if r < 8 or r > 32 or (r & (r - 1)) != 0:
            raise ValueError(f"resolution must be a power of two in [8, 32], got {r}")
        if self.channel_scale <= 0:
            raise ValueError("channel_scale must be positive")
        if self.n_in < 2 ** (self.n_scales - 1):
            raise ValueError(
                f"n_in={self.n_in} too small for a {self.n_scales}-level pyramid"
            )
        if self.m_out < 1:
            raise ValueError("m_out must be at least 1")
        if self.profile not in ("default", "pcn"):
            raise ValueError(f"unknown profile {self.profile!r}")
        for i in range(1, 6):
            if getattr(self, f"lambda{i}") < 0:
                raise ValueError(f"lambda{i} must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        args = dict(resolution=16, channel_scale=0.25, n_in=512, m_out=512)
        args.update(kw)
        return cls(**args)

    @classmethod
    def micro(cls, **kw) -> "ModelConfig":
        args = dict(resolution=8, channel_scale=1.0 / 32.0, n_in=64, m_out=64)
        args.update(kw)
        return cls(**args)

    # ---- derived sizes ------------------------------------------------

    @property
    def n_scales(self) -> int:
        return min(5, int(math.log2(self.resolution)))

    @property
    def grid_channels(self) -> tuple:
        s = self.channel_scale
        return tuple(_scaled(c, s) for c in GRID_CHANNEL_BASE[: self.n_scales])

    @property
    def n_cells(self) -> int:
        return int(math.log2(self.resolution))

    @property
    def decoder_widths(self) -> tuple:
        s = self.channel_scale
        plan = DECODER_WIDTH_BASE[-self.n_cells :]
        return tuple(_scaled(c, s) for c in plan)

    @property
    def encoder_blocks(self) -> int:
        return int(math.log2(self.resolution)) - 1

    @property
    def z_len(self) -> int:
        # first-scale channels double once per encoder block, and the final
        # valid conv doubles once more: c0 * 2**(log2 R - 1) * 2 == c0 * R
        return self.grid_channels[0] * self.resolution

    @property
    def m_edge(self) -> int:
        return max(1, self.m_out // 2)

    @property
    def edge_channels(self) -> tuple:
        s = self.channel_scale
        return (
            _scaled(EDGE_ENC_BASE[0], s),
            _scaled(EDGE_ENC_BASE[1], s),
            _scaled(EDGE_DEC_BASE, s),
        )

    def loss_weights(self) -> LossWeights:
        w = LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)
        if self.profile == "pcn":
            w = LossWeights(w.l1, 0.0, w.l3, w.l4, 0.0)
        return w


def write_config(path, cfg: ModelConfig) -> None:
    lines = [f"{k} = {getattr(cfg, k)}" for k in CONFIG_KEYS]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_bool(val: str) -> bool:
    low = val.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {val!r}")


def read_config(path, **overrides) -> ModelConfig:
    """Parse a `key = value` config file; unknown keys are errors."""
    kinds = {
        "resolution": int,
        "n_in": int,
        "m_out": int,
        "seed": int,
        "profile": str,
        "use_edges": _parse_bool,
    }
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value', got {raw.rstrip()!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in CONFIG_KEYS:
                raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
            caster = kinds.get(key, float)
            try:
                values[key] = caster(val)
            except ValueError as exc:
                raise ValueError(f"{path}:{ln}: bad value for {key}: {val!r}") from exc
    values.update(overrides)
    return ModelConfig(**values)


# ---------------------------------------------------------------------------
# prepared samples


@dataclasses.dataclass
class PreparedSample:
    """Input features and training targets precomputed from point clouds."""

    feats: list  # per scale: (24, N_i) corner-offset features
    cells: list  # per scale: (N_i,) flat cell ids
    n_points: int
    complete: np.ndarray | None = None  # (K, 3) target cloud
    edge: np.ndarray | None = None  # (E, 3) target edge cloud, possibly empty
    occ: np.ndarray | None = None  # (R^3,) binary occupancy of complete
    dens: np.ndarray | None = None  # (R^3,) density target of complete
    edge_occ: np.ndarray | None = None
    edge_dens: np.ndarray | None = None


def prepare_sample(
    cfg: ModelConfig,
    partial: PointCloud,
    complete: PointCloud | None = None,
    edge: PointCloud | None = None,
    dtype=np.float32,
) -> PreparedSample:
    """Precompute pyramid features and grid targets for one sample."""
    pyramid = voxelize.build_scale_pyramid(partial, levels=cfg.n_scales)
    feats, cells = [], []
    for i, level in enumerate(pyramid):
        spec = GridSpec(cfg.resolution >> i)
        offsets, cell_idx = voxelize.corner_offsets(level, spec)
        n = len(level)
        feats.append(np.ascontiguousarray(offsets.transpose(0, 2, 1).reshape(24, n)).astype(dtype))
        cells.append(voxelize.flat_cells(cell_idx, spec))
    out = PreparedSample(feats=feats, cells=cells, n_points=len(partial))
    spec = GridSpec(cfg.resolution)
    if complete is not None:
        out.complete = complete.points.astype(dtype)
        out.occ = voxelize.binary_occupancy(complete, spec).ravel().astype(dtype)
        out.dens = voxelize.density_target(complete, spec).density.ravel().astype(dtype)
    if edge is not None:
        out.edge = edge.points.astype(dtype)
        if len(edge):
            out.edge_occ = voxelize.binary_occupancy(edge, spec).ravel().astype(dtype)
            out.edge_dens = voxelize.density_target(edge, spec).density.ravel().astype(dtype)
        else:
            out.edge_occ = np.zeros(spec.resolution**3, dtype=dtype)
            out.edge_dens = np.zeros(spec.resolution**3, dtype=dtype)
    return out


# ---------------------------------------------------------------------------
# outputs


@dataclasses.dataclass
class CompletionOutputs:
    occupancy: np.ndarray  # (R^3,) cell probabilities
    density: np.ndarray  # (R^3,) normalized density over occupied cells
    points: PointCloud  # M completed points
    cells: np.ndarray  # (M,) generating flat cell per point
    fallback: bool  # True when no cell cleared the threshold


@dataclasses.dataclass
class EdgeOutputs:
    p_half: np.ndarray  # (1, (R/2)^3) edge probability grid
    p_full: np.ndarray  # (1, R^3) edge probability grid
    points: PointCloud  # generated edge cloud
    cells: np.ndarray
    fallback: bool


@dataclasses.dataclass
class _PointsTape:
    p: ad.Node
    delta: ad.Node
    points: ad.Node
    hinge: ad.Node
    centers: np.ndarray
    cells: np.ndarray
    fallback: bool


@dataclasses.dataclass
class _Tape:
    leaves: dict
    pf: list
    z: ad.Node
    main: _PointsTape
    pe_half: ad.Node | None
    pe_full: ad.Node | None
    edge: _PointsTape | None


def allocate_counts(delta: np.ndarray, occupied: np.ndarray, m: int) -> np.ndarray:
    """Largest-remainder allocation of m points over occupied cells.

    delta must sum to 1 over occupied entries; returns one count per
    occupied cell (in flat-index order), summing to m exactly. Remainder
    ties go to the smaller flat index.
    """
    w = delta[occupied].astype(np.float64)
    ideal = m * w
    base = np.floor(ideal).astype(np.int64)
    rem = m - int(base.sum())
    frac = ideal - base
    order = np.argsort(-frac, kind="stable")
    base[order[:rem]] += 1
    return base


class Model:
    """Trainable completion network with a flat named-parameter store."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, dict] = {}
        self.opt_state = ad.adam_init()
        self.global_step = 0
        self._rng_init = np.random.default_rng(cfg.seed)
        self._init_params()

    # ---- parameter construction ---------------------------------------

    def _uniform(self, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return self._rng_init.uniform(-bound, bound, size=shape).astype(self.dtype)

    def _add_linear(self, name, out_dim, in_dim):
        self.params[f"{name}.w"] = self._uniform((out_dim, in_dim), in_dim)
        self.params[f"{name}.b"] = np.zeros(out_dim, dtype=self.dtype)

    def _add_conv(self, name, out_ch, in_ch, k):
        self.params[f"{name}.w"] = self._uniform((out_ch, in_ch, k, k, k), in_ch * k**3)
        self.params[f"{name}.b"] = np.zeros(out_ch, dtype=self.dtype)

    def _add_tconv(self, name, in_ch, out_ch, k):
        self.params[f"{name}.w"] = self._uniform((in_ch, out_ch, k, k, k), in_ch * k**3)
        self.params[f"{name}.b"] = np.zeros(out_ch, dtype=self.dtype)

    def _add_norm(self, name, ch, buffered=False):
        self.params[f"{name}.g"] = np.ones(ch, dtype=self.dtype)
        self.params[f"{name}.b"] = np.zeros(ch, dtype=self.dtype)
        if buffered:
            self.buffers[name] = {
                "mean": np.zeros(ch, dtype=np.float64),
                "var": np.ones(ch, dtype=np.float64),
            }

    def _add_adain(self, name, ch):
        # zero projection means identity modulation at the start of training
        self.params[f"{name}.w"] = np.zeros((2 * ch, self.cfg.z_len), dtype=self.dtype)
        self.params[f"{name}.b"] = np.zeros(2 * ch, dtype=self.dtype)

    def _init_params(self):
        cfg = self.cfg
        chans = cfg.grid_channels
        for i, c in enumerate(chans):
            self._add_linear(f"head{i}.conv1", c, 24)
            self._add_norm(f"head{i}.bn", c, buffered=True)
            self._add_linear(f"head{i}.conv2", c, c)
        self.params["head0.conv2.w"] *= PF_EVIDENCE_GAIN

        ce1, ce2, ce3 = cfg.edge_channels
        self._add_conv("edge.enc1", ce1, chans[0], 4)
        self._add_norm("edge.enc1.in", ce1)
        self._add_conv("edge.enc2", ce2, ce1, 4)
        self._add_norm("edge.enc2.in", ce2)
        for r in range(3):
            self._add_conv(f"edge.res{r}.conv1", ce2, ce2, 3)
            self._add_norm(f"edge.res{r}.in1", ce2)
            self._add_conv(f"edge.res{r}.conv2", ce2, ce2, 3)
            self._add_norm(f"edge.res{r}.in2", ce2)
        self._add_tconv("edge.dec1", ce2, ce1, 4)
        self._add_norm("edge.dec1.in", ce1)
        self._add_conv("edge.head_half", 1, ce1, 1)
        self._add_tconv("edge.dec2", ce1, ce3, 4)
        self._add_norm("edge.dec2.in", ce3)
        self._add_conv("edge.head_full", 1, ce3, 1)
        self._add_conv("edge.dens", 1, ce3, 1)
        self._add_linear("edge.off1", ce3, ce3 + 2)
        self._add_linear("edge.off2", 3, ce3)

        c = chans[0]
        for b in range(cfg.encoder_blocks):
            cout = c * 2
            self._add_conv(f"enc{b}.conv1", cout, c, 3)
            self._add_conv(f"enc{b}.conv2", cout, cout, 3)
            self._add_norm(f"enc{b}.bn", cout, buffered=True)
            c = cout
        self._add_conv("enc_final", 2 * c, c, 2)

        widths = cfg.decoder_widths
        for j in range(1, cfg.n_cells + 1):
            o = widths[j - 1]
            self._add_conv(f"dec{j}.conv1", o, self._cell_in_channels(j), 3)
            self._add_adain(f"dec{j}.ada1", o)
            self._add_conv(f"dec{j}.conv2", o, o, 3)
            self._add_adain(f"dec{j}.ada2", o)

        olast = widths[-1]
        self._add_conv("pgen.occ", 1, olast, 1)
        self._add_conv("pgen.dens", 1, olast, 1)
        self._add_linear("pgen.off1", olast, olast + 2)
        self._add_linear("pgen.off2", 3, olast)

    def _cell_in_channels(self, j: int) -> int:
        cfg = self.cfg
        chans = cfg.grid_channels
        ell = cfg.n_cells
        if j == 1:
            return chans[ell - 1]
        c = cfg.decoder_widths[j - 2] + chans[ell - j]
        r_j = 2**j
        if r_j == cfg.resolution // 2:
            c += 1
        if r_j == cfg.resolution:
            c += 1
        return c

    @property
    def n_parameters(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    # ---- tape builders -------------------------------------------------

    def _leaves(self, training: bool) -> dict:
        mk = ad.leaf if training else ad.const
        return {name: mk(arr) for name, arr in self.params.items()}

    def _head_tape(self, lv, prepared: PreparedSample, training: bool) -> list:
        cfg = self.cfg
        out = []
        for i, c in enumerate(cfg.grid_channels):
            r = cfg.resolution >> i
            x = ad.const(prepared.feats[i])
            h = ad.linear(lv[f"head{i}.conv1.w"], x, lv[f"head{i}.conv1.b"])
            h = ad.batch_norm(
                h, lv[f"head{i}.bn.g"], lv[f"head{i}.bn.b"], self.buffers[f"head{i}.bn"], training
            )
            h = ad.relu(h)
            h = ad.linear(lv[f"head{i}.conv2.w"], h, lv[f"head{i}.conv2.b"])
            grid = ad.scatter_mean_cols(h, prepared.cells[i], r**3)
            out.append(ad.reshape(grid, (c, r, r, r)))
        return out

    def _in(self, lv, name, x):
        return ad.instance_norm(x, lv[f"{name}.g"], lv[f"{name}.b"])

    def _edge_tape(self, lv, pf0):
        h = ad.relu(self._in(lv, "edge.enc1.in", ad.conv3d(pf0, lv["edge.enc1.w"], lv["edge.enc1.b"], 2, 1)))
        h = ad.relu(self._in(lv, "edge.enc2.in", ad.conv3d(h, lv["edge.enc2.w"], lv["edge.enc2.b"], 2, 1)))
        for r in range(3):
            inner = ad.conv3d(h, lv[f"edge.res{r}.conv1.w"], lv[f"edge.res{r}.conv1.b"], 1, 2, 2)
            inner = ad.relu(self._in(lv, f"edge.res{r}.in1", inner))
            inner = ad.conv3d(inner, lv[f"edge.res{r}.conv2.w"], lv[f"edge.res{r}.conv2.b"], 1, 1)
            inner = self._in(lv, f"edge.res{r}.in2", inner)
            h = ad.add(h, inner)
        d1 = ad.relu(self._in(lv, "edge.dec1.in", ad.tconv3d(h, lv["edge.dec1.w"], lv["edge.dec1.b"])))
        pe_half = ad.sigmoid(ad.conv3d(d1, lv["edge.head_half.w"], lv["edge.head_half.b"]))
        d2 = ad.relu(self._in(lv, "edge.dec2.in", ad.tconv3d(d1, lv["edge.dec2.w"], lv["edge.dec2.b"])))
        pe_full = ad.sigmoid(ad.conv3d(d2, lv["edge.head_full.w"], lv["edge.head_full.b"]))
        return pe_half, pe_full, d2

    def _encoder_tape(self, lv, pf0, training: bool):
        h = pf0
        for b in range(self.cfg.encoder_blocks):
            h = ad.conv3d(h, lv[f"enc{b}.conv1.w"], lv[f"enc{b}.conv1.b"], 1, 1)
            h = ad.conv3d(h, lv[f"enc{b}.conv2.w"], lv[f"enc{b}.conv2.b"], 1, 1)
            h = ad.batch_norm(h, lv[f"enc{b}.bn.g"], lv[f"enc{b}.bn.b"], self.buffers[f"enc{b}.bn"], training)
            h = ad.relu(h)
            h = ad.max_pool3d(h)
        z = ad.conv3d(h, lv["enc_final.w"], lv["enc_final.b"])
        return ad.reshape(z, (self.cfg.z_len,))

    def _decoder_tape(self, lv, z, pf, pe_half, pe_full):
        cfg = self.cfg
        ell = cfg.n_cells
        # the modulation projections read a standardized copy of the latent;
        # an unnormalized z can grow until the projected shifts drive every
        # channel of a cell below zero and the ReLUs die irrecoverably
        z = ad.reshape(ad.channel_standardize(ad.reshape(z, (1, cfg.z_len))), (cfg.z_len,))
        prev = None
        for j in range(1, ell + 1):
            r_j = 2**j
            if j == 1:
                x = pf[ell - 1]
            else:
                parts = [ad.upsample2(prev), pf[ell - j]]
                if r_j == cfg.resolution // 2:
                    parts.append(pe_half)
                if r_j == cfg.resolution:
                    parts.append(pe_full)
                x = ad.concat(parts, axis=0)
            h = ad.conv3d(x, lv[f"dec{j}.conv1.w"], lv[f"dec{j}.conv1.b"], 1, 1)
            h = ad.relu(ad.adain(h, z, lv[f"dec{j}.ada1.w"], lv[f"dec{j}.ada1.b"]))
            h = ad.conv3d(h, lv[f"dec{j}.conv2.w"], lv[f"dec{j}.conv2.b"], 1, 1)
            prev = ad.relu(ad.adain(h, z, lv[f"dec{j}.ada2.w"], lv[f"dec{j}.ada2.b"]))
        return prev

    def _pointgen_tape(
        self, lv, feat_grid, p_node, m: int, rng, prefix: str, support=None
    ) -> _PointsTape:
        cfg = self.cfg
        r = cfg.resolution
        spec = GridSpec(r)
        cw = spec.cell_width
        p = p_node.value
        # training teacher-forces generation onto the target support so the
        # chamfer/offset losses see stable cells while the occupancy head is
        # still learning; inference always uses the predicted mask
        mask = (p > OCC_THRESHOLD) if support is None else support.copy()
        fallback = not bool(mask.any())
        if fallback:
            mask = np.zeros_like(p, dtype=bool)
            mask[int(np.argmax(p))] = True
        dens_logits = ad.reshape(
            ad.conv3d(feat_grid, lv[f"{prefix}.dens.w"], lv[f"{prefix}.dens.b"]), (r**3,)
        )
        delta = ad.masked_softmax(dens_logits, mask)
        if not np.isfinite(delta.value).all():
            raise FloatingPointError(f"non-finite cell densities in the {prefix} point generator")
        counts = allocate_counts(delta.value, mask, m)
        occ_idx = np.flatnonzero(mask)
        rep = np.repeat(occ_idx, counts)
        feat2d = ad.reshape(feat_grid, (feat_grid.value.shape[0], r**3))
        cols = ad.gather_cols(feat2d, rep)
        rnd = ad.const(rng.random((2, rep.size), dtype=np.float32).astype(self.dtype, copy=False))
        h = ad.concat([cols, rnd], axis=0)
        h = ad.relu(ad.linear(lv[f"{prefix}.off1.w"], h, lv[f"{prefix}.off1.b"]))
        off = ad.tanh(ad.linear(lv[f"{prefix}.off2.w"], h, lv[f"{prefix}.off2.b"]))
        ix = rep // (r * r)
        iy = (rep // r) % r
        iz = rep % r
        centers = ((np.stack([ix, iy, iz], axis=1) + 0.5) * cw).astype(self.dtype)
        points = ad.offset_points(off, centers, cw)
        hinge = ad.hinge_radius(points, centers, cw)
        return _PointsTape(p_node, delta, points, hinge, centers, rep, fallback)

    def build_tape(
        self,
        prepared: PreparedSample,
        rng,
        training: bool,
        teacher_force: bool = False,
        tf_mix: float = 0.0,
    ) -> _Tape:
        cfg = self.cfg
        r = cfg.resolution
        lv = self._leaves(training)
        pf = self._head_tape(lv, prepared, training)
        if cfg.use_edges:
            pe_half, pe_full, efeat = self._edge_tape(lv, pf[0])
        else:
            half = r // 2
            pe_half = ad.const(np.zeros((1, half, half, half), dtype=self.dtype))
            pe_full = ad.const(np.zeros((1, r, r, r), dtype=self.dtype))
            efeat = None
        z = self._encoder_tape(lv, pf[0], training)
        dec = self._decoder_tape(lv, z, pf, pe_half, pe_full)
        occ_logits = ad.reshape(ad.conv3d(dec, lv["pgen.occ.w"], lv["pgen.occ.b"]), (r**3,))
        p_main = ad.sigmoid(occ_logits)
        support = None
        if teacher_force:
            if prepared.occ is None:
                raise ValueError("teacher forcing needs a sample prepared with targets")
            support = prepared.occ > 0.5
            if tf_mix > 0.0 and rng.random() < tf_mix:
                support = np.zeros(r**3, dtype=bool)
                support[prepared.cells[0]] = True
        main = self._pointgen_tape(lv, dec, p_main, cfg.m_out, rng, "pgen", support)
        edge = None
        if cfg.use_edges:
            p_edge = ad.reshape(pe_full, (r**3,))
            esupport = None
            if teacher_force and prepared.edge_occ is not None and prepared.edge_occ.any():
                esupport = prepared.edge_occ > 0.5
            edge = self._pointgen_tape(lv, efeat, p_edge, cfg.m_edge, rng, "edge", esupport)
        return _Tape(lv, pf, z, main, pe_half, pe_full, edge)

    # ---- public API ------------------------------------------------------

    def forward(self, partial: PointCloud, seed: int = 0):
        """Complete a normalized partial cloud; returns (CompletionOutputs,
        EdgeOutputs or None). Deterministic in (parameters, input, seed)."""
        prepared = prepare_sample(self.cfg, partial, dtype=self.dtype)
        rng = np.random.default_rng(seed)
        tape = self.build_tape(prepared, rng, training=False)
        main = CompletionOutputs(
            occupancy=np.asarray(tape.main.p.value, dtype=np.float64),
            density=np.asarray(tape.main.delta.value, dtype=np.float64),
            points=PointCloud(np.asarray(tape.main.points.value, dtype=np.float64)),
            cells=tape.main.cells,
            fallback=tape.main.fallback,
        )
        edge = None
        if tape.edge is not None:
            edge = EdgeOutputs(
                p_half=np.asarray(tape.pe_half.value, dtype=np.float64).reshape(1, -1),
                p_full=np.asarray(tape.pe_full.value, dtype=np.float64).reshape(1, -1),
                points=PointCloud(np.asarray(tape.edge.points.value, dtype=np.float64)),
                cells=tape.edge.cells,
                fallback=tape.edge.fallback,
            )
        return main, edge

    def loss_nodes(self, tape: _Tape, prepared: PreparedSample) -> dict:
        """Per-term loss nodes for one sample (targets must be prepared)."""
        if prepared.complete is None:
            raise ValueError("loss_nodes: sample was prepared without targets")
        terms = {}
        terms["cd"] = ad.chamfer_loss(tape.main.points, prepared.complete)
        terms["cd_sharp"] = ad.chamfer_sharp_loss(tape.main.points, prepared.complete)
        terms["bce_p"] = ad.bce_mean(tape.main.p, prepared.occ)
        ddiff = ad.sub(tape.main.delta, ad.const(prepared.dens))
        terms["ld"] = ad.reduce_mean(ad.mul(ddiff, ddiff))
        terms["lo"] = tape.main.hinge
        if tape.edge is not None:
            has_edge_points = prepared.edge is not None and prepared.edge.shape[0] > 0
            if has_edge_points:
                terms["cd_edge"] = ad.chamfer_loss(tape.edge.points, prepared.edge)
            else:
                terms["cd_edge"] = ad.const(np.asarray(0.0, dtype=self.dtype))
            terms["bce_e"] = ad.bce_mean(tape.edge.p, prepared.edge_occ)
            ediff = ad.sub(tape.edge.delta, ad.const(prepared.edge_dens))
            terms["ld_e"] = ad.reduce_mean(ad.mul(ediff, ediff))
            terms["lo_e"] = tape.edge.hinge
        else:
            zero = ad.const(np.asarray(0.0, dtype=self.dtype))
            terms["cd_edge"] = zero
            terms["bce_e"] = zero
            terms["ld_e"] = zero
            terms["lo_e"] = zero
        return terms

    def total_node(self, terms: dict) -> ad.Node:
        w = self.cfg.loss_weights()
        total = ad.scale(ad.add(terms["cd"], terms["cd_edge"]), w.l1)
        total = ad.add(total, ad.scale(terms["cd_sharp"], w.l2))
        total = ad.add(total, ad.scale(ad.add(terms["bce_p"], terms["bce_e"]), w.l3))
        total = ad.add(total, ad.scale(ad.add(terms["ld"], terms["ld_e"]), w.l4))
        total = ad.add(total, ad.scale(ad.add(terms["lo"], terms["lo_e"]), w.l5))
        return total

    def train_step(self, batch: list) -> dict:
        """One optimizer update over a batch of PreparedSamples; returns the
        batch-mean loss breakdown. Raises on the first NaN loss term."""
        if not batch:
            raise ValueError("train_step: empty batch")
        order = (
            "cd",
            "cd_edge",
            "cd_sharp",
            "bce_p",
            "bce_e",
            "ld",
            "ld_e",
            "lo",
            "lo_e",
        )
        sums = {k: 0.0 for k in order}
        sums["total"] = 0.0
        grads: dict[str, np.ndarray] = {}
        # folding noise is a pure function of (seed, step) so a resumed run
        # replays the exact stream an uninterrupted run would have seen
        rng = np.random.default_rng([self.cfg.seed + 1, self.global_step])
        mix = tf_mix_at(self.global_step)
        for prepared in batch:
            tape = self.build_tape(prepared, rng, training=True, teacher_force=True, tf_mix=mix)
            terms = self.loss_nodes(tape, prepared)
            for key in order:
                val = float(terms[key].value)
                if math.isnan(val):
                    raise FloatingPointError(f"NaN loss term {key!r} at step {self.global_step + 1}")
                sums[key] += val
            total = self.total_node(terms)
            tval = float(total.value)
            if math.isnan(tval):
                raise FloatingPointError(f"NaN total loss at step {self.global_step + 1}")
            sums["total"] += tval
            ad.backward(total)
            for name, node in tape.leaves.items():
                if node.grad is not None:
                    if name in grads:
                        grads[name] += node.grad
                    else:
                        grads[name] = node.grad
        nb = float(len(batch))
        for name in grads:
            grads[name] /= nb
        ad.adam_step(self.params, grads, self.opt_state, lr=self.cfg.lr)
        self.global_step += 1
        return {k: v / nb for k, v in sums.items()}

    # ---- persistence -----------------------------------------------------

    def state_arrays(self) -> dict:
        out = dict(self.params)
        for layer, stats in self.buffers.items():
            out[f"buf.{layer}.mean"] = stats["mean"]
            out[f"buf.{layer}.var"] = stats["var"]
        return out

    def save(self, path) -> None:
        ad.save_params(path, self.state_arrays())

    def load_state(self, path) -> None:
        loaded = ad.load_params(path)
        want = self.state_arrays()
        missing = sorted(set(want) - set(loaded))
        extra = sorted(set(loaded) - set(want))
        if missing or extra:
            raise ValueError(
                f"{path}: checkpoint does not match the config "
                f"(missing {missing[:3]}, unexpected {extra[:3]})"
            )
        for name, arr in loaded.items():
            if arr.shape != want[name].shape:
                raise ValueError(
                    f"{path}: parameter {name!r} has shape {want[name].shape} "
                    f"in the model but {arr.shape} in the checkpoint"
                )
        for name, arr in self.params.items():
            arr[...] = loaded[name].astype(self.dtype)
        for layer, stats in self.buffers.items():
            stats["mean"][...] = loaded[f"buf.{layer}.mean"].astype(np.float64)
            stats["var"][...] = loaded[f"buf.{layer}.var"].astype(np.float64)

    @classmethod
    def load(cls, path, cfg: ModelConfig, dtype=np.float32) -> "Model":
        model = cls(cfg, dtype=dtype)
        model.load_state(path)
        return model


# ---------------------------------------------------------------------------
# end-to-end gradient oracle


def model_grad_check(
    cfg: ModelConfig | None = None,
    n_entries: int = 20,
    seed: int = 0,
    eps: float = 1e-4,
) -> float:
    """Finite-difference check of the full training loss on a tiny model.

    Builds a float64 model on one synthetic sample and compares reverse-mode
    gradients of the teacher-forced training loss against finite differences
    at n_entries randomly chosen parameter entries. Teacher forcing keeps the
    generator's cell set fixed under perturbation, so the loss is piecewise
    smooth at the evaluation point. Returns the max relative error.

    The loss is only piecewise differentiable (ReLU corners, nearest-pair
    switches inside the chamfer terms), so an eps-ball around the evaluation
    point can straddle a derivative break. At such an entry the forward and
    backward differences disagree with each other and the central difference
    matches neither branch; reverse mode is still correct if it returns one
    of the two one-sided derivatives. Each entry therefore passes on the
    central difference when the ball is smooth, and on the closer one-sided
    difference when a break is detected.

    eps trades finite-difference truncation error against cancellation noise;
    the total loss is O(1e5), so eps below ~1e-5 drowns small-gradient entries
    in roundoff from the fp - fm subtraction.
    """
    from . import synth  # local import to avoid a cycle

    if cfg is None:
        cfg = ModelConfig.micro(seed=seed)
    model = Model(cfg, dtype=np.float64)

    rng = np.random.default_rng(seed)
    # check at a generic point: the structured initialization parks many
    # pre-activations exactly on ReLU corners (zero biases over all-zero
    # sparse regions), where one-sided derivatives differ and no subgradient
    # choice can agree with a central difference; a small jitter moves the
    # evaluation off those measure-zero surfaces
    for name in sorted(model.params):
        arr = model.params[name]
        arr += rng.normal(scale=0.01, size=arr.shape)
    complete = synth.make_shape(synth.ShapeSpec("table", max(64, cfg.n_in), seed))
    from .geometry import OcclusionSpec, occlude_by_viewpoint
    from .edges import EdgeParams, extract_edges

    partial = occlude_by_viewpoint(complete, OcclusionSpec(seed=seed, target_ratio=0.3))
    k = min(100, max(2, len(complete) // 8))
    _, edge_cloud = extract_edges(complete, EdgeParams(k=k, lam=5.0))
    prepared = prepare_sample(cfg, partial, complete, edge_cloud, dtype=np.float64)

    def run_value() -> float:
        tape = model.build_tape(
            prepared, np.random.default_rng(seed + 7), training=True, teacher_force=True
        )
        total = model.total_node(model.loss_nodes(tape, prepared))
        return float(total.value), tape, total

    f0, tape, total = run_value()
    ad.backward(total)
    analytic = {name: node.grad for name, node in tape.leaves.items()}
    # the comparison floor tracks the loss magnitude: differences far below
    # the finite-difference resolution of a |f0|-sized value are both zero
    floor = 1e-8 * max(1.0, abs(f0))

    names = sorted(model.params)
    picks = []
    for _ in range(n_entries):
        name = names[int(rng.integers(len(names)))]
        flat = int(rng.integers(model.params[name].size))
        picks.append((name, flat))

    worst = 0.0
    for name, flat in picks:
        arr = model.params[name].reshape(-1)
        orig = arr[flat]
        arr[flat] = orig + eps
        fp = run_value()[0]
        arr[flat] = orig - eps
        fm = run_value()[0]
        arr[flat] = orig
        central = (fp - fm) / (2.0 * eps)
        fwd = (fp - f0) / eps
        bwd = (f0 - fm) / eps
        ag = analytic[name]
        a = float(ag.reshape(-1)[flat]) if ag is not None else 0.0
        rel = abs(a - central) / max(abs(a), abs(central), floor)
        scale = max(abs(fwd), abs(bwd), floor)
        if rel > 1e-4 and abs(fwd - bwd) > 1e-3 * scale:
            # derivative break inside the eps ball: the analytic value must
            # agree with one of the one-sided slopes instead
            rel = min(
                abs(a - fwd) / max(abs(a), abs(fwd), floor),
                abs(a - bwd) / max(abs(a), abs(bwd), floor),
            )
        worst = max(worst, rel)
    return worst
