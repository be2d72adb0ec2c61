"""CP-UNet: a dense encoder/decoder built from Context Pyramid Modules (CPM)
with Connection Module (CM) skips, trained on noisy patches only.

Wiring for the default dims::

    input 2304 -> CPM 64 -> CPM 32 -> CPM 16 -> CPM 8          (encoder)
                    |CM       |CM       |CM
    head 2304 <- CPM 64 <- CPM 32 <- CPM 16 <- CPM 8 <- bottleneck  (decoder)

Each decoder stage after the first consumes ``concat(previous, CM(skip))``.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .nn_core import (
    DTYPE,
    AdamState,
    Dense,
    DenseLayer,
    Dropout,
    DropoutConfig,
    HuberConfig,
    LayerNorm,
    LayerNormParams,
    LeakyReLU,
    LeakyReluConfig,
    NumericError,
    ShapeError,
    UsageError,
    adam_step,
    huber_grad,
    huber_loss,
)
from .patching import PatchConfig, PatchSet, extract_patches, reconstruct

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CPUN"
CHECKPOINT_VERSION = 1

# dense overlap when training (stride 8: many patches per epoch), half
# overlap when denoising
TRAIN_PATCHES = PatchConfig(48, 40)
DENOISE_PATCHES = PatchConfig(48, 24)


class ArchitectureError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    alpha: float = 1.2
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        HuberConfig(self.alpha)


@dataclass(frozen=True)
class CPUNetConfig:
    input_dim: int = 48 * 48
    encoder_dims: tuple = (64, 32, 16, 8)
    decoder_dims: tuple = (8, 16, 32, 64)
    branch_fractions: tuple = (0.5, 0.25, 0.25)
    slope: float = 0.2
    dropout: float = 0.0
    ln_eps: float = 1e-5
    epochs: int = 100
    batch_size: int = 32
    alpha: float = 1.2
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_dims", tuple(int(d) for d in self.encoder_dims))
        object.__setattr__(self, "decoder_dims", tuple(int(d) for d in self.decoder_dims))
        object.__setattr__(self, "branch_fractions", tuple(float(f) for f in self.branch_fractions))

    @classmethod
    def field_preset(cls, **overrides) -> "CPUNetConfig":
        """Wider stages used for field recordings."""
        return cls(encoder_dims=(128, 64, 32, 16), decoder_dims=(16, 32, 64, 128), **overrides)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.alpha, self.lr, self.seed)

    def validate(self):
        enc, dec = self.encoder_dims, self.decoder_dims
        if len(enc) != 4 or len(dec) != 4:
            raise ArchitectureError(
                f"need 4 encoder and 4 decoder stages, got {len(enc)} and {len(dec)}"
            )
        if tuple(reversed(dec)) != enc:
            raise ArchitectureError(f"decoder dims {dec} are not the encoder dims {enc} reversed")
        if self.input_dim < 1 or min(enc) < 1:
            raise ArchitectureError("all dims must be positive")
        fr = self.branch_fractions
        if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ArchitectureError(f"branch fractions must be 3 positives summing to 1, got {fr}")
        for i, d in enumerate(enc):
            try:
                branch_dims(d, fr)
            except ArchitectureError as exc:
                raise ArchitectureError(f"encoder stage {i + 1}: {exc}") from None


def branch_dims(out_dim: int, fractions=(0.5, 0.25, 0.25)) -> tuple[int, int, int]:
    """Split ``out_dim`` by ``fractions`` with largest-remainder rounding."""
    exact = [Fraction(f).limit_denominator(1 << 20) * out_dim for f in fractions]
    dims = [int(e) for e in exact]
    rem = out_dim - sum(dims)
    order = sorted(range(3), key=lambda i: (-(exact[i] - dims[i]), i))
    for i in order[:rem]:
        dims[i] += 1
    if min(dims) < 1:
        raise ArchitectureError(f"out_dim {out_dim} cannot feed three positive branches {dims}")
    return tuple(dims)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


class Module:
    """Minimal container: ordered children, parameter walk, train/eval."""

    def children(self) -> list[tuple[str, object]]:
        return []

    def named_parameters(self, prefix: str = ""):
        out = {}
        for name, child in self.children():
            full = f"{prefix}{name}"
            if isinstance(child, Module):
                out.update(child.named_parameters(full + "."))
            else:
                for pname, arr in child.parameters().items():
                    out[f"{full}.{pname}"] = arr
        return out

    def named_gradients(self, prefix: str = ""):
        out = {}
        for name, child in self.children():
            full = f"{prefix}{name}"
            if isinstance(child, Module):
                out.update(child.named_gradients(full + "."))
            else:
                for pname, arr in child.gradients().items():
                    out[f"{full}.{pname}"] = arr
        return out

    def dropout_layers(self) -> list[Dropout]:
        found = []
        for _, child in self.children():
            if isinstance(child, Module):
                found.extend(child.dropout_layers())
            elif isinstance(child, Dropout):
                found.append(child)
        return found

    def train(self):
        for d in self.dropout_layers():
            d.training = True
        return self

    def eval(self):
        for d in self.dropout_layers():
            d.training = False
        return self

    @property
    def training(self) -> bool:
        drops = self.dropout_layers()
        return bool(drops) and drops[0].training

    def reseed_dropout(self, seed: int):
        """Restart every dropout stream from a seed derived from ``seed``."""
        for i, d in enumerate(self.dropout_layers()):
            d.reseed(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))


class Block(Module):
    """Dense -> LayerNorm -> LeakyReLU -> Dropout."""

    def __init__(self, in_dim, out_dim, rng, slope=0.2, dropout=0.0, ln_eps=1e-5, seed=0):
        self.dense = Dense(DenseLayer.init(in_dim, out_dim, rng))
        self.norm = LayerNorm(LayerNormParams.init(out_dim, ln_eps))
        self.act = LeakyReLU(LeakyReluConfig(slope))
        self.drop = Dropout(DropoutConfig(dropout, seed))
        self.in_dim, self.out_dim = in_dim, out_dim

    def children(self):
        return [("dense", self.dense), ("norm", self.norm), ("act", self.act), ("drop", self.drop)]

    def forward(self, x):
        return self.drop.forward(self.act.forward(self.norm.forward(self.dense.forward(x))))

    def backward(self, grad):
        g = self.drop.backward(grad)
        g = self.act.backward(g)
        g = self.norm.backward(g)
        return self.dense.backward(g)


class CPMLayer(Module):
    """Three parallel blocks of different widths, concatenated in order."""

    def __init__(self, in_dim, out_dim, rng, fractions=(0.5, 0.25, 0.25), seed=0, **block_kw):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.dims = branch_dims(out_dim, fractions)
        self.branches = [
            Block(in_dim, d, rng, seed=seed + i, **block_kw) for i, d in enumerate(self.dims)
        ]
        self._splits = np.cumsum(self.dims)[:-1]

    def children(self):
        return [(f"branch{i}", b) for i, b in enumerate(self.branches)]

    def forward(self, x):
        if np.shape(x)[-1] != self.in_dim:
            raise ShapeError(f"CPM expects {self.in_dim} features, got {np.shape(x)[-1]}")
        return np.concatenate([b.forward(x) for b in self.branches], axis=-1)

    def backward(self, grad):
        parts = np.split(grad, self._splits, axis=-1)
        dx = self.branches[0].backward(parts[0])
        for b, g in zip(self.branches[1:], parts[1:]):
            dx = dx + b.backward(g)
        return dx


class CMLayer(Block):
    """Skip transform with equal in/out width."""

    def __init__(self, dim, rng, seed=0, **block_kw):
        super().__init__(dim, dim, rng, seed=seed, **block_kw)

    def forward(self, x):
        if np.shape(x)[-1] != self.in_dim:
            raise ShapeError(f"CM expects {self.in_dim} features, got {np.shape(x)[-1]}")
        return super().forward(x)


def cpm_forward(cpm: CPMLayer, x) -> np.ndarray:
    return cpm.forward(x)


def cm_forward(cm: CMLayer, x) -> np.ndarray:
    return cm.forward(x)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class PatchNet(Module):
    """Shared behaviour of the patch-vector denoisers (forward/backward,
    prediction, standardization stats)."""

    kind = "base"

    def __init__(self, config: CPUNetConfig):
        self.config = config
        self.stats: tuple[float, float] | None = None
        self.optimizer: AdamState | None = None

    def __call__(self, x):
        return self.forward(x)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def predict(self, vectors, batch_size: int = 256) -> np.ndarray:
        """Eval-mode forward over rows of ``vectors``; restores the mode."""
        was_training = self.training
        self.eval()
        try:
            vectors = np.asarray(vectors, dtype=DTYPE)
            out = [self.forward(vectors[i : i + batch_size]) for i in range(0, len(vectors), batch_size)]
            return np.concatenate(out, axis=0) if out else np.empty_like(vectors)
        finally:
            if was_training:
                self.train()


class CPUNet(PatchNet):
    kind = "cpunet"

    def __init__(self, config: CPUNetConfig = CPUNetConfig()):
        config.validate()
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        kw = dict(slope=config.slope, dropout=config.dropout, ln_eps=config.ln_eps)
        seeds = iter(range(config.seed * 1000, config.seed * 1000 + 1000, 10))
        enc = config.encoder_dims
        dec = config.decoder_dims

        self.encoders = []
        prev = config.input_dim
        for d in enc:
            self.encoders.append(
                CPMLayer(prev, d, rng, config.branch_fractions, seed=next(seeds), **kw)
            )
            prev = d
        # one CM per encoder stage except the bottleneck
        self.cms = [CMLayer(d, rng, seed=next(seeds), **kw) for d in enc[:-1]]
        self.decoders = []
        for k, d in enumerate(dec):
            feed = prev if k == 0 else prev + self.cms[len(self.cms) - k].out_dim
            self.decoders.append(
                CPMLayer(feed, d, rng, config.branch_fractions, seed=next(seeds), **kw)
            )
            prev = d
        self.head = Dense(DenseLayer.init(prev, config.input_dim, rng))
        self._check_closure()

    def _check_closure(self):
        for k, stage in enumerate(self.decoders):
            expected = self.encoders[-1].out_dim if k == 0 else (
                self.decoders[k - 1].out_dim + self.cms[len(self.cms) - k].out_dim
            )
            if stage.in_dim != expected:
                raise ArchitectureError(f"decoder stage {k + 1}: in_dim {stage.in_dim} != feed {expected}")
            if k > 0 and self.cms[len(self.cms) - k].out_dim != stage.out_dim:
                raise ArchitectureError(f"decoder stage {k + 1}: CM width does not match stage width")
        if self.head.p.in_dim != self.decoders[-1].out_dim:
            raise ArchitectureError("output head does not match last decoder width")

    def children(self):
        items = [(f"enc{i}", m) for i, m in enumerate(self.encoders)]
        items += [(f"cm{i}", m) for i, m in enumerate(self.cms)]
        items += [(f"dec{i}", m) for i, m in enumerate(self.decoders)]
        items.append(("head", self.head))
        return items

    def forward(self, y):
        y = np.asarray(y, dtype=DTYPE)
        if y.shape[-1] != self.config.input_dim:
            raise ShapeError(f"CP-UNet expects {self.config.input_dim} inputs, got {y.shape[-1]}")
        h = y
        skips = []
        for i, enc in enumerate(self.encoders):
            h = enc.forward(h)
            if i < len(self.cms):
                skips.append(self.cms[i].forward(h))
        self._widths = []
        d = self.decoders[0].forward(h)
        for k in range(1, len(self.decoders)):
            skip = skips[len(skips) - k]
            self._widths.append(d.shape[-1])
            d = self.decoders[k].forward(np.concatenate([d, skip], axis=-1))
        return self.head.forward(d)

    def backward(self, grad):
        g = self.head.backward(grad)
        skip_grads = [None] * len(self.cms)
        for k in range(len(self.decoders) - 1, 0, -1):
            g_cat = self.decoders[k].backward(g)
            w = self._widths[k - 1]
            g, skip_grads[len(self.cms) - k] = g_cat[..., :w], g_cat[..., w:]
        g = self.decoders[0].backward(g)
        for i in range(len(self.encoders) - 1, -1, -1):
            if i < len(self.cms):
                g = g + self.cms[i].backward(skip_grads[i])
            g = self.encoders[i].backward(g)
        return g


def build_cpunet(cfg: CPUNetConfig = CPUNetConfig()) -> CPUNet:
    return CPUNet(cfg)


def cpunet_forward(net: PatchNet, y_patch) -> np.ndarray:
    return net.forward(y_patch)


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------


def standardization_stats(record) -> tuple[float, float]:
    record = np.asarray(record, dtype=DTYPE)
    std = float(record.std())
    return float(record.mean()), std if std > 0 else 1.0


def prepare_patches(record, patch_cfg: PatchConfig = PatchConfig(), stats=None):
    """Standardize a noisy record and cut it into training patches.

    Returns ``(patches, stats)``.
    """
    if stats is None:
        stats = standardization_stats(record)
    mean, std = stats
    z = (np.asarray(record, dtype=DTYPE) - mean) / std
    return extract_patches(z, patch_cfg), stats


def train_unsupervised(net: PatchNet, patches: PatchSet, cfg: TrainConfig | None = None, progress=None):
    """Fit ``net`` to reproduce its own noisy input under the Huber loss.

    Only the noisy patches are consumed. Returns the per-epoch mean loss.
    ``progress`` is an optional ``callback(epoch, loss)``.
    """
    cfg = cfg or net.config.train_config()
    vectors = np.asarray(patches.vectors if isinstance(patches, PatchSet) else patches, dtype=DTYPE)
    if vectors.ndim != 2 or len(vectors) == 0:
        raise UsageError("training needs a non-empty set of patch vectors")
    if vectors.shape[1] != net.config.input_dim:
        raise ShapeError(f"patch length {vectors.shape[1]} != network input {net.config.input_dim}")
    history: list[float] = []
    if cfg.epochs == 0:
        return net, history

    huber = HuberConfig(cfg.alpha)
    if net.optimizer is None or net.optimizer.lr != cfg.lr:
        net.optimizer = AdamState(lr=cfg.lr)
    params = net.named_parameters()
    rng = np.random.default_rng(cfg.seed)
    net.reseed_dropout(cfg.seed)
    net.train()
    n = len(vectors)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = vectors[order[start : start + cfg.batch_size]]
            out = net.forward(batch)
            loss = huber_loss(out, batch, huber)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            net.backward(huber_grad(out, batch, huber))
            adam_step(net.optimizer, params, net.named_gradients())
            total += loss * len(batch)
        history.append(total / n)
        if progress is not None:
            progress(epoch + 1, history[-1])
    net.eval()
    return net, history


def fit_record(net: PatchNet, noisy, patch_cfg: PatchConfig = TRAIN_PATCHES, cfg: TrainConfig | None = None,
               progress=None):
    """Standardize ``noisy``, store its stats on ``net`` and train on its patches."""
    patches, stats = prepare_patches(noisy, patch_cfg)
    net.stats = stats
    return train_unsupervised(net, patches, cfg, progress)


def denoise_record(net: PatchNet, record, patch_cfg: PatchConfig = DENOISE_PATCHES, stats=None) -> np.ndarray:
    """Patch, run the network in eval mode, and stitch back with overlap
    averaging. Standardizes with ``stats``, else the model's stored stats,
    else the record's own."""
    record = np.asarray(record, dtype=DTYPE)
    c = patch_cfg.size
    if record.ndim != 2 or record.shape[0] < c or record.shape[1] < c:
        raise UsageError(f"record of shape {record.shape} is smaller than one {c}x{c} patch")
    if c * c != net.config.input_dim:
        raise ShapeError(f"patch size {c} does not match network input {net.config.input_dim}")
    if stats is None:
        stats = net.stats if net.stats is not None else standardization_stats(record)
    patches, (mean, std) = prepare_patches(record, patch_cfg, stats)
    out = net.predict(patches.vectors)
    return reconstruct(patches.with_vectors(out)) * std + mean


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(net: PatchNet, path):
    """Write magic, version, a JSON config block, then every parameter block
    in architecture order as little-endian float64. Atomic replace."""
    meta = {
        "kind": net.kind,
        "config": asdict(net.config),
        "stats": list(net.stats) if net.stats is not None else None,
        "blocks": [[name, list(arr.shape)] for name, arr in net.named_parameters().items()],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(blob)), blob]
    for arr in net.named_parameters().values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    atomic_write(path, b"".join(parts))


def load_checkpoint(path) -> PatchNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 9:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack("<BI", raw[4:9])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta = json.loads(raw[9 : 9 + n].decode())
    cfg = CPUNetConfig(**meta["config"])
    if meta["kind"] == CPUNet.kind:
        net = CPUNet(cfg)
    else:
        from .baselines import PlainAutoencoder

        if meta["kind"] != PlainAutoencoder.kind:
            raise CheckpointError(f"{path}: unknown model kind {meta['kind']!r}")
        net = PlainAutoencoder(cfg)
    net.stats = tuple(meta["stats"]) if meta["stats"] is not None else None
    offset = 9 + n
    params = net.named_parameters()
    if [name for name, _ in meta["blocks"]] != list(params):
        raise CheckpointError(f"{path}: parameter layout does not match the config")
    for name, arr in params.items():
        nbytes = arr.size * 8
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated parameter block {name}")
        arr[...] = np.frombuffer(chunk, dtype="<f8").reshape(arr.shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return net


def atomic_write(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
