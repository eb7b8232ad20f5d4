"""Coupled conditional VAE over feature vectors.

One encoder and one decoder serve both domains; the domain enters as a one-hot
pair appended to the encoder input and to the latent code. Training pairs a
source sample with a random same-class target sample and minimises

    recon(x_s) + recon(x_t) + cross(x_s <- z_t) + cross(x_t <- z_s) + lam * KL

with squared-error reconstructions. Pairs whose target side is a dummy (unseen
classes) only contribute the source reconstruction and the source-side KL.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .nn import AdamConfig, Mlp, Parameter, ShapeError, adam_step, make_rng

SOURCE, TARGET = 0, 1
DOMAIN_DIM = 2
CHECKPOINT_MAGIC = b"CCVAE1"


def domain_code(domain, n: int) -> np.ndarray:
    """One-hot domain condition broadcast over ``n`` rows."""
    if domain not in (SOURCE, TARGET):
        raise ValueError(f"domain must be {SOURCE} (source) or {TARGET} (target), got {domain!r}")
    code = np.zeros((n, DOMAIN_DIM))
    code[:, domain] = 1.0
    return code


class CcvaeModel:
    """Shared-weight encoder/decoder pair.

    The encoder maps ``feature_dim + 2 -> hidden... -> 2 * latent_dim``; the
    first half of its output is the posterior mean, the second the log-variance.
    The decoder maps ``latent_dim + 2 -> hidden... -> feature_dim``. Output
    layers are linear.
    """

    def __init__(
        self,
        feature_dim: int,
        hidden: int | Sequence[int] = 512,
        latent_dim: int = 64,
        rng: np.random.Generator | None = None,
    ):
        hidden = (int(hidden),) if np.isscalar(hidden) else tuple(int(h) for h in hidden)
        self.feature_dim = int(feature_dim)
        self.latent_dim = int(latent_dim)
        self.hidden = hidden
        self.encoder = Mlp((self.feature_dim + DOMAIN_DIM, *hidden, 2 * self.latent_dim), rng, name="encoder")
        self.decoder = Mlp((self.latent_dim + DOMAIN_DIM, *hidden[::-1], self.feature_dim), rng, name="decoder")

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.decoder.parameters()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "CcvaeModel":
        other = CcvaeModel(self.feature_dim, self.hidden, self.latent_dim)
        for dst, src in zip(other.parameters(), self.parameters()):
            dst.value[...] = src.value
        return other


def _encoder_input(model: CcvaeModel, x: np.ndarray, domain) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.feature_dim:
        raise ShapeError(f"expected features with {model.feature_dim} columns, got shape {x.shape}")
    return np.hstack([x, domain_code(domain, len(x))])


def encode(model: CcvaeModel, x: np.ndarray, domain) -> tuple[np.ndarray, np.ndarray]:
    out, _ = model.encoder.forward(_encoder_input(model, x, domain))
    return out[:, : model.latent_dim], out[:, model.latent_dim :]


def decode(model: CcvaeModel, z: np.ndarray, domain) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.latent_dim:
        raise ShapeError(f"expected latent codes with {model.latent_dim} columns, got shape {z.shape}")
    out, _ = model.decoder.forward(np.hstack([z, domain_code(domain, len(z))]))
    return out


def reparameterize(mu: np.ndarray, logvar: np.ndarray, rng: np.random.Generator | None = None, eps=None) -> np.ndarray:
    """Sample ``mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)``."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    return mu + np.exp(0.5 * logvar) * eps


def kl_divergence(mu: np.ndarray, logvar: np.ndarray) -> float:
    """Mean over rows of KL(N(mu, diag(exp(logvar))) || N(0, I))."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    if len(mu) == 0:
        return 0.0
    # expm1(lv) - lv is exactly 0 at lv = 0 and nonnegative elsewhere
    per_row = 0.5 * (mu**2 + np.expm1(logvar) - logvar).sum(axis=1)
    return float(per_row.mean())


@dataclass
class PairBatch:
    """Row-aligned source/target pairs.

    ``valid_t`` is false where the target entry is a zero dummy. ``valid_s`` is
    false only for padding rows, which are ignored entirely.
    """

    x_s: np.ndarray
    x_t: np.ndarray
    class_labels: np.ndarray
    valid_t: np.ndarray
    valid_s: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.x_s)
        if self.valid_s is None:
            self.valid_s = np.ones(n, dtype=bool)
        self.valid_s = np.asarray(self.valid_s, dtype=bool)
        self.valid_t = np.asarray(self.valid_t, dtype=bool)
        if self.x_t.shape != self.x_s.shape or len(self.valid_t) != n or len(self.valid_s) != n:
            raise ShapeError("PairBatch fields must share the batch dimension")
        if np.any(self.valid_t & ~self.valid_s):
            raise ValueError("a valid target entry needs a valid source partner")

    def __len__(self):
        return len(self.x_s)

    def append(self, other: "PairBatch") -> "PairBatch":
        return PairBatch(
            np.vstack([self.x_s, other.x_s]),
            np.vstack([self.x_t, other.x_t]),
            np.concatenate([self.class_labels, other.class_labels]),
            np.concatenate([self.valid_t, other.valid_t]),
            np.concatenate([self.valid_s, other.valid_s]),
        )


@dataclass
class LossBreakdown:
    recon_s: float
    recon_t: float
    cross_st: float
    cross_ts: float
    kl: float
    lam: float
    total: float

    def recomputed_total(self) -> float:
        return (self.recon_s + self.recon_t) + (self.cross_st + self.cross_ts) + self.lam * self.kl


def _sq_err(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of the row-wise sum of squares, plus its gradient."""
    n = len(pred)
    if n == 0:
        return 0.0, np.zeros_like(pred)
    diff = pred - target
    return float((diff**2).sum() / n), (2.0 / n) * diff


def ccvae_loss(
    model: CcvaeModel,
    batch: PairBatch,
    lam: float,
    rng: np.random.Generator | None = None,
    eps: tuple[np.ndarray, np.ndarray] | None = None,
    backward: bool = True,
) -> tuple[LossBreakdown, list[np.ndarray]]:
    """Coupled loss on one batch; gradients are accumulated into the model.

    ``cross_st`` compares ``x_t`` with the source code decoded as target and
    ``cross_ts`` compares ``x_s`` with the target code decoded as source. The
    KL term averages over every valid encoding (source rows plus valid target
    rows). One latent sample per encoding feeds both of its decodes.

    Noise comes from ``eps = (eps_s, eps_t)`` when given, with one row per
    valid source row and per valid target row respectively, else from ``rng``.
    Returns the breakdown and the list of parameter gradients.
    """
    src_rows = np.flatnonzero(batch.valid_s)
    tgt_rows = np.flatnonzero(batch.valid_t)
    n_s, n_t = len(src_rows), len(tgt_rows)
    if n_s == 0:
        raise ValueError("batch has no valid source rows")
    x_s = np.asarray(batch.x_s, dtype=np.float64)[src_rows]
    x_t = np.asarray(batch.x_t, dtype=np.float64)[tgt_rows]
    # positions of the valid target rows inside the compressed source block
    paired = np.searchsorted(src_rows, tgt_rows)
    latent = model.latent_dim

    enc_in = np.vstack([_encoder_input(model, x_s, SOURCE), _encoder_input(model, x_t, TARGET)])
    enc_out, enc_cache = model.encoder.forward(enc_in)
    mu, logvar = enc_out[:, :latent], enc_out[:, latent:]
    if eps is None:
        eps_s = rng.standard_normal((n_s, latent))
        eps_t = rng.standard_normal((n_t, latent))
    else:
        eps_s, eps_t = (np.asarray(e, dtype=np.float64) for e in eps)
        if eps_s.shape != (n_s, latent) or eps_t.shape != (n_t, latent):
            raise ShapeError(f"noise shapes {eps_s.shape}, {eps_t.shape} do not match {n_s}/{n_t} valid rows")
    std = np.exp(0.5 * logvar)
    z = mu + std * np.vstack([eps_s, eps_t])
    z_s, z_t = z[:n_s], z[n_s:]

    # decoder blocks: s->s, s->t (paired rows only), t->t, t->s
    dec_in = np.vstack([
        np.hstack([z_s, domain_code(SOURCE, n_s)]),
        np.hstack([z_s[paired], domain_code(TARGET, n_t)]),
        np.hstack([z_t, domain_code(TARGET, n_t)]),
        np.hstack([z_t, domain_code(SOURCE, n_t)]),
    ])
    dec_out, dec_cache = model.decoder.forward(dec_in)
    b1, b2, b3 = n_s, n_s + n_t, n_s + 2 * n_t
    recon_s, g_ss = _sq_err(dec_out[:b1], x_s)
    cross_st, g_st = _sq_err(dec_out[b1:b2], x_t)
    recon_t, g_tt = _sq_err(dec_out[b2:b3], x_t)
    cross_ts, g_ts = _sq_err(dec_out[b3:], x_s[paired])

    n_enc = n_s + n_t
    kl = float(0.5 * (mu**2 + np.expm1(logvar) - logvar).sum() / n_enc)
    total = (recon_s + recon_t) + (cross_st + cross_ts) + lam * kl
    breakdown = LossBreakdown(recon_s, recon_t, cross_st, cross_ts, kl, float(lam), float(total))

    if backward:
        d_dec_in = model.decoder.backward(dec_cache, np.vstack([g_ss, g_st, g_tt, g_ts]))
        dz_all = d_dec_in[:, :latent]
        dz_s = dz_all[:b1].copy()
        np.add.at(dz_s, paired, dz_all[b1:b2])
        dz_t = dz_all[b2:b3] + dz_all[b3:]
        dz = np.vstack([dz_s, dz_t])
        d_mu = dz + (lam / n_enc) * mu
        d_logvar = dz * (0.5 * std * np.vstack([eps_s, eps_t])) + (lam / n_enc) * 0.5 * np.expm1(logvar)
        model.encoder.backward(enc_cache, np.hstack([d_mu, d_logvar]))
    return breakdown, [p.grad for p in model.parameters()]


@dataclass
class WarmupSchedule:
    lambda_max: float = 0.2
    total_steps: int = 1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")


def warmup_lambda(schedule: WarmupSchedule, step: int) -> float:
    """KL weight rising linearly from 0 to ``lambda_max`` over ``total_steps``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return schedule.lambda_max * min(1.0, step / schedule.total_steps)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    lambda_max: float = 0.2
    warmup_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.warmup_fraction <= 1:
            raise ValueError(f"warmup_fraction must lie in (0, 1], got {self.warmup_fraction}")

    def steps_per_epoch(self, n_source: int) -> int:
        return math.ceil(n_source / self.batch_size)

    def schedule(self, n_source: int) -> WarmupSchedule:
        total = self.epochs * self.steps_per_epoch(n_source)
        return WarmupSchedule(self.lambda_max, max(1, math.ceil(self.warmup_fraction * total)))


@dataclass
class TrainHistory:
    epochs: list[LossBreakdown] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)

    def totals(self) -> list[float]:
        return [e.total for e in self.epochs]


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    keys = LossBreakdown.__dataclass_fields__
    return LossBreakdown(**{k: float(np.mean([getattr(b, k) for b in items])) for k in keys})


def train(model: CcvaeModel, task, config: TrainConfig, rng: np.random.Generator | None = None) -> tuple[CcvaeModel, TrainHistory]:
    """Train ``model`` in place on a task's source set and seen-class target set.

    Each epoch walks the source set in shuffled order; every source sample is
    paired with a uniformly drawn same-class target sample, or a dummy when its
    class has no target data.
    """
    from .data import sample_pairs

    rng = make_rng(config.seed) if rng is None else rng
    seen = set(np.unique(task.target_train.labels).tolist())
    if not seen <= set(np.unique(task.source_train.labels).tolist()):
        raise ValueError("target classes must be a subset of the source classes")
    n = len(task.source_train)
    history = TrainHistory()
    if config.epochs == 0 or n == 0:
        return model, history
    schedule = config.schedule(n)
    adam = AdamConfig(learning_rate=config.learning_rate)
    params = model.parameters()
    model.zero_grad()
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        parts = []
        for start in range(0, n, config.batch_size):
            batch = sample_pairs(task, order, start, config.batch_size, rng)
            lam = warmup_lambda(schedule, step)
            breakdown, _ = ccvae_loss(model, batch, lam, rng)
            adam_step(params, adam)
            history.lambdas.append(lam)
            parts.append(breakdown)
            step += 1
        history.epochs.append(_mean_breakdown(parts))
    return model, history


def generate_cross_domain(
    model: CcvaeModel,
    x: np.ndarray,
    from_domain,
    to_domain,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
) -> np.ndarray:
    """Encode under ``from_domain``, sample a code, decode under ``to_domain``.

    Row ``i`` of the output carries the class of input row ``i``. With
    ``deterministic`` the posterior mean is decoded instead of a sample. The
    model is not checked for having been trained.
    """
    mu, logvar = encode(model, x, from_domain)
    z = mu if deterministic else reparameterize(mu, logvar, rng)
    return decode(model, z, to_domain)


def save_checkpoint(model: CcvaeModel, path, config: dict | None = None) -> None:
    header = {
        "feature_dim": model.feature_dim,
        "latent_dim": model.latent_dim,
        "hidden": list(model.hidden),
        "layers": [[p.name, list(p.shape)] for p in model.parameters()],
        "config": config or {},
    }
    with open(path, "wb") as fh:
        fh.write(_pack_checkpoint(CHECKPOINT_MAGIC, header, model.parameters()))


def load_checkpoint(path) -> tuple[CcvaeModel, dict]:
    with open(path, "rb") as fh:
        header, arrays = _unpack_checkpoint(CHECKPOINT_MAGIC, fh.read())
    model = CcvaeModel(header["feature_dim"], header["hidden"], header["latent_dim"])
    _assign(model.parameters(), header, arrays)
    return model, header.get("config", {})


# shared with the classifier checkpoint: magic, u32 header length, JSON header,
# then each parameter as little-endian float64 in declaration order
def _pack_checkpoint(magic: bytes, header: dict, params: Sequence[Parameter]) -> bytes:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(magic)
    out.write(struct.pack("<I", len(blob)))
    out.write(blob)
    for p in params:
        out.write(p.value.astype("<f8").tobytes())
    return out.getvalue()


def _unpack_checkpoint(magic: bytes, data: bytes) -> tuple[dict, bytes]:
    if not data.startswith(magic):
        raise ValueError(f"bad checkpoint magic, expected {magic!r}")
    off = len(magic)
    if len(data) < off + 4:
        raise ValueError("truncated checkpoint header")
    (size,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + size].decode("utf-8"))
    return header, data[off + size :]


def _assign(params: Sequence[Parameter], header: dict, payload: bytes) -> None:
    expected = sum(p.size for p in params) * 8
    if len(payload) != expected:
        raise ValueError(f"checkpoint payload has {len(payload)} bytes, expected {expected}")
    off = 0
    for p, (name, shape) in zip(params, header["layers"]):
        if tuple(shape) != p.shape:
            raise ValueError(f"parameter {name} has shape {shape}, model expects {p.shape}")
        n = p.size * 8
        p.value[...] = np.frombuffer(payload[off : off + n], dtype="<f8").reshape(p.shape)
        off += n


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
