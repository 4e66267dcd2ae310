"""Backbone + classifier head assembled from a declarative :class:`ModelConfig`.

All parameters live in one flat float64 vector.  ``ModelParams.slices`` maps
each named layer to its offset and shape, so curvature analysis can treat the
whole model as a function of a single vector.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import moe
from .autodiff import Tensor
from .errors import ConfigError, FormatError, UsageError
from .rng import Rng

HEAD_KINDS = ("dense", "soft", "sparse", "hard")
CKPT_MAGIC = b"MOECKPT\x00"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 3072
    backbone_hidden: tuple = (256, 256)
    feature_dim: int = 128
    head: str = "dense"
    num_experts: int = 8
    expert_hidden: int = 64
    k: int = 2
    dense_hidden: int = 512
    num_classes: int = 10
    kl_weight: float = 0.01
    importance_weight: float = 0.01
    load_weight: float = 0.01
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "backbone_hidden", tuple(int(v) for v in self.backbone_hidden))
        self.validate()

    def validate(self):
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        dims = [self.input_dim, self.feature_dim, self.num_classes, self.dense_hidden,
                *self.backbone_hidden]
        if self.head != "dense":
            dims += [self.num_experts, self.expert_hidden]
        if min(dims) < 1:
            raise ConfigError("all layer sizes and counts must be >= 1")
        if self.head == "hard" and self.k != 1:
            raise ConfigError(f"hard head routes to exactly one expert, got k={self.k}")
        if self.head in ("sparse", "hard") and not 1 <= self.k <= self.num_experts:
            raise ConfigError(f"k={self.k} must lie in [1, num_experts={self.num_experts}]")
        if min(self.kl_weight, self.importance_weight, self.load_weight) < 0:
            raise ConfigError("loss weights must be non-negative")

    @property
    def identity_backbone(self) -> bool:
        return not self.backbone_hidden and self.feature_dim == self.input_dim

    def to_dict(self) -> dict:
        return {
            "backbone": {"input_dim": self.input_dim, "hidden": list(self.backbone_hidden),
                         "feature_dim": self.feature_dim},
            "head": {"kind": self.head, "num_experts": self.num_experts,
                     "expert_hidden": self.expert_hidden, "k": self.k,
                     "dense_hidden": self.dense_hidden},
            "num_classes": self.num_classes,
            "loss_weights": {"kl": self.kl_weight, "importance": self.importance_weight,
                             "load": self.load_weight},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {"backbone", "head", "num_classes", "loss_weights", "seed"}
        extra = set(d) - known - {"train", "data", "bench", "curvature", "overrides"}
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        bb, hd, lw = d.get("backbone", {}), d.get("head", {}), d.get("loss_weights", {})
        for section, value, allowed in (
                ("backbone", bb, {"input_dim", "hidden", "feature_dim"}),
                ("head", hd, {"kind", "num_experts", "expert_hidden", "k", "dense_hidden"}),
                ("loss_weights", lw, {"kl", "importance", "load"})):
            if not isinstance(value, dict):
                raise ConfigError(f"{section} must be an object")
            if set(value) - allowed:
                raise ConfigError(f"unknown {section} keys: {sorted(set(value) - allowed)}")
        kind = hd.get("kind", "dense")
        try:
            return cls(
                input_dim=int(bb.get("input_dim", cls.input_dim)),
                backbone_hidden=tuple(bb.get("hidden", cls.backbone_hidden)),
                feature_dim=int(bb.get("feature_dim", cls.feature_dim)),
                head=kind,
                num_experts=int(hd.get("num_experts", cls.num_experts)),
                expert_hidden=int(hd.get("expert_hidden", cls.expert_hidden)),
                k=int(hd.get("k", 1 if kind == "hard" else cls.k)),
                dense_hidden=int(hd.get("dense_hidden", cls.dense_hidden)),
                num_classes=int(d.get("num_classes", cls.num_classes)),
                kl_weight=float(lw.get("kl", cls.kl_weight)),
                importance_weight=float(lw.get("importance", cls.importance_weight)),
                load_weight=float(lw.get("load", cls.load_weight)),
                seed=int(d.get("seed", cls.seed)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid model config: {exc}") from None

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# -- parameter layout -------------------------------------------------------

def _backbone_dims(cfg: ModelConfig):
    if cfg.identity_backbone:
        return []
    dims = [cfg.input_dim, *cfg.backbone_hidden, cfg.feature_dim]
    return list(zip(dims[:-1], dims[1:]))


def _mlp_layout(prefix, d, h, c):
    return [(f"{prefix}.fc1.weight", (d, h)), (f"{prefix}.fc1.bias", (h,)),
            (f"{prefix}.fc2.weight", (h, c)), (f"{prefix}.fc2.bias", (c,))]


def layout(cfg: ModelConfig):
    """Ordered ``(name, shape)`` pairs making up the flat parameter vector."""
    out = []
    for i, (a, b) in enumerate(_backbone_dims(cfg)):
        out += [(f"backbone.{i}.weight", (a, b)), (f"backbone.{i}.bias", (b,))]
    d, c, n = cfg.feature_dim, cfg.num_classes, cfg.num_experts
    if cfg.head == "dense":
        return out + _mlp_layout("head", d, cfg.dense_hidden, c)
    out += [("head.gate.weight", (d, n)), ("head.gate.bias", (n,))]
    if cfg.head in ("sparse", "hard"):
        out.append(("head.noise.weight", (d, n)))
    for i in range(n):
        out += _mlp_layout(f"head.experts.{i}", d, cfg.expert_hidden, c)
    return out


def _init_key(name: str) -> str:
    # The dense head shares expert 0's init streams so a one-expert soft head
    # starts from exactly the same weights.
    if name.startswith("head.fc"):
        return "head.experts.0." + name[len("head."):]
    return name


@dataclass
class ModelParams:
    vector: np.ndarray
    slices: dict = field(default_factory=dict)   # name -> (offset, shape)

    def __len__(self):
        return self.vector.size

    def get(self, name) -> np.ndarray:
        off, shape = self.slices[name]
        return self.vector[off:off + int(np.prod(shape))].reshape(shape)

    def count(self, prefix="") -> int:
        return int(sum(np.prod(s) for n, (_, s) in self.slices.items() if n.startswith(prefix)))


def init_params(cfg: ModelConfig) -> ModelParams:
    """Deterministic initialisation: weights ~ U(+-1/sqrt(fan_in)), biases 0, noise weights 0."""
    slices, off = {}, 0
    for name, shape in layout(cfg):
        slices[name] = (off, shape)
        off += int(np.prod(shape))
    vec = np.zeros(off)
    for name, (o, shape) in slices.items():
        if not name.endswith(".weight") or name == "head.noise.weight":
            continue
        bound = 1.0 / np.sqrt(shape[0])
        vals = Rng(cfg.seed, "init:" + _init_key(name)).uniform(-bound, bound, shape)
        vec[o:o + vals.size] = vals.ravel()
    return ModelParams(vec, slices)


# -- forward ----------------------------------------------------------------

class Output(NamedTuple):
    logits: Tensor
    features: Tensor
    routing: moe.Routing | None


class LossTerms(NamedTuple):
    total: Tensor
    task: Tensor
    aux: dict          # name -> weighted Tensor
    output: Output


class Model:
    """Callable classifier; parameters are supplied as a flat tensor ``theta``."""

    def __init__(self, config: ModelConfig, params: ModelParams | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        self.extra: dict = {}

    @property
    def num_params(self) -> int:
        return len(self.params)

    @property
    def head_param_count(self) -> int:
        return self.params.count("head.")

    def theta(self, tangent=None, requires_grad=False) -> Tensor:
        return Tensor(self.params.vector, requires_grad=requires_grad, tangent=tangent)

    def _p(self, theta, name):
        off, shape = self.params.slices[name]
        return ad.view(theta, off, shape)

    def _mlp(self, theta, prefix, h):
        z = ad.relu(ad.matmul(h, self._p(theta, f"{prefix}.fc1.weight")) + self._p(theta, f"{prefix}.fc1.bias"))
        return ad.matmul(z, self._p(theta, f"{prefix}.fc2.weight")) + self._p(theta, f"{prefix}.fc2.bias")

    def features(self, x, theta=None) -> Tensor:
        theta = self.theta() if theta is None else theta
        h = ad._as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.config.input_dim:
            raise UsageError(f"expected input of shape (B, {self.config.input_dim}), got {h.shape}")
        for i in range(len(_backbone_dims(self.config))):
            h = ad.relu(ad.matmul(h, self._p(theta, f"backbone.{i}.weight")) + self._p(theta, f"backbone.{i}.bias"))
        return h

    def forward(self, x, theta=None, training=False, rng=None) -> Output:
        cfg = self.config
        theta = self.theta() if theta is None else theta
        h = self.features(x, theta)
        if cfg.head == "dense":
            return Output(self._mlp(theta, "head", h), h, None)
        wg, bg = self._p(theta, "head.gate.weight"), self._p(theta, "head.gate.bias")
        experts = [lambda hh, i=i: self._mlp(theta, f"head.experts.{i}", hh) for i in range(cfg.num_experts)]
        if cfg.head == "soft":
            routing = moe.gate_soft(h, wg, bg)
            outs = {i: e(h) for i, e in enumerate(experts)}
            return Output(moe.combine(routing.weights, outs), h, routing)
        routing = moe.gate_noisy_topk(h, wg, bg, self._p(theta, "head.noise.weight"), cfg.k,
                                      rng=rng, training=training)
        return Output(moe.dispatch_combine(h, routing, experts, cfg.num_classes), h, routing)

    def loss(self, x, y, theta=None, training=False, rng=None, include_aux=True) -> LossTerms:
        """Cross-entropy task loss plus the head's weighted balancing losses."""
        cfg = self.config
        out = self.forward(x, theta, training=training, rng=rng)
        task = ad.cross_entropy(out.logits, y)
        aux = {}
        r = out.routing
        if include_aux and r is not None:
            if cfg.head == "soft" and cfg.kl_weight > 0:
                aux["kl"] = cfg.kl_weight * moe.loss_kl_uniform(r.weights)
            if cfg.head in ("sparse", "hard"):
                if cfg.importance_weight > 0:
                    aux["importance"] = cfg.importance_weight * moe.loss_importance(r.weights)
                if cfg.load_weight > 0 and training:
                    aux["load"] = cfg.load_weight * moe.loss_load(r.clean, r.noise_std, r.noisy, cfg.k)
        total = task
        for term in aux.values():
            total = total + term
        return LossTerms(total, task, aux, out)

    def objective(self, x, y, training=False, noise_seed=0, include_aux=False):
        """``theta -> scalar loss`` closure over a fixed batch.

        In training mode the gate noise is redrawn from the same stream on
        every call, so the closure is a deterministic function of ``theta``.
        """
        def fn(theta):
            rng = Rng(noise_seed, "objective-noise") if training else None
            return self.loss(x, y, theta, training=training, rng=rng, include_aux=include_aux).total

        return fn

    def predict(self, x, theta_vector=None) -> np.ndarray:
        """Eval-mode logits without recording a graph."""
        with ad.no_grad():
            theta = None if theta_vector is None else Tensor(theta_vector)
            return self.forward(x, theta).logits.data

    def decide(self, x, theta_vector=None):
        """Eval-mode :class:`~moe_lab.moe.GateDecision` (``None`` for dense heads)."""
        with ad.no_grad():
            theta = None if theta_vector is None else Tensor(theta_vector)
            r = self.forward(x, theta).routing
            return None if r is None else r.decision

    def with_params(self, vector) -> "Model":
        m = Model(self.config, ModelParams(np.array(vector, dtype=np.float64), self.params.slices))
        m.extra = dict(self.extra)
        return m


def build(config: ModelConfig | dict) -> Model:
    if isinstance(config, dict):
        config = ModelConfig.from_dict(config)
    return Model(config)


# -- analytic compute -------------------------------------------------------

@dataclass(frozen=True)
class FlopCount:
    """Per-input multiply-accumulate counts (biases and activations excluded)."""

    backbone: int
    gate: int
    experts_active: int
    experts_total: int

    @property
    def active_ratio(self) -> float:
        return self.experts_active / self.experts_total

    @property
    def head_active(self) -> int:
        return self.gate + self.experts_active

    @property
    def total_active(self) -> int:
        return self.backbone + self.head_active


def count_flops(cfg: ModelConfig) -> FlopCount:
    backbone = sum(a * b for a, b in _backbone_dims(cfg))
    d, c = cfg.feature_dim, cfg.num_classes
    if cfg.head == "dense":
        macs = d * cfg.dense_hidden + cfg.dense_hidden * c
        return FlopCount(backbone, 0, macs, macs)
    per_expert = d * cfg.expert_hidden + cfg.expert_hidden * c
    total = cfg.num_experts * per_expert
    active = total if cfg.head == "soft" else cfg.k * per_expert
    # Noise weights are only used while training, so inference gating is one matmul.
    return FlopCount(backbone, d * cfg.num_experts, active, total)


# -- checkpoints ------------------------------------------------------------
# magic | u32 version | u32 header length | JSON header | float64 LE params | u32 CRC32

def dumps_checkpoint(model: Model) -> bytes:
    header = {
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "extra": model.extra,
        "format_version": CKPT_VERSION,
        "num_params": model.num_params,
        "seed": model.config.seed,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = (CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hdr)) + hdr
            + model.params.vector.astype("<f8").tobytes())
    return body + struct.pack("<I", zlib.crc32(body))


def loads_checkpoint(raw: bytes) -> Model:
    if len(raw) < 20 or raw[:8] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint format version {version}, expected {CKPT_VERSION}")
    if len(raw) < 16 + hlen + 4:
        raise FormatError("truncated checkpoint")
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError:
        raise FormatError("corrupt checkpoint header") from None
    n = header.get("num_params", -1)
    if len(raw) != 16 + hlen + 8 * n + 4:
        raise FormatError(f"truncated checkpoint: {len(raw)} bytes for {n} parameters")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise FormatError("checkpoint CRC mismatch")
    cfg = ModelConfig.from_dict(header["config"])
    model = Model(cfg)
    if model.num_params != n:
        raise FormatError(f"checkpoint has {n} parameters, config implies {model.num_params}")
    model.params.vector[:] = np.frombuffer(raw, "<f8", n, offset=16 + hlen)
    model.extra = header.get("extra", {})
    return model


def save_checkpoint(model: Model, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_checkpoint(model))
    tmp.replace(path)


def load_checkpoint(path) -> Model:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return loads_checkpoint(raw)
