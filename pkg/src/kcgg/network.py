"""Residual MLP epsilon-predictor over flattened trajectories, plus checkpoint I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .diffusion import NoiseSchedule, Normalizer, cosine_schedule

CHECKPOINT_MAGIC = b"KCGGNET1"


class UnknownConditionError(KeyError):
    pass


@dataclass(frozen=True)
class Architecture:
    horizon: int = 32  # states per trajectory (H + 1)
    state_dim: int = 6
    width: int = 256
    blocks: int = 3
    time_dim: int = 32
    cond_dim: int = 16

    @property
    def flat_dim(self) -> int:
        return self.horizon * self.state_dim


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class GaussianSkip:
    """Closed-form noise predictor of a Gaussian fitted to the training set.

    For data ~ N(mean, cov) the optimal prediction is
    sqrt(1 - ab) (ab cov + (1 - ab) I)^-1 (x - sqrt(ab) mean), evaluated
    in the eigenbasis of cov. Added to the network output it removes noise
    outside the span of the data exactly, which a plain MLP over flattened
    trajectories learns only very slowly at small noise levels.
    """

    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (D, D), eigenvectors in columns
    var: np.ndarray  # (D,) eigenvalues
    alpha_bar: np.ndarray  # (T,) indexed by network time

    @classmethod
    def fit(cls, data: np.ndarray, alpha_bar: np.ndarray) -> "GaussianSkip":
        data = np.asarray(data, dtype=np.float64)
        mean = data.mean(axis=0)
        cov = np.atleast_2d(np.cov(data, rowvar=False, bias=True))
        var, basis = np.linalg.eigh(cov)
        return cls(mean, basis, np.clip(var, 0.0, None), np.asarray(alpha_bar, dtype=np.float64).copy())

    def node(self, x: ad.Node, t: np.ndarray) -> ad.Node:
        ab = self.alpha_bar[np.asarray(t, dtype=int)][:, None]
        shift = np.sqrt(ab) * self.mean[None, :]
        gains = np.sqrt(1.0 - ab) / (ab * self.var[None, :] + (1.0 - ab))
        y = ad.matmul(x - ad.constant(shift), ad.constant(self.basis))
        return ad.matmul(ad.mul(y, ad.constant(gains)), ad.constant(self.basis.T.copy()))

    def buffers(self) -> dict[str, np.ndarray]:
        return {"skip.mean": self.mean, "skip.basis": self.basis, "skip.var": self.var,
                "skip.alpha_bar": self.alpha_bar}


@dataclass
class ScoreNetwork:
    arch: Architecture
    conditions: tuple[str, ...] = ("none",)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    skip: GaussianSkip | None = None

    @classmethod
    def create(cls, arch: Architecture, conditions=("none",), seed: int = 0) -> "ScoreNetwork":
        rng = np.random.default_rng(seed)
        W, E = arch.width, arch.time_dim
        p: dict[str, np.ndarray] = {}

        def dense(name, fan_in, fan_out, gain=1.0):
            p[name] = rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))

        dense("in.w", arch.flat_dim, W)
        p["in.b"] = np.zeros((1, W))
        p["cond.emb"] = rng.normal(0.0, 1.0, size=(len(conditions), arch.cond_dim))
        for k in range(arch.blocks):
            dense(f"b{k}.w_h", W, W)
            dense(f"b{k}.w_t", E, W)
            dense(f"b{k}.w_c", arch.cond_dim, W)
            p[f"b{k}.b1"] = np.zeros((1, W))
            dense(f"b{k}.w2", W, W, gain=0.5)
            p[f"b{k}.b2"] = np.zeros((1, W))
        p["out.w"] = np.zeros((W, arch.flat_dim))
        p["out.b"] = np.zeros((1, arch.flat_dim))
        return cls(arch, tuple(conditions), p)

    def condition_index(self, cond) -> int:
        if cond is None:
            cond = self.conditions[0]
        if isinstance(cond, (int, np.integer)):
            if not 0 <= cond < len(self.conditions):
                raise UnknownConditionError(f"condition index {cond} outside vocabulary {self.conditions}")
            return int(cond)
        try:
            return self.conditions.index(cond)
        except ValueError:
            raise UnknownConditionError(f"unknown condition label {cond!r}; vocabulary is {self.conditions}")

    def _cond_indices(self, cond, batch: int) -> np.ndarray:
        if cond is None or isinstance(cond, (str, int, np.integer)):
            return np.full(batch, self.condition_index(cond))
        idx = np.array([self.condition_index(c) for c in cond])
        if idx.shape != (batch,):
            raise ad.DimensionError(f"need one condition per batch row, got {idx.shape}")
        return idx

    def param_nodes(self, trainable: bool) -> dict[str, ad.Node]:
        make = ad.variable if trainable else ad.constant
        return {k: make(v) for k, v in self.params.items()}

    def epsilon(self, x: ad.Node, t, cond=None, nodes: dict[str, ad.Node] | None = None) -> ad.Node:
        """Predicted noise for a (B, flat_dim) batch at network time indices ``t``."""
        arch = self.arch
        if x.value.ndim != 2 or x.shape[1] != arch.flat_dim:
            raise ad.DimensionError(f"expected (B, {arch.flat_dim}) input, got {x.shape}")
        B = x.shape[0]
        if nodes is None:
            nodes = self.param_nodes(trainable=False)
        t = np.broadcast_to(np.asarray(t), (B,))
        temb = ad.constant(sinusoidal_embedding(t, arch.time_dim))
        onehot = np.zeros((B, len(self.conditions)))
        onehot[np.arange(B), self._cond_indices(cond, B)] = 1.0
        cemb = ad.matmul(ad.constant(onehot), nodes["cond.emb"])

        h = ad.add_bias(ad.matmul(x, nodes["in.w"]), nodes["in.b"])
        for k in range(arch.blocks):
            u = (
                ad.matmul(ad.silu(h), nodes[f"b{k}.w_h"])
                + ad.matmul(temb, nodes[f"b{k}.w_t"])
                + ad.matmul(cemb, nodes[f"b{k}.w_c"])
            )
            u = ad.add_bias(u, nodes[f"b{k}.b1"])
            u = ad.add_bias(ad.matmul(ad.silu(u), nodes[f"b{k}.w2"]), nodes[f"b{k}.b2"])
            h = h + u
        out = ad.add_bias(ad.matmul(ad.silu(h), nodes["out.w"]), nodes["out.b"])
        if self.skip is not None:
            out = out + self.skip.node(x, t)
        return out

    @property
    def flat_dim(self) -> int:
        return self.arch.flat_dim

    def score(self, x: ad.Node, schedule: NoiseSchedule, i: int, cond=None) -> ad.Node:
        return score(self, schedule, x, i, cond)

    def copy(self) -> "ScoreNetwork":
        return ScoreNetwork(self.arch, self.conditions, {k: v.copy() for k, v in self.params.items()}, self.skip)


def score(net: ScoreNetwork, schedule: NoiseSchedule, tau_i: ad.Node, i: int, cond=None) -> ad.Node:
    """Score estimate -eps / sqrt(1 - ab_i) at schedule step ``i``."""
    schedule.check(i)
    eps = net.epsilon(tau_i, schedule.timesteps[i], cond)
    return eps * (-1.0 / np.sqrt(1.0 - schedule.alpha_bar[i]))


@dataclass
class Checkpoint:
    net: ScoreNetwork
    normalizer: Normalizer
    schedule_T: int
    dt: float
    extra: dict = field(default_factory=dict)

    @property
    def schedule(self) -> NoiseSchedule:
        return cosine_schedule(self.schedule_T)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    net = ckpt.net
    buffers = net.skip.buffers() if net.skip is not None else {}
    header = {
        "architecture": asdict(net.arch),
        "conditions": list(net.conditions),
        "normalizer": ckpt.normalizer.to_dict(),
        "schedule": {"kind": "cosine", "T": ckpt.schedule_T},
        "dt": ckpt.dt,
        "params": [[name, list(arr.shape)] for name, arr in net.params.items()],
        "buffers": [[name, list(arr.shape)] for name, arr in buffers.items()],
        "extra": ckpt.extra,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in list(net.params.values()) + list(buffers.values()):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for name, shape in header["params"] + header.get("buffers", []):
        count = int(np.prod(shape))
        if offset + 8 * count > len(data):
            raise ValueError(f"{path}: truncated weights")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing or missing weight bytes")
    params = {name: arrays[name] for name, _ in header["params"]}
    skip = None
    if header.get("buffers"):
        skip = GaussianSkip(arrays["skip.mean"], arrays["skip.basis"], arrays["skip.var"], arrays["skip.alpha_bar"])
    net = ScoreNetwork(Architecture(**header["architecture"]), tuple(header["conditions"]), params, skip)
    return Checkpoint(
        net,
        Normalizer.from_dict(header["normalizer"]),
        int(header["schedule"]["T"]),
        float(header["dt"]),
        header.get("extra", {}),
    )
