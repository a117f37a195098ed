"""
A small vote-based point cloud detector with hand-written forward and backward
passes, FPS index capture/reuse, Adam, EMA and the binary checkpoint container.

Pipeline: FPS to seeds -> k-NN relative coordinates through the seed MLP with
max-pool -> vote offsets -> FPS on votes to cluster centers -> mean pooling of
seed features within a radius -> three proposal layers (concatenated into z)
-> objectness / class / center / size / IoU heads.
"""

import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit, softmax

from .errors import CheckpointFormatError, InvalidArgumentError
from .geometry import Aabb, as_points, farthest_point_sample

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DPKE"
CHECKPOINT_VERSION = 1
ARCH_TENSOR = "arch"


@dataclass(frozen=True)
class ArchConfig:
    n_points: int = 1024
    n_seeds: int = 128
    n_proposals: int = 16
    num_classes: int = 6
    knn: int = 16
    cluster_radius: float = 1.0
    seed_width: int = 32
    prop_width: int = 64

    @property
    def feature_dim(self) -> int:
        return 3 * self.prop_width

    def layer_shapes(self) -> List[Tuple[str, int, int]]:
        s, p, c = self.seed_width, self.prop_width, self.num_classes
        return [
            ("seed1", 3, s), ("seed2", s, s),
            ("vote1", s, s), ("vote2", s, 3),
            ("prop1", s, p), ("prop2", p, p), ("prop3", p, p),
            ("obj", p, 1), ("cls", p, c), ("ctr", p, 3), ("size", p, 3), ("iou", p, 1),
        ]

    def to_vector(self) -> np.ndarray:
        return np.array([self.n_points, self.n_seeds, self.n_proposals, self.num_classes,
                         self.knn, self.cluster_radius, self.seed_width, self.prop_width],
                        dtype=np.float64)

    @classmethod
    def from_vector(cls, values: np.ndarray) -> "ArchConfig":
        v = [float(x) for x in values]
        return cls(int(v[0]), int(v[1]), int(v[2]), int(v[3]), int(v[4]), v[5],
                   int(v[6]), int(v[7]))


class ModelParams:
    """Named float64 tensors of one detector, in a fixed order."""

    def __init__(self, arch: ArchConfig, tensors: "OrderedDict[str, np.ndarray]"):
        self.arch = arch
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self.tensors[name] = value

    def names(self) -> List[str]:
        return list(self.tensors.keys())

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.tensors.items())

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def all_finite(self) -> bool:
        """True when no tensor holds a NaN or an infinity."""
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def same_as(self, other: "ModelParams") -> bool:
        return (self.arch == other.arch and self.names() == other.names()
                and all(np.array_equal(v, other[k]) for k, v in self.items()))

    def check_compatible(self, other: "ModelParams"):
        if self.names() != other.names() or any(v.shape != other[k].shape for k, v in self.items()):
            raise InvalidArgumentError("parameter sets have different shapes")


def init_params(arch: ArchConfig, seed: int) -> ModelParams:
    """Fan-in scaled uniform weights; zero biases except the size head."""
    rng = np.random.default_rng(seed)
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, fan_in, fan_out in arch.layer_shapes():
        limit = 1.0 / np.sqrt(fan_in)
        tensors[f"{name}_W"] = rng.uniform(-limit, limit, (fan_in, fan_out))
        tensors[f"{name}_b"] = np.zeros(fan_out)
    # softplus(b) == 1, a unit box before any training
    tensors["size_b"][:] = np.log(np.expm1(1.0))
    return ModelParams(arch, tensors)


@dataclass
class FpsIndices:
    seed_stage: np.ndarray
    proposal_stage: np.ndarray

    def same_as(self, other: "FpsIndices") -> bool:
        return (np.array_equal(self.seed_stage, other.seed_stage)
                and np.array_equal(self.proposal_stage, other.proposal_stage))


@dataclass
class Proposals:
    """The K proposals of one forward pass, as stacked arrays (slot order)."""

    center: np.ndarray          # (K, 3)
    size: np.ndarray            # (K, 3)
    objectness: np.ndarray      # (K,)
    class_logits: np.ndarray    # (K, C)
    iou_est: np.ndarray         # (K,)
    feature_z: np.ndarray       # (K, 3 * prop_width)
    obj_logit: np.ndarray
    iou_logit: np.ndarray
    cluster_center: np.ndarray  # (K, 3)
    votes: np.ndarray           # (M, 3)
    seed_xyz: np.ndarray        # (M, 3)

    def __len__(self) -> int:
        return len(self.center)

    def box(self, i: int) -> Aabb:
        return Aabb(self.center[i], self.size[i])

    def box_array(self) -> np.ndarray:
        return np.concatenate([self.center, self.size], axis=1)

    def class_probs(self) -> np.ndarray:
        return softmax(self.class_logits, axis=1)

    def decodable(self) -> bool:
        """Every box has finite parameters and positive extents."""
        return bool(np.all(np.isfinite(self.center)) and np.all(np.isfinite(self.size))
                    and np.all(self.size > 0) and np.all(np.isfinite(self.class_logits)))

    def predicted_classes(self) -> np.ndarray:
        return self.class_logits.argmax(axis=1)


@dataclass
class OutputGrads:
    """Upstream gradients of a scalar loss with respect to forward outputs.

    Objectness and IoU gradients are taken on the logits; size on the
    softplus output; center on the final center.
    """

    obj_logit: np.ndarray
    class_logits: np.ndarray
    center: np.ndarray
    size: np.ndarray
    iou_logit: np.ndarray
    feature_z: np.ndarray
    votes: np.ndarray

    @classmethod
    def zeros_like(cls, proposals: Proposals) -> "OutputGrads":
        return cls(np.zeros_like(proposals.obj_logit), np.zeros_like(proposals.class_logits),
                   np.zeros_like(proposals.center), np.zeros_like(proposals.size),
                   np.zeros_like(proposals.iou_logit), np.zeros_like(proposals.feature_z),
                   np.zeros_like(proposals.votes))

    def add_(self, other: "OutputGrads", scale: float = 1.0) -> "OutputGrads":
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + scale * getattr(other, name))
        return self

    def scaled(self, scale: float) -> "OutputGrads":
        return OutputGrads(*(scale * getattr(self, n) for n in self.__dataclass_fields__))


@dataclass
class ForwardTrace:
    """Intermediates of one forward pass, enough for an exact backward pass."""

    params: ModelParams
    rel: np.ndarray
    pre1: np.ndarray
    h1: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray
    pool_argmax: np.ndarray
    seed_feat: np.ndarray
    vote_pre: np.ndarray
    vote_hidden: np.ndarray
    pool_matrix: np.ndarray
    pooled: np.ndarray
    prop_pre: List[np.ndarray] = field(default_factory=list)
    prop_out: List[np.ndarray] = field(default_factory=list)
    size_raw: Optional[np.ndarray] = None
    fps: Optional[FpsIndices] = None


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _check_reuse(reuse: FpsIndices, arch: ArchConfig):
    seeds = np.asarray(reuse.seed_stage)
    props = np.asarray(reuse.proposal_stage)
    if seeds.shape != (arch.n_seeds,) or props.shape != (arch.n_proposals,):
        raise InvalidArgumentError("reused FPS indices have the wrong lengths")
    if seeds.min() < 0 or seeds.max() >= arch.n_points or props.min() < 0 \
            or props.max() >= arch.n_seeds:
        raise InvalidArgumentError("reused FPS indices are out of range")


def forward(params: ModelParams, cloud, reuse: Optional[FpsIndices] = None,
            rng: Optional[np.random.Generator] = None
            ) -> Tuple[Proposals, FpsIndices, ForwardTrace]:
    """Run the detector on exactly ``n_points`` points.

    Without ``reuse`` both FPS stages start at indices drawn from ``rng``
    (index 0 when no generator is given). With ``reuse`` both stages take the
    given indices verbatim, so slot i of two such forwards is the same cluster.
    """
    arch = params.arch
    x = as_points(cloud)
    if len(x) != arch.n_points:
        raise InvalidArgumentError(f"expected {arch.n_points} points, got {len(x)}")

    if reuse is not None:
        _check_reuse(reuse, arch)
        seed_idx = np.asarray(reuse.seed_stage, dtype=np.int64).copy()
    else:
        start = int(rng.integers(0, arch.n_points)) if rng is not None else 0
        seed_idx = farthest_point_sample(x, arch.n_seeds, start)
    seeds = x[seed_idx]

    neighbors = np.argsort(cdist(seeds, x, "sqeuclidean"), axis=1, kind="stable")[:, :arch.knn]
    rel = x[neighbors] - seeds[:, None, :]
    pre1 = rel @ params["seed1_W"] + params["seed1_b"]
    h1 = _relu(pre1)
    pre2 = h1 @ params["seed2_W"] + params["seed2_b"]
    h2 = _relu(pre2)
    pool_argmax = h2.argmax(axis=1)
    seed_feat = np.take_along_axis(h2, pool_argmax[:, None, :], axis=1)[:, 0, :]

    vote_pre = seed_feat @ params["vote1_W"] + params["vote1_b"]
    vote_hidden = _relu(vote_pre)
    votes = seeds + vote_hidden @ params["vote2_W"] + params["vote2_b"]

    if reuse is not None:
        prop_idx = np.asarray(reuse.proposal_stage, dtype=np.int64).copy()
    else:
        start = int(rng.integers(0, arch.n_seeds)) if rng is not None else 0
        prop_idx = farthest_point_sample(votes, arch.n_proposals, start)
    centers = votes[prop_idx]

    member = cdist(centers, votes, "sqeuclidean") <= arch.cluster_radius ** 2
    member[np.arange(len(prop_idx)), prop_idx] = True
    pool_matrix = member / member.sum(axis=1, keepdims=True)
    pooled = pool_matrix @ seed_feat

    prop_pre, prop_out = [], []
    h = pooled
    for name in ("prop1", "prop2", "prop3"):
        pre = h @ params[f"{name}_W"] + params[f"{name}_b"]
        h = _relu(pre)
        prop_pre.append(pre)
        prop_out.append(h)
    top = prop_out[-1]
    feature_z = np.concatenate(prop_out, axis=1)

    obj_logit = (top @ params["obj_W"] + params["obj_b"])[:, 0]
    class_logits = top @ params["cls_W"] + params["cls_b"]
    center = centers + top @ params["ctr_W"] + params["ctr_b"]
    size_raw = top @ params["size_W"] + params["size_b"]
    size = np.logaddexp(0.0, size_raw)
    iou_logit = (top @ params["iou_W"] + params["iou_b"])[:, 0]

    fps = FpsIndices(seed_idx, prop_idx)
    proposals = Proposals(center, size, expit(obj_logit), class_logits, expit(iou_logit),
                          feature_z, obj_logit, iou_logit, centers, votes, seeds)
    trace = ForwardTrace(params, rel, pre1, h1, pre2, h2, pool_argmax, seed_feat, vote_pre,
                         vote_hidden, pool_matrix, pooled, prop_pre, prop_out, size_raw, fps)
    return proposals, fps, trace


def _check_grad_shapes(trace: ForwardTrace, grads: OutputGrads):
    arch = trace.params.arch
    k, m = arch.n_proposals, arch.n_seeds
    expected = {
        "obj_logit": (k,), "class_logits": (k, arch.num_classes), "center": (k, 3),
        "size": (k, 3), "iou_logit": (k,), "feature_z": (k, arch.feature_dim),
        "votes": (m, 3),
    }
    for name, shape in expected.items():
        if np.shape(getattr(grads, name)) != shape:
            raise InvalidArgumentError(
                f"gradient {name} has shape {np.shape(getattr(grads, name))}, expected {shape}")


def backward(trace: ForwardTrace, grads: OutputGrads) -> Dict[str, np.ndarray]:
    """Exact reverse-mode gradients of the loss behind ``grads``.

    Index selections (FPS, k-NN, cluster membership, max-pool routing) are
    constants. The IoU head receives gradients but passes none to the trunk.
    """
    _check_grad_shapes(trace, grads)
    params = trace.params
    out: Dict[str, np.ndarray] = {}
    top = trace.prop_out[-1]

    d_obj = grads.obj_logit[:, None]
    d_ctr = grads.center
    d_size_raw = grads.size * expit(trace.size_raw)
    d_iou = grads.iou_logit[:, None]
    out["obj_W"], out["obj_b"] = top.T @ d_obj, d_obj.sum(axis=0)
    out["cls_W"], out["cls_b"] = top.T @ grads.class_logits, grads.class_logits.sum(axis=0)
    out["ctr_W"], out["ctr_b"] = top.T @ d_ctr, d_ctr.sum(axis=0)
    out["size_W"], out["size_b"] = top.T @ d_size_raw, d_size_raw.sum(axis=0)
    out["iou_W"], out["iou_b"] = top.T @ d_iou, d_iou.sum(axis=0)

    d_top = (d_obj @ params["obj_W"].T + grads.class_logits @ params["cls_W"].T
             + d_ctr @ params["ctr_W"].T + d_size_raw @ params["size_W"].T)

    width = params.arch.prop_width
    d_outs = [grads.feature_z[:, i * width:(i + 1) * width].copy() for i in range(3)]
    d_outs[2] += d_top
    inputs = [trace.pooled, trace.prop_out[0], trace.prop_out[1]]
    d_h = None
    for i, name in reversed(list(enumerate(("prop1", "prop2", "prop3")))):
        d_out = d_outs[i] if d_h is None else d_outs[i] + d_h
        d_pre = d_out * (trace.prop_pre[i] > 0)
        out[f"{name}_W"] = inputs[i].T @ d_pre
        out[f"{name}_b"] = d_pre.sum(axis=0)
        d_h = d_pre @ params[f"{name}_W"].T
    d_pooled = d_h

    d_seed_feat = trace.pool_matrix.T @ d_pooled
    d_votes = grads.votes.copy()
    np.add.at(d_votes, trace.fps.proposal_stage, d_ctr)

    out["vote2_W"] = trace.vote_hidden.T @ d_votes
    out["vote2_b"] = d_votes.sum(axis=0)
    d_vote_pre = (d_votes @ params["vote2_W"].T) * (trace.vote_pre > 0)
    out["vote1_W"] = trace.seed_feat.T @ d_vote_pre
    out["vote1_b"] = d_vote_pre.sum(axis=0)
    d_seed_feat += d_vote_pre @ params["vote1_W"].T

    d_h2 = np.zeros_like(trace.h2)
    np.put_along_axis(d_h2, trace.pool_argmax[:, None, :], d_seed_feat[:, None, :], axis=1)
    d_pre2 = d_h2 * (trace.pre2 > 0)
    out["seed2_W"] = np.einsum("mki,mkj->ij", trace.h1, d_pre2)
    out["seed2_b"] = d_pre2.sum(axis=(0, 1))
    d_pre1 = (d_pre2 @ params["seed2_W"].T) * (trace.pre1 > 0)
    out["seed1_W"] = np.einsum("mki,mkj->ij", trace.rel, d_pre1)
    out["seed1_b"] = d_pre1.sum(axis=(0, 1))

    return OrderedDict((name, out[name]) for name in params.names())


def zero_grads(params: ModelParams) -> Dict[str, np.ndarray]:
    return OrderedDict((k, np.zeros_like(v)) for k, v in params.items())


def accumulate_grads(total: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
    for name, g in grads.items():
        total[name] += g


# ---------------------------------------------------------------------------
# Optimizer and EMA
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(zero_grads(params), zero_grads(params))


def adam_step(params: ModelParams, grads: Dict[str, np.ndarray], state: AdamState,
              lr: float) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if list(grads.keys()) != params.names():
        raise InvalidArgumentError("gradient names do not match the parameters")
    t = state.t + 1
    new_params = params.copy()
    m, v = OrderedDict(), OrderedDict()
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise InvalidArgumentError(f"gradient {name} has shape {g.shape}")
        m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = m[name] / (1 - state.beta1 ** t)
        v_hat = v[name] / (1 - state.beta2 ** t)
        new_params[name] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> ModelParams:
    """theta_t' = alpha * theta_t + (1 - alpha) * theta_s, element-wise."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgumentError(f"EMA alpha must be in [0, 1], got {alpha}")
    teacher.check_compatible(student)
    return ModelParams(teacher.arch, OrderedDict(
        (name, alpha * value + (1 - alpha) * student[name]) for name, value in teacher.items()))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def gradient_check(loss_and_grads: Callable[[ModelParams], Tuple[float, Dict[str, np.ndarray]]],
                   params: ModelParams, num_checks: int = 20, eps: float = 1e-5,
                   seed: int = 0, min_abs_grad: float = 1e-7) -> Dict[str, float]:
    """Compare analytic gradients with central differences on random entries.

    Entries whose analytic and numeric gradients are both below
    ``min_abs_grad`` are reported as exact matches.
    """
    rng = np.random.default_rng(seed)
    _, analytic = loss_and_grads(params)
    names = params.names()
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    errors: List[float] = []
    for _ in range(num_checks):
        name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        flat = int(rng.integers(0, params[name].size))
        plus, minus = params.copy(), params.copy()
        plus[name].flat[flat] += eps
        minus[name].flat[flat] -= eps
        numeric = (loss_and_grads(plus)[0] - loss_and_grads(minus)[0]) / (2 * eps)
        exact = float(analytic[name].flat[flat])
        denom = max(abs(numeric), abs(exact))
        errors.append(0.0 if denom < min_abs_grad else abs(numeric - exact) / denom)
    return {"max_rel_error": float(np.max(errors)), "mean_rel_error": float(np.mean(errors)),
            "n_checked": len(errors)}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _write_tensor(f, name: str, value: np.ndarray):
    encoded = name.encode("utf-8")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", value.ndim))
    for dim in value.shape:
        f.write(struct.pack("<I", dim))
    f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def save_checkpoint(path: str, params: ModelParams):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_tensor(f, ARCH_TENSOR, params.arch.to_vector())
        for name, value in params.items():
            _write_tensor(f, name, value)
    logger.info("wrote checkpoint %s", path)


def _read_exact(f, n: int, path: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"{path}: truncated checkpoint")
    return data


def load_checkpoint(path: str) -> ModelParams:
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path}: not a dpke checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4, path))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
        while True:
            head = f.read(2)
            if not head:
                break
            if len(head) != 2:
                raise CheckpointFormatError(f"{path}: truncated checkpoint")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(f, name_len, path).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, path))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, path)) if rank else ()
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read_exact(f, 8 * count, path), dtype="<f8")
            tensors[name] = data.astype(np.float64).reshape(shape)
    if ARCH_TENSOR not in tensors:
        raise CheckpointFormatError(f"{path}: missing architecture record")
    arch = ArchConfig.from_vector(tensors.pop(ARCH_TENSOR))
    expected = init_params(arch, 0)
    if list(tensors.keys()) != expected.names() or any(
            tensors[k].shape != v.shape for k, v in expected.items()):
        raise CheckpointFormatError(f"{path}: tensors do not match the architecture")
    return ModelParams(arch, tensors)
