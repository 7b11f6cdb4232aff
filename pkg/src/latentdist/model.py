"""Multi-branch network: shared trunk, one C-way target head, C auxiliary heads.

Branch numbering follows the training algorithm: branch 0 is the target
head, branch ``k + 1`` is the auxiliary head of class ``k`` (0-based
classes), i.e. the (C-1)-way classifier trained on every sample *not*
annotated ``k`` and used to mine the latent distribution of samples that
*are* annotated ``k``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

__all__ = [
    "ClassIndexMap",
    "BranchSet",
    "TargetModel",
    "UncertaintyModule",
    "MissingHeadsError",
    "CheckpointError",
    "predict_latent_distribution",
    "similarity_vectors",
    "estimate_confidence",
    "strip_for_deployment",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"LATDCKPT"
FORMAT_VERSION = 1


class MissingHeadsError(LookupError):
    """Auxiliary heads or the uncertainty module were requested from a target-only model."""


class CheckpointError(ValueError):
    pass


class ClassIndexMap:
    """Ascending class list with ``branch_class`` removed; position p <-> class."""

    def __init__(self, branch_class: int, num_classes: int):
        if not 0 <= branch_class < num_classes:
            raise ValueError(f"class {branch_class} out of range for {num_classes} classes")
        self.branch_class = branch_class
        self.num_classes = num_classes
        self.classes = tuple(k for k in range(num_classes) if k != branch_class)

    def __len__(self) -> int:
        return len(self.classes)

    def position(self, cls: int) -> int:
        if cls == self.branch_class:
            raise ValueError(f"class {cls} is excluded from branch of class {self.branch_class}")
        if not 0 <= cls < self.num_classes:
            raise ValueError(f"class {cls} out of range")
        return cls - (cls > self.branch_class)

    def positions(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        if np.any(labels == self.branch_class):
            raise ValueError(f"labels include the excluded class {self.branch_class}")
        return labels - (labels > self.branch_class)

    def class_at(self, position: int) -> int:
        return self.classes[position]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _param(value: np.ndarray, name: str) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)


def _head_params(rng, prefix: str, fan_in: int, hidden: int, out: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.W1": _param(_glorot(rng, fan_in, hidden), f"{prefix}.W1"),
        f"{prefix}.b1": _param(np.zeros(hidden), f"{prefix}.b1"),
        f"{prefix}.W2": _param(_glorot(rng, hidden, out), f"{prefix}.W2"),
        f"{prefix}.b2": _param(np.zeros(out), f"{prefix}.b2"),
    }


def _head_forward(params: dict[str, Tensor], prefix: str, h: Tensor) -> tuple[Tensor, Tensor]:
    feats = dc.relu(dc.affine(h, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    logits = dc.affine(feats, params[f"{prefix}.W2"], params[f"{prefix}.b2"])
    return feats, logits


class UncertaintyModule:
    """Two affine layers with a PReLU between them and a sigmoid on top.

    Input is the 2C-wide similarity vector of each sample; output is one
    confidence value in (0, 1) per sample, shape (N, 1).
    """

    def __init__(self, num_classes: int, rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None):
        self.num_classes = num_classes
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            C = num_classes
            params = {
                "uncertainty.W1": _param(_glorot(rng, 2 * C, C), "uncertainty.W1"),
                "uncertainty.b1": _param(np.zeros(C), "uncertainty.b1"),
                "uncertainty.slope": _param(np.array([0.25]), "uncertainty.slope"),
                "uncertainty.W2": _param(_glorot(rng, C, 1), "uncertainty.W2"),
                "uncertainty.b2": _param(np.zeros(1), "uncertainty.b2"),
            }
        self.params = params

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def forward(self, sv: Tensor) -> Tensor:
        p = self.params
        if sv.shape[1] != 2 * self.num_classes:
            raise dc.ShapeError(f"expected {2 * self.num_classes} input columns, got {sv.shape[1]}")
        hidden = dc.prelu(dc.affine(sv, p["uncertainty.W1"], p["uncertainty.b1"]), p["uncertainty.slope"])
        return dc.sigmoid(dc.affine(hidden, p["uncertainty.W2"], p["uncertainty.b2"]))

    __call__ = forward


class _TrunkMixin:
    num_classes: int
    feature_dim: int
    params: dict[str, Tensor]

    def trunk_forward(self, X) -> Tensor:
        X = X if isinstance(X, Tensor) else Tensor(np.asarray(X, dtype=np.float64))
        if X.ndim != 2 or X.shape[1] != self.feature_dim:
            raise dc.ShapeError(f"expected (N, {self.feature_dim}) input, got {X.shape}")
        return dc.relu(dc.affine(X, self.params["trunk.W"], self.params["trunk.b"]))

    def target_forward(self, h: Tensor) -> tuple[Tensor, Tensor]:
        return _head_forward(self.params, "target", h)

    def target_logits(self, X) -> np.ndarray:
        return self.target_forward(self.trunk_forward(X))[1].value

    def predict_proba(self, X) -> np.ndarray:
        return dc.row_softmax(Tensor(self.target_logits(X))).value

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.target_logits(X), axis=1)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)


class BranchSet(_TrunkMixin):
    """Trainable multi-branch model plus its uncertainty module."""

    def __init__(self, num_classes: int, feature_dim: int, hidden_dim: int = 32, head_dim: int = 16,
                 seed: int = 0, params: dict[str, Tensor] | None = None):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.head_dim = head_dim
        if params is None:
            rng = np.random.default_rng([seed, 3])
            params = {
                "trunk.W": _param(_glorot(rng, feature_dim, hidden_dim), "trunk.W"),
                "trunk.b": _param(np.zeros(hidden_dim), "trunk.b"),
            }
            params.update(_head_params(rng, "target", hidden_dim, head_dim, num_classes))
            for k in range(num_classes):
                params.update(_head_params(rng, f"aux{k}", hidden_dim, head_dim, num_classes - 1))
            unc = UncertaintyModule(num_classes, rng)
            params.update(unc.params)
        self.params = params
        self.uncertainty = UncertaintyModule(
            num_classes, params={k: v for k, v in params.items() if k.startswith("uncertainty.")}
        )

    def index_map(self, branch_class: int) -> ClassIndexMap:
        return ClassIndexMap(branch_class, self.num_classes)

    def branch_features(self, j: int, h: Tensor) -> tuple[Tensor, Tensor]:
        """(semantic features, logits) of branch ``j``; 0 is the target head."""
        if not 0 <= j <= self.num_classes:
            raise ValueError(f"branch index {j} outside 0..{self.num_classes}")
        return _head_forward(self.params, "target" if j == 0 else f"aux{j - 1}", h)

    def branch_forward(self, j: int, h: Tensor) -> Tensor:
        return self.branch_features(j, h)[1]

    def aux_logits(self, X) -> list[np.ndarray]:
        h = self.trunk_forward(X)
        return [self.branch_forward(k + 1, h).value for k in range(self.num_classes)]

    def latent_distribution(self, X, y) -> np.ndarray:
        """Mined distribution over the C-1 classes other than ``y`` for each row of ``X``."""
        return predict_latent_distribution(self.aux_logits(X), y).value

    def confidence(self, X, y) -> np.ndarray:
        """Confidence score of each row of ``X`` computed within that batch."""
        f, _ = self.target_forward(self.trunk_forward(X))
        return estimate_confidence(f, y, self.uncertainty, self.num_classes).value[:, 0]

    def strip(self) -> "TargetModel":
        return strip_for_deployment(self)


class TargetModel(_TrunkMixin):
    """Deployment model: trunk and target head only."""

    def __init__(self, num_classes: int, feature_dim: int, hidden_dim: int, head_dim: int,
                 params: dict[str, Tensor]):
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.head_dim = head_dim
        self.params = params

    def branch_forward(self, j: int, h: Tensor) -> Tensor:
        if j != 0:
            raise MissingHeadsError("auxiliary heads are not part of a deployment model")
        return self.target_forward(h)[1]

    def aux_logits(self, X):
        raise MissingHeadsError("auxiliary heads are not part of a deployment model")

    def latent_distribution(self, X, y):
        raise MissingHeadsError("auxiliary heads are not part of a deployment model")

    def confidence(self, X, y):
        raise MissingHeadsError("the uncertainty module is not part of a deployment model")


def strip_for_deployment(branch_set: BranchSet) -> TargetModel:
    keep = {k: v for k, v in branch_set.params.items() if k.startswith(("trunk.", "target."))}
    return TargetModel(branch_set.num_classes, branch_set.feature_dim, branch_set.hidden_dim,
                       branch_set.head_dim, keep)


def predict_latent_distribution(aux_logits, y) -> Tensor:
    """Row-softmax of the own-class auxiliary head for every sample, as a constant.

    ``aux_logits[k]`` holds the (N, C-1) logits of the auxiliary head of
    class ``k`` evaluated on the whole batch; sample ``p`` reads row ``p``
    of head ``y[p]``.
    """
    y = np.asarray(y)
    stacked = np.stack([a.value if isinstance(a, Tensor) else np.asarray(a) for a in aux_logits])
    own = stacked[y, np.arange(len(y))]
    return dc.stop_gradient(dc.row_softmax(Tensor(own)))


def similarity_vectors(features: Tensor, y, num_classes: int) -> Tensor:
    """Concatenate per-class mean cosine similarity with the one-hot annotation.

    The anchor itself counts toward its own class mean.
    """
    y = np.asarray(y)
    counts = np.bincount(y, minlength=num_classes)
    if np.any(counts == 0):
        raise ValueError("every class must appear in the batch to compute class similarities")
    onehot = np.eye(num_classes)[y]
    unit = dc.row_l2_normalize(features)
    cosine = dc.matmul(unit, dc.transpose(unit))
    class_means = dc.matmul(cosine, Tensor(onehot / counts))
    return dc.concat_cols([class_means, Tensor(onehot)])


def estimate_confidence(features: Tensor, y, module: UncertaintyModule, num_classes: int) -> Tensor:
    return module(similarity_vectors(features, y, num_classes))


# --------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   8s magic | u32 version | u32 C | u32 d | u32 hidden | u32 head | u32 count
#   count x ( u32 name_len | name utf-8 | u32 rank | rank x u32 dims | f8 values )


def _expected_shapes(C: int, d: int, H: int, K: int) -> dict[str, tuple[int, ...]]:
    shapes = {"trunk.W": (d, H), "trunk.b": (H,)}
    for prefix, out in [("target", C)] + [(f"aux{k}", C - 1) for k in range(C)]:
        shapes.update({f"{prefix}.W1": (H, K), f"{prefix}.b1": (K,),
                       f"{prefix}.W2": (K, out), f"{prefix}.b2": (out,)})
    shapes.update({"uncertainty.W1": (2 * C, C), "uncertainty.b1": (C,), "uncertainty.slope": (1,),
                   "uncertainty.W2": (C, 1), "uncertainty.b2": (1,)})
    return shapes


def save_checkpoint(model: BranchSet | TargetModel, path: str | Path) -> None:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<6I", FORMAT_VERSION, model.num_classes, model.feature_dim,
                       model.hidden_dim, model.head_dim, len(model.params))
    for name, tensor in model.params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", tensor.value.ndim)
        out += struct.pack(f"<{tensor.value.ndim}I", *tensor.value.shape)
        out += np.ascontiguousarray(tensor.value, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint file is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count > 1 else vals[0]


def load_checkpoint(path: str | Path, require_full: bool = False) -> BranchSet | TargetModel:
    """Read a checkpoint; returns a BranchSet when all heads are present, else a TargetModel."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, C, d, H, K, count = reader.u32(6)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    expected = _expected_shapes(C, d, H, K)
    params: dict[str, Tensor] = {}
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        dims = reader.u32(rank) if rank > 1 else ((reader.u32(),) if rank == 1 else ())
        dims = tuple(dims)
        size = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected parameter {name!r}")
        if expected[name] != dims:
            raise CheckpointError(f"{path}: {name} has shape {dims}, expected {expected[name]}")
        params[name] = _param(values, name)
    if reader.pos != len(reader.data):
        raise CheckpointError(f"{path}: trailing bytes after last parameter")
    target_names = [n for n in expected if n.startswith(("trunk.", "target."))]
    missing_core = [n for n in target_names if n not in params]
    if missing_core:
        raise CheckpointError(f"{path}: missing parameters {missing_core}")
    missing = [n for n in expected if n not in params]
    if not missing:
        return BranchSet(C, d, H, K, params=params)
    if require_full:
        raise MissingHeadsError(f"{path}: deployment checkpoint lacks {len(missing)} training parameters "
                                f"(auxiliary heads / uncertainty module)")
    return TargetModel(C, d, H, K, params)
