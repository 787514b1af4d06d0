"""
Feed-forward n-gram scoring models.

Two scorers share the same building blocks:

* :class:`DotProductEncoder` encodes the input message and the response with
  separate tanh towers and scores them by a dot product, so response vectors
  can be precomputed.
* :class:`JointScorer` feeds the concatenated input and response
  representations through one network that emits a scalar.

Both follow the multi-loss layout: one subnetwork per message feature
(body, subject, ...) that scores on its own, plus a final subnetwork that fuses
them. Weight matrices are stored ``(fan_in, fan_out)`` and applied to row
vectors, ``h = tanh(x @ W + b)``.
"""

import hashlib
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ModelConfig
from .errors import ArtifactFormatError, InvariantViolation
from .featurizer import FeatureBag

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"SRDE"
MODEL_VERSION = 1
KIND_CODES = {"dot": 0, "joint": 1}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32):
    """Uniform initialization in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


# --------------------------------------------------------------------------
# Embedding bags
# --------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    """vocabulary_size x d embedding matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] == 0:
            raise InvariantViolation(f"embedding matrix must be V x d, got {self.matrix.shape}")

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]


def bag_index(bags: Sequence[FeatureBag]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten bags into parallel (row, ngram_id, count) arrays."""
    rows, ids, counts = [], [], []
    for r, bag in enumerate(bags):
        for ngram_id, count in bag.items:
            rows.append(r)
            ids.append(ngram_id)
            counts.append(count)
    return (
        np.asarray(rows, dtype=np.int64),
        np.asarray(ids, dtype=np.int64),
        np.asarray(counts, dtype=np.float64),
    )


def embed_bags(bags: Sequence[FeatureBag], table: EmbeddingTable) -> np.ndarray:
    """
    Sum the embeddings of each bag, weighted by n-gram count.

    Args:
        bags: Feature bags
        table: Embedding table

    Returns:
        (len(bags), d) array; empty bags give zero rows
    """
    rows, ids, counts = bag_index(bags)
    out = np.zeros((len(bags), table.d), dtype=table.matrix.dtype)
    if len(ids):
        if ids.min() < 0 or ids.max() >= table.vocab_size:
            raise InvariantViolation(
                f"n-gram id out of range for embedding table of size {table.vocab_size}"
            )
        contrib = table.matrix[ids] * counts[:, None].astype(table.matrix.dtype)
        np.add.at(out, rows, contrib)
    return out


def embed_bag(bag: FeatureBag, table: EmbeddingTable) -> np.ndarray:
    """Sum of count x row(ngram_id) over the bag; the zero vector when empty."""
    return embed_bags([bag], table)[0]


@dataclass
class SparseRowGrad:
    """Gradient of an embedding table restricted to the rows a batch touched."""

    rows: np.ndarray
    values: np.ndarray

    @classmethod
    def from_bags(cls, bags: Sequence[FeatureBag], grad_out: np.ndarray) -> "SparseRowGrad":
        rows, ids, counts = bag_index(bags)
        d = grad_out.shape[1]
        if not len(ids):
            return cls(np.zeros(0, dtype=np.int64), np.zeros((0, d), dtype=grad_out.dtype))
        unique, inverse = np.unique(ids, return_inverse=True)
        values = np.zeros((len(unique), d), dtype=grad_out.dtype)
        np.add.at(values, inverse, grad_out[rows] * counts[:, None].astype(grad_out.dtype))
        return cls(unique, values)

    def merge(self, other: "SparseRowGrad") -> "SparseRowGrad":
        rows = np.concatenate([self.rows, other.rows])
        values = np.concatenate([self.values, other.values])
        if not len(rows):
            return SparseRowGrad(rows, values)
        unique, inverse = np.unique(rows, return_inverse=True)
        merged = np.zeros((len(unique), values.shape[1]), dtype=values.dtype)
        np.add.at(merged, inverse, values)
        return SparseRowGrad(unique, merged)

    def to_dense(self, shape: Tuple[int, int]) -> np.ndarray:
        dense = np.zeros(shape, dtype=self.values.dtype)
        dense[self.rows] = self.values
        return dense

    def sq_norm(self) -> float:
        return float(np.sum(self.values.astype(np.float64) ** 2))


Gradient = Union[np.ndarray, SparseRowGrad]


# --------------------------------------------------------------------------
# Towers and heads
# --------------------------------------------------------------------------


class Tower:
    """Stack of tanh layers (TowerParams)."""

    def __init__(self, weights: List[np.ndarray], biases: List[np.ndarray], dim: Optional[int] = None):
        if len(weights) != len(biases):
            raise InvariantViolation("a tower needs one bias per weight matrix")
        if not weights and dim is None:
            raise InvariantViolation("an identity tower needs its dimension")
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvariantViolation(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and weights[k - 1].shape[1] != w.shape[0]:
                raise InvariantViolation(
                    f"layer {k}: input {w.shape[0]} != previous output {weights[k - 1].shape[1]}"
                )
        self.weights = weights
        self.biases = biases
        self._dim = dim

    @classmethod
    def initialize(cls, sizes: Sequence[int], rng: np.random.Generator, dtype=np.float32):
        """Create a tower for layer sizes ``(in, h1, ..., hL)``; ``(in,)`` is the identity."""
        weights = [glorot_uniform(rng, a, b, dtype) for a, b in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(b, dtype=dtype) for b in sizes[1:]]
        return cls(weights, biases, dim=sizes[0])

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0] if self.weights else self._dim

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1] if self.weights else self._dim

    @property
    def sizes(self) -> List[int]:
        return [self.in_dim] + [w.shape[1] for w in self.weights]

    def _check(self, x: np.ndarray):
        if x.shape[-1] != self.in_dim:
            raise InvariantViolation(f"tower expects input dim {self.in_dim}, got {x.shape[-1]}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check(x)
        h = x
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(h @ w + b)
        return h

    def forward_cached(self, x: np.ndarray) -> List[np.ndarray]:
        """Forward pass keeping every activation; the last entry is the output."""
        self._check(x)
        acts = [x]
        for w, b in zip(self.weights, self.biases):
            acts.append(np.tanh(acts[-1] @ w + b))
        return acts

    def backward(self, acts: List[np.ndarray], grad_out: np.ndarray):
        """
        Back-propagate through the tower.

        Returns:
            (gradient w.r.t. the input, [dW per layer], [db per layer])
        """
        g = grad_out
        d_weights: List[np.ndarray] = [None] * len(self.weights)
        d_biases: List[np.ndarray] = [None] * len(self.weights)
        for k in reversed(range(len(self.weights))):
            g = g * (1.0 - acts[k + 1] ** 2)
            d_weights[k] = acts[k].T @ g
            d_biases[k] = g.sum(axis=0)
            g = g @ self.weights[k].T
        return g, d_weights, d_biases

    def named_parameters(self, prefix: str) -> List[Tuple[str, np.ndarray]]:
        named = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            named.append((f"{prefix}.W{k}", w))
            named.append((f"{prefix}.b{k}", b))
        return named

    @staticmethod
    def named_gradients(prefix: str, d_weights, d_biases) -> Dict[str, np.ndarray]:
        grads = {}
        for k, (dw, db) in enumerate(zip(d_weights, d_biases)):
            grads[f"{prefix}.W{k}"] = dw
            grads[f"{prefix}.b{k}"] = db
        return grads


def tower_forward(v: np.ndarray, params: Tower) -> np.ndarray:
    """Apply ``h_k = tanh(W_k h_{k-1} + b_k)`` layer by layer."""
    return params.forward(np.asarray(v))


class ScalarHead:
    """Linear scalar output layer (no activation)."""

    def __init__(self, w: np.ndarray, b: np.ndarray):
        if w.ndim != 1 or b.shape != (1,):
            raise InvariantViolation("scalar head needs w of shape (n,) and b of shape (1,)")
        self.w = w
        self.b = b

    @classmethod
    def initialize(cls, in_dim: int, rng: np.random.Generator, dtype=np.float32):
        return cls(glorot_uniform(rng, in_dim, 1, dtype)[:, 0].copy(), np.zeros(1, dtype=dtype))

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.w.shape[0]:
            raise InvariantViolation(f"head expects input dim {self.w.shape[0]}, got {x.shape[-1]}")
        return x @ self.w + self.b[0]

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        """Return (gradient w.r.t. x, dw, db) for a batch of scalar gradients."""
        return np.outer(grad_out, self.w), x.T @ grad_out, np.array([grad_out.sum()], dtype=x.dtype)

    def named_parameters(self, prefix: str) -> List[Tuple[str, np.ndarray]]:
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


# --------------------------------------------------------------------------
# Models
# --------------------------------------------------------------------------


@dataclass
class ForwardCache:
    """Activations of one batched forward pass, consumed by ``backward``."""

    x_bags: List[List[FeatureBag]]
    y_bags: List[FeatureBag]
    data: Dict[str, object] = field(default_factory=dict)


class ScoringModel:
    """Shared plumbing: parameters, copies, SGD updates and the SRDE file format."""

    kind = ""

    def __init__(
        self,
        input_embeddings: EmbeddingTable,
        response_embeddings: EmbeddingTable,
        features: Sequence[str],
        vocab_hash: str = "",
    ):
        if input_embeddings.matrix.shape != response_embeddings.matrix.shape:
            raise InvariantViolation("input and response embedding tables must have equal shapes")
        if not features:
            raise InvariantViolation("a model needs at least one input feature")
        self.input_embeddings = input_embeddings
        self.response_embeddings = response_embeddings
        self.features = tuple(features)
        self.vocab_hash = vocab_hash

    @property
    def num_features(self) -> int:
        return len(self.features)

    @property
    def d(self) -> int:
        return self.input_embeddings.d

    @property
    def vocab_size(self) -> int:
        return self.input_embeddings.vocab_size

    @property
    def dtype(self):
        return self.input_embeddings.matrix.dtype

    def named_parameters(self) -> List[Tuple[str, np.ndarray]]:
        return [
            ("input_embeddings", self.input_embeddings.matrix),
            ("response_embeddings", self.response_embeddings.matrix),
        ] + self._layer_parameters()

    def _layer_parameters(self) -> List[Tuple[str, np.ndarray]]:
        raise NotImplementedError

    def parameters(self) -> Dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def tower_sizes(self) -> Tuple[List[int], List[int]]:
        """(per-feature tower hidden sizes, fusion/final tower hidden sizes)."""
        raise NotImplementedError

    def copy(self, dtype=None) -> "ScoringModel":
        """Deep copy, optionally cast to another float dtype."""
        clone = self.__class__.zeros_like(self, dtype or self.dtype)
        for (_, dst), (_, src) in zip(clone.named_parameters(), self.named_parameters()):
            dst[...] = src
        return clone

    @classmethod
    def zeros_like(cls, model: "ScoringModel", dtype) -> "ScoringModel":
        towers, fusion = model.tower_sizes()
        return cls.build(
            model.vocab_size, model.d, towers, fusion, model.features, dtype=dtype,
            vocab_hash=model.vocab_hash, zero=True,
        )

    def apply_gradients(self, grads: Dict[str, Gradient], lr: float):
        """Plain SGD step ``theta <- theta - lr * grad`` (sparse rows for embeddings)."""
        params = self.parameters()
        for name, grad in grads.items():
            param = params[name]
            if isinstance(grad, SparseRowGrad):
                if len(grad.rows):
                    param[grad.rows] -= (lr * grad.values).astype(param.dtype)
            else:
                param -= (lr * grad).astype(param.dtype)

    # ---- serialization ----------------------------------------------------

    def to_bytes(self) -> bytes:
        towers, fusion = self.tower_sizes()
        buf = io.BytesIO()
        buf.write(MODEL_MAGIC)
        buf.write(struct.pack(
            "<IIIII", MODEL_VERSION, KIND_CODES[self.kind], self.num_features, self.d, self.vocab_size
        ))
        for sizes in (towers, fusion):
            buf.write(struct.pack("<I", len(sizes)))
            buf.write(struct.pack(f"<{len(sizes)}I", *sizes))
        vocab_hash = self.vocab_hash.encode("ascii").ljust(64, b"\0")[:64]
        buf.write(vocab_hash)
        for name in self.features:
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
        for _, arr in self.named_parameters():
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return buf.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @staticmethod
    def from_bytes(data: bytes) -> "ScoringModel":
        buf = io.BytesIO(data)
        if buf.read(4) != MODEL_MAGIC:
            raise ArtifactFormatError("not a ReplySonor model file (bad magic)")
        version, kind_code, m, d, vocab_size = struct.unpack("<IIIII", buf.read(20))
        if version != MODEL_VERSION:
            raise ArtifactFormatError(f"unsupported model format version {version}")
        sizes = []
        for _ in range(2):
            (count,) = struct.unpack("<I", buf.read(4))
            sizes.append(list(struct.unpack(f"<{count}I", buf.read(4 * count))))
        vocab_hash = buf.read(64).rstrip(b"\0").decode("ascii")
        features = []
        for _ in range(m):
            (length,) = struct.unpack("<I", buf.read(4))
            features.append(buf.read(length).decode("utf-8"))
        kinds = {code: name for name, code in KIND_CODES.items()}
        if kind_code not in kinds:
            raise ArtifactFormatError(f"unknown model kind code {kind_code}")
        cls = DotProductEncoder if kinds[kind_code] == "dot" else JointScorer
        model = cls.build(vocab_size, d, sizes[0], sizes[1], features, vocab_hash=vocab_hash, zero=True)
        for name, arr in model.named_parameters():
            raw = buf.read(arr.size * 4)
            if len(raw) != arr.size * 4:
                raise ArtifactFormatError(f"model file truncated while reading {name}")
            arr[...] = np.frombuffer(raw, dtype="<f4").reshape(arr.shape)
        return model

    @staticmethod
    def load(path: Path) -> "ScoringModel":
        return ScoringModel.from_bytes(Path(path).read_bytes())

    @classmethod
    def build(cls, vocab_size, d, towers, fusion, features, **kwargs) -> "ScoringModel":
        raise NotImplementedError


def _init_embeddings(rng, vocab_size, d, dtype, zero):
    if zero:
        return EmbeddingTable(np.zeros((vocab_size, d), dtype=dtype))
    return EmbeddingTable(glorot_uniform(rng, vocab_size, d, dtype))


class DotProductEncoder(ScoringModel):
    """Multi-loss dot-product scorer: S(x, y) = h_x . h_y."""

    kind = "dot"

    def __init__(
        self,
        input_embeddings: EmbeddingTable,
        response_embeddings: EmbeddingTable,
        input_towers: List[Tower],
        response_towers: List[Tower],
        input_fusion: Tower,
        response_fusion: Tower,
        features: Sequence[str] = ("body",),
        vocab_hash: str = "",
    ):
        super().__init__(input_embeddings, response_embeddings, features, vocab_hash)
        if not len(input_towers) == len(response_towers) == len(self.features):
            raise InvariantViolation("need one input and one response tower per feature")
        if input_fusion.out_dim != response_fusion.out_dim:
            raise InvariantViolation("input and response fusion outputs must have equal size")
        for tin, tres in zip(input_towers, response_towers):
            if tin.out_dim != tres.out_dim or tin.out_dim != input_fusion.in_dim:
                raise InvariantViolation("feature towers must match each other and the fusion input")
        self.input_towers = input_towers
        self.response_towers = response_towers
        self.input_fusion = input_fusion
        self.response_fusion = response_fusion

    @classmethod
    def build(
        cls, vocab_size, d, towers, fusion, features=("body",), dtype=np.float32,
        seed: int = 0, vocab_hash: str = "", zero: bool = False,
    ) -> "DotProductEncoder":
        """Initialize a model with the given layer sizes (seeded, deterministic)."""
        rng = np.random.default_rng(seed)
        towers, fusion = list(towers), list(fusion)
        in_emb = _init_embeddings(rng, vocab_size, d, dtype, zero)
        res_emb = _init_embeddings(rng, vocab_size, d, dtype, zero)

        def make(sizes):
            tower = Tower.initialize(sizes, rng, dtype)
            if zero:
                for w in tower.weights:
                    w[...] = 0
            return tower

        input_towers = [make([d] + towers) for _ in features]
        response_towers = [make([d] + towers) for _ in features]
        input_fusion = make([towers[-1]] + fusion)
        response_fusion = make([towers[-1]] + fusion)
        return cls(in_emb, res_emb, input_towers, response_towers, input_fusion,
                   response_fusion, features, vocab_hash)

    @classmethod
    def from_config(cls, cfg: ModelConfig, vocab_size: int, features, vocab_hash: str = ""):
        return cls.build(vocab_size, cfg.d, cfg.towers, cfg.fusion_sizes(), features,
                         seed=cfg.seed, vocab_hash=vocab_hash)

    def tower_sizes(self):
        return self.input_towers[0].sizes[1:], self.input_fusion.sizes[1:]

    @property
    def output_dim(self) -> int:
        return self.input_fusion.out_dim

    def _layer_parameters(self):
        named = []
        for i, tower in enumerate(self.input_towers):
            named += tower.named_parameters(f"input_tower.{i}")
        for i, tower in enumerate(self.response_towers):
            named += tower.named_parameters(f"response_tower.{i}")
        named += self.input_fusion.named_parameters("input_fusion")
        named += self.response_fusion.named_parameters("response_fusion")
        return named

    # ---- inference --------------------------------------------------------

    def encode_inputs(self, x_bags: Sequence[Sequence[FeatureBag]]):
        """
        Encode a batch of inputs.

        Args:
            x_bags: Per example, one bag per feature in model order

        Returns:
            (h_x of shape (B, D), [h_x^i of shape (B, D') per feature])
        """
        self._check_feature_count(x_bags)
        per_feature = []
        for i, tower in enumerate(self.input_towers):
            emb = embed_bags([bags[i] for bags in x_bags], self.input_embeddings)
            per_feature.append(tower.forward(emb))
        fused = sum(per_feature) / self.num_features
        return self.input_fusion.forward(fused), per_feature

    def encode_responses(self, y_bags: Sequence[Union[FeatureBag, Sequence[FeatureBag]]]):
        """
        Encode a batch of responses.

        Each response is one bag (fed to every response subnetwork) or a list
        of one bag per subnetwork.

        Returns:
            (h_y of shape (B, D), [h_y^i per subnetwork])
        """
        per_feature = []
        for i, tower in enumerate(self.response_towers):
            bags = [b if isinstance(b, FeatureBag) else b[i] for b in y_bags]
            per_feature.append(tower.forward(embed_bags(bags, self.response_embeddings)))
        fused = sum(per_feature) / self.num_features
        return self.response_fusion.forward(fused), per_feature

    def _check_feature_count(self, x_bags):
        for bags in x_bags:
            if len(bags) != self.num_features:
                raise InvariantViolation(
                    f"expected {self.num_features} feature bags per input, got {len(bags)}"
                )

    # ---- training ---------------------------------------------------------

    def forward_batch(self, x_bags: Sequence[Sequence[FeatureBag]], y_bags: Sequence[FeatureBag]):
        """
        Score every input against every response in a batch.

        Returns:
            (final K x K score matrix, [per-feature K x K matrices], cache)
        """
        self._check_feature_count(x_bags)
        m = self.num_features
        cache = ForwardCache(list(map(list, x_bags)), list(y_bags))
        ey = embed_bags(y_bags, self.response_embeddings)
        x_acts, y_acts, feature_scores = [], [], []
        for i in range(m):
            ex = embed_bags([bags[i] for bags in x_bags], self.input_embeddings)
            xa = self.input_towers[i].forward_cached(ex)
            ya = self.response_towers[i].forward_cached(ey)
            x_acts.append(xa)
            y_acts.append(ya)
            feature_scores.append(xa[-1] @ ya[-1].T)
        fx = sum(a[-1] for a in x_acts) / m
        fy = sum(a[-1] for a in y_acts) / m
        fx_acts = self.input_fusion.forward_cached(fx)
        fy_acts = self.response_fusion.forward_cached(fy)
        scores = fx_acts[-1] @ fy_acts[-1].T
        cache.data.update(x_acts=x_acts, y_acts=y_acts, fx_acts=fx_acts, fy_acts=fy_acts)
        return scores, feature_scores, cache

    def backward(self, cache: ForwardCache, d_scores: np.ndarray, d_feature_scores: List[np.ndarray]):
        """
        Gradients of a loss given its derivatives w.r.t. the score matrices.

        Returns:
            name -> gradient; embedding gradients are :class:`SparseRowGrad`
        """
        m = self.num_features
        x_acts, y_acts = cache.data["x_acts"], cache.data["y_acts"]
        fx_acts, fy_acts = cache.data["fx_acts"], cache.data["fy_acts"]
        hx, hy = fx_acts[-1], fy_acts[-1]
        grads: Dict[str, Gradient] = {}

        d_fx, dws, dbs = self.input_fusion.backward(fx_acts, d_scores @ hy)
        grads.update(Tower.named_gradients("input_fusion", dws, dbs))
        d_fy, dws, dbs = self.response_fusion.backward(fy_acts, d_scores.T @ hx)
        grads.update(Tower.named_gradients("response_fusion", dws, dbs))

        in_grad: Optional[SparseRowGrad] = None
        d_ey = np.zeros_like(y_acts[0][0])
        for i in range(m):
            hxi, hyi = x_acts[i][-1], y_acts[i][-1]
            dsi = d_feature_scores[i]
            d_hxi = d_fx / m + dsi @ hyi
            d_hyi = d_fy / m + dsi.T @ hxi
            d_ex, dws, dbs = self.input_towers[i].backward(x_acts[i], d_hxi)
            grads.update(Tower.named_gradients(f"input_tower.{i}", dws, dbs))
            d_eyi, dws, dbs = self.response_towers[i].backward(y_acts[i], d_hyi)
            grads.update(Tower.named_gradients(f"response_tower.{i}", dws, dbs))
            d_ey += d_eyi
            g = SparseRowGrad.from_bags([bags[i] for bags in cache.x_bags], d_ex)
            in_grad = g if in_grad is None else in_grad.merge(g)
        grads["input_embeddings"] = in_grad
        grads["response_embeddings"] = SparseRowGrad.from_bags(cache.y_bags, d_ey)
        return grads


class JointScorer(ScoringModel):
    """Multi-loss joint scorer over concatenated input and response representations."""

    kind = "joint"

    def __init__(
        self,
        input_embeddings: EmbeddingTable,
        response_embeddings: EmbeddingTable,
        feature_towers: List[Tower],
        feature_heads: List[ScalarHead],
        final_tower: Tower,
        final_head: ScalarHead,
        features: Sequence[str] = ("body",),
        vocab_hash: str = "",
    ):
        super().__init__(input_embeddings, response_embeddings, features, vocab_hash)
        if not len(feature_towers) == len(feature_heads) == len(self.features):
            raise InvariantViolation("need one tower and one head per feature")
        for tower in feature_towers:
            if tower.in_dim != 2 * self.d:
                raise InvariantViolation("feature towers consume concat(psi(x^i), psi(y))")
        if final_tower.in_dim != sum(t.out_dim for t in feature_towers):
            raise InvariantViolation("final tower consumes the concatenated feature representations")
        self.feature_towers = feature_towers
        self.feature_heads = feature_heads
        self.final_tower = final_tower
        self.final_head = final_head

    @classmethod
    def build(
        cls, vocab_size, d, towers, fusion, features=("body",), dtype=np.float32,
        seed: int = 0, vocab_hash: str = "", zero: bool = False,
    ) -> "JointScorer":
        rng = np.random.default_rng(seed)
        towers, fusion = list(towers), list(fusion)
        in_emb = _init_embeddings(rng, vocab_size, d, dtype, zero)
        res_emb = _init_embeddings(rng, vocab_size, d, dtype, zero)
        feature_towers = [Tower.initialize([2 * d] + towers, rng, dtype) for _ in features]
        feature_heads = [ScalarHead.initialize(towers[-1], rng, dtype) for _ in features]
        final_tower = Tower.initialize([towers[-1] * len(features)] + fusion, rng, dtype)
        final_head = ScalarHead.initialize(fusion[-1], rng, dtype)
        model = cls(in_emb, res_emb, feature_towers, feature_heads, final_tower, final_head,
                    features, vocab_hash)
        if zero:
            for _, arr in model._layer_parameters():
                arr[...] = 0
        return model

    @classmethod
    def from_config(cls, cfg: ModelConfig, vocab_size: int, features, vocab_hash: str = ""):
        return cls.build(vocab_size, cfg.d, cfg.towers, cfg.fusion_sizes(), features,
                         seed=cfg.seed, vocab_hash=vocab_hash)

    def tower_sizes(self):
        return self.feature_towers[0].sizes[1:], self.final_tower.sizes[1:]

    def _layer_parameters(self):
        named = []
        for i, (tower, head) in enumerate(zip(self.feature_towers, self.feature_heads)):
            named += tower.named_parameters(f"feature_tower.{i}")
            named += head.named_parameters(f"feature_head.{i}")
        named += self.final_tower.named_parameters("final_tower")
        named += self.final_head.named_parameters("final_head")
        return named

    def _pairs_forward(self, ex_list: List[np.ndarray], ey: np.ndarray):
        feat_acts, feat_scores = [], []
        for i, tower in enumerate(self.feature_towers):
            acts = tower.forward_cached(np.concatenate([ex_list[i], ey], axis=1))
            feat_acts.append(acts)
            feat_scores.append(self.feature_heads[i].forward(acts[-1]))
        z = np.concatenate([a[-1] for a in feat_acts], axis=1)
        final_acts = self.final_tower.forward_cached(z)
        return self.final_head.forward(final_acts[-1]), feat_scores, feat_acts, final_acts

    def score_pairs(self, x_bags: Sequence[Sequence[FeatureBag]], y_bags: Sequence[FeatureBag]):
        """
        Score aligned (input, response) pairs.

        Returns:
            (final scores (P,), [per-feature scores (P,)])
        """
        ex_list = [embed_bags([bags[i] for bags in x_bags], self.input_embeddings)
                   for i in range(self.num_features)]
        ey = embed_bags(y_bags, self.response_embeddings)
        final, feats, _, _ = self._pairs_forward(ex_list, ey)
        return final, feats

    def score_against(self, x_bags: Sequence[FeatureBag], response_embeds: np.ndarray):
        """
        Score one input against many responses whose psi(y) is precomputed.

        Args:
            x_bags: One bag per feature
            response_embeds: (n, d) response-side bag embeddings

        Returns:
            Final scores, shape (n,)
        """
        n = response_embeds.shape[0]
        ex_list = [np.repeat(embed_bags([bag], self.input_embeddings), n, axis=0) for bag in x_bags]
        final, _, _, _ = self._pairs_forward(ex_list, response_embeds)
        return final

    def forward_batch(self, x_bags: Sequence[Sequence[FeatureBag]], y_bags: Sequence[FeatureBag]):
        """Score all K x K pairings of a batch (one forward pass per pair)."""
        k = len(x_bags)
        if len(y_bags) != k:
            raise InvariantViolation("a batch needs as many responses as inputs")
        cache = ForwardCache(list(map(list, x_bags)), list(y_bags))
        ii, jj = np.divmod(np.arange(k * k), k)
        ex_k = [embed_bags([bags[i] for bags in x_bags], self.input_embeddings)
                for i in range(self.num_features)]
        ey_k = embed_bags(y_bags, self.response_embeddings)
        final, feats, feat_acts, final_acts = self._pairs_forward([e[ii] for e in ex_k], ey_k[jj])
        cache.data.update(ii=ii, jj=jj, k=k, feat_acts=feat_acts, final_acts=final_acts)
        return final.reshape(k, k), [s.reshape(k, k) for s in feats], cache

    def backward(self, cache: ForwardCache, d_scores: np.ndarray, d_feature_scores: List[np.ndarray]):
        ii, jj, k = cache.data["ii"], cache.data["jj"], cache.data["k"]
        feat_acts, final_acts = cache.data["feat_acts"], cache.data["final_acts"]
        d = self.d
        grads: Dict[str, Gradient] = {}

        d_hf, dw, db = self.final_head.backward(final_acts[-1], d_scores.reshape(-1))
        grads["final_head.w"], grads["final_head.b"] = dw, db
        d_z, dws, dbs = self.final_tower.backward(final_acts, d_hf)
        grads.update(Tower.named_gradients("final_tower", dws, dbs))

        in_grad: Optional[SparseRowGrad] = None
        d_ey = np.zeros((k, d), dtype=d_z.dtype)
        offset = 0
        for i, tower in enumerate(self.feature_towers):
            width = tower.out_dim
            d_hi = d_z[:, offset:offset + width]
            offset += width
            d_h_head, dw, db = self.feature_heads[i].backward(
                feat_acts[i][-1], d_feature_scores[i].reshape(-1)
            )
            grads[f"feature_head.{i}.w"], grads[f"feature_head.{i}.b"] = dw, db
            d_in, dws, dbs = tower.backward(feat_acts[i], d_hi + d_h_head)
            grads.update(Tower.named_gradients(f"feature_tower.{i}", dws, dbs))
            d_ex = np.zeros((k, d), dtype=d_in.dtype)
            np.add.at(d_ex, ii, d_in[:, :d])
            np.add.at(d_ey, jj, d_in[:, d:])
            g = SparseRowGrad.from_bags([bags[i] for bags in cache.x_bags], d_ex)
            in_grad = g if in_grad is None else in_grad.merge(g)
        grads["input_embeddings"] = in_grad
        grads["response_embeddings"] = SparseRowGrad.from_bags(cache.y_bags, d_ey)
        return grads


def build_model(cfg: ModelConfig, vocab_size: int, features, vocab_hash: str = "") -> ScoringModel:
    """Create a freshly initialized scorer of the configured kind."""
    if cfg.kind == "dot":
        return DotProductEncoder.from_config(cfg, vocab_size, features, vocab_hash)
    if cfg.kind == "joint":
        return JointScorer.from_config(cfg, vocab_size, features, vocab_hash)
    raise InvariantViolation(f"unknown model kind {cfg.kind!r}")


# --------------------------------------------------------------------------
# Single-example operations
# --------------------------------------------------------------------------


def encode_input(features: Sequence[FeatureBag], model: DotProductEncoder):
    """Return (h_x, [h_x^i]) for one input given one bag per feature."""
    h, per_feature = model.encode_inputs([list(features)])
    return h[0], [p[0] for p in per_feature]


def encode_response(response_bags: Union[FeatureBag, Sequence[FeatureBag]], model: DotProductEncoder):
    """Return (h_y, [h_y^i]) for one response."""
    h, per_feature = model.encode_responses([response_bags])
    return h[0], [p[0] for p in per_feature]


def score_dot(h_x: np.ndarray, h_y: np.ndarray) -> float:
    """Dot-product score of two encodings."""
    h_x, h_y = np.asarray(h_x), np.asarray(h_y)
    if h_x.shape != h_y.shape:
        raise InvariantViolation(f"dimension mismatch: {h_x.shape} vs {h_y.shape}")
    return float(np.dot(h_x, h_y))


def score_joint(x_bags: Sequence[FeatureBag], y_bag: FeatureBag, model: JointScorer):
    """Return (S(x, y), [S(x^i, y)]) from the joint scorer."""
    final, feats = model.score_pairs([list(x_bags)], [y_bag])
    return float(final[0]), [float(s[0]) for s in feats]


def batch_score_matrix(h_x: np.ndarray, h_y: np.ndarray) -> np.ndarray:
    """All-pairs dot products: entry (i, j) = h_x[i] . h_y[j]."""
    h_x, h_y = np.atleast_2d(h_x), np.atleast_2d(h_y)
    if h_x.shape[1] != h_y.shape[1]:
        raise InvariantViolation(f"dimension mismatch: {h_x.shape[1]} vs {h_y.shape[1]}")
    return h_x @ h_y.T
