"""The point-cloud classification network.

Dataflow with everything enabled:

  1. first neighbor graph on positions; edge features [x_i ; x_j - x_i]
     through a shared linear map, group norm, leaky relu, then a max over
     each point's k edges -> F1, plus the mean selected-neighbor distance
  2. second graph from the min-distance rule (bound = that mean distance);
     edge features [f_i ; f_j - f_i] over F1 through the same block -> F2
  3. F = [F1 ; F2] per point; global average a = mean over points
  4. per point [F_p ; a] through a linear map, norm, activation, then a
     global max m over points, recording which point won each channel
  5. classifier on [a ; m]: fc1, activation, dropout (train only), fc2

Edge linear maps run in decomposed form: W applied to [u ; v - u] equals
u (Wc - Wo) + v Wo, where Wc and Wo are the top and bottom halves of W.
Evaluating the two halves on points and gathering afterwards avoids ever
materializing the (N k, 2 C) stacked edge-feature matrix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, InputError, NumericError, ParseError
from .neighbors import SpatialIndex, min_distance_neighbors, sparse_edge_neighbors
from .pointcloud import normalize

__all__ = [
    "NetworkConfig",
    "ModelParams",
    "ForwardTrace",
    "forward",
    "loss_and_grads",
    "save_checkpoint",
    "load_checkpoint",
]

_CKPT_MAGIC = b"WGNCKPT\x00"
_CKPT_VERSION = 1


@dataclass
class NetworkConfig:
    """Architecture and preprocessing switches; the single source of truth
    for what a trained model is."""

    n_points: int = 32768
    k: int = 20
    pool: int = 60
    c1: int = 64
    c2: int = 64
    embed: int = 256
    fc_hidden: int = 128
    n_classes: int = 2
    groups: int = 8
    leaky_slope: float = 0.2
    dropout: float = 0.5
    normalize_input: bool = True
    # ablation toggles
    min_distance_rule: bool = True
    sparse_edge: bool = True
    max_pool: bool = True
    avg_pool: bool = True
    group_norm: bool = True

    def validate(self):
        for name in ("c1", "c2", "embed"):
            width = getattr(self, name)
            if width < 1 or width % self.groups != 0:
                raise ConfigError(
                    f"{name}={width} is not divisible by groups={self.groups}"
                )
        if not 1 <= self.k <= self.pool < self.n_points:
            raise ConfigError(
                f"need 1 <= k <= pool < n_points, got k={self.k}, "
                f"pool={self.pool}, n_points={self.n_points}"
            )
        if not (self.max_pool or self.avg_pool):
            raise ConfigError("at least one of max_pool/avg_pool must be enabled")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 < self.leaky_slope <= 1.0:
            raise ConfigError(
                f"leaky_slope must be in (0, 1], got {self.leaky_slope}"
            )
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if self.fc_hidden < 1 or self.groups < 1:
            raise ConfigError("fc_hidden and groups must be positive")

    @property
    def feature_dim(self):
        return self.c1 + self.c2

    @property
    def embed_in(self):
        return 2 * self.feature_dim if self.avg_pool else self.feature_dim

    @property
    def head_in(self):
        return (self.feature_dim if self.avg_pool else 0) + (
            self.embed if self.max_pool else 0
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class ModelParams:
    """Named parameter arrays, in a stable order."""

    arrays: dict[str, np.ndarray]

    @classmethod
    def initialize(cls, config, seed=0):
        """Uniform fan-balanced init for the linear maps; unit/zero affines."""
        config.validate()
        rng = np.random.default_rng(seed)

        def linear(fan_in, fan_out, scale=1.0):
            limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, (fan_in, fan_out)).astype(np.float32)

        arrays = {}
        arrays["edge1.weight"] = linear(6, config.c1)
        arrays["edge1.gamma"] = np.ones(config.c1, dtype=np.float32)
        arrays["edge1.beta"] = np.zeros(config.c1, dtype=np.float32)
        arrays["edge2.weight"] = linear(2 * config.c1, config.c2)
        arrays["edge2.gamma"] = np.ones(config.c2, dtype=np.float32)
        arrays["edge2.beta"] = np.zeros(config.c2, dtype=np.float32)
        arrays["embed.weight"] = linear(config.embed_in, config.embed)
        arrays["embed.gamma"] = np.ones(config.embed, dtype=np.float32)
        arrays["embed.beta"] = np.zeros(config.embed, dtype=np.float32)
        arrays["fc1.weight"] = linear(config.head_in, config.fc_hidden)
        # the output layer starts near zero so untrained logits sit in the
        # uniform-prediction regime instead of spending the high-lr epochs
        # un-learning large random class scores
        arrays["fc2.weight"] = linear(config.fc_hidden, config.n_classes, scale=0.1)
        return cls(arrays=arrays)

    def copy(self):
        return ModelParams(arrays={k: v.copy() for k, v in self.arrays.items()})

    def check_finite(self):
        for name, arr in self.arrays.items():
            if not np.isfinite(arr).all():
                raise NumericError(f"parameter '{name}' contains non-finite values")


@dataclass
class ForwardTrace:
    """Everything one forward pass decided, for metrics and attribution."""

    logits: np.ndarray          # (n_classes,)
    probabilities: np.ndarray   # (n_classes,) softmax of logits
    avg_vector: np.ndarray | None   # (c1+c2,) global average, if avg_pool
    max_vector: np.ndarray | None   # (embed,) global max, if max_pool
    max_argpoint: np.ndarray | None  # (embed,) winning point per channel
    graphs: tuple               # the two neighbor graphs used
    config: "NetworkConfig" = None  # the configuration the pass ran with


def _derive_seed(seed, tag):
    """Independent child seed for one consumer of the pass seed."""
    ss = np.random.SeedSequence([int(seed) & 0x7FFFFFFFFFFFFFFF, int(tag)])
    return int(ss.generate_state(1, np.uint64)[0])


def _check_finite(data, layer):
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite activation in {layer}")


def _softmax(logits):
    shifted = logits.astype(np.float64) - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def _edge_block(x, graph, params_t, prefix, config):
    """Shared edge map + norm + activation + per-point max over k edges."""
    n, cin = x.shape
    k = graph.k
    w = params_t[prefix + ".weight"]
    wc = ad.slice_rows(w, 0, cin)
    wo = ad.slice_rows(w, cin, 2 * cin)
    center = ad.matmul(x, ad.sub(wc, wo))
    offset = ad.matmul(x, wo)
    edges = ad.edge_combine(center, offset, graph.neighbors)
    if config.group_norm:
        edges = ad.group_norm(
            edges, config.groups, params_t[prefix + ".gamma"], params_t[prefix + ".beta"]
        )
    edges = ad.leaky_relu(edges, config.leaky_slope)
    cout = edges.shape[1]
    stacked = ad.reshape(edges, (n, k, cout))
    feat, _ = ad.reduce_max_with_argmax(stacked, axis=1)
    return feat


def _build_graphs(index, config, seed):
    pool = config.pool if config.sparse_edge else config.k
    graph1 = sparse_edge_neighbors(
        index, k=config.k, pool=pool, seed=_derive_seed(seed, 1)
    )
    if config.min_distance_rule:
        graph2 = min_distance_neighbors(
            index, graph1.mean_dist, k=config.k, pool=pool, seed=_derive_seed(seed, 2)
        )
    else:
        graph2 = sparse_edge_neighbors(
            index, k=config.k, pool=pool, seed=_derive_seed(seed, 2)
        )
    return graph1, graph2


def _forward_graph(params_t, pts, config, mode, seed, index, dropout_seed=None):
    """Shared forward over parameter Tensors; returns the logits tensor and
    the trace ingredients."""
    graph1, graph2 = _build_graphs(index, config, seed)

    x = Tensor(pts)
    f1 = _edge_block(x, graph1, params_t, "edge1", config)
    _check_finite(f1.data, "layer-1 features")
    f2 = _edge_block(f1, graph2, params_t, "edge2", config)
    _check_finite(f2.data, "layer-2 features")
    feat = ad.concat(f1, f2, axis=1)
    ch = config.feature_dim

    avg_t = None
    if config.avg_pool:
        avg_t = ad.reduce_mean(feat, axis=0)

    max_t = None
    argpoint = None
    if config.max_pool:
        w_embed = params_t["embed.weight"]
        if config.avg_pool:
            w_local = ad.slice_rows(w_embed, 0, ch)
            w_global = ad.slice_rows(w_embed, ch, 2 * ch)
            pre = ad.add(
                ad.matmul(feat, w_local),
                ad.matmul(ad.reshape(avg_t, (1, ch)), w_global),
            )
        else:
            pre = ad.matmul(feat, w_embed)
        if config.group_norm:
            pre = ad.group_norm(
                pre, config.groups, params_t["embed.gamma"], params_t["embed.beta"]
            )
        act = ad.leaky_relu(pre, config.leaky_slope)
        _check_finite(act.data, "embedding")
        max_t, argpoint = ad.reduce_max_with_argmax(act, axis=0)

    parts = []
    if config.avg_pool:
        parts.append(ad.reshape(avg_t, (1, ch)))
    if config.max_pool:
        parts.append(ad.reshape(max_t, (1, config.embed)))
    head = parts[0] if len(parts) == 1 else ad.concat(parts[0], parts[1], axis=1)
    head = ad.matmul(head, params_t["fc1.weight"])
    head = ad.leaky_relu(head, config.leaky_slope)
    if mode == "train" and config.dropout > 0.0:
        if dropout_seed is None:
            dropout_seed = _derive_seed(seed, 3)
        head = ad.dropout(head, config.dropout, int(dropout_seed))
    logits_t = ad.matmul(head, params_t["fc2.weight"])
    _check_finite(logits_t.data, "classifier logits")
    return logits_t, avg_t, max_t, argpoint, (graph1, graph2)


def _prepare_points(cloud, config, index):
    pts = cloud.points
    if pts.shape[0] != config.n_points:
        raise InputError(
            f"cloud has {pts.shape[0]} points but the config expects "
            f"{config.n_points}"
        )
    if index is None:
        if config.normalize_input:
            pts = normalize(pts)
        index = SpatialIndex(pts)
    elif index.n != pts.shape[0]:
        raise InputError(
            f"index covers {index.n} points, cloud has {pts.shape[0]}"
        )
    return pts, index


def forward(params, cloud, config, mode="eval", seed=0, index=None,
            dropout_seed=None):
    """One full pass; returns a ForwardTrace.

    ``mode`` is "train" or "eval"; dropout only fires in train mode. All
    randomness (neighbor sampling, dropout) derives from ``seed``, unless
    ``dropout_seed`` is given to decouple the dropout mask from the graph
    sampling. Passing a prebuilt ``index`` asserts the cloud is already
    fully prepared (normalized if the config asks for it) and the index
    covers exactly those points; no further normalization happens in that
    case.
    """
    config.validate()
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got '{mode}'")
    pts, index = _prepare_points(cloud, config, index)
    params_t = {k: Tensor(v) for k, v in params.arrays.items()}
    logits_t, avg_t, max_t, argpoint, graphs = _forward_graph(
        params_t, pts, config, mode, seed, index, dropout_seed
    )
    logits = logits_t.data.reshape(-1).copy()
    return ForwardTrace(
        logits=logits,
        probabilities=_softmax(logits),
        avg_vector=None if avg_t is None else avg_t.data.copy(),
        max_vector=None if max_t is None else max_t.data.copy(),
        max_argpoint=None if argpoint is None else argpoint.copy(),
        graphs=graphs,
        config=config,
    )


def loss_and_grads(params, cloud, label, class_weight, config, seed=0, index=None,
                   dropout_seed=None):
    """Weighted cross-entropy loss and gradients for every parameter.

    Runs a train-mode forward, backpropagates through all five stages
    (graph topology is a constant), and returns ``(loss, grads)`` where
    grads maps every parameter name to an array; parameters that took no
    part in the pass get zeros. ``dropout_seed`` decouples the dropout
    mask from the graph sampling seed when given.
    """
    config.validate()
    label = int(label)
    if not 0 <= label < config.n_classes:
        raise InputError(f"label {label} out of range for {config.n_classes} classes")
    pts, index = _prepare_points(cloud, config, index)
    params_t = {k: Tensor(v, requires_grad=True) for k, v in params.arrays.items()}
    logits_t, *_ = _forward_graph(
        params_t, pts, config, "train", seed, index, dropout_seed
    )
    loss_t = ad.weighted_cross_entropy(logits_t, label, class_weight)
    if not np.isfinite(loss_t.data):
        raise NumericError("non-finite training loss")
    loss_t.backward()
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in params_t.items()
    }
    return float(loss_t.item()), grads


def save_checkpoint(path, params, config):
    """Self-describing binary checkpoint; round-trips bit-exactly."""
    params.check_finite()
    header = {
        "config": config.to_dict(),
        "params": [
            {"name": name, "shape": list(arr.shape)}
            for name, arr in params.arrays.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for arr in params.arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into (ModelParams, NetworkConfig)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ParseError("not a model checkpoint (bad magic)", offset=0)
    fixed = len(_CKPT_MAGIC) + 8
    if len(raw) < fixed:
        raise ParseError("checkpoint header truncated", offset=len(raw))
    version, header_len = struct.unpack("<II", raw[len(_CKPT_MAGIC):fixed])
    if version != _CKPT_VERSION:
        raise ParseError(
            f"unsupported checkpoint version {version}", offset=len(_CKPT_MAGIC)
        )
    try:
        header = json.loads(raw[fixed:fixed + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad checkpoint header: {exc}", offset=fixed) from exc
    config = NetworkConfig.from_dict(header["config"])
    arrays = {}
    cursor = fixed + header_len
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if cursor + nbytes > len(raw):
            raise ParseError(
                f"checkpoint payload truncated at parameter '{entry['name']}'",
                offset=len(raw),
            )
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=cursor)
        arrays[entry["name"]] = arr.reshape(shape).copy()
        cursor += nbytes
    params = ModelParams(arrays=arrays)
    try:
        params.check_finite()
    except NumericError as exc:
        raise ParseError(f"checkpoint contains corrupt values: {exc}", offset=fixed) from exc
    return params, config
