"""
The Deep Tree Network: convolutional residual units (CRU) at every node,
tree routing units (TRU) at internal nodes and supervised feature learning
(SFL) heads at the leaves.

Node ``i`` has children ``2i+1`` and ``2i+2``. Every CRU runs on the whole
batch so that each TRU can see the responses of samples it does not route
(needed by the unique loss); the SFL heads only see the rows routed to them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .errors import DimensionError, UsageError
from .routing import NodeBatch, RoutingState, batch_mean, compress, route_response
from .tensor import Tensor, no_grad, note_kink

INPUT_CHANNELS = 6


@dataclass(frozen=True)
class TreeConfig:
    depth: int = 3
    input_hw: int = 32
    channels: int = 16
    groups: int = 4
    feature_len: int = 64
    mask_hw: int = 8
    root_compress: Tuple[int, int] = (4, 4)   # (spatial extent, channels)
    node_compress: Tuple[int, int] = (4, 8)
    routing_kind: str = "proposed"
    mean_momentum: float = 0.99
    dtype: str = "float64"

    def __post_init__(self):
        if self.depth < 1:
            raise UsageError("depth must be >= 1")
        if self.channels % self.groups:
            raise UsageError(f"groups={self.groups} must divide channels={self.channels}")
        if self.input_hw % (2 ** (self.depth - 1)):
            raise UsageError(f"input extent {self.input_hw} not divisible by 2^{self.depth - 1}")
        if self.leaf_hw != self.mask_hw:
            raise UsageError(f"mask extent {self.mask_hw} must equal leaf extent {self.leaf_hw}")
        if self.routing_kind not in ("proposed", "mpt"):
            raise UsageError(f"unknown routing kind {self.routing_kind!r}")
        if self.dtype not in ("float32", "float64"):
            raise UsageError(f"unsupported dtype {self.dtype!r}")

    @property
    def leaf_hw(self) -> int:
        return self.input_hw // 2 ** (self.depth - 1)

    @property
    def n_nodes(self) -> int:
        return 2 ** self.depth - 1

    @property
    def n_internal(self) -> int:
        return 2 ** (self.depth - 1) - 1

    @property
    def n_leaves(self) -> int:
        return 2 ** (self.depth - 1)

    def level(self, node: int) -> int:
        return int(np.floor(np.log2(node + 1)))

    def node_hw(self, node: int) -> int:
        """Spatial extent of a node's CRU output; only internal CRUs pool."""
        return self.input_hw // 2 ** min(self.level(node) + 1, self.depth - 1)

    def compress_spec(self, node: int) -> Tuple[int, int]:
        return self.root_compress if node == 0 else self.node_compress

    def routing_length(self, node: int) -> int:
        hw, c = self.compress_spec(node)
        return hw * hw * c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["root_compress"] = list(self.root_compress)
        d["node_compress"] = list(self.node_compress)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TreeConfig":
        d = dict(d)
        d["root_compress"] = tuple(d["root_compress"])
        d["node_compress"] = tuple(d["node_compress"])
        return cls(**d)


DESK = TreeConfig()
FULL = TreeConfig(depth=4, input_hw=256, channels=40, groups=4, feature_len=500, mask_hw=32,
                   root_compress=(32, 10), node_compress=(16, 20))
PRESETS = {"desk": DESK, "full": FULL}


def _normal(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class ConvBlock:
    """3x3 conv -> group norm -> ReLU with a shortcut around it."""

    def __init__(self, cin, cout, groups, rng, std, dtype, stride=1, shortcut=True):
        self.kernel = _normal(rng, (3, 3, cin, cout), std, dtype)
        self.bias = _zeros((cout,), dtype)
        self.gamma = _ones((cout,), dtype)
        self.beta = _zeros((cout,), dtype)
        self.groups = groups
        self.stride = stride
        self.shortcut = shortcut
        self.proj = _normal(rng, (1, 1, cin, cout), std, dtype) if shortcut and cin != cout else None

    def __call__(self, x: Tensor) -> Tensor:
        y = F.conv2d(x, self.kernel, self.bias, stride=self.stride)
        y = F.relu(F.group_norm(y, self.groups, self.gamma, self.beta))
        if not self.shortcut:
            return y
        return y + (x if self.proj is None else F.conv2d(x, self.proj, padding="valid"))

    def parameters(self) -> List[Tensor]:
        ps = [self.kernel, self.bias, self.gamma, self.beta]
        return ps + ([self.proj] if self.proj is not None else [])


class CRU:
    def __init__(self, cin, cfg: TreeConfig, rng, std, pool: bool):
        dt = cfg.dtype
        self.blocks = [ConvBlock(cin if k == 0 else cfg.channels, cfg.channels, cfg.groups, rng, std, dt)
                       for k in range(3)]
        self.pool = pool

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return F.max_pool2d(x) if self.pool else x

    def parameters(self) -> List[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]


class TRU:
    """Fixed random 1x1 compression followed by the trainable routing state.

    The compression kernel is drawn once and never trained: under the route
    loss any trainable scale on the compressed features shrinks to zero.
    """

    def __init__(self, node: int, cfg: TreeConfig, rng, std):
        hw, c = cfg.compress_spec(node)
        if hw > cfg.node_hw(node):
            raise UsageError(f"node {node}: compress extent {hw} exceeds feature extent {cfg.node_hw(node)}")
        self.target = (hw, hw)
        self.proj = Tensor(rng.normal(0.0, std, size=(1, 1, cfg.channels, c)).astype(cfg.dtype))
        self.state = RoutingState.init(hw * hw * c, rng, cfg.mean_momentum, cfg.routing_kind, cfg.dtype)

    def compress(self, feature: Tensor) -> Tensor:
        return compress(feature, self.proj, self.target)

    def parameters(self) -> List[Tensor]:
        return self.state.parameters()


class SFL:
    """Leaf head: a classifier producing 2-class logits and a 1x1-conv mask map."""

    def __init__(self, cfg: TreeConfig, rng, std):
        dt, c = cfg.dtype, cfg.channels
        self.convs = [ConvBlock(c, c, cfg.groups, rng, std, dt, stride=2, shortcut=False) for _ in range(2)]
        side = math.ceil(math.ceil(cfg.leaf_hw / 2) / 2)
        flat = side * side * c
        self.fc1_w = _normal(rng, (flat, cfg.feature_len), std, dt)
        self.fc1_b = _zeros((cfg.feature_len,), dt)
        self.fc2_w = _normal(rng, (cfg.feature_len, cfg.feature_len), std, dt)
        self.fc2_b = _zeros((cfg.feature_len,), dt)
        self.cls_w = _normal(rng, (cfg.feature_len, 2), std, dt)
        self.cls_b = _zeros((2,), dt)
        self.mask_w = _normal(rng, (1, 1, c, 1), std, dt)
        self.mask_b = _zeros((1,), dt)

    def code(self, feature: Tensor) -> Tensor:
        h = feature
        for conv in self.convs:
            h = conv(h)
        # the fully connected layers stay linear: with the tiny class weight,
        # rectified units here die during training and silence the leaf
        h = F.linear(F.flatten(h), self.fc1_w, self.fc1_b)
        return F.linear(h, self.fc2_w, self.fc2_b)

    def __call__(self, feature: Tensor):
        c = self.code(feature)
        logits = F.linear(c, self.cls_w, self.cls_b)
        m = F.conv2d(feature, self.mask_w, self.mask_b, padding="valid")
        return c, logits, m.reshape(m.shape[:3])

    def parameters(self) -> List[Tensor]:
        ps = [p for conv in self.convs for p in conv.parameters()]
        return ps + [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b,
                     self.cls_w, self.cls_b, self.mask_w, self.mask_b]


@dataclass
class LeafOutput:
    leaf: int
    path: List[Tuple[int, float]]
    F: np.ndarray
    M: np.ndarray
    p_spoof: float


@dataclass
class TreeOutput:
    """Everything one batch forward produces, keyed by node or leaf index."""

    features: Dict[int, Tensor]
    compressed: Dict[int, Tensor]
    phi: Dict[int, np.ndarray]
    visits: Dict[int, np.ndarray]
    leaf_of: np.ndarray
    codes: Dict[int, Tensor] = field(default_factory=dict)
    logits: Dict[int, Tensor] = field(default_factory=dict)
    masks: Dict[int, Tensor] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return len(self.leaf_of)

    def leaf_rows(self, leaf: int) -> np.ndarray:
        """Batch indices routed to ``leaf`` (sorted, matching the leaf tensors' rows)."""
        return np.flatnonzero(self.leaf_of == leaf)

    def p_spoof(self) -> np.ndarray:
        out = np.zeros(self.batch_size)
        for leaf, lg in self.logits.items():
            out[self.leaf_rows(leaf)] = F.softmax(lg.data)[:, 1]
        return out

    def mask_maps(self) -> np.ndarray:
        first = next(iter(self.masks.values()))
        out = np.zeros((self.batch_size,) + first.shape[1:])
        for leaf, m in self.masks.items():
            out[self.leaf_rows(leaf)] = m.data
        return out

    def leaf_counts(self, n_leaves: int) -> np.ndarray:
        return np.bincount(self.leaf_of, minlength=n_leaves)


class DeepTree:
    def __init__(self, config: TreeConfig = DESK, rng: Optional[np.random.Generator] = None,
                 init_std: float = 0.02):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = cfg = config
        self.init_std = init_std
        self.crus: List[CRU] = []
        for i in range(cfg.n_nodes):
            cin = INPUT_CHANNELS if i == 0 else cfg.channels
            self.crus.append(CRU(cin, cfg, rng, init_std, pool=i < cfg.n_internal))
        self.trus: List[TRU] = [TRU(i, cfg, rng, init_std) for i in range(cfg.n_internal)]
        self.sfls: List[SFL] = [SFL(cfg, rng, init_std) for _ in range(cfg.n_leaves)]

    # -- parameter bookkeeping ---------------------------------------------
    def dtn_parameters(self) -> List[Tensor]:
        ps = [p for c in self.crus for p in c.parameters()]
        return ps + [p for s in self.sfls for p in s.parameters()]

    def tru_parameters(self) -> List[Tensor]:
        return [p for t in self.trus for p in t.parameters()]

    def parameters(self, phase: str = "all") -> List[Tensor]:
        if phase == "dtn":
            return self.dtn_parameters()
        if phase == "tru":
            return self.tru_parameters()
        return self.dtn_parameters() + self.tru_parameters()

    def routing_states(self) -> List[RoutingState]:
        return [t.state for t in self.trus]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def arrays(self) -> List[np.ndarray]:
        """Every stored array in deterministic tree-index order.

        Per TRU: compression kernel, trainable routing parameters, running
        mean and its update count.
        """
        out = [p.data for c in self.crus for p in c.parameters()]
        for t in self.trus:
            out += [t.proj.data] + [p.data for p in t.parameters()]
            out += [t.state.mu, np.array([t.state.updates], dtype=np.int64)]
        out += [p.data for s in self.sfls for p in s.parameters()]
        return out

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        it = iter(arrays)

        def fill(p: Tensor):
            a = next(it)
            if a.shape != p.data.shape:
                raise DimensionError(f"array shape {a.shape} != parameter shape {p.data.shape}")
            p.data = a

        for c in self.crus:
            for p in c.parameters():
                fill(p)
        for t in self.trus:
            fill(t.proj)
            for p in t.parameters():
                fill(p)
            mu = next(it)
            if mu.shape != t.state.mu.shape:
                raise DimensionError("running mean shape mismatch")
            t.state.mu = mu
            t.state.updates = int(np.asarray(next(it)).reshape(-1)[0])
        for s in self.sfls:
            for p in s.parameters():
                fill(p)

    # -- structure ----------------------------------------------------------
    def is_leaf(self, node: int) -> bool:
        return node >= self.config.n_internal

    def leaf_number(self, node: int) -> int:
        return node - self.config.n_internal

    def path_to_leaf(self, leaf: int) -> List[int]:
        """Node ids from the root to leaf number ``leaf``, inclusive."""
        node = leaf + self.config.n_internal
        path = [node]
        while node:
            node = (node - 1) // 2
            path.append(node)
        return path[::-1]

    # -- forward ------------------------------------------------------------
    def forward_batch(self, images, leaf_override: Optional[np.ndarray] = None,
                      heads: bool = True, center_rows: Optional[np.ndarray] = None) -> TreeOutput:
        """Run a [B,H,W,6] batch through the tree.

        ``leaf_override`` forces each sample to a given leaf number instead
        of following the sign of its routing responses.
        """
        cfg = self.config
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=cfg.dtype))
        if x.ndim != 4:
            raise DimensionError(f"expected [B,H,W,C] images, got shape {x.shape}")
        if x.shape[-1] != INPUT_CHANNELS:
            raise DimensionError(f"expected {INPUT_CHANNELS} input channels, got {x.shape[-1]}")
        if x.shape[1] != cfg.input_hw or x.shape[2] != cfg.input_hw:
            raise DimensionError(f"expected {cfg.input_hw}x{cfg.input_hw} images, got {x.shape[1]}x{x.shape[2]}")
        B = x.shape[0]
        feats = {0: self.crus[0](x)}
        compressed, phis = {}, {}
        at = np.zeros(B, dtype=np.intp)
        visits = {0: np.arange(B)}
        if leaf_override is not None:
            leaf_override = np.asarray(leaf_override, dtype=np.intp)
            target_paths = [self.path_to_leaf(int(l)) for l in leaf_override]

        for i in range(cfg.n_internal):
            tru = self.trus[i]
            xi = tru.compress(feats[i])
            rows = visits[i]
            mu = None
            if center_rows is not None:
                mu = batch_mean(xi.detach(), rows[np.asarray(center_rows, dtype=bool)[rows]])
            phi = route_response(xi, tru.state, mu)
            compressed[i], phis[i] = xi, phi.data
            if leaf_override is None:
                go_right = phi.data[rows] >= 0
            else:
                go_right = np.array([target_paths[r][cfg.level(i) + 1] == 2 * i + 2 for r in rows], dtype=bool)
            note_kink(go_right)
            left, right = 2 * i + 1, 2 * i + 2
            visits[left], visits[right] = rows[~go_right], rows[go_right]
            at[visits[left]] = left
            at[visits[right]] = right
            feats[left] = self.crus[left](feats[i])
            feats[right] = self.crus[right](feats[i])

        out = TreeOutput(feats, compressed, phis, visits, at - cfg.n_internal)
        if heads:
            for leaf in range(cfg.n_leaves):
                rows = out.leaf_rows(leaf)
                if len(rows) == 0:
                    continue
                c, logits, m = self.sfls[leaf](F.gather(feats[leaf + cfg.n_internal], rows))
                out.codes[leaf], out.logits[leaf], out.masks[leaf] = c, logits, m
        return out

    def forward(self, image, mode: str = "eval") -> LeafOutput:
        """Route a single [H,W,6] image to its leaf."""
        if mode not in ("train", "eval"):
            raise UsageError(f"unknown mode {mode!r}")
        img = np.asarray(image.data if isinstance(image, Tensor) else image)
        if img.ndim != 3:
            raise DimensionError(f"expected an [H,W,C] image, got shape {img.shape}")
        with no_grad():
            out = self.forward_batch(img[None])
        leaf = int(out.leaf_of[0])
        path = [(n, float(out.phi[n][0])) for n in self.path_to_leaf(leaf)[:-1]]
        node = leaf + self.config.n_internal
        return LeafOutput(leaf, path, out.features[node].data[0], out.masks[leaf].data[0],
                          float(out.p_spoof()[0]))


def collect_visits(out: TreeOutput, labels, tree_data: str = "spoof") -> Dict[int, NodeBatch]:
    """Per-TRU visiting spoof rows and the rows whose responses are suppressed.

    With ``tree_data="spoof"`` the visiting set holds spoof rows that pass
    through the node and the suppressed set holds all live rows plus spoof
    rows routed elsewhere. ``tree_data="all"`` uses live and spoof rows alike.
    """
    labels = np.asarray(labels)
    B = len(labels)
    result = {}
    for node in out.compressed:
        visiting = np.zeros(B, dtype=bool)
        visiting[out.visits[node]] = True
        if tree_data == "spoof":
            spoof = np.flatnonzero(visiting & (labels == 1))
        elif tree_data == "all":
            spoof = np.flatnonzero(visiting)
        else:
            raise UsageError(f"unknown tree data mode {tree_data!r}")
        mask = np.ones(B, dtype=bool)
        mask[spoof] = False
        result[node] = NodeBatch(spoof, np.flatnonzero(mask))
    return result
