"""Micro-scale residual / dense-block networks as explicit layer DAGs.

A ``ModelGraph`` is a topologically ordered list of ``Node`` records plus a
table of named parameters. The classification head is a tagged suffix of
the node list, so it can be detached, replaced or re-initialised without
touching the convolutional base.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import Tensor

INPUT = "input"


@dataclass(frozen=True)
class Task:
    kind: str = "none"  # "none" | "binary" | "multiclass"
    k: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "binary", "multiclass"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind == "multiclass" and self.k < 2:
            raise ConfigError(f"multiclass task needs k >= 2, got {self.k}")

    @property
    def units(self) -> int:
        if self.kind == "binary":
            return 1
        if self.kind == "multiclass":
            return self.k
        raise ConfigError("task 'none' has no output units")

    def __str__(self) -> str:
        return f"multiclass({self.k})" if self.kind == "multiclass" else self.kind

    @classmethod
    def parse(cls, text: "str | Task") -> "Task":
        if isinstance(text, Task):
            return text
        text = str(text).strip()
        if text in ("none", "binary"):
            return cls(text)
        m = re.fullmatch(r"multiclass\((\d+)\)", text)
        if m:
            return cls("multiclass", int(m.group(1)))
        raise ConfigError(f"unknown task {text!r} (expected binary, multiclass(k) or none)")


BINARY = Task("binary")
NO_TASK = Task("none")


def multiclass(k: int) -> Task:
    return Task("multiclass", k)


@dataclass
class ArchitectureSpec:
    family: str = "residual"
    stem_channels: int = 8
    blocks_per_stage: list[int] = field(default_factory=lambda: [1])
    growth_or_width: int = 8
    compression_theta: float = 0.5
    input_shape: tuple[int, int, int] = (1, 32, 32)

    def validate(self) -> None:
        if self.family not in ("residual", "dense_block"):
            raise ConfigError(f"architecture.family must be residual or dense_block, got {self.family!r}")
        if self.stem_channels < 1 or self.growth_or_width < 1:
            raise ConfigError("stem_channels and growth_or_width must be positive")
        if not self.blocks_per_stage or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError(f"every stage needs >= 1 block, got {self.blocks_per_stage}")
        if self.family == "dense_block" and not (0.0 < self.compression_theta <= 1.0):
            raise ConfigError(f"compression_theta must be in (0, 1], got {self.compression_theta}")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"input_shape must be three positive ints (C, H, W), got {self.input_shape}")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "stem_channels": self.stem_channels,
            "blocks_per_stage": list(self.blocks_per_stage),
            "growth_or_width": self.growth_or_width,
            "compression_theta": self.compression_theta,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureSpec":
        spec = cls(
            family=d["family"],
            stem_channels=int(d["stem_channels"]),
            blocks_per_stage=[int(b) for b in d["blocks_per_stage"]],
            growth_or_width=int(d["growth_or_width"]),
            compression_theta=float(d.get("compression_theta", 0.5)),
            input_shape=tuple(int(v) for v in d["input_shape"]),
        )
        spec.validate()
        return spec


@dataclass
class FreezePolicy:
    fraction_shallowest_frozen: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.fraction_shallowest_frozen <= 1.0:
            raise ConfigError(f"freeze fraction must be in [0, 1], got {self.fraction_shallowest_frozen}")


@dataclass
class Node:
    name: str
    kind: str
    inputs: list[str]
    attrs: dict[str, Any] = field(default_factory=dict)
    params: list[str] = field(default_factory=list)
    head: bool = False

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "inputs": list(self.inputs),
                "attrs": dict(self.attrs), "params": list(self.params), "head": self.head}


@dataclass
class Parameter:
    value: np.ndarray
    node: str
    trainable: bool = True
    head: bool = False


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class ModelGraph:
    def __init__(self, spec: ArchitectureSpec):
        self.spec = spec
        self.nodes: list[Node] = [Node(INPUT, "input", [])]
        self.params: dict[str, Parameter] = {}
        self.conv_layer_order: list[str] = []
        self.task: Task = NO_TASK
        self.head_config: dict[str, Any] = {}

    # -- construction helpers -------------------------------------------------

    def _add(self, node: Node) -> str:
        if any(n.name == node.name for n in self.nodes):
            raise ConfigError(f"duplicate node name {node.name!r}")
        self.nodes.append(node)
        return node.name

    def _add_conv(self, name, inp, cin, cout, k, stride, pad, rng, head=False) -> str:
        w, b = f"{name}.weight", f"{name}.bias"
        self.params[w] = Parameter(he_normal(rng, (cout, cin, k, k), cin * k * k), name, head=head)
        self.params[b] = Parameter(np.zeros(cout, np.float32), name, head=head)
        self.conv_layer_order.append(name)
        return self._add(Node(name, "conv", [inp], {"stride": stride, "padding": pad}, [w, b], head))

    def _add_dense(self, name, inp, fin, units, rng, head=True) -> str:
        w, b = f"{name}.weight", f"{name}.bias"
        self.params[w] = Parameter(he_normal(rng, (fin, units), fin), name, head=head)
        self.params[b] = Parameter(np.zeros(units, np.float32), name, head=head)
        return self._add(Node(name, "dense", [inp], {}, [w, b], head))

    def _add_op(self, name, kind, inputs, head=False, **attrs) -> str:
        return self._add(Node(name, kind, list(inputs), attrs, [], head))

    # -- queries ----------------------------------------------------------------

    @property
    def output_name(self) -> str:
        return self.nodes[-1].name

    @property
    def base_output_name(self) -> str:
        return [n for n in self.nodes if not n.head][-1].name

    @property
    def has_head(self) -> bool:
        return any(n.head for n in self.nodes)

    def head_param_names(self) -> list[str]:
        return [k for k, p in self.params.items() if p.head]

    def base_param_names(self) -> list[str]:
        return [k for k, p in self.params.items() if not p.head]

    def trainable_names(self) -> list[str]:
        return [k for k, p in self.params.items() if p.trainable]

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelGraph":
        g = self.copy()
        for p in g.params.values():
            p.value = p.value.astype(dtype)
        return g

    # -- execution --------------------------------------------------------------

    def forward(
        self,
        x,
        train: bool = False,
        rng: np.random.Generator | None = None,
        params: Mapping[str, Tensor] | None = None,
        until: str | None = None,
        keep: bool = False,
    ):
        """Run the graph. ``params`` overrides parameter tensors by name (used
        for gradient tracking); ``until`` stops at a named node; ``keep``
        returns every activation keyed by node name."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError(f"graph expects input (N, {', '.join(map(str, self.spec.input_shape))}), got {x.shape}")

        def P(name: str) -> Tensor:
            if params is not None and name in params:
                return params[name]
            return Tensor(self.params[name].value)

        acts: dict[str, Tensor] = {}
        for node in self.nodes:
            ins = [acts[i] for i in node.inputs]
            a = node.attrs
            kind = node.kind
            if kind == "input":
                out = x
            elif kind == "conv":
                out = ops.conv2d(ins[0], P(node.params[0]), P(node.params[1]), a["stride"], a["padding"])
            elif kind == "dense":
                out = ops.dense(ins[0], P(node.params[0]), P(node.params[1]))
            elif kind == "relu":
                out = ops.relu(ins[0])
            elif kind == "add":
                out = ops.residual_add(ins[0], ins[1])
            elif kind == "concat":
                out = ops.concat_channels(ins)
            elif kind == "avgpool":
                out = ops.pool_avg2d(ins[0], a["window"], a["stride"])
            elif kind == "gap":
                out = ops.pool_global_avg(ins[0])
            elif kind == "flatten":
                out = ops.flatten(ins[0])
            elif kind == "dropout":
                out = ops.dropout(ins[0], a["rate"], rng, train)
            elif kind == "sigmoid":
                out = ops.sigmoid(ins[0])
            elif kind == "softmax":
                out = ops.softmax(ins[0])
            else:
                raise ConfigError(f"unknown node kind {kind!r}")
            acts[node.name] = out
            if node.name == until:
                break
        if keep:
            return acts
        return acts[until] if until is not None else acts[self.output_name]

    def base_output_shape(self) -> tuple[int, ...]:
        probe = np.zeros((1, *self.spec.input_shape), np.float32)
        return self.forward(probe, until=self.base_output_name).shape[1:]

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode output probabilities, batched."""
        if not self.has_head:
            raise ConfigError("predict() needs a classification head")
        outs = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    # -- serialisation ------------------------------------------------------------

    def to_spec(self) -> dict:
        return {
            "format": "mstl.graph/1",
            "architecture": self.spec.to_dict(),
            "task": str(self.task),
            "head_config": dict(self.head_config),
            "nodes": [n.to_dict() for n in self.nodes],
            "params": [
                {"name": k, "shape": list(p.value.shape), "node": p.node,
                 "trainable": p.trainable, "head": p.head}
                for k, p in self.params.items()
            ],
            "conv_layer_order": list(self.conv_layer_order),
        }

    @classmethod
    def from_spec(cls, spec: Mapping, arrays: Mapping[str, np.ndarray]) -> "ModelGraph":
        g = cls(ArchitectureSpec.from_dict(spec["architecture"]))
        g.nodes = [Node(d["name"], d["kind"], list(d["inputs"]), dict(d["attrs"]), list(d["params"]), bool(d["head"]))
                   for d in spec["nodes"]]
        for d in spec["params"]:
            arr = np.asarray(arrays[d["name"]], dtype=np.float32).reshape(d["shape"])
            g.params[d["name"]] = Parameter(arr, d["node"], bool(d["trainable"]), bool(d["head"]))
        g.conv_layer_order = list(spec["conv_layer_order"])
        g.task = Task.parse(spec["task"])
        g.head_config = dict(spec["head_config"])
        return g


# -- builders -----------------------------------------------------------------


def build_micro_resnet(spec: ArchitectureSpec, seed: int = 0) -> ModelGraph:
    """Pre-activation residual network without a head.

    Stage ``s`` has ``growth_or_width * 2**s`` channels; the first block of
    every stage after the first downsamples with stride 2. Skips are identity
    unless the shape changes, then a 1×1 projection of the pre-activated input.
    """
    spec.validate()
    if spec.family != "residual":
        raise ConfigError(f"build_micro_resnet needs family 'residual', got {spec.family!r}")
    rng = np.random.default_rng(seed)
    g = ModelGraph(spec)
    cin = spec.input_shape[0]
    cur = g._add_conv("stem.conv", INPUT, cin, spec.stem_channels, 3, 1, 1, rng)
    ch = spec.stem_channels
    for s, nblocks in enumerate(spec.blocks_per_stage):
        width = spec.growth_or_width * 2 ** s
        for b in range(nblocks):
            stride = 2 if (s > 0 and b == 0) else 1
            pre = f"stage{s + 1}.block{b + 1}"
            r1 = g._add_op(f"{pre}.relu1", "relu", [cur])
            c1 = g._add_conv(f"{pre}.conv1", r1, ch, width, 3, stride, 1, rng)
            if stride != 1 or ch != width:
                skip = g._add_conv(f"{pre}.proj", r1, ch, width, 1, stride, 0, rng)
            else:
                skip = cur
            r2 = g._add_op(f"{pre}.relu2", "relu", [c1])
            c2 = g._add_conv(f"{pre}.conv2", r2, width, width, 3, 1, 1, rng)
            cur = g._add_op(f"{pre}.add", "add", [skip, c2])
            ch = width
    g._add_op("post.relu", "relu", [cur])
    return g


def build_micro_densenet(spec: ArchitectureSpec, seed: int = 0) -> ModelGraph:
    """Dense-block network without a head.

    Inside a block, layer ``n`` sees the channel-concat of the block input
    and all earlier layer outputs and adds ``growth_or_width`` channels.
    Between blocks a transition (relu, 1×1 conv to floor(theta·C), 2×2 avg
    pool) compresses the feature maps.
    """
    spec.validate()
    if spec.family != "dense_block":
        raise ConfigError(f"build_micro_densenet needs family 'dense_block', got {spec.family!r}")
    rng = np.random.default_rng(seed)
    g = ModelGraph(spec)
    cur = g._add_conv("stem.conv", INPUT, spec.input_shape[0], spec.stem_channels, 3, 1, 1, rng)
    ch = spec.stem_channels
    h, w = spec.input_shape[1:]
    growth = spec.growth_or_width
    last = len(spec.blocks_per_stage) - 1
    for s, nlayers in enumerate(spec.blocks_per_stage):
        pre = f"dense{s + 1}"
        feats = [cur]
        for layer in range(nlayers):
            inp = feats[0] if len(feats) == 1 else g._add_op(f"{pre}.layer{layer + 1}.concat", "concat", feats)
            r = g._add_op(f"{pre}.layer{layer + 1}.relu", "relu", [inp])
            c = g._add_conv(f"{pre}.layer{layer + 1}.conv", r, ch + layer * growth, growth, 3, 1, 1, rng)
            feats.append(c)
        cur = g._add_op(f"{pre}.out", "concat", feats)
        ch = ch + nlayers * growth
        if s < last:
            reduced = int(np.floor(spec.compression_theta * ch))
            if reduced < 1:
                raise ConfigError(f"transition after block {s + 1} would keep 0 channels (theta={spec.compression_theta}, C={ch})")
            if h < 2 or w < 2:
                raise ConfigError(f"transition after block {s + 1} cannot pool spatial size {h}x{w}")
            t = f"trans{s + 1}"
            r = g._add_op(f"{t}.relu", "relu", [cur])
            c = g._add_conv(f"{t}.conv", r, ch, reduced, 1, 1, 0, rng)
            cur = g._add_op(f"{t}.pool", "avgpool", [c], window=2, stride=2)
            ch = reduced
            h, w = h // 2, w // 2
    g._add_op("post.relu", "relu", [cur])
    return g


def build_model(spec: ArchitectureSpec, seed: int = 0) -> ModelGraph:
    if spec.family == "residual":
        return build_micro_resnet(spec, seed)
    return build_micro_densenet(spec, seed)


# -- heads ----------------------------------------------------------------------


def detach_head(graph: ModelGraph) -> ModelGraph:
    graph.nodes = [n for n in graph.nodes if not n.head]
    graph.params = {k: p for k, p in graph.params.items() if not p.head}
    graph.task = NO_TASK
    graph.head_config = {}
    return graph


def _append_output(graph: ModelGraph, inp: str, fin: int, task: Task, dropout: float, rng) -> None:
    if dropout > 0.0:
        inp = graph._add_op("head.dropout", "dropout", [inp], head=True, rate=float(dropout))
    out = graph._add_dense("head.out", inp, fin, task.units, rng)
    graph._add_op("head.act", "sigmoid" if task.kind == "binary" else "softmax", [out], head=True)


def attach_head(
    graph: ModelGraph,
    task,
    hidden_units: int = 64,
    dropout: float = 0.0,
    seed: int = 0,
    pool_window: int = 2,
) -> ModelGraph:
    """Replace any existing head with a freshly initialised one for ``task``.

    residual: avg-pool → flatten → dense(hidden) → relu → [dropout] → output.
    dense_block: global-avg-pool → dense(hidden) → relu → [dropout] → output.
    Binary ends in sigmoid over one unit, multiclass(k) in softmax over k.
    """
    task = Task.parse(task)
    if task.kind == "none":
        raise ConfigError("attach_head: task 'none' has no head")
    if not 0.0 <= dropout < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {dropout}")
    if hidden_units < 1:
        raise ConfigError("hidden_units must be positive")
    detach_head(graph)
    rng = np.random.default_rng(seed)
    base = graph.base_output_name
    c, h, w = graph.base_output_shape()
    if graph.spec.family == "residual":
        win = max(1, min(pool_window, h, w))
        pooled = graph._add_op("head.pool", "avgpool", [base], head=True, window=win, stride=win)
        flat = graph._add_op("head.flatten", "flatten", [pooled], head=True)
        fin = c * ((h - win) // win + 1) * ((w - win) // win + 1)
    else:
        flat = graph._add_op("head.pool", "gap", [base], head=True)
        fin = c
    hid = graph._add_dense("head.hidden", flat, fin, hidden_units, rng)
    act = graph._add_op("head.hidden_relu", "relu", [hid], head=True)
    _append_output(graph, act, hidden_units, task, dropout, rng)
    graph.task = task
    graph.head_config = {"hidden_units": hidden_units, "dropout": float(dropout), "pool_window": pool_window}
    return graph


def adapt_task(graph: ModelGraph, from_task, to_task, dropout: float | None = None, seed: int = 0) -> ModelGraph:
    """Swap the output layer and activation for ``to_task``, keeping the
    pooling and hidden layers. A no-op when task and dropout are unchanged."""
    from_task, to_task = Task.parse(from_task), Task.parse(to_task)
    if graph.task != from_task:
        raise ConfigError(f"adapt_task: graph head is {graph.task}, not {from_task}")
    if to_task.kind == "none":
        raise ConfigError("adapt_task: cannot adapt to task 'none'")
    rate = graph.head_config.get("dropout", 0.0) if dropout is None else float(dropout)
    if from_task == to_task and rate == graph.head_config.get("dropout", 0.0):
        return graph
    drop_names = {"head.dropout", "head.out", "head.act"}
    graph.nodes = [n for n in graph.nodes if n.name not in drop_names]
    graph.params = {k: p for k, p in graph.params.items() if p.node not in drop_names}
    hidden = graph.head_config["hidden_units"]
    _append_output(graph, "head.hidden_relu", hidden, to_task, rate, np.random.default_rng(seed))
    graph.task = to_task
    graph.head_config["dropout"] = rate
    return graph


def reinit_head(graph: ModelGraph, seed: int) -> ModelGraph:
    """Resample every head parameter (weights He-normal, biases zero)."""
    names = graph.head_param_names()
    if not names:
        raise ConfigError("reinit_head: graph has no head")
    rng = np.random.default_rng(seed)
    for name in names:
        p = graph.params[name]
        if name.endswith(".bias"):
            p.value = np.zeros_like(p.value)
        else:
            p.value = he_normal(rng, p.value.shape, p.value.shape[0])
    return graph


# -- parameters -------------------------------------------------------------------


def count_params(graph: ModelGraph) -> dict[str, int]:
    total = trainable = 0
    for p in graph.params.values():
        total += p.value.size
        if p.trainable:
            trainable += p.value.size
    return {"total": total, "trainable": trainable, "frozen": total - trainable}


def apply_freeze(graph: ModelGraph, policy: FreezePolicy) -> ModelGraph:
    """Freeze the shallowest floor(fraction · n_conv) conv layers; everything
    else (deeper convs and the head) becomes trainable."""
    if not graph.conv_layer_order:
        raise ConfigError("apply_freeze: graph has no conv layers")
    n_frozen = int(np.floor(policy.fraction_shallowest_frozen * len(graph.conv_layer_order)))
    frozen = set(graph.conv_layer_order[:n_frozen])
    for p in graph.params.values():
        p.trainable = p.node not in frozen
    return graph
