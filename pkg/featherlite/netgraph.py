"""Model graphs: construction, the dual-branch model, dense-to-conv surgery, freezing.

A :class:`ModelGraph` is an ordered list of named nodes. Every node consumes
graph inputs or earlier nodes, so the node order is a topological order and
cycles cannot be expressed.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

from featherlite.layers import (
    LAYER_TYPES,
    Concatenate,
    Conv2D,
    Conv2DParams,
    Dense,
    DenseParams,
    Dropout,
    Flatten,
    Layer,
    MaxPool2D,
)
from featherlite.tensor import (
    BYTES_PER_PARAM,
    ConfigurationError,
    RngStream,
    ShapeError,
)

logger = logging.getLogger(__name__)

NUM_CLASSES = 10
BRANCH_FILTERS = (10, 20)
KERNEL_SIZE = (3, 3)
POOL_SIZE = 2
HEAD_UNITS = 32
HEAD_DROPOUT = 0.5
BRANCH_PREFIXES = ("model1", "model2")


@dataclass
class Node:
    """One layer in a graph and the names of the values it consumes."""

    name: str
    layer: Layer
    inputs: tuple[str, ...]


class ModelGraph:
    """Directed acyclic graph of layers with named inputs and outputs."""

    def __init__(
        self,
        name: str,
        inputs: dict[str, tuple[int, ...]],
        nodes: Sequence[Node],
        outputs: dict[str, str],
    ):
        """Build and validate a graph.

        Args:
            name: Model name, recorded in checkpoints.
            inputs: Per-sample input shape keyed by input name, in call order.
            nodes: Layers in topological order.
            outputs: Output name mapped to the node producing it, in return order.

        Raises:
            ConfigurationError: On unknown references, duplicate names, or
                wrong input arity.
            ShapeError: If layer shapes do not chain.
        """
        self.name = name
        self.inputs = {key: tuple(int(d) for d in shape) for key, shape in inputs.items()}
        self.nodes = list(nodes)
        self.outputs = dict(outputs)
        self.shapes: dict[str, tuple[int, ...]] = dict(self.inputs)
        self._values: dict[str, np.ndarray] = {}
        self._validate()

    def _validate(self) -> None:
        if not self.inputs:
            raise ConfigurationError(f"{self.name}: graph needs at least one input")
        for node in self.nodes:
            if node.name in self.shapes:
                raise ConfigurationError(f"{self.name}: duplicate name '{node.name}'")
            missing = [ref for ref in node.inputs if ref not in self.shapes]
            if missing:
                raise ConfigurationError(
                    f"{self.name}: node '{node.name}' consumes undefined value(s) {missing}"
                )
            if len(node.inputs) != node.layer.n_inputs:
                raise ConfigurationError(
                    f"{self.name}: node '{node.name}' expects {node.layer.n_inputs} input(s), "
                    f"got {len(node.inputs)}"
                )
            node.layer.name = node.name
            self.shapes[node.name] = node.layer.output_shape(*(self.shapes[r] for r in node.inputs))
        node_names = {node.name for node in self.nodes}
        for out_name, ref in self.outputs.items():
            if ref not in node_names:
                raise ConfigurationError(f"{self.name}: output '{out_name}' refers to unknown node '{ref}'")

    # Introspection --------------------------------------------------------

    @property
    def input_names(self) -> list[str]:
        return list(self.inputs)

    @property
    def output_names(self) -> list[str]:
        return list(self.outputs)

    def node(self, name: str) -> Node:
        """Return the node called ``name``."""
        for node in self.nodes:
            if node.name == name:
                return node
        raise KeyError(f"{self.name}: no node named '{name}'")

    def parameterized_nodes(self) -> list[Node]:
        return [node for node in self.nodes if node.layer.parameters()]

    def iter_parameters(self) -> Iterator[tuple[str, str, np.ndarray]]:
        """Yield ``(node_name, param_name, array)`` in declared order."""
        for node in self.nodes:
            for key, value in node.layer.parameters().items():
                yield node.name, key, value

    def get_weights(self) -> list[np.ndarray]:
        """Copies of every parameter array in declared order."""
        return [value.copy() for _, _, value in self.iter_parameters()]

    def set_weights(self, weights: Sequence[np.ndarray]) -> None:
        """Replace every parameter array, in :meth:`iter_parameters` order."""
        slots = list(self.iter_parameters())
        if len(slots) != len(weights):
            raise ShapeError(f"{self.name}: expected {len(slots)} weight arrays, got {len(weights)}")
        for (node_name, key, _), value in zip(slots, weights, strict=True):
            self.node(node_name).layer.set_parameter(key, np.array(value, copy=True))

    def summary(self) -> list[str]:
        """One line per node: name, kind, output shape, parameter count."""
        lines = [f"{'Node':<22} {'Kind':<12} {'Output':<16} {'Params':>8}"]
        for node in self.nodes:
            lines.append(
                f"{node.name:<22} {node.layer.kind:<12} {str(self.shapes[node.name]):<16} "
                f"{node.layer.param_count():>8,}"
            )
        lines.append(f"Total params: {count_params(self)}")
        return lines

    # Computation ----------------------------------------------------------

    def forward(
        self, *xs: np.ndarray, training: bool = False, rng: RngStream | None = None
    ) -> list[np.ndarray]:
        """Run a batch through the graph.

        Args:
            *xs: One batch per graph input, ``[N, *input_shape]``.
            training: Enables dropout.
            rng: Stream for stochastic layers; each node draws from a child
                stream labelled with its name.

        Returns:
            Output batches in :attr:`outputs` order.
        """
        if len(xs) != len(self.inputs):
            raise ShapeError(f"{self.name}: expected {len(self.inputs)} input(s), got {len(xs)}")
        values: dict[str, np.ndarray] = {}
        for (in_name, shape), x in zip(self.inputs.items(), xs, strict=True):
            if tuple(x.shape[1:]) != shape:
                raise ShapeError(f"{self.name}: input '{in_name}' expects [N, *{shape}], got {x.shape}")
            values[in_name] = x
        for node in self.nodes:
            node_rng = rng.child(node.name) if rng is not None else None
            values[node.name] = node.layer.forward(
                *(values[ref] for ref in node.inputs), training=training, rng=node_rng
            )
        self._values = values
        return [values[ref] for ref in self.outputs.values()]

    def predict(self, *xs: np.ndarray) -> np.ndarray:
        """Inference-mode forward pass returning the first output."""
        return self.forward(*xs, training=False)[0]

    def requires_grad(self) -> dict[str, bool]:
        """Whether each node has trainable parameters at or upstream of it."""
        requires: dict[str, bool] = dict.fromkeys(self.inputs, False)
        for node in self.nodes:
            own = bool(node.layer.parameters()) and not node.layer.frozen
            requires[node.name] = own or any(requires[ref] for ref in node.inputs)
        return requires

    def backward(
        self, output_grads: Sequence[np.ndarray], *, from_logits: bool = True
    ) -> dict[str, dict[str, np.ndarray]]:
        """Back-propagate per-output gradients through the last forward pass.

        Args:
            output_grads: Gradient for each output, in :attr:`outputs` order.
            from_logits: Output gradients are w.r.t. the softmax logits (the
                combined softmax + cross-entropy gradient).

        Returns:
            Parameter gradients keyed by node name then parameter name. Frozen
            nodes are absent.
        """
        if len(output_grads) != len(self.outputs):
            raise ShapeError(f"{self.name}: expected {len(self.outputs)} output gradient(s)")
        requires = self.requires_grad()
        output_nodes = set(self.outputs.values())
        pending: dict[str, np.ndarray] = {}
        for ref, grad in zip(self.outputs.values(), output_grads, strict=True):
            pending[ref] = pending[ref] + grad if ref in pending else grad
        param_grads: dict[str, dict[str, np.ndarray]] = {}
        for node in reversed(self.nodes):
            if not requires[node.name] or node.name not in pending:
                continue
            need_inputs = any(requires[ref] for ref in node.inputs)
            result = node.layer.backward(
                pending.pop(node.name),
                need_input_grads=need_inputs,
                from_logits=from_logits and node.name in output_nodes,
            )
            if result.param_grads:
                param_grads[node.name] = result.param_grads
            if not need_inputs:
                continue
            for ref, grad in zip(node.inputs, result.input_grads, strict=True):
                if grad is None or not requires[ref]:
                    continue
                pending[ref] = pending[ref] + grad if ref in pending else grad
        return param_grads

    def first_nonfinite(self) -> str | None:
        """Name of the first value in the last forward pass holding NaN/Inf."""
        for name, value in self._values.items():
            if not np.all(np.isfinite(value)):
                return name
        return None

    # Copying --------------------------------------------------------------

    def copy(self, name: str | None = None) -> ModelGraph:
        """Deep copy: fresh layers, copied weights and freeze flags, no caches."""
        nodes = []
        for node in self.nodes:
            layer = LAYER_TYPES[node.layer.kind].from_config(node.name, node.layer.config())
            for key, value in node.layer.parameters().items():
                layer.set_parameter(key, value.copy())
            layer.frozen = node.layer.frozen
            nodes.append(Node(node.name, layer, node.inputs))
        return ModelGraph(name or self.name, self.inputs, nodes, self.outputs)

    def astype(self, dtype: np.dtype | type) -> ModelGraph:
        """Cast all parameters in place (float64 for gradient checks)."""
        for node in self.nodes:
            node.layer.astype(dtype)
        return self

    def __repr__(self) -> str:
        return f"ModelGraph(name={self.name!r}, nodes={len(self.nodes)}, outputs={self.output_names})"


# Parameter audit ----------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ParamCount:
    """Parameter count with its 32-bit storage size."""

    count: int

    @property
    def bytes(self) -> int:
        return self.count * BYTES_PER_PARAM

    @property
    def kilobytes(self) -> float:
        return self.bytes / 1024.0

    def __str__(self) -> str:
        return f"{self.count:,} ({self.kilobytes:.2f} KB)"


def count_params(graph: ModelGraph, trainable_only: bool = False) -> ParamCount:
    """Count parameters, optionally only those not frozen."""
    total = 0
    for node in graph.nodes:
        if trainable_only and node.layer.frozen:
            continue
        total += node.layer.param_count()
    return ParamCount(total)


# Freezing -----------------------------------------------------------------


@dataclass
class FreezeMask:
    """Trainability flag for each parameterized node."""

    trainable: dict[str, bool] = field(default_factory=dict)

    @classmethod
    def all_trainable(cls, graph: ModelGraph) -> FreezeMask:
        return cls({node.name: True for node in graph.parameterized_nodes()})

    @classmethod
    def all_frozen(cls, graph: ModelGraph) -> FreezeMask:
        return cls({node.name: False for node in graph.parameterized_nodes()})

    @classmethod
    def head_only(cls, graph: ModelGraph, n_last: int = 2) -> FreezeMask:
        """Freeze everything except the last ``n_last`` dense layers."""
        dense_nodes = [n.name for n in graph.parameterized_nodes() if n.layer.kind == Dense.kind]
        keep = set(dense_nodes[-n_last:]) if n_last > 0 else set()
        return cls({node.name: node.name in keep for node in graph.parameterized_nodes()})

    @classmethod
    def from_graph(cls, graph: ModelGraph) -> FreezeMask:
        return cls({node.name: not node.layer.frozen for node in graph.parameterized_nodes()})


def set_freeze(graph: ModelGraph, mask: FreezeMask) -> ModelGraph:
    """Apply ``mask`` to ``graph`` in place and return it.

    Raises:
        ConfigurationError: If the mask misses a parameterized node or names
            an unknown one.
    """
    expected = {node.name for node in graph.parameterized_nodes()}
    missing = expected - set(mask.trainable)
    unknown = set(mask.trainable) - expected
    if missing or unknown:
        raise ConfigurationError(
            f"freeze mask mismatch for {graph.name}: missing={sorted(missing)} unknown={sorted(unknown)}"
        )
    for node in graph.parameterized_nodes():
        node.layer.frozen = not mask.trainable[node.name]
    logger.debug(
        "Freeze mask applied to %s: %s trainable parameters",
        graph.name,
        count_params(graph, trainable_only=True),
    )
    return graph


# Builders -----------------------------------------------------------------


def _check_branch_input(input_shape: Sequence[int]) -> tuple[int, int, int]:
    if len(input_shape) != 3:
        raise ShapeError(f"branch input must be [H, W, C], got {tuple(input_shape)}")
    height, width, channels = (int(d) for d in input_shape)
    kh, kw = KERNEL_SIZE
    for size, k in ((height, kh), (width, kw)):
        after_first = (size - k + 1) // POOL_SIZE
        if size - k + 1 < POOL_SIZE or after_first - k + 1 < POOL_SIZE:
            raise ShapeError(
                f"input {height}x{width} is too small for two valid {kh}x{kw} convolutions "
                f"each followed by {POOL_SIZE}x{POOL_SIZE} pooling"
            )
    if channels < 1:
        raise ShapeError(f"input needs at least one channel, got {channels}")
    return height, width, channels


def _feature_nodes(
    prefix: str, input_name: str, channels: int, seed: int
) -> list[Node]:
    """conv(10) -> pool -> conv(20) -> pool for one branch."""
    first, second = BRANCH_FILTERS
    return [
        Node(
            f"{prefix}/conv1",
            Conv2D.create(channels, first, KERNEL_SIZE, RngStream(seed, f"init/{prefix}/conv1")),
            (input_name,),
        ),
        Node(f"{prefix}/pool1", MaxPool2D(POOL_SIZE), (f"{prefix}/conv1",)),
        Node(
            f"{prefix}/conv2",
            Conv2D.create(first, second, KERNEL_SIZE, RngStream(seed, f"init/{prefix}/conv2")),
            (f"{prefix}/pool1",),
        ),
        Node(f"{prefix}/pool2", MaxPool2D(POOL_SIZE), (f"{prefix}/conv2",)),
    ]


def _branch_nodes(
    prefix: str, input_name: str, input_shape: Sequence[int], seed: int
) -> list[Node]:
    height, width, channels = _check_branch_input(input_shape)
    nodes = _feature_nodes(prefix, input_name, channels, seed)
    features = height, width, channels
    for node in nodes:
        features = node.layer.output_shape(features)
    flat = int(np.prod(features))
    nodes.append(Node(f"{prefix}/flatten", Flatten(), (f"{prefix}/pool2",)))
    nodes.append(
        Node(
            f"{prefix}/dense",
            Dense.create(
                flat, NUM_CLASSES, RngStream(seed, f"init/{prefix}/dense"), activation="softmax"
            ),
            (f"{prefix}/flatten",),
        )
    )
    return nodes


def build_branch(input_shape: Sequence[int], *, seed: int = 0, prefix: str = "model1") -> ModelGraph:
    """Build one classifier branch.

    ``Conv(10, 3x3, valid, relu) -> MaxPool -> Conv(20, 3x3, valid, relu) ->
    MaxPool -> Flatten -> Dense(10, softmax)``, He-initialized.

    Raises:
        ShapeError: If the input is too small for the two conv/pool stages.
    """
    nodes = _branch_nodes(prefix, "input", input_shape, seed)
    return ModelGraph(prefix, {"input": tuple(input_shape)}, nodes, {prefix: f"{prefix}/dense"})


def build_dual_model(input_shape: Sequence[int], *, seed: int = 0) -> ModelGraph:
    """Two independently initialized branches with separate inputs and outputs.

    Inputs are ``input1`` (original data) and ``input2`` (augmented data);
    outputs are ``model1`` and ``model2``.
    """
    nodes: list[Node] = []
    outputs: dict[str, str] = {}
    inputs: dict[str, tuple[int, ...]] = {}
    for index, prefix in enumerate(BRANCH_PREFIXES, start=1):
        input_name = f"input{index}"
        inputs[input_name] = tuple(input_shape)
        nodes.extend(_branch_nodes(prefix, input_name, input_shape, seed))
        outputs[prefix] = f"{prefix}/dense"
    graph = ModelGraph("dual", inputs, nodes, outputs)
    logger.debug("Built dual model for %s: %s parameters", tuple(input_shape), count_params(graph))
    return graph


def extract_branch(graph: ModelGraph, prefix: str) -> ModelGraph:
    """Copy one branch of a dual model into a standalone single-input graph."""
    names = [node.name for node in graph.nodes if node.name.startswith(f"{prefix}/")]
    if not names:
        raise ConfigurationError(f"{graph.name} has no branch '{prefix}'")
    source = graph.copy()
    first = source.node(names[0])
    input_shape = source.shapes[first.inputs[0]]
    nodes = []
    for name in names:
        node = source.node(name)
        refs = tuple("input" if ref in source.inputs else ref for ref in node.inputs)
        nodes.append(Node(name, node.layer, refs))
    return ModelGraph(prefix, {"input": input_shape}, nodes, {prefix: names[-1]})


def dense_to_conv(dense: DenseParams, feature_shape: Sequence[int]) -> Conv2DParams:
    """Convert a dense head into an equivalent full-extent convolution.

    The kernel spans the whole ``[H, W, C]`` feature map (valid padding,
    stride 1), so it produces a ``1x1xout`` map whose flattened value equals
    the dense output. ``kernel[h, w, c, f] = weights[flatten_index(h, w, c), f]``;
    bias and activation are carried over.

    Raises:
        ShapeError: If ``dense.in != H*W*C``.
    """
    height, width, channels = (int(d) for d in feature_shape)
    if dense.units_in != height * width * channels:
        raise ShapeError(
            f"dense layer has {dense.units_in} inputs, feature map {height}x{width}x{channels} "
            f"has {height * width * channels}"
        )
    kernels = dense.weights.reshape(height, width, channels, dense.units_out).copy()
    return Conv2DParams(
        kernels=kernels,
        bias=dense.bias.copy(),
        padding="valid",
        stride=(1, 1),
        activation=dense.activation,
    )


def build_final_model(
    dual_checkpoints: Sequence[ModelGraph], input_shape: Sequence[int], *, seed: int = 0
) -> ModelGraph:
    """Fuse two trained branches into a single-input classifier.

    Branch ``model1`` is taken from ``dual_checkpoints[0]`` and ``model2``
    from ``dual_checkpoints[1]`` (each may be a full dual model or a single
    extracted branch). Their dense heads are converted with
    :func:`dense_to_conv`; the two ``1x1x10`` maps are concatenated,
    flattened and fed to ``Dense(32, relu) -> Dropout(0.5) -> Dense(10, softmax)``.
    The new head layers are freshly He-initialized.

    Raises:
        ConfigurationError: If a checkpoint lacks the expected branch nodes.
        ShapeError: If a checkpoint was built for a different input shape.
    """
    if len(dual_checkpoints) != len(BRANCH_PREFIXES):
        raise ConfigurationError(f"expected {len(BRANCH_PREFIXES)} checkpoints, got {len(dual_checkpoints)}")
    input_shape = tuple(int(d) for d in input_shape)
    _check_branch_input(input_shape)
    nodes: list[Node] = []
    heads: list[str] = []
    for prefix, source in zip(BRANCH_PREFIXES, dual_checkpoints, strict=True):
        try:
            conv1 = source.node(f"{prefix}/conv1")
            pool2 = source.node(f"{prefix}/pool2")
            head = source.node(f"{prefix}/dense")
        except KeyError as exc:
            raise ConfigurationError(f"checkpoint '{source.name}' lacks branch '{prefix}': {exc}") from exc
        source_shape = source.shapes[conv1.inputs[0]]
        if source_shape != input_shape:
            raise ShapeError(
                f"checkpoint '{source.name}' branch '{prefix}' was built for {source_shape}, "
                f"not {input_shape}"
            )
        copied = source.copy()
        for suffix in ("conv1", "pool1", "conv2", "pool2"):
            node = copied.node(f"{prefix}/{suffix}")
            refs = tuple("input" if ref in copied.inputs else ref for ref in node.inputs)
            node.layer.frozen = False
            nodes.append(Node(node.name, node.layer, refs))
        head_params = copied.node(head.name).layer.params  # type: ignore[attr-defined]
        converted = Conv2D(dense_to_conv(head_params, source.shapes[pool2.name]))
        nodes.append(Node(f"{prefix}/head_conv", converted, (f"{prefix}/pool2",)))
        heads.append(f"{prefix}/head_conv")

    merged = len(BRANCH_PREFIXES) * NUM_CLASSES
    nodes.extend(
        [
            Node("concat", Concatenate(), tuple(heads)),
            Node("flatten", Flatten(), ("concat",)),
            Node(
                "dense32",
                Dense.create(merged, HEAD_UNITS, RngStream(seed, "init/final/dense32"), activation="relu"),
                ("flatten",),
            ),
            Node("dropout", Dropout(HEAD_DROPOUT), ("dense32",)),
            Node(
                "output",
                Dense.create(
                    HEAD_UNITS, NUM_CLASSES, RngStream(seed, "init/final/output"), activation="softmax"
                ),
                ("dropout",),
            ),
        ]
    )
    graph = ModelGraph("final", {"input": input_shape}, nodes, {"output": "output"})
    logger.info("Built final model for %s: %s parameters", input_shape, count_params(graph))
    return graph
