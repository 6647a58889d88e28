"""Double precision tensors, layers, gradients and optimizers on top of ``torch``.

Models in microfed are not ``nn.Module`` objects: their weights live in a :class:`ParamSet` (an ordered,
immutable name -> tensor mapping, the unit that clients and the server exchange) and their forward pass is a
program of :func:`forward_layer` calls. A :class:`ComputeGraph` records that program so that :func:`backward`
can differentiate it with ``torch.autograd`` and :func:`finite_diff_check` can verify the result numerically.
"""
import math
import struct
import collections.abc
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from pathlib import Path

DTYPE = torch.float64

CHECKPOINT_MAGIC = b"FGPS"
CHECKPOINT_VERSION = 1

LAYER_KINDS = ("conv2d", "leaky_relu", "relu", "sigmoid", "upsample", "maxpool", "avgpool", "concat", "softmax")

torch.use_deterministic_algorithms(True)


class ShapeError(ValueError):
    """Input of a layer does not agree with the layer kind or its parameters."""


class IncompatibleParamsError(ValueError):
    """Two ParamSets differ in names, order or shapes."""


class CheckpointFormatError(ValueError):
    """A checkpoint byte stream cannot be decoded."""


class TrainingDivergenceError(RuntimeError):
    """A loss became non-finite.

    Args:
        message (str): What diverged.
        coordinates (dict): Where it happened, e.g. ``{"client": "iron", "round": 3, "epoch": 0, "batch": 7}``.
    """

    def __init__(self, message: str, coordinates: Optional[Mapping[str, object]] = None):
        self.reason = message
        self.coordinates = dict(coordinates or {})
        where = ", ".join(f"{key}={value}" for key, value in self.coordinates.items())
        super().__init__(f"{message} ({where})" if where else message)

    def __reduce__(self):
        return self.__class__, (self.reason, self.coordinates)

    def extend(self, **coordinates) -> "TrainingDivergenceError":
        """Return a copy of the error with outer coordinates prepended."""
        merged = dict(coordinates)
        merged.update(self.coordinates)
        return TrainingDivergenceError(self.reason, merged)


class ParamSet(collections.abc.Mapping):
    """Ordered collection of named float64 tensors.

    Entries are copied on construction and never modified afterwards; every arithmetic helper returns a new
    ParamSet. Two ParamSets are compatible when names, order and shapes all match.

    Args:
        entries (iterable or mapping): ``(name, tensor)`` pairs in the order to keep.
    """

    def __init__(self, entries: Union[Iterable[Tuple[str, torch.Tensor]], Mapping[str, torch.Tensor]] = ()):
        if isinstance(entries, collections.abc.Mapping):
            entries = entries.items()
        self._entries: Dict[str, torch.Tensor] = collections.OrderedDict()
        for name, tensor in entries:
            if name in self._entries:
                raise ValueError(f"Duplicate parameter name '{name}'.")
            self._entries[name] = torch.as_tensor(tensor, dtype=DTYPE).detach().clone()

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other):
        return isinstance(other, ParamSet) and self.equal(other)

    __hash__ = None

    def __repr__(self):
        return f"ParamSet({len(self)} entries, {self.total_count} values)"

    @property
    def names(self) -> List[str]:
        return list(self._entries)

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [tuple(t.shape) for t in self._entries.values()]

    @property
    def total_count(self) -> int:
        return int(sum(t.numel() for t in self._entries.values()))

    def is_compatible(self, other: "ParamSet") -> bool:
        return self.names == list(other.keys()) and self.shapes == [tuple(other[n].shape) for n in other]

    def check_compatible(self, other: "ParamSet", context: str = "ParamSet"):
        if not self.is_compatible(other):
            raise IncompatibleParamsError(f"{context}: incompatible ParamSets "
                                          f"({list(zip(self.names, self.shapes))} vs "
                                          f"{[(n, tuple(other[n].shape)) for n in other]}).")

    def map(self, fn: Callable[[str, torch.Tensor], torch.Tensor]) -> "ParamSet":
        return ParamSet((name, fn(name, tensor)) for name, tensor in self._entries.items())

    def zeros_like(self) -> "ParamSet":
        return self.map(lambda _, t: torch.zeros_like(t))

    def subset(self, prefix: str) -> "ParamSet":
        """Entries whose name starts with ``prefix + '.'``, names kept whole."""
        return ParamSet((n, t) for n, t in self._entries.items() if n.startswith(prefix + "."))

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality (names, order, shapes and every value)."""
        return self.is_compatible(other) and all(torch.equal(self[n], other[n]) for n in self.names)

    def max_abs_diff(self, other: "ParamSet") -> float:
        self.check_compatible(other, "max_abs_diff")
        return max((float((self[n] - other[n]).abs().max()) for n in self.names if self[n].numel()), default=0.0)

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self._entries.values())

    def to_vector(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in self._entries.values()]) if len(self) else torch.zeros(0,
                                                                                                          dtype=DTYPE)

    def to_bytes(self) -> bytes:
        """Serialize to the FGPS checkpoint container."""
        chunks = [CHECKPOINT_MAGIC, struct.pack("<B", CHECKPOINT_VERSION), struct.pack("<I", len(self))]
        for name, tensor in self._entries.items():
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<B", tensor.dim()))
            chunks.append(struct.pack(f"<{tensor.dim()}Q", *tensor.shape))
            chunks.append(tensor.contiguous().numpy().astype("<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ParamSet":
        """Decode an FGPS checkpoint.

        Raises:
            CheckpointFormatError: naming the byte offset where decoding failed.
        """
        reader = _ByteReader(payload)
        magic = reader.take(4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"Bad magic {magic!r} at byte offset 0, expected {CHECKPOINT_MAGIC!r}.")
        version = reader.unpack("<B", "version")[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"Unsupported checkpoint version {version} at byte offset 4.")
        n_entries = reader.unpack("<I", "entry count")[0]
        entries = []
        for _ in range(n_entries):
            name_length = reader.unpack("<I", "name length")[0]
            name_offset = reader.offset
            try:
                name = reader.take(name_length, "name").decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointFormatError(f"Entry name is not UTF-8 at byte offset {name_offset}.")
            rank = reader.unpack("<B", "rank")[0]
            shape = reader.unpack(f"<{rank}Q", f"dimensions of '{name}'")
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            values = np.frombuffer(reader.take(8 * count, f"values of '{name}'"), dtype="<f8")
            entries.append((name, torch.from_numpy(values.astype(np.float64).reshape(shape))))
        if reader.offset != len(payload):
            raise CheckpointFormatError(f"Trailing bytes after the last entry at byte offset {reader.offset}.")
        return cls(entries)

    def save(self, path: Union[str, Path]):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ParamSet":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


class _ByteReader(object):
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.payload):
            raise CheckpointFormatError(f"Truncated checkpoint: expected {size} bytes of {what} at byte offset "
                                        f"{self.offset}, only {len(self.payload) - self.offset} left.")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def init_uniform(shape: Sequence[int], fan_in: int, fan_out: int, generator: torch.Generator) -> torch.Tensor:
    """Glorot-uniform draw in [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(tuple(shape), generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound


def conv_entries(name: str, in_channels: int, out_channels: int, kernel_size: int,
                 generator: torch.Generator) -> List[Tuple[str, torch.Tensor]]:
    """Weight and bias entries of one conv2d layer, named ``<name>.weight`` and ``<name>.bias``."""
    receptive = kernel_size * kernel_size
    weight = init_uniform((out_channels, in_channels, kernel_size, kernel_size),
                          in_channels * receptive, out_channels * receptive, generator)
    return [(f"{name}.weight", weight), (f"{name}.bias", torch.zeros(out_channels, dtype=DTYPE))]


def param_slice(params: Mapping[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    """Parameters of one layer, keyed by their suffix (``weight``, ``bias``)."""
    start = prefix + "."
    return {name[len(start):]: tensor for name, tensor in params.items() if name.startswith(start)}


@dataclass
class GraphNode:
    index: int
    kind: str
    inputs: Tuple[int, ...]
    params: Tuple[str, ...]
    shape: Tuple[int, ...]


class ComputeGraph(object):
    """A forward program over named parameters, recorded node by node each time it is evaluated.

    ``program(params, graph)`` must build its result from :func:`forward_layer` calls (passing ``graph``) and
    plain tensor arithmetic, and return a scalar loss. Inputs that were not produced by a recorded node appear
    with id ``-1``.

    With ``track_switches`` set, every evaluation also keeps the sign pattern of the (leaky) relu layers and
    the winning positions of the max-pool layers in ``switches``.

    Args:
        program (callable): ``(params, graph) -> scalar tensor``.
    """

    def __init__(self, program: Callable[[Mapping[str, torch.Tensor], "ComputeGraph"], torch.Tensor]):
        self.program = program
        self.nodes: List[GraphNode] = []
        self.loss: Optional[torch.Tensor] = None
        self._node_of: Dict[int, int] = {}
        self._outputs: List[torch.Tensor] = []
        self.track_switches = False
        self.switches: List[torch.Tensor] = []

    def evaluate(self, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
        self.nodes, self._node_of, self._outputs, self.switches = [], {}, [], []
        loss = self.program(params, self)
        if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
            raise ShapeError(f"Loss node must be scalar, got shape {tuple(getattr(loss, 'shape', ()))}.")
        self.loss = loss.reshape(())
        # Drop references to intermediate activations, only the structure is kept
        self._outputs, self._node_of = [], {}
        return self.loss

    def record(self, kind: str, inputs: Sequence[torch.Tensor], param_names: Sequence[str], output: torch.Tensor,
               switch: Optional[torch.Tensor] = None):
        index = len(self.nodes)
        input_ids = tuple(self._node_of.get(id(t), -1) for t in inputs)
        self.nodes.append(GraphNode(index, kind, input_ids, tuple(param_names), tuple(output.shape)))
        self._node_of[id(output)] = index
        self._outputs.append(output)
        if self.track_switches and switch is not None:
            self.switches.append(switch.detach().clone())


def _shape_error(name, message, x):
    return ShapeError(f"Layer '{name}': {message} (input shape {tuple(x.shape)}).")


def _check_image_batch(name, x):
    if x.dim() != 4:
        raise _shape_error(name, f"expected a 4-D (batch, channels, height, width) input, got {x.dim()}-D", x)


def forward_layer(kind: str, params: Optional[Mapping[str, torch.Tensor]], inputs,
                  graph: Optional[ComputeGraph] = None, name: Optional[str] = None, **options) -> torch.Tensor:
    """Apply one layer of the layer zoo.

    Shape rules (N batch, C channels, H height, W width):

    * ``conv2d``: (N, C_in, H, W) -> (N, C_out, H, W); ``params`` holds ``weight`` (C_out, C_in, k, k) with odd k
      and ``bias`` (C_out,). Padding is "same"; option ``padding_mode`` is ``"zeros"`` (default) or ``"reflect"``.
    * ``leaky_relu`` (option ``negative_slope``, default 0.2), ``relu``, ``sigmoid``: shape preserved.
    * ``upsample``: nearest neighbour, (N, C, H, W) -> (N, C, 2H, 2W).
    * ``maxpool`` / ``avgpool``: 2x2 windows, stride 2, H and W must be even.
    * ``concat``: ``inputs`` is a sequence of tensors sharing N, H, W; channels are stacked in order.
    * ``softmax``: per-pixel normalization over the channel axis.

    Args:
        kind (str): One of ``LAYER_KINDS``.
        params (dict): The layer's parameters keyed by suffix, or ``None`` for parameter-free layers.
        inputs (Tensor or list of Tensor): Layer input(s).
        graph (ComputeGraph): When given, the call is recorded as a node.
        name (str): Parameter prefix of the layer, used in diagnostics and graph records.

    Returns:
        Tensor: The layer output.

    Raises:
        ShapeError: on any shape inconsistency, naming the layer and the offending dimensions.
    """
    name = name or kind
    params = params or {}
    switch = None
    tensors = list(inputs) if kind == "concat" else [inputs]

    if kind == "conv2d":
        x = inputs
        _check_image_batch(name, x)
        if "weight" not in params or "bias" not in params:
            raise ShapeError(f"Layer '{name}': conv2d needs 'weight' and 'bias' parameters, got {sorted(params)}.")
        weight, bias = params["weight"], params["bias"]
        if weight.dim() != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
            raise ShapeError(f"Layer '{name}': weight must be (C_out, C_in, k, k) with odd k, "
                             f"got {tuple(weight.shape)}.")
        if x.shape[1] != weight.shape[1]:
            raise _shape_error(name, f"expected {weight.shape[1]} input channels, got {x.shape[1]}", x)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"Layer '{name}': bias shape {tuple(bias.shape)} does not match {weight.shape[0]} "
                             f"output channels.")
        pad = weight.shape[2] // 2
        padding_mode = options.get("padding_mode", "zeros")
        if pad and padding_mode == "reflect":
            if x.shape[2] <= pad or x.shape[3] <= pad:
                raise _shape_error(name, f"reflect padding of {pad} needs height and width > {pad}", x)
            output = F.conv2d(F.pad(x, (pad, pad, pad, pad), mode="reflect"), weight, bias)
        elif padding_mode in ("zeros", "reflect"):
            output = F.conv2d(x, weight, bias, padding=pad)
        else:
            raise ValueError(f"Layer '{name}': unknown padding mode '{padding_mode}'.")
    elif kind == "leaky_relu":
        output = F.leaky_relu(inputs, negative_slope=options.get("negative_slope", 0.2))
        switch = inputs > 0
    elif kind == "relu":
        output = F.relu(inputs)
        switch = inputs > 0
    elif kind == "sigmoid":
        output = torch.sigmoid(inputs)
    elif kind == "upsample":
        _check_image_batch(name, inputs)
        output = F.interpolate(inputs, scale_factor=2, mode="nearest")
    elif kind in ("maxpool", "avgpool"):
        _check_image_batch(name, inputs)
        if inputs.shape[2] % 2 or inputs.shape[3] % 2:
            raise _shape_error(name, f"2x2 pooling needs even height and width, got {inputs.shape[2]}x"
                                     f"{inputs.shape[3]}", inputs)
        if kind == "maxpool":
            output, switch = F.max_pool2d(inputs, kernel_size=2, stride=2, return_indices=True)
        else:
            output = F.avg_pool2d(inputs, kernel_size=2, stride=2)
    elif kind == "concat":
        if not tensors:
            raise ShapeError(f"Layer '{name}': concat needs at least one input.")
        for t in tensors:
            _check_image_batch(name, t)
        reference = tensors[0].shape
        for t in tensors[1:]:
            if t.shape[0] != reference[0] or t.shape[2:] != reference[2:]:
                raise ShapeError(f"Layer '{name}': cannot concatenate {tuple(reference)} with {tuple(t.shape)}, "
                                 f"batch and spatial dimensions differ.")
        output = torch.cat(tensors, dim=1)
    elif kind == "softmax":
        _check_image_batch(name, inputs)
        output = torch.softmax(inputs, dim=1)
    else:
        raise ValueError(f"Unknown layer kind '{kind}', expected one of {LAYER_KINDS}.")

    if graph is not None:
        graph.record(kind, tensors, [f"{name}.{suffix}" for suffix in params], output, switch)
    return output


def backward(graph: ComputeGraph, params: ParamSet, coordinates: Optional[Mapping[str, object]] = None) -> ParamSet:
    """Evaluate ``graph`` at ``params`` and return the gradient of its loss.

    The loss value is left in ``graph.loss`` (detached). Parameters the loss does not depend on get an exactly
    zero gradient.

    Args:
        graph (ComputeGraph): Program to differentiate.
        params (ParamSet): Point of evaluation.
        coordinates (dict): Step coordinates reported if the loss is not finite.

    Returns:
        ParamSet: Gradients, compatible with ``params``.

    Raises:
        TrainingDivergenceError: if the loss is not finite.
    """
    leaves = collections.OrderedDict((name, tensor.detach().clone().requires_grad_(True))
                                     for name, tensor in params.items())
    loss = graph.evaluate(leaves)
    if not bool(torch.isfinite(loss)):
        graph.loss = loss.detach()
        raise TrainingDivergenceError(f"Non-finite loss {float(loss)}", coordinates)
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    graph.loss = loss.detach()
    return ParamSet((name, torch.zeros_like(leaf) if grad is None else grad)
                    for (name, leaf), grad in zip(leaves.items(), grads))


def sgd_step(w: ParamSet, g: ParamSet, learning_rate: float) -> ParamSet:
    """Plain gradient step ``w - learning_rate * g``."""
    if learning_rate < 0:
        raise ValueError(f"Learning rate must be >= 0, got {learning_rate}.")
    w.check_compatible(g, "sgd_step")
    return ParamSet((name, w[name] - learning_rate * g[name]) for name in w.names)


@dataclass
class OptimizerState:
    """Optimizer hyperparameters and accumulators.

    ``first_moment`` and ``second_moment`` are only used by Adam and start at zero.
    """
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Optional[ParamSet] = field(default=None, repr=False)
    second_moment: Optional[ParamSet] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"Unknown optimizer kind '{self.kind}', expected 'sgd' or 'adam'.")
        if self.learning_rate < 0:
            raise ValueError(f"Learning rate must be >= 0, got {self.learning_rate}.")

    @classmethod
    def create(cls, kind: str, learning_rate: float, params: ParamSet, **hyperparameters) -> "OptimizerState":
        state = cls(kind=kind, learning_rate=learning_rate, **hyperparameters)
        if kind == "adam":
            state.first_moment = params.zeros_like()
            state.second_moment = params.zeros_like()
        return state


def adam_step(state: OptimizerState, w: ParamSet, g: ParamSet) -> Tuple[OptimizerState, ParamSet]:
    """One Adam update with bias correction.

    Returns:
        OptimizerState, ParamSet: the new state (``step_count`` + 1) and the updated parameters.
    """
    if state.kind != "adam":
        raise ValueError(f"adam_step called with a '{state.kind}' optimizer state.")
    w.check_compatible(g, "adam_step")
    m = state.first_moment if state.first_moment is not None else w.zeros_like()
    v = state.second_moment if state.second_moment is not None else w.zeros_like()
    w.check_compatible(m, "adam_step (first moment)")
    w.check_compatible(v, "adam_step (second moment)")

    t = state.step_count + 1
    beta1, beta2 = state.beta1, state.beta2
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    new_m, new_v, new_w = [], [], []
    for name in w.names:
        m_t = beta1 * m[name] + (1.0 - beta1) * g[name]
        v_t = beta2 * v[name] + (1.0 - beta2) * g[name] * g[name]
        m_hat = m_t / correction1
        v_hat = v_t / correction2
        new_m.append((name, m_t))
        new_v.append((name, v_t))
        new_w.append((name, w[name] - state.learning_rate * m_hat / (torch.sqrt(v_hat) + state.epsilon)))
    new_state = replace(state, step_count=t, first_moment=ParamSet(new_m), second_moment=ParamSet(new_v))
    return new_state, ParamSet(new_w)


def optimizer_step(state: OptimizerState, w: ParamSet, g: ParamSet) -> Tuple[OptimizerState, ParamSet]:
    if state.kind == "adam":
        return adam_step(state, w, g)
    return replace(state, step_count=state.step_count + 1), sgd_step(w, g, state.learning_rate)


@dataclass
class FiniteDiffReport:
    """Outcome of :func:`finite_diff_check`.

    Attributes:
        max_rel_error (dict): Largest relative error per parameter entry.
        tolerance (float): Relative tolerance the check was run with.
        n_checked (int): Number of scalar components compared.
    """
    max_rel_error: Dict[str, float]
    tolerance: float
    n_checked: int

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def _same_switches(first: Sequence[torch.Tensor], second: Sequence[torch.Tensor]) -> bool:
    return len(first) == len(second) and all(torch.equal(a, b) for a, b in zip(first, second))


def finite_diff_check(graph: ComputeGraph, params: ParamSet, tol: float = 1e-4, step: float = 1e-5,
                      floor: float = 1e-5) -> FiniteDiffReport:
    """Compare :func:`backward` against central finite differences, component by component.

    The relative error of a component is ``|a - n| / max(|a|, |n|, floor)``. When a (leaky) relu or max-pool
    layer switches inside the stencil, the analytic derivative belongs to the side that keeps the switch pattern
    of the evaluation point, so the one-sided difference of that side is used instead. If both sides switch,
    the smaller of the two one-sided errors is kept.

    Args:
        graph (ComputeGraph): Program under test.
        params (ParamSet): Evaluation point.
        tol (float): Relative tolerance deciding ``passed``.
        step (float): Finite difference step.
        floor (float): Lower bound of the error denominator.

    Returns:
        FiniteDiffReport
    """
    analytic = backward(graph, params)
    track_switches = graph.track_switches
    graph.track_switches = True
    try:
        with torch.no_grad():
            base = {name: tensor.clone() for name, tensor in params.items()}
            f0 = float(graph.evaluate(base))
            switches0 = graph.switches
            report, n_checked, n_one_sided = {}, 0, 0
            for name in params.names:
                flat = base[name].view(-1)
                grad = analytic[name].reshape(-1)
                worst = 0.0
                for i in range(flat.numel()):
                    original = flat[i].item()
                    flat[i] = original + step
                    f_plus = float(graph.evaluate(base))
                    plus_kept = _same_switches(graph.switches, switches0)
                    flat[i] = original - step
                    f_minus = float(graph.evaluate(base))
                    minus_kept = _same_switches(graph.switches, switches0)
                    flat[i] = original
                    if plus_kept and minus_kept:
                        candidates = [(f_plus - f_minus) / (2 * step)]
                    elif plus_kept:
                        candidates = [(f_plus - f0) / step]
                    elif minus_kept:
                        candidates = [(f0 - f_minus) / step]
                    else:
                        candidates = [(f_plus - f0) / step, (f0 - f_minus) / step]
                    n_one_sided += not (plus_kept and minus_kept)
                    a = grad[i].item()
                    worst = max(worst, min(abs(a - n) / max(abs(a), abs(n), floor) for n in candidates))
                    n_checked += 1
                report[name] = worst
    finally:
        graph.track_switches = track_switches
    result = FiniteDiffReport(report, tol, n_checked)
    logger.debug(f"Finite difference check over {n_checked} components ({n_one_sided} one-sided): worst relative "
                 f"error {result.worst:.3e}.")
    return result
