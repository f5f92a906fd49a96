"""A small two-branch convolutional-recurrent change network.

Layer configurations:

    1  conv 3x3, ReLU                         (per frame, one per branch)
    2  conv-LSTM 3x3, tanh + hard sigmoid     (over time, one per branch)
    3  conv 3x3, ReLU                         (on both branches' final states)
    4  conv-LSTM 3x3, tanh + hard sigmoid
    5  conv 3x3, ReLU
    6  conv 1x1, sigmoid                      (change probability per pixel)

The optical bands and the SAR bands (ascending and descending VV/VH) enter
separate branches whose final hidden states are concatenated before layer 3.
"""

# std
from __future__ import annotations
from enum import Enum
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union
import dataclasses
import json
import logging

# lib
import numpy as np
from numpy.typing import NDArray

# pkg
from . import CHECKPOINT_VERSION
from .layers import Array
from .layers import conv2d
from .layers import conv2d_grad_input
from .layers import conv2d_grad_kernel
from .layers import dropout_mask
from .layers import LSTMStep
from .layers import lstm_backward
from .layers import lstm_forward
from .layers import relu
from .layers import sigmoid

log = logging.getLogger(__name__)

BRANCHES = ("opt", "sar")
"""Input branches."""

OUTPUT_EPS = float(np.finfo(np.float32).eps)
"""Outputs are clipped to `[OUTPUT_EPS, 1 - OUTPUT_EPS]`."""


class LayerKind(str, Enum):
    """Kind of layer."""

    CONV = "CONV"
    CONV_RECURRENT = "CONV_RECURRENT"
    HEAD = "HEAD"


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    """Hyper-parameters of one layer configuration."""

    kind: LayerKind
    filters: int
    kernel: Tuple[int, int]
    stride: Tuple[int, int] = (1, 1)
    activations: Tuple[str, ...] = ("relu",)
    dropout: float = 0.0


@dataclasses.dataclass(frozen=True)
class Topology:
    """Architecture descriptor."""

    opt_bands: int = 13
    """Optical input bands (after the SAR bands in each frame)."""

    sar_bands: int = 4
    """SAR input bands (first in each frame)."""

    filters: Tuple[int, int, int, int, int] = (10, 10, 26, 26, 8)
    """Filters of configurations 1-5 (configuration 6 has one)."""

    kernel: int = 3
    """Spatial kernel size of configurations 1-5."""

    dropout: float = 0.4
    """Input dropout of the recurrent configurations."""

    @property
    def bands(self) -> int:
        """Bands per input frame."""
        return self.sar_bands + self.opt_bands

    def band_slice(self, branch: str) -> slice:
        """Frame bands consumed by `branch`."""
        if branch == "sar":
            return slice(0, self.sar_bands)
        return slice(self.sar_bands, self.bands)

    def layers(self) -> List[LayerSpec]:
        """Layer configurations 1-6."""
        k = (self.kernel, self.kernel)
        f = self.filters
        gates = ("tanh", "hard_sigmoid")
        rate = self.dropout
        return [
            LayerSpec(LayerKind.CONV, f[0], k),
            LayerSpec(
                LayerKind.CONV_RECURRENT, f[1], k, activations=gates, dropout=rate
            ),
            LayerSpec(LayerKind.CONV, f[2], k),
            LayerSpec(
                LayerKind.CONV_RECURRENT, f[3], k, activations=gates, dropout=rate
            ),
            LayerSpec(LayerKind.CONV, f[4], k),
            LayerSpec(LayerKind.HEAD, 1, (1, 1), activations=("sigmoid",)),
        ]

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Named parameter shapes in canonical order."""
        f1, f2, f3, f4, f5 = self.filters
        k = self.kernel
        shapes: Dict[str, Tuple[int, ...]] = {}
        for branch, bands in (("opt", self.opt_bands), ("sar", self.sar_bands)):
            shapes[f"{branch}.conv.kernel"] = (f1, bands, k, k)
            shapes[f"{branch}.conv.bias"] = (f1,)
            shapes[f"{branch}.lstm.kernel"] = (4 * f2, f1, k, k)
            shapes[f"{branch}.lstm.recurrent"] = (4 * f2, f2, k, k)
            shapes[f"{branch}.lstm.bias"] = (4 * f2,)
        shapes["mix.conv.kernel"] = (f3, 2 * f2, k, k)
        shapes["mix.conv.bias"] = (f3,)
        shapes["mix.lstm.kernel"] = (4 * f4, f3, k, k)
        shapes["mix.lstm.recurrent"] = (4 * f4, f4, k, k)
        shapes["mix.lstm.bias"] = (4 * f4,)
        shapes["proj.conv.kernel"] = (f5, f4, k, k)
        shapes["proj.conv.bias"] = (f5,)
        shapes["head.kernel"] = (1, f5, 1, 1)
        shapes["head.bias"] = (1,)
        return shapes

    def asdict(self) -> Dict[str, Any]:
        """Return `dict` representation."""
        return {
            "opt_bands": self.opt_bands,
            "sar_bands": self.sar_bands,
            "filters": list(self.filters),
            "kernel": self.kernel,
            "dropout": self.dropout,
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> Topology:
        """Return topology from a `dict`."""
        filters = tuple(int(f) for f in data.get("filters", Topology.filters))
        if len(filters) != 5:
            raise ValueError(f"expected 5 filter counts, got {len(filters)}")
        return Topology(
            opt_bands=int(data.get("opt_bands", 13)),
            sar_bands=int(data.get("sar_bands", 4)),
            filters=filters,  # type: ignore[arg-type]
            kernel=int(data.get("kernel", 3)),
            dropout=float(data.get("dropout", 0.4)),
        )


@dataclasses.dataclass(eq=False)
class ModelParams:
    """Named weight tensors of the network."""

    topology: Topology
    """Architecture descriptor."""

    seed: int
    """Seed used at initialization."""

    tensors: Dict[str, Array] = dataclasses.field(default_factory=dict)
    """Weights by name, in `Topology.shapes()` order."""

    def __getitem__(self, name: str) -> Array:
        return self.tensors[name]

    @property
    def dtype(self) -> Any:
        """Floating-point type of the weights."""
        first = next(iter(self.tensors.values()), None)
        return np.float32 if first is None else first.dtype

    def astype(self, dtype: Any) -> ModelParams:
        """Return a copy with all weights cast to `dtype`."""
        tensors = {k: v.astype(dtype) for k, v in self.tensors.items()}
        return ModelParams(self.topology, self.seed, tensors)

    def copy(self) -> ModelParams:
        """Return a deep copy."""
        return self.astype(self.dtype)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.topology == other.topology
            and self.seed == other.seed
            and list(self.tensors) == list(other.tensors)
            and all(
                a.dtype == b.dtype and np.array_equal(a, b)
                for a, b in zip(self.tensors.values(), other.tensors.values())
            )
        )


def param_count(params: ModelParams) -> int:
    """Number of scalar parameters.

    >>> param_count(ModelParams(Topology(), 0))
    0
    """
    return sum(int(t.size) for t in params.tensors.values())


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...]) -> Array:
    out, inp = shape[0], shape[1]
    receptive = int(np.prod(shape[2:]))
    limit = np.sqrt(6.0 / ((inp + out) * receptive))
    return rng.uniform(-limit, limit, size=shape)


def _orthogonal(rng: np.random.Generator, shape: Tuple[int, ...]) -> Array:
    out, inp, kh, kw = shape
    rows, cols = kh * kw * inp, out
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q.reshape(kh, kw, inp, out).transpose(3, 2, 0, 1)


def init_params(seed: int, topology: Optional[Topology] = None) -> ModelParams:
    """Initialize parameters deterministically from `seed`.

    Kernels are Glorot-uniform (`U(-l, l)`, `l = sqrt(6 / (fan_in + fan_out))`),
    recurrent kernels orthogonal, biases zero.
    """
    topology = topology or Topology()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    tensors: Dict[str, Array] = {}
    for name, shape in topology.shapes().items():
        if name.endswith("bias"):
            value = np.zeros(shape)
        elif name.endswith("recurrent"):
            value = _orthogonal(rng, shape)
        else:
            value = _glorot(rng, shape)
        tensors[name] = value.astype(np.float32)
    return ModelParams(topology, seed, tensors)


@dataclasses.dataclass(eq=False)
class WindowTensor:
    """Network input for a single window."""

    frames: NDArray[np.float32]
    """Frames `[T][bands][h][w]`."""

    validity: NDArray[np.bool_]
    """Whether each frame is real (`False` for padding) `[T]`."""

    def __len__(self) -> int:
        return int(self.frames.shape[0])


@dataclasses.dataclass(eq=False)
class WindowBatch:
    """Windows front-padded to a common length."""

    frames: NDArray[np.float32]
    """Frames `[B][T][bands][h][w]`."""

    validity: NDArray[np.bool_]
    """Frame validity `[B][T]`."""

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @staticmethod
    def stack(
        windows: Sequence[WindowTensor], length: Optional[int] = None
    ) -> WindowBatch:
        """Front-pad `windows` with invalid zero frames to `length` and stack them."""
        if not windows:
            raise ValueError("cannot stack an empty window list")
        length = length or max(len(w) for w in windows)
        _, bands, h, w = windows[0].frames.shape
        frames = np.zeros((len(windows), length, bands, h, w), dtype=np.float32)
        validity = np.zeros((len(windows), length), dtype=bool)
        for b, window in enumerate(windows):
            if len(window) > length:
                raise ValueError(
                    f"window of {len(window)} frames exceeds length {length}"
                )
            if window.frames.shape[1:] != (bands, h, w):
                raise ValueError(
                    f"shape mismatch: {window.frames.shape[1:]} vs {(bands, h, w)}"
                )
            frames[b, length - len(window) :] = window.frames
            validity[b, length - len(window) :] = window.validity
        return WindowBatch(frames, validity)


@dataclasses.dataclass
class Context:
    """Intermediate values of a forward pass kept for `backward`."""

    batch: int
    inputs: Dict[str, Array]
    conv: Dict[str, Array]
    masks: Dict[str, Optional[Array]]
    lstm: Dict[str, List[LSTMStep]]
    mixed_in: Array
    mixed: Array
    recurrent: Array
    projected: Array
    output: Array


def _masks(
    params: ModelParams, shape: Tuple[int, int], seeds: Sequence[int]
) -> Dict[str, Array]:
    """Dropout masks per recurrent layer, drawn once per window from its seed."""
    f1, _, f3, _, _ = params.topology.filters
    rate = params.topology.dropout
    sizes = {"opt": f1, "sar": f1, "mix": f3}
    drawn: Dict[str, List[Array]] = {name: [] for name in sizes}
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        for name, channels in sizes.items():
            mask = dropout_mask(rng, (channels, *shape), rate, params.dtype)
            drawn[name].append(mask)
    return {name: np.stack(masks) for name, masks in drawn.items()}


def _run(
    params: ModelParams,
    batch: WindowBatch,
    training: bool,
    seeds: Optional[Sequence[int]],
    keep: bool,
) -> Context:
    topology = params.topology
    if batch.frames.ndim != 5 or batch.frames.shape[2] != topology.bands:
        raise ValueError(
            f"shape mismatch: expected [B][T][{topology.bands}][h][w], "
            f"got {list(batch.frames.shape)}"
        )
    n, steps, _, h, w = batch.frames.shape
    frames = batch.frames.astype(params.dtype, copy=False)
    masks: Dict[str, Optional[Array]] = {"opt": None, "sar": None, "mix": None}
    if training:
        seeds = list(seeds) if seeds is not None else list(range(n))
        if len(seeds) != n:
            raise ValueError(f"expected {n} dropout seeds, got {len(seeds)}")
        masks.update(_masks(params, (h, w), seeds))

    inputs: Dict[str, Array] = {}
    conv: Dict[str, Array] = {}
    cache: Dict[str, List[LSTMStep]] = {}
    states = []
    for branch in BRANCHES:
        x = frames[:, :, topology.band_slice(branch)]
        x = x.reshape(n * steps, x.shape[2], h, w)
        kernel, bias = params[f"{branch}.conv.kernel"], params[f"{branch}.conv.bias"]
        a = relu(conv2d(x, kernel, bias))
        a = a.reshape(n, steps, -1, h, w)
        mask = masks[branch]
        dropped = a if mask is None else a * mask[:, None]
        state, cache[branch] = lstm_forward(
            dropped,
            batch.validity,
            params[f"{branch}.lstm.kernel"],
            params[f"{branch}.lstm.recurrent"],
            params[f"{branch}.lstm.bias"],
            keep,
        )
        states.append(state)
        if keep:
            inputs[branch], conv[branch] = x, a

    mixed_in = np.concatenate(states, axis=1)
    mixed = relu(conv2d(mixed_in, params["mix.conv.kernel"], params["mix.conv.bias"]))
    mask = masks["mix"]
    dropped = mixed if mask is None else mixed * mask
    state, cache["mix"] = lstm_forward(
        dropped[:, None],
        np.ones((n, 1), dtype=bool),
        params["mix.lstm.kernel"],
        params["mix.lstm.recurrent"],
        params["mix.lstm.bias"],
        keep,
    )
    projected = relu(
        conv2d(state, params["proj.conv.kernel"], params["proj.conv.bias"])
    )
    logits = conv2d(projected, params["head.kernel"], params["head.bias"])[:, 0]
    output = np.clip(sigmoid(logits), OUTPUT_EPS, 1 - OUTPUT_EPS).astype(logits.dtype)
    return Context(
        n, inputs, conv, masks, cache, mixed_in, mixed, state, projected, output
    )


def _as_batch(windows: Union[WindowTensor, WindowBatch]) -> WindowBatch:
    if isinstance(windows, WindowTensor):
        return WindowBatch(windows.frames[None], windows.validity[None])
    return windows


def forward(
    params: ModelParams,
    windows: Union[WindowTensor, WindowBatch],
    training: bool = False,
    dropout_seed: Union[int, Sequence[int], None] = None,
) -> Array:
    """Predict per-pixel change probabilities in (0, 1).

    Returns `[h][w]` for a `WindowTensor` and `[B][h][w]` for a `WindowBatch`.
    Dropout is active only when `training`; window `b` draws its masks from
    `dropout_seed[b]` (an `int` seeds a single window).
    """
    seeds = [dropout_seed] if isinstance(dropout_seed, int) else dropout_seed
    out = _run(params, _as_batch(windows), training, seeds, keep=False).output
    return out[0] if isinstance(windows, WindowTensor) else out


def forward_with_context(
    params: ModelParams,
    windows: Union[WindowTensor, WindowBatch],
    training: bool = False,
    dropout_seed: Union[int, Sequence[int], None] = None,
) -> Tuple[Array, Context]:
    """`forward` that also returns the context needed by `backward`."""
    seeds = [dropout_seed] if isinstance(dropout_seed, int) else dropout_seed
    context = _run(params, _as_batch(windows), training, seeds, keep=True)
    out = context.output
    return (out[0] if isinstance(windows, WindowTensor) else out), context


def _conv_grads(
    grads: Dict[str, Array], name: str, x: Array, dz: Array, kernel: Array
) -> None:
    kh, kw = kernel.shape[2:]
    grads[f"{name}.kernel"] = conv2d_grad_kernel(x, dz, kh, kw)
    grads[f"{name}.bias"] = dz.sum(axis=(0, 2, 3))


def backward(
    params: ModelParams, context: Optional[Context], upstream: Array
) -> Dict[str, Array]:
    """Gradients of `sum(upstream * output)` w.r.t. every parameter tensor."""
    if context is None or not context.lstm.get("mix"):
        raise ValueError("missing forward context (use forward_with_context)")
    n = context.batch
    upstream = np.asarray(upstream, dtype=params.dtype).reshape(context.output.shape)
    grads: Dict[str, Array] = {}

    out = context.output
    dz = (upstream * out * (1 - out))[:, None]
    grads["head.kernel"] = conv2d_grad_kernel(context.projected, dz, 1, 1)
    grads["head.bias"] = dz.sum(axis=(0, 2, 3))
    dz = conv2d_grad_input(dz, params["head.kernel"]) * (context.projected > 0)

    _conv_grads(grads, "proj.conv", context.recurrent, dz, params["proj.conv.kernel"])
    dh = conv2d_grad_input(dz, params["proj.conv.kernel"])

    dx, dk, dr, db = lstm_backward(
        context.lstm["mix"], dh, params["mix.lstm.kernel"], params["mix.lstm.recurrent"]
    )
    grads["mix.lstm.kernel"] = dk
    grads["mix.lstm.recurrent"] = dr
    grads["mix.lstm.bias"] = db
    da = dx[:, 0]
    if context.masks["mix"] is not None:
        da = da * context.masks["mix"]
    dz = da * (context.mixed > 0)
    _conv_grads(grads, "mix.conv", context.mixed_in, dz, params["mix.conv.kernel"])
    dstates = conv2d_grad_input(dz, params["mix.conv.kernel"])

    offset = 0
    for branch in BRANCHES:
        filters = params[f"{branch}.lstm.recurrent"].shape[1]
        dh = dstates[:, offset : offset + filters]
        offset += filters
        dx, dk, dr, db = lstm_backward(
            context.lstm[branch],
            dh,
            params[f"{branch}.lstm.kernel"],
            params[f"{branch}.lstm.recurrent"],
        )
        grads[f"{branch}.lstm.kernel"] = dk
        grads[f"{branch}.lstm.recurrent"] = dr
        grads[f"{branch}.lstm.bias"] = db
        mask = context.masks[branch]
        if mask is not None:
            dx = dx * mask[:, None]
        a = context.conv[branch]
        dz = (dx * (a > 0)).reshape(n * a.shape[1], a.shape[2], *a.shape[3:])
        x = context.inputs[branch]
        _conv_grads(grads, f"{branch}.conv", x, dz, params[f"{branch}.conv.kernel"])

    return {name: grads[name].astype(params.dtype) for name in params.tensors}


def save_checkpoint(params: ModelParams, path: Path) -> Path:
    """Write `model.json` (header) and `model.bin` (float32 blob) into `path`."""
    path.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    blobs = []
    for name, tensor in params.tensors.items():
        data = np.ascontiguousarray(tensor, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        offset += len(data)
        blobs.append(data)
    header = {
        "version": CHECKPOINT_VERSION,
        "seed": params.seed,
        "topology": params.topology.asdict(),
        "layers": [
            {
                "kind": spec.kind.value,
                "filters": spec.filters,
                "kernel": list(spec.kernel),
                "stride": list(spec.stride),
                "activations": list(spec.activations),
                "dropout": spec.dropout,
            }
            for spec in params.topology.layers()
        ],
        "tensors": index,
    }
    (path / "model.json").write_text(json.dumps(header, indent=2))
    (path / "model.bin").write_bytes(b"".join(blobs))
    log.info(f"write: {path} ({param_count(params)} parameters)")
    return path


def load_checkpoint(path: Path) -> ModelParams:
    """Read a checkpoint written by `save_checkpoint`."""
    try:
        header = json.loads((path / "model.json").read_text())
    except FileNotFoundError:
        raise ValueError(f"missing checkpoint header: {path / 'model.json'}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt checkpoint header {path}: {e}") from None

    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {version}")

    topology = Topology.from_dict(header.get("topology", {}))
    expected = topology.shapes()
    blob = (path / "model.bin").read_bytes()
    tensors: Dict[str, Array] = {}
    end = 0
    for entry in header.get("tensors", []):
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise ValueError(f"header/blob mismatch: tensor {name} has shape {shape}")
        start = int(entry["offset"])
        end = start + int(np.prod(shape)) * 4
        if end > len(blob):
            raise ValueError(
                f"truncated checkpoint: tensor {name} needs bytes {start}-{end}"
            )
        raw = np.frombuffer(blob[start:end], dtype="<f4")
        tensors[name] = raw.astype(np.float32).reshape(shape)
    if list(tensors) != list(expected):
        missing = [name for name in expected if name not in tensors]
        raise ValueError(f"header/blob mismatch: missing tensors {missing}")
    if end != len(blob):
        raise ValueError(f"header/blob mismatch: {len(blob) - end} trailing bytes")
    return ModelParams(topology, int(header.get("seed", 0)), tensors)
