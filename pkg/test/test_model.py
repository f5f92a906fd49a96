"""Test the change network."""

# std
from pathlib import Path
import json

# lib
import numpy as np
import pytest

# pkg
from changewatch.model import backward
from changewatch.model import forward
from changewatch.model import forward_with_context
from changewatch.model import init_params
from changewatch.model import load_checkpoint
from changewatch.model import ModelParams
from changewatch.model import param_count
from changewatch.model import save_checkpoint
from changewatch.model import Topology
from changewatch.model import WindowBatch
from changewatch.model import WindowTensor


def window(rng: np.random.Generator, steps: int, size: int = 8) -> WindowTensor:
    """Random fully valid window."""
    frames = rng.random((steps, 17, size, size)).astype(np.float32)
    return WindowTensor(frames, np.ones(steps, dtype=bool))


def d4_symmetric(kernel: np.ndarray) -> np.ndarray:
    """Average a kernel over the rotations and reflections of a square."""
    total = np.zeros_like(kernel)
    for k in (kernel, kernel[..., ::-1]):
        for r in range(4):
            total += np.rot90(k, r, axes=(-2, -1))
    return total / 8


def test_param_count() -> None:
    """The default topology has 71,401 weights."""
    params = init_params(0)
    assert param_count(params) == 71401
    assert list(params.tensors) == list(Topology().shapes())
    assert [spec.filters for spec in Topology().layers()] == [10, 10, 26, 26, 8, 1]


def test_init() -> None:
    """Initialization is deterministic and follows the named schemes."""
    assert init_params(3) == init_params(3)
    assert init_params(3) != init_params(4)

    params = init_params(0)
    assert (params["mix.conv.bias"] == 0).all()
    kernel = params["opt.conv.kernel"]
    assert np.abs(kernel).max() <= np.sqrt(6 / ((13 + 10) * 9)) + 1e-6

    recurrent = params["opt.lstm.recurrent"].astype(np.float64)
    q = recurrent.transpose(2, 3, 1, 0).reshape(90, 40)
    assert np.allclose(q.T @ q, np.eye(40), atol=1e-5)


def test_stack() -> None:
    """Windows are front-padded with invalid frames."""
    rng = np.random.default_rng(0)
    batch = WindowBatch.stack([window(rng, 3), window(rng, 5)])
    assert batch.frames.shape == (2, 5, 17, 8, 8)
    assert batch.validity.tolist() == [[False, False, True, True, True], [True] * 5]
    assert (batch.frames[0, :2] == 0).all()

    with pytest.raises(ValueError, match="exceeds"):
        WindowBatch.stack([window(rng, 5)], length=4)
    with pytest.raises(ValueError, match="shape mismatch"):
        WindowBatch.stack([window(rng, 3), window(rng, 3, size=4)])
    with pytest.raises(ValueError, match="empty"):
        WindowBatch.stack([])


def test_forward(tiny: Topology) -> None:
    """Outputs are probabilities, batch-independent and padding-invariant."""
    rng = np.random.default_rng(1)
    params = init_params(0, tiny)
    a, b = window(rng, 4), window(rng, 6)
    pa = forward(params, a)
    assert pa.shape == (8, 8)
    assert ((pa > 0) & (pa < 1)).all()

    batch = forward(params, WindowBatch.stack([a, b], length=9))
    assert batch.shape == (2, 8, 8)
    assert np.allclose(batch[0], pa, atol=1e-6)
    assert np.allclose(batch[1], forward(params, b), atol=1e-6)

    with pytest.raises(ValueError, match="shape mismatch"):
        forward(params, WindowTensor(a.frames[:, :5], a.validity))


def test_dropout(tiny: Topology) -> None:
    """Dropout is seeded per window and off at inference."""
    rng = np.random.default_rng(2)
    params = init_params(0, tiny)
    w = window(rng, 4)
    assert np.array_equal(forward(params, w), forward(params, w))
    one = forward(params, w, training=True, dropout_seed=7)
    assert np.array_equal(one, forward(params, w, training=True, dropout_seed=7))
    assert not np.array_equal(one, forward(params, w, training=True, dropout_seed=8))
    assert not np.array_equal(one, forward(params, w))

    batch = WindowBatch.stack([w, w])
    out = forward(params, batch, training=True, dropout_seed=[7, 8])
    assert np.allclose(out[0], one, atol=1e-6)
    with pytest.raises(ValueError, match="dropout seeds"):
        forward(params, batch, training=True, dropout_seed=[7])


def test_equivariance(tiny: Topology) -> None:
    """Symmetric kernels make the network commute with rotations and flips."""
    rng = np.random.default_rng(3)
    params = init_params(0, tiny).astype(np.float64)
    for name, tensor in params.tensors.items():
        if tensor.ndim == 4:
            params.tensors[name] = d4_symmetric(tensor)
    w = window(rng, 4)
    out = forward(params, w)

    turned = WindowTensor(np.rot90(w.frames, 1, axes=(-2, -1)).copy(), w.validity)
    assert np.allclose(forward(params, turned), np.rot90(out), atol=1e-10)
    flipped = WindowTensor(w.frames[..., ::-1].copy(), w.validity)
    assert np.allclose(forward(params, flipped), out[..., ::-1], atol=1e-10)


def test_gradient(tiny: Topology) -> None:
    """Analytic gradients match central differences in float64."""
    rng = np.random.default_rng(4)
    params = init_params(0, tiny).astype(np.float64)
    for name, tensor in params.tensors.items():
        if name.endswith("bias"):
            params.tensors[name] = rng.normal(size=tensor.shape) * 0.1
    batch = WindowBatch.stack([window(rng, 4), window(rng, 3)])
    upstream = rng.normal(size=(2, 8, 8))
    seeds = [11, 12]

    def loss() -> float:
        out = forward(params, batch, training=True, dropout_seed=seeds)
        return float((out * upstream).sum())

    _, context = forward_with_context(params, batch, training=True, dropout_seed=seeds)
    grads = backward(params, context, upstream)
    assert list(grads) == list(params.tensors)
    assert (grads["mix.lstm.recurrent"] == 0).all()  # single step from zero state

    entries = [(n, i) for n, t in params.tensors.items() for i in np.ndindex(t.shape)]
    picks = rng.choice(len(entries), size=200, replace=False)
    eps = 1e-6
    for pick in picks:
        name, index = entries[pick]
        tensor = params.tensors[name]
        saved = tensor[index]
        tensor[index] = saved + eps
        up = loss()
        tensor[index] = saved - eps
        down = loss()
        tensor[index] = saved
        numeric = (up - down) / (2 * eps)
        assert np.isclose(grads[name][index], numeric, rtol=1e-3, atol=1e-7), name


def test_backward_context(tiny: Topology) -> None:
    """`backward` needs a kept forward context."""
    params = init_params(0, tiny)
    with pytest.raises(ValueError, match="context"):
        backward(params, None, np.zeros((8, 8)))


def test_checkpoint(tmp_path: Path, tiny: Topology) -> None:
    """Checkpoints round trip and reject corrupt files."""
    params = init_params(5, tiny)
    path = save_checkpoint(params, tmp_path / "model")
    assert load_checkpoint(path) == params
    header = json.loads((path / "model.json").read_text())
    assert header["seed"] == 5
    assert [layer["kind"] for layer in header["layers"]] == [
        "CONV",
        "CONV_RECURRENT",
        "CONV",
        "CONV_RECURRENT",
        "CONV",
        "HEAD",
    ]

    blob = (path / "model.bin").read_bytes()
    (path / "model.bin").write_bytes(blob + b"\0\0\0\0")
    with pytest.raises(ValueError, match="trailing bytes"):
        load_checkpoint(path)
    (path / "model.bin").write_bytes(blob[:-4])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)
    (path / "model.bin").write_bytes(blob)

    wrong = dict(header, tensors=[dict(header["tensors"][0], shape=[1, 2, 3, 3])])
    (path / "model.json").write_text(json.dumps(wrong))
    with pytest.raises(ValueError, match="header/blob mismatch"):
        load_checkpoint(path)

    (path / "model.json").write_text(json.dumps(dict(header, version=99)))
    with pytest.raises(ValueError, match="unsupported checkpoint version"):
        load_checkpoint(path)

    with pytest.raises(ValueError, match="missing checkpoint"):
        load_checkpoint(tmp_path / "nowhere")


def test_model_params_copy(tiny: Topology) -> None:
    """Copies are independent."""
    params = init_params(0, tiny)
    other = params.copy()
    assert other == params
    other.tensors["head.bias"] += 1
    assert other != params
    assert isinstance(params.astype(np.float64), ModelParams)
    assert params.astype(np.float64).dtype == np.float64


@pytest.mark.parametrize("seed", range(100))
def test_checkpoint_random(tmp_path: Path, seed: int) -> None:
    """Random topologies and weights survive a checkpoint round trip."""
    rng = np.random.default_rng(seed)
    filters = tuple(int(f) for f in rng.integers(1, 5, size=5))
    topology = Topology(
        opt_bands=int(rng.integers(1, 6)),
        sar_bands=int(rng.integers(1, 4)),
        filters=filters,  # type: ignore[arg-type]
        kernel=int(rng.choice([1, 3, 5])),
        dropout=float(rng.uniform(0, 0.9)),
    )
    tensors = {
        name: (rng.normal(size=shape) * 10).astype(np.float32)
        for name, shape in topology.shapes().items()
    }
    params = ModelParams(topology, int(rng.integers(0, 2**31)), tensors)
    assert load_checkpoint(save_checkpoint(params, tmp_path / "model")) == params


def test_zero_params(tiny: Topology) -> None:
    """All-zero weights predict exactly one half everywhere."""
    params = init_params(0, tiny)
    zeros = {name: np.zeros_like(t) for name, t in params.tensors.items()}
    out = forward(ModelParams(tiny, 0, zeros), window(np.random.default_rng(5), 4))
    assert (out == 0.5).all()


def test_saturated_output(tiny: Topology) -> None:
    """Outputs stay strictly inside (0, 1) when the logits saturate."""
    w = window(np.random.default_rng(6), 3)
    for bias in (100.0, -100.0):
        params = init_params(0, tiny)
        params.tensors["head.bias"][:] = bias
        out = forward(params, w)
        assert out.dtype == np.float32
        assert ((out > 0) & (out < 1)).all()


def test_frame_order(tiny: Topology) -> None:
    """The prediction depends on the order of the frames."""
    rng = np.random.default_rng(7)
    params = init_params(0, tiny).astype(np.float64)
    w = window(rng, 4)
    reordered = WindowTensor(w.frames[[2, 0, 3, 1]].copy(), w.validity)
    assert np.abs(forward(params, reordered) - forward(params, w)).max() > 1e-6


def test_zero_upstream(tiny: Topology) -> None:
    """A zero upstream gradient gives zero gradients for every weight."""
    params = init_params(0, tiny)
    w = window(np.random.default_rng(8), 3)
    _, context = forward_with_context(params, w, training=True, dropout_seed=3)
    grads = backward(params, context, np.zeros((8, 8)))
    assert all((g == 0).all() for g in grads.values())


def test_extreme_inputs(tiny: Topology) -> None:
    """Large inputs keep outputs and gradients finite."""
    rng = np.random.default_rng(9)
    params = init_params(0, tiny)
    frames = rng.choice([-50.0, 50.0], size=(4, 17, 8, 8)).astype(np.float32)
    w = WindowTensor(frames, np.ones(4, dtype=bool))
    out, context = forward_with_context(params, w, training=True, dropout_seed=1)
    assert np.isfinite(out).all() and ((out > 0) & (out < 1)).all()
    grads = backward(params, context, rng.normal(size=(8, 8)))
    assert all(np.isfinite(g).all() for g in grads.values())


def test_translation(tiny: Topology) -> None:
    """Shifting the input shifts the output away from the borders."""
    rng = np.random.default_rng(10)
    params = init_params(0, tiny).astype(np.float64)
    w = window(rng, 3, size=32)
    shifted = WindowTensor(np.roll(w.frames, (4, 4), axis=(-2, -1)), w.validity)
    out, moved = forward(params, w), forward(params, shifted)
    assert np.allclose(moved[12:20, 12:20], out[8:16, 8:16], atol=1e-9)
