import dataclasses

import numpy as np
import pytest

from snn3d.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(arr, dtype=np.float64):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def tiled_pair(rng, with_spikes=True):
    """A random Shared2D network and the Conv3D network with kT=1 kernels tiled from it.

    Returns (shared, conv3d, x) with x a random N×T×C×H×W input in [0, 2).
    """
    from snn3d.encoding import EncoderConfig
    from snn3d.network import BlockSpec, HeadSpec, Network, NetworkSpec, NeuronSpec
    from snn3d.neuron import KINDS

    T = int(rng.integers(1, 5))
    size = int(rng.integers(5, 10))
    ci = int(rng.integers(1, 4))
    blocks = []
    s = size
    for _ in range(int(rng.integers(1, 3))):
        k = int(rng.choice([1, 3]))
        stride = 2 if (s + 2 * ((k - 1) // 2) - k) % 2 == 0 and s > 4 and rng.random() < 0.5 else 1
        blocks.append(BlockSpec(int(rng.integers(1, 5)), (1, k, k), stride))
        s = (s + 2 * ((k - 1) // 2) - k) // stride + 1
    spec = NetworkSpec(
        encoder=EncoderConfig("sequence", T),
        blocks=blocks,
        conv_mode="shared2d",
        neuron=NeuronSpec(kind=str(rng.choice(KINDS))),
        recurrence=bool(rng.random() < 0.5),
        head=HeadSpec("classification", 2),
        in_channels=ci,
        input_size=size,
        seed=int(rng.integers(1 << 16)),
    )
    shared = Network(spec)
    conv3d = Network(dataclasses.replace(spec, conv_mode="conv3d"))
    conv3d.load_state_dict(
        {k: v[:, :, None] if k.endswith("conv.weight") else v for k, v in shared.state_dict().items()}
    )
    x = rng.uniform(0, 2, (int(rng.integers(1, 3)), T, ci, size, size)).astype(np.float32)
    return shared, conv3d, x


def compare_tiled(shared, conv3d, x):
    """(max pre-neuron |Δ| over blocks, whether all block spikes agree)."""
    from snn3d.tensor import Tensor, no_grad

    worst, same = 0.0, True
    with no_grad():
        a = b = Tensor(x)
        for idx in range(len(shared.spec.blocks)):
            ca, cb = shared.block_currents(idx, a), conv3d.block_currents(idx, b)
            worst = max(worst, float(np.abs(ca.data - cb.data).max()))
            a, b = shared.block_forward(idx, a), conv3d.block_forward(idx, b)
            same &= bool(np.array_equal(a.data, b.data))
    return worst, same


# one "PASS/FAIL criterion N: ..." line per acceptance criterion, echoed in the summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
