import numpy as np
import pytest

from gemflow.core.net import Network, forward_cache, network_init


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale experiment tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def small_net():
    return network_init([2, 6, 5, 1], seed=11)


@pytest.fixture
def random_batch(rng):
    return rng.normal(size=(7, 2))


def activation_pattern(net: Network, batch: np.ndarray):
    _, cache = forward_cache(net, batch)
    return [z > 0 for z in cache.preactivations[:-1]]


def same_pattern(net_a: Network, net_b: Network, batch_a: np.ndarray, batch_b: np.ndarray) -> bool:
    return all(np.array_equal(a, b) for a, b in zip(activation_pattern(net_a, batch_a), activation_pattern(net_b, batch_b)))


@pytest.fixture
def param_fd():
    """Central differences of scalar fn(net) over every parameter entry.

    Entries whose perturbation flips a ReLU on `batch` are returned as NaN so
    callers compare only where the function is smooth.
    """

    def estimate(fn, net: Network, batch: np.ndarray, h: float = 1e-4):
        out = []
        for index, param in enumerate(net.parameters()):
            grad = np.full(param.shape, np.nan)
            for pos in np.ndindex(param.shape):
                plus, minus = net.copy(), net.copy()
                plus.parameters()[index][pos] += h
                minus.parameters()[index][pos] -= h
                if not (same_pattern(net, plus, batch, batch) and same_pattern(net, minus, batch, batch)):
                    continue
                grad[pos] = (fn(plus) - fn(minus)) / (2.0 * h)
            out.append(grad)
        return out

    return estimate


@pytest.fixture
def input_fd():
    """Central differences of a row-wise scalar network output w.r.t. each input coordinate"""

    def estimate(fn, net: Network, batch: np.ndarray, h: float = 1e-4):
        grad = np.full(batch.shape, np.nan)
        for i, j in np.ndindex(batch.shape):
            plus, minus = batch.copy(), batch.copy()
            plus[i, j] += h
            minus[i, j] -= h
            if not (same_pattern(net, net, batch, plus) and same_pattern(net, net, batch, minus)):
                continue
            grad[i, j] = (fn(plus)[i] - fn(minus)[i]) / (2.0 * h)
        return grad

    return estimate


def assert_matches_fd(analytic, numeric, rtol=1e-5, atol=1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    mask = ~np.isnan(numeric)
    assert mask.mean() > 0.8, "too many entries sit on ReLU kinks"
    np.testing.assert_allclose(analytic[mask], numeric[mask], rtol=rtol, atol=atol)


# gradient checks on random networks: a finer step, and batches kept this far from every ReLU kink
FD_STEP = 1e-5
KINK_MARGIN = 1e-3


def random_network(rng: np.random.Generator, input_width: int = 2, output_width: int = 1) -> Network:
    """He-initialised net with 1-3 hidden layers of width 2-6 and biases of magnitude 0.05-0.2"""
    hidden = [int(w) for w in rng.integers(2, 7, size=int(rng.integers(1, 4)))]
    net = network_init([input_width, *hidden, output_width], seed=int(rng.integers(2 ** 31)))
    for b in net.biases:
        b[...] = rng.uniform(0.05, 0.2, size=b.shape) * rng.choice([-1.0, 1.0], size=b.shape)
    return net


def kink_margin(net: Network, batch: np.ndarray) -> float:
    _, cache = forward_cache(net, batch)
    hidden = cache.preactivations[:-1]
    return min(float(np.abs(z).min()) for z in hidden) if hidden else np.inf


def clear_of_kinks(net: Network, draw, pattern=None, margin: float = KINK_MARGIN, tries: int = 1000):
    """Call draw() until its batch keeps every hidden preactivation `margin` away from zero.

    pattern maps the drawn value to the batch to check; by default a tuple of
    batches is stacked and a single batch is used as is.
    """
    for _ in range(tries):
        value = draw()
        if pattern is not None:
            batch = pattern(value)
        else:
            batch = np.vstack(value) if isinstance(value, tuple) else value
        if kink_margin(net, batch) > margin:
            return value
    raise AssertionError(f"no draw kept {margin} away from the ReLU kinks in {tries} tries")
