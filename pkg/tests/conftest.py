import numpy as np
import pytest

from allmargin.network import init_network
from allmargin._util import rng_for


def random_point(seed, dim):
    return rng_for(seed, 1000).standard_normal(dim)


def correctly_classified_instance(widths, activation, seed, min_gamma=0.05):
    """A (net, x, y) triple the net classifies with some room to spare."""
    from allmargin.network import forward_trace

    for attempt in range(200):
        net = init_network(widths, activation, seed=seed * 1000 + attempt)
        x = rng_for(seed, 17, attempt).standard_normal(widths[0])
        z = forward_trace(net, x, 0).logits
        if z.size == 1:
            y = 1 if z[0] > 0 else 0
        else:
            y = int(np.argmax(z))
        tr = forward_trace(net, x, y)
        if tr.gamma > min_gamma:
            return net, x, y
    raise AssertionError("no confidently classified instance found")


@pytest.fixture
def tiny_tanh():
    return init_network([2, 3, 2], "tanh", seed=0)
