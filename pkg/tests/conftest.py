import numpy as np
import pytest

from rdmasparse.fabric import Fabric, run_spmd


def spmd(nranks, fn, *args, mode="threads", **fabric_kw):
    fabric = Fabric(nranks, mode=mode, timeout=30, **fabric_kw)
    return fabric, run_spmd(fabric, fn, *args)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
