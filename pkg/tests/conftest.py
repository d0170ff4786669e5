import pytest

from flashmeans import _kernels


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # Compile (or load from disk cache) every jitted kernel up front so
    # timing-sensitive tests never measure compilation.
    _kernels.warmup()
