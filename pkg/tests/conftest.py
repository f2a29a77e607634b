import contextlib

import pytest

from taskforge.pool import Pool, PoolConfig

BACKENDS = ["sim", "local"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def make_pool(backend):
    """Factory for invariant-checked pools on the parametrized backend."""
    pools = []

    def factory(workers=2, **kw):
        kw.setdefault("check_invariants", True)
        pool = Pool(PoolConfig(workers=workers, backend=backend, **kw))
        pools.append(pool)
        return pool

    yield factory
    for p in pools:
        with contextlib.suppress(Exception):
            p.shutdown()
        assert p.invariant_violations == []
        assert p.live_jobs() == []
