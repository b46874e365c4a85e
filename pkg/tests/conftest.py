import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from henfd.data import FieldSpec, Sample, Schema

settings.register_profile("henfd", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("henfd")


def small_schema():
    return Schema([
        FieldSpec("card", "categorical", shared=True),
        FieldSpec("ip", "categorical", shared=False),
        FieldSpec("amount", "numerical"),
    ])


def make_samples(rng, n, domain="source", t_max=4, n_card=4, n_ip=3, p_pos=0.5):
    out = []
    for i in range(n):
        def event():
            return {"card": f"c{rng.integers(n_card)}", "ip": f"i{rng.integers(n_ip)}",
                    "amount": float(rng.normal())}
        hist = [event() for _ in range(int(rng.integers(0, t_max)))]
        out.append(Sample(hist, event(), int(rng.random() < p_pos), domain, i, f"{domain}-{i}"))
    return out


@pytest.fixture
def schema():
    return small_schema()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
