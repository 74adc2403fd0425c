import numpy as np
import pytest

from slidegcd import numerics as nx


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(a):
    """float64 leaf tensor that takes part in gradient checks."""
    return nx.Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def tiny_config(**overrides):
    from slidegcd import TrainConfig
    base = dict(buffer_size=16, k=3, batch_size=4, embed_dim=8, proj_dim=8, attn_dim=8,
                warmup_epochs=2, total_epochs=5, lr_warmup=2e-3, lr_formal=1e-3)
    base.update(overrides)
    return TrainConfig.reference(**base)


def tiny_dataset(seed=0, per_class=20):
    from slidegcd import SyntheticSpec, generate_synthetic
    return generate_synthetic(SyntheticSpec(slides_per_class=per_class, patches_min=4, patches_max=10,
                                            patch_dim=8, seed=seed))


@pytest.fixture(scope="session")
def tiny_run():
    from slidegcd import train
    ds = tiny_dataset()
    return tiny_config(), ds, train(tiny_config(), ds)
