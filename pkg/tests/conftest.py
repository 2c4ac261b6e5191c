import numpy as np
import pytest

from gnnedit.editharness import EditContext
from gnnedit.graphcore import generate_sbm, split_stratified
from gnnedit.models import Architecture, init_model, train_base


@pytest.fixture(scope="session")
def small_graph():
    return generate_sbm(2, 10, 0.5, 0.1, 5, feature_noise=1.0, seed=1)


@pytest.fixture(scope="session")
def desk_ctx():
    g = generate_sbm(4, 40, 0.1, 0.02, 16, feature_noise=0.5, mean_scale=0.5, seed=3)
    return EditContext.build(g, split_stratified(g.labels, 10, 10, seed=0))


@pytest.fixture(scope="session")
def desk_gcn(desk_ctx):
    m = init_model(Architecture("gcn", desk_ctx.graph.feature_dim, desk_ctx.graph.num_classes), 0)
    return train_base(m, desk_ctx.train_graph, desk_ctx.train_adj, 100, 0.01)[0]


def perturbed(model, scale=0.1, seed=0):
    rng = np.random.default_rng(seed)
    return model.with_theta(model.theta + scale * rng.normal(size=model.theta.shape))
