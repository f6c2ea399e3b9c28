"""Parameter surgery shared by the tests."""

import math

import numpy as np

from actorgrasp.density import GMM


def set_gmm(gmm, mu, std, w):
    """Unconditional mixture: zero condition weights, parameters in the biases."""
    mu, std, w = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (mu, std, w))
    k, d = gmm.k, gmm.action_dim
    last_w, last_b = gmm.net.weights[-1], gmm.net.biases[-1]
    last_w.data[...] = 0.0
    last_b.data[: k * d] = mu.reshape(k, d).ravel()
    off = k * d
    if gmm.fixed_std is None:
        last_b.data[off : off + k * d] = np.log(std.reshape(k, d)).ravel()
        off += k * d
    with np.errstate(divide="ignore"):
        last_b.data[off:] = np.log(w.ravel())
    return gmm


def make_gmm(mu, std, w, action_dim=1):
    k = np.asarray(w).size
    return set_gmm(GMM(action_dim, 1, k=k, log_std_bounds=(-20.0, 5.0)), mu, std, w)


def flow_layers(model):
    return model.flows.layers if hasattr(model, "flows") else model.flow.layers


def make_identity(model):
    for layer in flow_layers(model):
        for net in (layer.s_net, layer.t_net):
            net.weights[-1].data[...] = 0.0
            net.biases[-1].data[...] = 0.0
    return model


def set_constant_layer(layer, s=0.0, t=0.0):
    """s-network outputs ``s`` and t-network outputs ``t`` everywhere."""
    layer.s_net.weights[-1].data[...] = 0.0
    layer.s_net.biases[-1].data[...] = math.atanh(s / layer.s_scale)
    layer.t_net.weights[-1].data[...] = 0.0
    layer.t_net.biases[-1].data[...] = t


def randomize_last_layers(model, rng, scale=0.3):
    for layer in flow_layers(model):
        for net in (layer.s_net, layer.t_net):
            net.weights[-1].data[...] = scale * rng.standard_normal(net.weights[-1].shape)
            net.biases[-1].data[...] = 0.5 * scale * rng.standard_normal(net.biases[-1].shape)
    return model


ONE = np.ones((1, 1))
