"""Conditional density models over continuous actions.

Three models share one contract (``log_prob``, ``sample``, ``entropy_term``):

* :class:`GMM` - a network predicting means, log-stds and weight logits of
  ``k`` diagonal Gaussians.
* :class:`FlowModel` - Real NVP affine coupling layers over a standard
  normal base.
* :class:`MofModel` - a latent Gaussian mixture whose every component is
  pushed through its own coupling stack.

Conditions are ``(B, C)`` arrays; actions are ``(B, D)`` arrays. Log
densities come back as ``(B,)`` tensors.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Tensor

LOG_2PI = math.log(2.0 * math.pi)


def normal_log_prob(z, mu, log_std):
    """Diagonal Gaussian log density summed over the last axis."""
    z, mu, log_std = ad.as_tensor(z), ad.as_tensor(mu), ad.as_tensor(log_std)
    scaled = ad.mul(ad.sub(z, mu), ad.exp(ad.neg(log_std)))
    per_dim = ad.affine(ad.add(ad.square(scaled), ad.affine(log_std, 2.0, 0.0)), -0.5, -0.5 * LOG_2PI)
    return per_dim.sum(axis=-1)


def _as_cond(cond):
    cond = np.asarray(cond, dtype=np.float64)
    return cond[None, :] if cond.ndim == 1 else cond


class DensityModel:
    tag = "base"

    def __init__(self, action_dim, cond_dim):
        if action_dim < 1 or cond_dim < 1:
            raise ValueError("action_dim and cond_dim must be >= 1")
        self.action_dim = int(action_dim)
        self.cond_dim = int(cond_dim)

    def _check(self, cond, x=None):
        cond = _as_cond(cond)
        if cond.shape[1] != self.cond_dim:
            raise ValueError(f"{self.tag}: condition width {cond.shape[1]} != {self.cond_dim}")
        if x is not None:
            xd = x.shape[-1]
            if xd != self.action_dim:
                raise ValueError(f"{self.tag}: action dimension {xd} != {self.action_dim}")
            if x.shape[0] != cond.shape[0]:
                raise ValueError(f"{self.tag}: {x.shape[0]} actions for {cond.shape[0]} conditions")
        return cond

    # subclasses implement log_prob, _sample_raw, component_rsample, named_parameters, hyperparameters

    def sample(self, cond, rng):
        """One sample per condition row. Returns ``(actions, log_probs)`` as arrays."""
        cond = self._check(cond)
        with ad.no_grad():
            x = self._sample_raw(cond, rng)
            lp = self.log_prob(cond, x).data
        return x, lp

    def sample_n(self, cond_vec, n, rng):
        if n < 1:
            raise ValueError("n must be >= 1")
        cond = np.repeat(_as_cond(cond_vec), n, axis=0)
        return self.sample(cond, rng)

    def log_prob_np(self, cond, x):
        with ad.no_grad():
            return self.log_prob(cond, np.asarray(x, dtype=np.float64)).data

    def entropy_term(self, cond, m, rng):
        """Differentiable estimate of E_{a~pi}[log pi(a|s)], averaged over condition rows.

        Component samples are reparameterized; mixture weights enter through
        the exact sum over components.
        """
        cond = self._check(cond)
        x, log_w = self.component_rsample(cond, m, rng)
        k, n, d = x.shape
        b = cond.shape[0]
        cond_rep = np.tile(np.repeat(cond, m, axis=0), (k, 1))
        lp = self.log_prob(cond_rep, ad.reshape(x, (k * n, d)))
        lp = ad.reshape(lp, (k, b, m)).mean(axis=2)
        w = ad.transpose(ad.exp(log_w))
        return ad.mul(w, lp).sum(axis=0).mean()

    def parameters(self):
        return list(self.named_parameters().values())

    def save(self, path):
        ad.save_checkpoint(path, self.named_parameters(), self.tag, self.hyperparameters())


class GMM(DensityModel):
    """Conditional mixture of ``k`` diagonal Gaussians.

    ``hidden=()`` gives a single linear layer from condition to mixture
    parameters. With ``fixed_std`` set the standard deviation is a constant
    and only means and weights are learned.
    """

    tag = "gmm"

    def __init__(
        self,
        action_dim,
        cond_dim,
        k=4,
        hidden=(),
        init_std=1.0,
        fixed_std=None,
        log_std_bounds=(-5.0, 2.0),
        activation="tanh",
        rng=None,
    ):
        super().__init__(action_dim, cond_dim)
        rng = np.random.default_rng(0) if rng is None else rng
        self.k = int(k)
        self.hidden = tuple(int(h) for h in hidden)
        self.init_std = float(init_std)
        self.fixed_std = None if fixed_std is None else float(fixed_std)
        self.log_std_bounds = (float(log_std_bounds[0]), float(log_std_bounds[1]))
        self.activation = activation
        kd = self.k * self.action_dim
        n_std = 0 if self.fixed_std is not None else kd
        self.net = MLP([cond_dim, *self.hidden, kd + n_std + self.k], activation=activation, rng=rng)
        last_w, last_b = self.net.weights[-1], self.net.biases[-1]
        last_w.data[:, kd:] = 0.0
        last_b.data[kd : kd + n_std] = math.log(self.init_std)

    def mixture_params(self, cond):
        """Means ``(B,k,D)``, log-stds ``(B,k,D)`` and log-weights ``(B,k)``."""
        out = self.net(cond)
        b = out.shape[0]
        kd = self.k * self.action_dim
        mu = ad.reshape(out[:, :kd], (b, self.k, self.action_dim))
        if self.fixed_std is None:
            raw = ad.reshape(out[:, kd : 2 * kd], (b, self.k, self.action_dim))
            log_std = ad.clip(raw, *self.log_std_bounds)
            logits = out[:, 2 * kd :]
        else:
            log_std = Tensor(np.full((b, self.k, self.action_dim), math.log(self.fixed_std)))
            logits = out[:, kd:]
        return mu, log_std, ad.log_softmax(logits, axis=-1)

    def log_prob(self, cond, x):
        x = ad.as_tensor(x)
        cond = self._check(cond, x)
        mu, log_std, log_w = self.mixture_params(cond)
        b = x.shape[0]
        comp = normal_log_prob(ad.reshape(x, (b, 1, self.action_dim)), mu, log_std)
        return ad.logsumexp(ad.add(comp, log_w), axis=1)

    def _sample_raw(self, cond, rng):
        mu, log_std, log_w = self.mixture_params(cond)
        return _draw_mixture(mu.data, log_std.data, log_w.data, rng)

    def component_rsample(self, cond, m, rng):
        mu, log_std, log_w = self.mixture_params(cond)
        return _latent_rsample(mu, log_std, m, rng), log_w

    def named_parameters(self):
        return self.net.named_parameters("net.")

    def hyperparameters(self):
        return {
            "action_dim": self.action_dim,
            "cond_dim": self.cond_dim,
            "k": self.k,
            "hidden": list(self.hidden),
            "init_std": self.init_std,
            "fixed_std": self.fixed_std,
            "log_std_bounds": list(self.log_std_bounds),
            "activation": self.activation,
        }


def _draw_mixture(mu, log_std, log_w, rng):
    b, k, d = mu.shape
    w = np.exp(log_w)
    u = rng.random(b)
    comp = np.minimum((np.cumsum(w, axis=1) < u[:, None]).sum(axis=1), k - 1)
    eps = rng.standard_normal((b, d))
    rows = np.arange(b)
    return mu[rows, comp] + np.exp(log_std[rows, comp]) * eps


def _latent_rsample(mu, log_std, m, rng):
    """Reparameterized draws from every component: ``(k, B*m, D)``."""
    b, k, d = mu.shape
    eps = rng.standard_normal((k, b, m, d))
    mu_k = ad.broadcast_to(ad.reshape(ad.transpose(mu, (1, 0, 2)), (k, b, 1, d)), (k, b, m, d))
    ls_k = ad.broadcast_to(ad.reshape(ad.transpose(log_std, (1, 0, 2)), (k, b, 1, d)), (k, b, m, d))
    z = ad.add(mu_k, ad.mul(ad.exp(ls_k), eps))
    return ad.reshape(z, (k, b * m, d))


class CouplingLayer:
    """Affine coupling: one half passes through, the other is scaled and shifted.

    ``pass_first`` selects which half conditions the transform. The s- and
    t-networks see the pass-through half concatenated with the condition
    features. The raw s output goes through ``s_scale * tanh``.
    """

    def __init__(self, dim, feat_dim, pass_first, hidden=64, stack=1, s_scale=3.0, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.dim = dim
        self.split = math.ceil(dim / 2)
        self.pass_first = pass_first
        if pass_first:
            self.pass_sl, self.trans_sl = slice(0, self.split), slice(self.split, dim)
        else:
            self.pass_sl, self.trans_sl = slice(self.split, dim), slice(0, self.split)
        n_pass = len(range(dim)[self.pass_sl])
        n_trans = dim - n_pass
        if n_trans == 0:
            raise ValueError("coupling layer would transform no coordinates")
        self.stack = stack
        self.s_scale = float(s_scale)
        self.s_net = MLP([n_pass + feat_dim, hidden, n_trans], rng=rng, stack=stack, zero_last=True)
        self.t_net = MLP([n_pass + feat_dim, hidden, n_trans], rng=rng, stack=stack)

    def _st(self, y_pass, feats):
        inp = feats if y_pass.shape[-1] == 0 else ad.concat([y_pass, feats], axis=-1)
        s = ad.affine(ad.tanh(self.s_net(inp)), self.s_scale, 0.0)
        t = self.t_net(inp)
        return s, t

    def _join(self, y_pass, y_trans):
        if y_pass.shape[-1] == 0:
            return y_trans
        parts = [y_pass, y_trans] if self.pass_first else [y_trans, y_pass]
        return ad.concat(parts, axis=-1)

    def forward(self, y, feats):
        """``y`` and ``feats`` carry a leading stack axis: ``(K, B, D)`` and ``(K, B, F)``."""
        y_pass, y_trans = y[..., self.pass_sl], y[..., self.trans_sl]
        s, t = self._st(y_pass, feats)
        out = ad.add(ad.mul(y_trans, ad.exp(s)), t)
        return self._join(y_pass, out), s.sum(axis=-1)

    def inverse(self, y, feats):
        y_pass, y_trans = y[..., self.pass_sl], y[..., self.trans_sl]
        s, t = self._st(y_pass, feats)
        out = ad.mul(ad.sub(y_trans, t), ad.exp(ad.neg(s)))
        return self._join(y_pass, out), ad.neg(s.sum(axis=-1))

    def named_parameters(self, prefix):
        named = self.s_net.named_parameters(prefix + "s.")
        named.update(self.t_net.named_parameters(prefix + "t."))
        return named


def coupling_forward(layer, y, feats):
    return layer.forward(y, feats)


def coupling_inverse(layer, y, feats):
    return layer.inverse(y, feats)


class CouplingStack:
    """``K`` independent coupling-layer sequences evaluated in one batched pass."""

    def __init__(self, dim, feat_dim, n_layers=4, hidden=64, stack=1, s_scale=3.0, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.dim = dim
        self.stack = stack
        self.layers = []
        pass_first = True
        for _ in range(n_layers):
            if dim == 1:
                # one coordinate: every layer is an affine map driven by the features alone
                pass_first = False
            self.layers.append(CouplingLayer(dim, feat_dim, pass_first, hidden, stack, s_scale, rng))
            pass_first = not pass_first

    def _feats(self, feats):
        # feats (B, F) -> (K, B, F)
        return ad.broadcast_to(ad.reshape(feats, (1,) + feats.shape), (self.stack,) + feats.shape)

    def forward(self, z, feats):
        f = self._feats(feats)
        log_det = None
        for layer in self.layers:
            z, ld = layer.forward(z, f)
            log_det = ld if log_det is None else ad.add(log_det, ld)
        return z, log_det

    def inverse(self, x, feats):
        f = self._feats(feats)
        log_det = None
        for layer in reversed(self.layers):
            x, ld = layer.inverse(x, f)
            log_det = ld if log_det is None else ad.add(log_det, ld)
        return x, log_det

    def named_parameters(self, prefix):
        named = {}
        for i, layer in enumerate(self.layers):
            named.update(layer.named_parameters(f"{prefix}{i}."))
        return named


class FlowModel(DensityModel):
    """Real NVP over a standard normal base, conditioned through a feature encoder."""

    tag = "flow"

    def __init__(
        self,
        action_dim,
        cond_dim,
        n_layers=4,
        hidden=64,
        feat_dim=32,
        encoder_hidden=64,
        s_scale=3.0,
        rng=None,
    ):
        super().__init__(action_dim, cond_dim)
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_layers = n_layers
        self.hidden = hidden
        self.feat_dim = feat_dim
        self.encoder_hidden = encoder_hidden
        self.s_scale = s_scale
        self.encoder = MLP([cond_dim, encoder_hidden, feat_dim], rng=rng)
        self.flow = CouplingStack(action_dim, feat_dim, n_layers, hidden, 1, s_scale, rng)

    def log_prob(self, cond, x):
        x = ad.as_tensor(x)
        cond = self._check(cond, x)
        feats = self.encoder(cond)
        z, log_det = self.flow.inverse(ad.reshape(x, (1,) + x.shape), feats)
        zeros = np.zeros(z.shape)
        return ad.reshape(ad.add(normal_log_prob(z, zeros, zeros), log_det), (x.shape[0],))

    def _sample_raw(self, cond, rng):
        feats = self.encoder(cond)
        z = rng.standard_normal((1, cond.shape[0], self.action_dim))
        x, _ = self.flow.forward(Tensor(z), feats)
        return x.data[0]

    def component_rsample(self, cond, m, rng):
        b = cond.shape[0]
        feats = self.encoder(np.repeat(cond, m, axis=0))
        z = Tensor(rng.standard_normal((1, b * m, self.action_dim)))
        x, _ = self.flow.forward(z, feats)
        return x, Tensor(np.zeros((b, 1)))

    def named_parameters(self):
        named = self.encoder.named_parameters("encoder.")
        named.update(self.flow.named_parameters("flow."))
        return named

    def hyperparameters(self):
        return {
            "action_dim": self.action_dim,
            "cond_dim": self.cond_dim,
            "n_layers": self.n_layers,
            "hidden": self.hidden,
            "feat_dim": self.feat_dim,
            "encoder_hidden": self.encoder_hidden,
            "s_scale": self.s_scale,
        }


class MofModel(DensityModel):
    """Mixture of flows: latent conditional GMM, one coupling stack per component."""

    tag = "mof"

    def __init__(
        self,
        action_dim,
        cond_dim,
        k=4,
        gmm_hidden=(),
        init_std=1.0,
        log_std_bounds=(-5.0, 2.0),
        n_layers=4,
        hidden=64,
        feat_dim=32,
        encoder_hidden=64,
        s_scale=3.0,
        rng=None,
    ):
        super().__init__(action_dim, cond_dim)
        rng = np.random.default_rng(0) if rng is None else rng
        self.k = k
        self.n_layers = n_layers
        self.hidden = hidden
        self.feat_dim = feat_dim
        self.encoder_hidden = encoder_hidden
        self.s_scale = s_scale
        self.latent = GMM(
            action_dim, cond_dim, k=k, hidden=gmm_hidden, init_std=init_std,
            log_std_bounds=log_std_bounds, rng=rng,
        )
        self.encoder = MLP([cond_dim, encoder_hidden, feat_dim], rng=rng)
        self.flows = CouplingStack(action_dim, feat_dim, n_layers, hidden, k, s_scale, rng)

    def log_prob(self, cond, x):
        x = ad.as_tensor(x)
        cond = self._check(cond, x)
        b, d = x.shape
        mu, log_std, log_w = self.latent.mixture_params(cond)
        feats = self.encoder(cond)
        xk = ad.broadcast_to(ad.reshape(x, (1, b, d)), (self.k, b, d))
        z, log_det = self.flows.inverse(xk, feats)
        comp = normal_log_prob(z, ad.transpose(mu, (1, 0, 2)), ad.transpose(log_std, (1, 0, 2)))
        return ad.logsumexp(ad.add(ad.add(comp, log_det), ad.transpose(log_w)), axis=0)

    def _sample_raw(self, cond, rng):
        mu, log_std, log_w = self.latent.mixture_params(cond)
        b = cond.shape[0]
        w = np.exp(log_w.data)
        u = rng.random(b)
        comp = np.minimum((np.cumsum(w, axis=1) < u[:, None]).sum(axis=1), self.k - 1)
        eps = rng.standard_normal((b, self.action_dim))
        rows = np.arange(b)
        z = mu.data[rows, comp] + np.exp(log_std.data[rows, comp]) * eps
        feats = self.encoder(cond)
        zk = np.broadcast_to(z[None], (self.k, b, self.action_dim))
        x, _ = self.flows.forward(Tensor(zk), feats)
        return x.data[comp, rows]

    def component_rsample(self, cond, m, rng):
        mu, log_std, log_w = self.latent.mixture_params(cond)
        z = _latent_rsample(mu, log_std, m, rng)
        feats = self.encoder(np.repeat(cond, m, axis=0))
        x, _ = self.flows.forward(z, feats)
        return x, log_w

    def named_parameters(self):
        named = {f"latent.{k}": v for k, v in self.latent.named_parameters().items()}
        named.update(self.encoder.named_parameters("encoder."))
        named.update(self.flows.named_parameters("flows."))
        return named

    def hyperparameters(self):
        return {
            "action_dim": self.action_dim,
            "cond_dim": self.cond_dim,
            "k": self.k,
            "gmm_hidden": list(self.latent.hidden),
            "init_std": self.latent.init_std,
            "log_std_bounds": list(self.latent.log_std_bounds),
            "n_layers": self.n_layers,
            "hidden": self.hidden,
            "feat_dim": self.feat_dim,
            "encoder_hidden": self.encoder_hidden,
            "s_scale": self.s_scale,
        }


class BoxDensity(DensityModel):
    """Squash an unbounded model into the box ``[low, high]^D`` with a sigmoid."""

    tag = "box"

    def __init__(self, base, low, high):
        super().__init__(base.action_dim, base.cond_dim)
        self.base = base
        self.low = np.broadcast_to(np.asarray(low, dtype=np.float64), (base.action_dim,)).copy()
        self.high = np.broadcast_to(np.asarray(high, dtype=np.float64), (base.action_dim,)).copy()
        self._log_width = float(np.log(self.high - self.low).sum())

    def _log_jac(self, y):
        # log |da/dy| summed over dims
        lj = ad.neg(ad.add(ad.softplus(ad.neg(y)), ad.softplus(y)))
        return ad.affine(lj.sum(axis=-1), 1.0, self._log_width)

    def to_latent(self, a):
        u = (np.asarray(a, dtype=np.float64) - self.low) / (self.high - self.low)
        u = np.clip(u, 1e-300, 1 - 1e-16)
        return np.log(u) - np.log1p(-u)

    def log_prob(self, cond, a):
        a = ad.as_tensor(a)
        cond = self._check(cond, a)
        y = Tensor(self.to_latent(a.data))
        return ad.sub(self.base.log_prob(cond, y), self._log_jac(y))

    def _sample_raw(self, cond, rng):
        y = self.base._sample_raw(cond, rng)
        return self.low + (self.high - self.low) / (1.0 + np.exp(-y))

    def component_rsample(self, cond, m, rng):
        raise NotImplementedError("BoxDensity computes its entropy term directly")

    def entropy_term(self, cond, m, rng):
        cond = self._check(cond)
        y, log_w = self.base.component_rsample(cond, m, rng)
        k, n, d = y.shape
        b = cond.shape[0]
        cond_rep = np.tile(np.repeat(cond, m, axis=0), (k, 1))
        yf = ad.reshape(y, (k * n, d))
        lp = ad.sub(self.base.log_prob(cond_rep, yf), self._log_jac(yf))
        lp = ad.reshape(lp, (k, b, m)).mean(axis=2)
        w = ad.transpose(ad.exp(log_w))
        return ad.mul(w, lp).sum(axis=0).mean()

    def named_parameters(self):
        return {f"base.{k}": v for k, v in self.base.named_parameters().items()}

    def hyperparameters(self):
        return {"base_tag": self.base.tag, "base": self.base.hyperparameters(),
                "low": self.low.tolist(), "high": self.high.tolist()}


# -- functional aliases ----------------------------------------------------
def gmm_log_prob(model, cond, x):
    return model.log_prob(cond, x)


def gmm_sample(model, cond, n, rng):
    return model.sample_n(cond, n, rng)


def flow_log_prob(model, cond, x):
    return model.log_prob(cond, x)


def flow_sample(model, cond, n, rng):
    return model.sample_n(cond, n, rng)


def mof_log_prob(model, cond, x):
    return model.log_prob(cond, x)


def mof_sample(model, cond, n, rng):
    return model.sample_n(cond, n, rng)


MODEL_CLASSES = {"gmm": GMM, "flow": FlowModel, "mof": MofModel}


def build_model(tag, action_dim, cond_dim, rng=None, **kwargs):
    try:
        cls = MODEL_CLASSES[tag]
    except KeyError:
        raise ValueError(f"unknown model type {tag!r}; expected one of {sorted(MODEL_CLASSES)}") from None
    return cls(action_dim, cond_dim, rng=rng, **kwargs)


def _from_hyper(tag, hyper):
    hyper = dict(hyper)
    if tag == "box":
        base = _from_hyper(hyper["base_tag"], hyper["base"])
        return BoxDensity(base, hyper["low"], hyper["high"])
    a, c = hyper.pop("action_dim"), hyper.pop("cond_dim")
    for key in ("hidden", "gmm_hidden"):
        if key in hyper and isinstance(hyper[key], list):
            hyper[key] = tuple(hyper[key])
    return MODEL_CLASSES[tag](a, c, **hyper)


def load_model(path):
    payload = json.loads(Path(path).read_text())
    model = _from_hyper(payload["model"], payload["hyperparameters"])
    ad.load_params_dict(model.named_parameters(), payload)
    return model


def argmax_sample(actions, log_probs, feasible=None):
    """Index of the highest-density sample; ties go to the lowest index."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if feasible is not None:
        lp = np.where(feasible, lp, -np.inf)
    return int(np.argmax(lp))
