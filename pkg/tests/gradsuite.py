"""Central-difference checks for every trained loss, shared by the unit and
acceptance suites. Each case maps a seed to the worst relative error."""

import numpy as np

from safelab.approx import Mlp, grad_check
from safelab.models import (bce_logits_loss, cross_entropy_loss, dyn_loss, squared_loss,
                            value_online_td_loss)
from safelab.unsup.density import _Vae
from safelab.unsup.sac import (SacAgent, SacConfig, sac_policy_loss, sac_q_loss,
                               sac_value_loss)

N = 16
OBS, ACT = 6, 2


def _check(net, fn):
    return grad_check(net, fn)


def dynamics_nll(seed):
    rng = np.random.default_rng(seed)
    net = Mlp((4, 8, 8, 4), "gaussian", rng=rng)
    x, y = rng.normal(size=(N, 4)), rng.normal(size=(N, 2))
    return _check(net, lambda: dyn_loss(net, x, y))


def value_offline(seed):
    rng = np.random.default_rng(seed)
    net = Mlp((2, 8, 8, 1), rng=rng)
    x, y = rng.normal(size=(N, 2)), -rng.uniform(0, 50, size=N)
    return _check(net, lambda: squared_loss(net, x, y))


def value_td(seed):
    rng = np.random.default_rng(seed)
    net, target = Mlp((2, 8, 8, 1), rng=rng), Mlp((2, 8, 8, 1), rng=rng)
    x, xn = rng.normal(size=(N, 2)), rng.normal(size=(N, 2))
    r = -np.ones(N)
    done = rng.random(N) < 0.3
    return _check(net, lambda: value_online_td_loss(net, target, x, r, xn, done, 0.99))


def safe_set_bce(seed):
    rng = np.random.default_rng(seed)
    net = Mlp((2, 8, 8, 1), "sigmoid", rng=rng)
    x, y = rng.normal(size=(N, 2)), rng.uniform(0, 1, size=N)
    return _check(net, lambda: bce_logits_loss(net, x, y))


def classifier_bce(seed):
    rng = np.random.default_rng(seed)
    net = Mlp((2, 8, 8, 1), "sigmoid", rng=rng)
    x, y = rng.normal(size=(N, 2)), (rng.random(N) < 0.5).astype(float)
    return _check(net, lambda: bce_logits_loss(net, x, y))


def discriminator_ce(seed):
    rng = np.random.default_rng(seed)
    net = Mlp((2, 8, 8, 4), "softmax", rng=rng)
    x, z = rng.normal(size=(N, 2)), rng.integers(4, size=N)
    return _check(net, lambda: cross_entropy_loss(net, x, z))


def _agent(seed, alpha=0.1):
    rng = np.random.default_rng(seed)
    agent = SacAgent(OBS, ACT, 1.0, SacConfig(hidden=(8, 8), alpha=alpha), rng)
    return agent, rng


def sac_value(seed):
    agent, rng = _agent(seed)
    x, eps = rng.normal(size=(N, OBS)), rng.normal(size=(N, ACT))
    return _check(agent.v, lambda: sac_value_loss(agent, x, eps))


def sac_q(seed):
    agent, rng = _agent(seed)
    x, xn = rng.normal(size=(N, OBS)), rng.normal(size=(N, OBS))
    a = rng.uniform(-1, 1, size=(N, ACT))
    r, term = rng.normal(size=N), rng.random(N) < 0.2
    e1 = _check(agent.q1, lambda: (lambda l, g: (l, g[0]))(*sac_q_loss(agent, x, a, r, xn, term)))
    e2 = _check(agent.q2, lambda: (lambda l, g: (l, g[1]))(*sac_q_loss(agent, x, a, r, xn, term)))
    return max(e1, e2)


def sac_policy(seed):
    agent, rng = _agent(seed)
    x, eps = rng.normal(size=(N, OBS)), rng.normal(size=(N, ACT))
    return _check(agent.policy, lambda: sac_policy_loss(agent, x, eps))


def vae_elbo(seed):
    rng = np.random.default_rng(seed)
    vae = _Vae(2, 2, (8,), 1e-2, rng)
    x, eps = rng.normal(size=(N, 2)), rng.normal(size=(N, 2))
    e1 = _check(vae.enc, lambda: (lambda l, ge, gd: (l, ge))(*vae.loss(x, eps, 0.5)))
    e2 = _check(vae.dec, lambda: (lambda l, ge, gd: (l, gd))(*vae.loss(x, eps, 0.5)))
    return max(e1, e2)


CASES = {
    "dynamics_nll": dynamics_nll,
    "value_offline": value_offline,
    "value_td": value_td,
    "safe_set_bce": safe_set_bce,
    "classifier_bce": classifier_bce,
    "discriminator_ce": discriminator_ce,
    "sac_value": sac_value,
    "sac_q": sac_q,
    "sac_policy": sac_policy,
    "vae_elbo": vae_elbo,
}

