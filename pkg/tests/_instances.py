"""Random small problem instances shared by the loss and acceptance tests."""

import numpy as np

from latentdist import diffcore as dc
from latentdist import losses as L
from latentdist.diffcore import Tensor
from latentdist.model import predict_latent_distribution

CLASS_COUNTS = (2, 3, 4, 7)


def covering_labels(rng, N, C):
    """Labels with every class present (N >= C)."""
    y = np.concatenate([np.arange(C), rng.integers(0, C, N - C)])
    return rng.permutation(y)


def instance(rng, C):
    N = int(rng.integers(C, 9))
    return N, covering_labels(rng, N, C)


def aux_ce_check(rng, C):
    N, y = instance(rng, C)
    pts = [rng.standard_normal((N, C - 1)) for _ in range(C)]
    return lambda *zs: L.aux_ce(y, list(zs)), pts


def soft_check(rng, C):
    # sharpened latent distribution is a constant of the target logits' gradient
    N, y = instance(rng, C)
    raw = rng.dirichlet(np.ones(C - 1), size=N)
    latent = L.sharpen(raw, 1.2)
    return (lambda z: L.soft_l2(dc.row_softmax(z), latent, y)), [rng.standard_normal((N, C))]


def msp_check(rng, C):
    N, y = instance(rng, C)
    pts = [np.abs(rng.standard_normal((N, 3))) + 0.1 for _ in range(C + 1)]

    def f(target, *aux):
        return L.msp_loss(L.similarity_matrix(target), [L.similarity_matrix(a) for a in aux], y)

    return f, pts


def wce_check(rng, C):
    N, y = instance(rng, C)
    alpha = rng.uniform(0.1, 1.0, (N, 1))
    return (lambda z, a: L.weighted_ce(z, a, y)), [rng.standard_normal((N, C)), alpha]


def total_check(rng, C):
    """Full objective at a random epoch; the latent target is frozen at the base point."""
    N, y = instance(rng, C)
    aux0 = [rng.standard_normal((N, C - 1)) for _ in range(C)]
    latent = L.sharpen(predict_latent_distribution(aux0, y).value, 1.2)
    epoch = int(rng.integers(1, 13))
    alpha = rng.uniform(0.2, 1.0, (N, 1))
    feats = [np.abs(rng.standard_normal((N, 3))) + 0.1 for _ in range(C + 1)]

    def f(z, *rest):
        aux_z = rest[:C]
        ft, fa = rest[C], rest[C + 1:]
        l_aux = L.aux_ce(y, list(aux_z))
        l_soft = L.soft_l2(dc.row_softmax(z), latent, y)
        l_sp = L.msp_loss(L.similarity_matrix(ft), [L.similarity_matrix(a) for a in fa], y)
        l_wce = L.weighted_ce(z, Tensor(alpha), y)
        return L.total_loss(l_wce, l_soft, l_sp, l_aux, epoch, 6, 0.5, 1e3)

    return f, [rng.standard_normal((N, C))] + aux0 + feats


COMPONENTS = {
    "aux_ce": aux_ce_check,
    "soft_l2": soft_check,
    "msp": msp_check,
    "weighted_ce": wce_check,
    "total": total_check,
}
