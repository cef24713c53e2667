"""Random instance builders shared by several test modules."""
import numpy as np

from siamgat.gam import GraphAttention
from siamgat.geometry import TemplateROI

# verdict lines appended by the acceptance suite, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def random_roi(rng, H, W):
    r0, r1 = sorted(rng.integers(0, H, 2))
    c0, c1 = sorted(rng.integers(0, W, 2))
    return TemplateROI(int(r0), int(c0), int(r1), int(c1), (H, W))


def random_gam(rng, max_t=5, max_s=9, max_c=8, batchnorm=True, **kw):
    """A GraphAttention with perturbed BN parameters and one random template/search pair."""
    c = int(rng.integers(1, max_c + 1))
    cp = int(rng.integers(1, max_c + 1))
    Ht, Wt = rng.integers(1, max_t + 1, 2)
    Hs, Ws = rng.integers(1, max_s + 1, 2)
    op = GraphAttention(c, cp, batchnorm=batchnorm, rng=rng, **kw)
    op.wv.params["bias"] = rng.normal(size=cp)
    for bn in (op.bn_s, op.bn_t, op.bn_v):
        if bn is not None:
            bn.params["gamma"] = rng.uniform(0.5, 1.5, cp)
            bn.params["beta"] = rng.normal(0, 0.5, cp)
            bn.buffers["running_mean"] = rng.normal(0, 0.5, cp)
            bn.buffers["running_var"] = rng.uniform(0.5, 2.0, cp)
    ft = rng.normal(size=(int(Ht), int(Wt), c))
    fs = rng.normal(size=(int(Hs), int(Ws), c))
    return op, ft, fs, random_roi(rng, int(Ht), int(Wt))
