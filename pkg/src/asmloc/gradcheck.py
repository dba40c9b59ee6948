"""Finite-difference verification of the analytic gradients."""

import numpy as np

from . import autodiff as ad


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric, floor=1e-7):
    """max |a - n| scaled by the larger of the two gradients' max magnitudes."""
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(diff / scale)


def check_params(loss_fn, params, h=1e-5):
    """Compare ``backward`` against central differences for every parameter.

    ``loss_fn()`` must rebuild the graph from ``params`` and return a scalar
    Tensor. Returns name -> relative error.
    """
    params.zero_grad()
    ad.backward(loss_fn())
    analytic = {k: p.grad.copy() for k, p in params.items()}
    report = {}
    for name, p in params.items():
        num = numeric_grad(lambda: float(loss_fn().data), p.data, h)
        report[name] = relative_error(analytic[name], num)
    params.zero_grad()
    return report


def check_inputs(fn, *arrays, h=1e-5):
    """Gradient check of ``sum(fn(*tensors) * R)`` against each input array."""
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    R = np.random.default_rng(123).standard_normal(out.shape)

    def loss():
        return ad.sum(ad.mul(fn(*tensors), R))

    for t in tensors:
        t.zero_grad()
    ad.backward(loss())
    errs = []
    for t in tensors:
        num = numeric_grad(lambda: float(loss().data), t.data, h)
        errs.append(relative_error(t.grad, num))
    return errs


def group_report(report):
    """Max relative error per parameter group (the name up to the first dot)."""
    out = {}
    for name, err in report.items():
        g = name.split(".")[0]
        out[g] = max(out.get(g, 0.0), err)
    return out


def check_model(cfg, T=12, path="full", seed=0, jitter=0.1, h=1e-5):
    """Finite-difference check of the whole training loss on one random video.

    ``path="base"`` runs the plain MIL model; ``"full"`` adds two proposals
    so DSS, both attention blocks and the instance loss are all exercised.
    Parameters are jittered away from their initial values first, since
    several blocks start at exactly zero. Returns name -> relative error.
    """
    from .dataset import VideoRecord, encode_labels
    from .errors import ContractError
    from .model import init_params
    from .training import total_loss

    if path not in ("base", "full"):
        raise ContractError(f"unknown gradient-check path {path!r}")
    if T < 6:
        raise ContractError("gradient check needs T >= 6")
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    for p in params.values():
        p.data = p.data + jitter * rng.standard_normal(p.shape)
    c1 = 1
    c2 = 2 if cfg.C > 1 else 1
    y_fg, _ = encode_labels([c1, c2], cfg.C)
    video = VideoRecord("gradcheck", rng.standard_normal((T, cfg.feature_dim)), y_fg)
    props = None
    if path == "full":
        props = [(1, 3, c1), (T // 2, T - 1, c2)]
    return check_params(lambda: total_loss(params, cfg, video, props)[0], params, h)
