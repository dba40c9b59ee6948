"""MIL base model and the full forward pass with segment modules.

Column layout of every (C+1)-wide array: classes 1..C in columns 0..C-1,
background last.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .config import ModelConfig
from .errors import ConfigurationError, ContractError
from .optim import ParameterStore
from .segment import (SamplingPlan, attention_mask, build_sampling_plan, init_attention_block,
                      inter_segment_attention, intra_segment_attention, resample_features)

CE_EPS = 1e-12


@dataclass
class ModelOutputs:
    X: object   # T x E embedded features
    P: object   # T x (C+1) class logits (CAS)
    A: object   # T x 2 attention, column 0 foreground, column 1 background
    U: object   # T uncertainty


@dataclass
class Forward:
    outputs: ModelOutputs
    plan: Optional[SamplingPlan]
    proposals: Optional[list]   # proposals in the coordinates of ``outputs``


def init_params(cfg: ModelConfig, rng) -> ParameterStore:
    cfg.validate()
    E, D, C, w = cfg.E, cfg.feature_dim, cfg.C, cfg.kernel_width
    s = cfg.init_scale
    p = ParameterStore()
    lim = s * math.sqrt(6.0 / (w * D + E))
    p.add("embed.weight", rng.uniform(-lim, lim, size=(w, D, E)))
    p.add("embed.bias", np.zeros(E))
    for name, width in (("cls", C + 1), ("att", 2)):
        lim = s * math.sqrt(6.0 / (E + width))
        p.add(f"{name}.weight", rng.uniform(-lim, lim, size=(E, width)))
        p.add(f"{name}.bias", np.zeros(width))
    # U is idle until the instance loss switches on; starting it at 0 keeps
    # exp(-U) at 1 however far the embedding has drifted by then
    p.add("unc.weight", np.zeros((E, 1)))
    p.add("unc.bias", np.zeros(1))
    for i in range(cfg.attention_depth):
        if cfg.use_intra:
            init_attention_block(p, f"intra{i}", E, rng, with_bn=True, scale=s)
        if cfg.use_inter:
            init_attention_block(p, f"inter{i}", E, rng, with_bn=False, scale=s)
    return p


def parameter_shapes(cfg: ModelConfig):
    return {k: v.shape for k, v in init_params(cfg, np.random.default_rng(0)).items()}


def embed(features, params, cfg: ModelConfig):
    """X = ReLU(conv(F))."""
    F = ad.as_tensor(features)
    if F.ndim != 2 or F.shape[1] != cfg.feature_dim:
        raise ConfigurationError(f"features of shape {F.shape} do not match feature_dim={cfg.feature_dim}")
    return ad.relu(ad.conv1d_temporal(F, params["embed.weight"], params["embed.bias"]))


def _affine(X, params, name):
    return ad.add(ad.matmul(X, params[f"{name}.weight"]), params[f"{name}.bias"])


def heads(X, params, cfg: ModelConfig) -> ModelOutputs:
    P = _affine(X, params, "cls")
    A = ad.softmax(_affine(X, params, "att"), axis=1)
    U = ad.reshape(_affine(X, params, "unc"), (X.shape[0],))
    return ModelOutputs(X, P, A, U)


def attention_weighted_cas(P, A):
    """(P * A_fg, P * A_bg), the attention column broadcast over classes."""
    fg = ad.mul(P, ad.take_along_axis(A, np.zeros((A.shape[0], 1), dtype=int), axis=1))
    bg = ad.mul(P, ad.take_along_axis(A, np.ones((A.shape[0], 1), dtype=int), axis=1))
    return fg, bg


def topk_mean(P_hat, k):
    """Per-class mean of the k largest temporal values."""
    T = P_hat.shape[0]
    if not 1 <= k <= T:
        raise ContractError(f"top-k needs 1 <= k <= T, got k={k}, T={T}")
    # stable sort on the negated values: ties resolved towards earlier snippets
    idx = np.argsort(-P_hat.data, axis=0, kind="stable")[:k]
    return ad.mean(ad.take_along_axis(P_hat, idx, axis=0), axis=0)


def topk_video_probs(P_hat, k):
    return ad.softmax(topk_mean(P_hat, k), axis=0)


def cross_entropy(p, y):
    return ad.mul(ad.sum(ad.mul(ad.log(p, CE_EPS), np.asarray(y, dtype=float))), -1.0)


def video_losses(p_fg, p_bg, y_fg, y_bg, cfg: ModelConfig):
    for name, p in (("p_fg", p_fg), ("p_bg", p_bg)):
        if abs(float(p.data.sum()) - 1.0) > 1e-6 or np.any(p.data < 0):
            raise ContractError(f"{name} is not a probability vector")
    L_fg = cross_entropy(p_fg, y_fg)
    L_bg = cross_entropy(p_bg, y_bg)
    L_abg = cross_entropy(p_bg, y_fg)
    L_vid = ad.add(ad.add(ad.mul(L_fg, cfg.lambda_fg), ad.mul(L_bg, cfg.lambda_bg)),
                   ad.mul(L_abg, cfg.lambda_abg))
    return L_fg, L_bg, L_abg, L_vid


def video_probs(outputs: ModelOutputs, cfg: ModelConfig):
    fg, bg = attention_weighted_cas(outputs.P, outputs.A)
    k = cfg.topk(outputs.P.shape[0])
    return topk_video_probs(fg, k), topk_video_probs(bg, k)


def forward(params, cfg: ModelConfig, features, proposals=None, use_dss=True) -> Forward:
    """Run the network on one video.

    ``proposals=None`` is the base model: no resampling, no segment
    attention. With proposals, DSS (if enabled in ``cfg`` and ``use_dss``)
    resamples the raw features first and the attention modules work in the
    resampled coordinates.
    """
    F = ad.as_tensor(features)
    T = F.shape[0]
    plan = None
    props = None
    if proposals is not None:
        props = [tuple(p) for p in proposals]
        if cfg.use_dss and use_dss:
            plan = build_sampling_plan(props, T, cfg.gamma_snippets)
            F = resample_features(F, plan)
            props = plan.proposals
    X = embed(F, params, cfg)
    if props is not None:
        mask = attention_mask(props, T) if cfg.use_intra else None
        for i in range(cfg.attention_depth):
            if cfg.use_intra:
                X = intra_segment_attention(X, mask, params, f"intra{i}", cfg.H)
            if cfg.use_inter:
                X = inter_segment_attention(X, props, params, f"inter{i}", cfg.H)
    return Forward(heads(X, params, cfg), plan, props)


@dataclass
class TrainedModel:
    """Parameters plus what inference needs to rebuild test-time proposals.

    ``refinements`` counts the proposal sets the parameters were trained
    with (0 for the plain base model). ``bootstrap`` holds the base-model
    parameters that produce the first proposals.
    """
    cfg: ModelConfig
    params: ParameterStore
    refinements: int = 0
    bootstrap: Optional[ParameterStore] = None

    def arrays(self):
        out = {k: v.data for k, v in self.params.items()}
        if self.bootstrap is not None:
            out.update({f"bootstrap/{k}": v.data for k, v in self.bootstrap.items()})
        return out

    def expected_shapes(self):
        shapes = parameter_shapes(self.cfg)
        if self.refinements > 0:
            shapes.update({f"bootstrap/{k}": s for k, s in shapes.copy().items()})
        return shapes

    def snapshot(self):
        return TrainedModel(self.cfg, self.params.copy(), self.refinements,
                            self.bootstrap.copy() if self.bootstrap is not None else None)

    def round_to_float32(self):
        for store in (self.params, self.bootstrap):
            if store is not None:
                for p in store.values():
                    p.data = p.data.astype(np.float32).astype(np.float64)
        return self
