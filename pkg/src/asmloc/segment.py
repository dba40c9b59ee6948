"""Proposal-driven segment modeling: dynamic sampling and segment attention.

Proposals are ``(start, end, class)`` triples over half-open snippet
intervals. Snippet ``t`` occupies the continuous span ``[t, t + 1)``, so its
centre sits at ``t + 0.5``.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError


@dataclass
class SamplingPlan:
    weights: np.ndarray        # W, length T, >= 1
    positions: np.ndarray      # x_i, fractional snippet index of resampled row i
    knots: np.ndarray          # cumulative weight at 0..T (length T + 1)
    proposals: list            # proposals in resampled coordinates

    @property
    def T(self):
        return len(self.weights)

    @property
    def total(self):
        return self.knots[-1]

    def to_resampled(self, p):
        """Map continuous original time(s) to continuous resampled time."""
        return np.interp(p, np.arange(self.T + 1), self.knots) * self.T / self.total

    def to_original(self, r):
        """Inverse of ``to_resampled``."""
        return np.interp(np.asarray(r, dtype=float) * self.total / self.T,
                         self.knots, np.arange(self.T + 1))

    def interpolation_matrix(self):
        T = self.T
        x = self.positions
        i0 = np.floor(x).astype(int)
        i1 = np.minimum(i0 + 1, T - 1)
        w = x - i0
        R = np.zeros((T, T))
        rows = np.arange(T)
        np.add.at(R, (rows, i0), 1.0 - w)
        np.add.at(R, (rows, i1), w)
        return R

    def back_to_original(self, values):
        """Resample per-row outputs computed on the resampled timeline back onto
        the original snippets (numpy, inference only)."""
        values = np.asarray(values)
        T = self.T
        r = np.clip(self.to_resampled(np.arange(T) + 0.5) - 0.5, 0, T - 1)
        i0 = np.floor(r).astype(int)
        i1 = np.minimum(i0 + 1, T - 1)
        w = (r - i0).reshape((-1,) + (1,) * (values.ndim - 1))
        return (1.0 - w) * values[i0] + w * values[i1]


def sampling_weights(proposals, T, gamma):
    W = np.ones(T)
    for s, e, *_ in proposals:
        d = e - s
        if d <= gamma:
            W[s:e] = np.maximum(W[s:e], gamma / d)
    return W


def build_sampling_plan(proposals, T, gamma):
    """Inverse-transform sampling of T positions from the duration-scaled weights."""
    if T <= 0:
        raise ContractError("cannot build a sampling plan for an empty video")
    if gamma < 1:
        raise ContractError(f"gamma must be >= 1, got {gamma}")
    for s, e, *_ in proposals:
        if not 0 <= s < e <= T:
            raise ContractError(f"proposal [{s}, {e}) outside [0, {T})")
    W = sampling_weights(proposals, T, gamma)
    knots = np.concatenate([[0.0], np.cumsum(W)])
    targets = (np.arange(T) + 0.5) * knots[-1] / T
    u = np.interp(targets, knots, np.arange(T + 1.0))
    positions = np.clip(u - 0.5, 0.0, T - 1.0)
    plan = SamplingPlan(W, positions, knots, [])
    plan.proposals = [remap_proposal(plan, p) for p in proposals]
    return plan


def identity_plan(T):
    return build_sampling_plan([], T, 1.0)


def remap_proposal(plan, proposal):
    s, e, *rest = proposal
    rs, re_ = plan.to_resampled([s, e])
    ns = int(min(max(round(rs), 0), plan.T - 1))
    ne = int(min(max(round(re_), ns + 1), plan.T))
    return (ns, ne, *rest)


def resample_features(X, plan):
    """Rows of X linearly interpolated at the plan's sample positions."""
    if X.shape[0] != plan.T:
        raise ContractError(f"plan built for T={plan.T}, features have T={X.shape[0]}")
    return ad.matmul(plan.interpolation_matrix(), X)


def attention_mask(proposals, T):
    M = np.zeros((T, T), dtype=bool)
    for s, e, *_ in proposals:
        M[s:e, s:e] = True
    return M


def init_attention_block(params, prefix, E, rng, with_bn, scale=1.0, identity=True):
    """Add wq/wk/wv/wo (and the BN affine when ``with_bn``) under ``prefix``.

    With ``identity`` the residual branch starts switched off (BN scale 0, or
    wo = 0 without BN), so a block inserted into a trained model initially
    leaves its features untouched.
    """
    lim = scale * math.sqrt(6.0 / (2 * E))
    for name in ("wq", "wk", "wv", "wo"):
        params.add(f"{prefix}.{name}", rng.uniform(-lim, lim, size=(E, E)))
    if with_bn:
        params.add(f"{prefix}.bn_scale", np.zeros(E) if identity else np.ones(E))
        params.add(f"{prefix}.bn_shift", np.zeros(E))
    elif identity:
        params[f"{prefix}.wo"].data[...] = 0.0


def multihead_attention(X, params, prefix, H, mask=None):
    """Scaled dot-product self-attention with H heads; returns (output, weights).

    ``mask`` (n x n, bool) restricts which keys each query may see; rows
    with nothing visible produce zero output.
    """
    n, E = X.shape
    if E % H:
        raise ConfigurationError(f"H={H} does not divide feature width {E}")
    dh = E // H

    def split(t):
        return ad.transpose(ad.reshape(t, (n, H, dh)), (1, 0, 2))

    q = split(ad.matmul(X, params[f"{prefix}.wq"]))
    k = split(ad.matmul(X, params[f"{prefix}.wk"]))
    v = split(ad.matmul(X, params[f"{prefix}.wv"]))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    if mask is None:
        attn = ad.softmax(scores, axis=-1)
    else:
        attn = ad.masked_softmax(scores, mask)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (1, 0, 2)), (n, E))
    return ad.matmul(ctx, params[f"{prefix}.wo"]), attn


def temporal_standardize(Y, scale, shift, eps=1e-5):
    """Per-channel standardisation over the time axis with a learnable affine."""
    mu = ad.mean(Y, axis=0, keepdims=True)
    c = ad.sub(Y, mu)
    var = ad.mean(ad.mul(c, c), axis=0, keepdims=True)
    return ad.add(ad.mul(ad.div(c, ad.sqrt(ad.add(var, eps))), scale), shift)


def intra_segment_attention(X, mask, params, prefix, H, return_attention=False):
    """Z = X + BN(A V W_O) with attention confined to each proposal's block."""
    out, attn = multihead_attention(X, params, prefix, H, mask=mask)
    Z = ad.add(X, temporal_standardize(out, params[f"{prefix}.bn_scale"], params[f"{prefix}.bn_shift"]))
    return (Z, attn) if return_attention else Z


def pooling_matrices(proposals, T):
    """(N x T) mean-pooling matrix and (T x N) broadcast-back membership matrix."""
    N = len(proposals)
    pool = np.zeros((N, T))
    member = np.zeros((T, N))
    for n, (s, e, *_) in enumerate(proposals):
        pool[n, s:e] = 1.0 / (e - s)
        member[s:e, n] = 1.0
    return pool, member


def inter_segment_attention(X, proposals, params, prefix, H, return_attention=False):
    """Self-attention over mean-pooled proposal tokens, added back residually."""
    if not proposals:
        return (X, None) if return_attention else X
    pool, member = pooling_matrices(proposals, X.shape[0])
    tokens = ad.matmul(pool, X)
    out, attn = multihead_attention(tokens, params, prefix, H)
    Z = ad.add(X, ad.matmul(member, out))
    return (Z, attn) if return_attention else Z
