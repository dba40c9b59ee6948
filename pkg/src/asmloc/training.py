"""Mini-batch training and the multi-step proposal refinement driver."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import EvalConfig, ModelConfig, OptimConfig, RefinementSchedule
from .dataset import encode_labels
from .evaluation import proposals_from
from .model import TrainedModel, forward, init_params, video_losses, video_probs
from .optim import AdamState, adam_step
from .proposals import build_pseudo_labels, proposal_gt_iou, pseudo_instance_loss

log = logging.getLogger(__name__)


def total_loss(params, cfg: ModelConfig, video, proposals=None, use_dss=True):
    """Video-level loss, plus the uncertainty-weighted pseudo-instance loss when
    proposals are given. Returns ``(loss, parts)``."""
    fw = forward(params, cfg, video.features, proposals, use_dss=use_dss)
    out = fw.outputs
    p_fg, p_bg = video_probs(out, cfg)
    y_fg, y_bg = encode_labels(video.classes, cfg.C)
    L_fg, L_bg, L_abg, loss = video_losses(p_fg, p_bg, y_fg, y_bg, cfg)
    parts = {"fg": float(L_fg.data), "bg": float(L_bg.data), "abg": float(L_abg.data)}
    if proposals is not None and cfg.use_ins and cfg.lambda_ins > 0:
        Q = build_pseudo_labels(fw.proposals, out.P.shape[0], cfg.C)
        L_ins = pseudo_instance_loss(out.P, Q, out.U, cfg.beta)
        parts["ins"] = float(L_ins.data)
        loss = ad.add(loss, ad.mul(L_ins, cfg.lambda_ins))
    parts["total"] = float(loss.data)
    return loss, parts


def train_epoch(params, state, cfg, videos, proposals, batch_size, rng):
    """One pass over ``videos`` in a seeded random order; returns the mean loss.

    Each mini-batch accumulates per-video gradients (videos have different
    lengths) before one Adam step.
    """
    order = rng.permutation(len(videos))
    losses = []
    for b in range(0, len(order), batch_size):
        batch = order[b:b + batch_size]
        for i in batch:
            v = videos[i]
            props = None if proposals is None else proposals.get(v.id, [])
            loss, parts = total_loss(params, cfg, v, props)
            ad.backward(ad.mul(loss, 1.0 / len(batch)))
            losses.append(parts["total"])
        adam_step(params, state)
    return float(np.mean(losses))


def regenerate_proposals(params, cfg, videos, previous, eval_cfg: EvalConfig):
    """Proposals from the current model on the original timeline, per GT class."""
    out = {}
    for v in videos:
        prev = None if previous is None else previous.get(v.id, [])
        out[v.id] = proposals_from(params, cfg, v.features, prev, v.classes, eval_cfg)
    return out


def mean_proposal_iou(proposals, videos):
    vals = [proposal_gt_iou(proposals.get(v.id, []), v.gt_segments)
            for v in videos if v.gt_segments]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class RefineResult:
    model: TrainedModel
    proposals: dict
    history: dict = field(default_factory=dict)


@dataclass
class StepState:
    """Everything needed to continue training after refinement step ``step``.

    ``proposals`` were generated by ``model`` and drive step ``step + 1``.
    """
    step: int
    model: TrainedModel
    proposals: dict
    adam: AdamState
    rng_state: dict
    history: dict


def _copy_adam(state):
    return AdamState(state.lr, state.beta1, state.beta2, state.eps, state.step,
                     {k: v.copy() for k, v in state.m.items()},
                     {k: v.copy() for k, v in state.v.items()})


def refine(videos, cfg: ModelConfig, schedule: RefinementSchedule, optim: OptimConfig = None,
           eval_cfg: EvalConfig = None, seed=0, on_step=None, resume: StepState = None):
    """Train the base model, then ``schedule.steps`` rounds of segment-aware
    training, each on the proposals produced by the round before.

    ``on_step(state)`` receives a ``StepState`` after the base stage (step 0)
    and after every refinement round. Passing one back as ``resume``
    continues from that point.
    """
    cfg.validate()
    schedule.validate()
    optim = optim or OptimConfig()
    eval_cfg = eval_cfg or EvalConfig()
    rng = np.random.default_rng(seed)
    history = {"epoch_loss": [], "proposal_iou": [], "step_of_epoch": []}

    def run_epochs(n, proposals, step):
        for _ in range(n):
            loss = train_epoch(params, state, cfg, videos, proposals, optim.batch_size, rng)
            if not math.isfinite(loss):
                raise FloatingPointError(f"training loss became {loss} at step {step}")
            history["epoch_loss"].append(loss)
            history["step_of_epoch"].append(step)
        return history["epoch_loss"][-1] if n else float("nan")

    def finish_step(step):
        props = regenerate_proposals(params, cfg, videos, proposals, eval_cfg)
        history["proposal_iou"].append(mean_proposal_iou(props, videos))
        log.info("step %d: loss %.4f proposal IoU %.3f", step, history["epoch_loss"][-1],
                 history["proposal_iou"][-1])
        if on_step:
            model = TrainedModel(cfg, params, step, bootstrap)
            on_step(StepState(step, model.snapshot(), props, _copy_adam(state),
                              rng.bit_generator.state, {k: list(v) for k, v in history.items()}))
        return props

    if resume is None:
        params = init_params(cfg, rng)
        state = AdamState(lr=optim.lr, beta1=optim.beta1, beta2=optim.beta2, eps=optim.eps)
        bootstrap = None
        proposals = None
        run_epochs(schedule.epochs, None, 0)
        proposals = finish_step(0)
        bootstrap = params.copy() if schedule.steps > 0 else None
        first = 1
    else:
        if resume.step > schedule.steps:
            raise ValueError(f"cannot resume from step {resume.step} of a {schedule.steps}-step schedule")
        params = resume.model.params.copy()
        bootstrap = resume.model.bootstrap.copy() if resume.model.bootstrap is not None else None
        if bootstrap is None and schedule.steps > 0:
            bootstrap = params.copy()
        state = _copy_adam(resume.adam)
        rng.bit_generator.state = resume.rng_state
        history = {k: list(v) for k, v in resume.history.items()}
        proposals = resume.proposals
        first = resume.step + 1

    for step in range(first, schedule.steps + 1):
        run_epochs(schedule.epochs, proposals, step)
        proposals = finish_step(step)

    # keep going on the last proposals until the training loss plateaus
    final_props = proposals if schedule.steps > 0 else None
    best, bad = math.inf, 0
    for _ in range(schedule.max_final_epochs):
        loss = run_epochs(1, final_props, schedule.steps + 1)
        if loss < best - schedule.min_delta:
            best, bad = loss, 0
        else:
            bad += 1
            if bad >= schedule.patience:
                break
    refinements = schedule.steps + 1 if schedule.steps > 0 else 0
    model = TrainedModel(cfg, params, refinements, bootstrap)
    return RefineResult(model, proposals, history)
