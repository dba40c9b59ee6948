# %% [markdown]
# # Base model, then proposal refinement
#
# A small synthetic benchmark: five classes, 16-d snippet features, planted
# segments from every duration bucket. The base model is trained with
# video labels only; each refinement step then trains the segment-aware
# model on the proposals of the previous step. Takes a couple of minutes.

# %%
from asmloc import (EvalConfig, ModelConfig, OptimConfig, RefinementSchedule, SyntheticConfig,
                    evaluate, make_splits, refine)
from asmloc.dataset import bucket_counts

train, test = make_splits(SyntheticConfig(num_videos=200, seed=1), num_test=50)
print(len(train), "train /", len(test), "test videos")
print("segments per bucket XS..XL:", bucket_counts(train, 0.64))

# %%
cfg = ModelConfig(num_classes=5, feature_dim=16, embed_dim=32, H=8, topk_divisor=16,
                  lambda_abg=0.2, lambda_ins=0.03)
ec = EvalConfig(class_threshold=0.2)
sched = RefinementSchedule(epochs=10, steps=3, max_final_epochs=10, patience=3)
opt = OptimConfig(lr=1e-3, batch_size=4)

per_step = {}

def report(state):
    res = evaluate(state.model, test, ec)
    per_step[state.step] = res.average_mAP
    print(f"step {state.step}: test avg mAP {100 * res.average_mAP:5.2f}, "
          f"train proposal IoU {state.history['proposal_iou'][-1]:.3f}")

result = refine(train, cfg, sched, opt, ec, seed=0, on_step=report)

# %%
final = evaluate(result.model, test, ec)
print("final avg mAP %.2f" % (100 * final.average_mAP))
for th, m in zip(final.iou_thresholds, final.mAP):
    print(f"  mAP@{th:.1f} = {100 * m:5.2f}")
print({k: round(100 * v, 2) for k, v in final.bucket_mAP.items()})

# %% [markdown]
# Proposals the final model uses for one test video, next to the truth.

# %%
from asmloc.evaluation import predict_video

v = test[0]
segs, props = predict_video(result.model, v.features, ec, return_proposals=True)
print("gt       ", v.gt_segments)
print("proposals", props)
print("top dets ", [(s.start, s.end, s.label, round(s.score, 3)) for s in segs[:5]])
