# %% [markdown]
# # Detection metrics on a hand-made example
#
# Non-interpolated AP: each prediction, in score order, claims the
# highest-IoU unmatched ground truth of its class in its video.

# %%
import numpy as np

from asmloc.config import EvalConfig
from asmloc.evaluation import average_precision, compute_metrics, nms, temporal_iou
from asmloc.proposals import ScoredSegment as S

print(temporal_iou((0, 4), (2, 6)))

# %%
gt = {"v1": [(10, 20, 1), (40, 42, 1)], "v2": [(5, 30, 2)]}
det = {
    "v1": [S(11, 20, 1, 0.9), S(30, 34, 1, 0.8), S(40, 43, 1, 0.4)],
    "v2": [S(5, 28, 2, 0.7), S(4, 12, 2, 0.6)],
}
pairs = [(v, s) for v, segs in det.items() for s in segs]
for th in (0.3, 0.5, 0.7):
    print(th, [round(average_precision(pairs, gt, c, th), 3) for c in (1, 2)])

# %%
res = compute_metrics(det, gt, 2, EvalConfig())
print("mAP per threshold", np.round(res.mAP, 3))
print("by duration bucket", {k: round(v, 3) for k, v in res.bucket_mAP.items() if v == v})

# %% [markdown]
# NMS keeps the best segment of each overlapping same-class cluster.

# %%
print(nms([S(0, 10, 1, 0.9), S(1, 10, 1, 0.8), S(20, 25, 1, 0.5), S(0, 10, 2, 0.3)], 0.45))
