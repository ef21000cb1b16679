"""Zero-shot classification by summing two cosine-similarity matrices.

    python demos/zero_shot.py
"""
import numpy as np

from sen.adapters import ClassEmbeddings, contrastive_predict
from sen.tensor import Tensor
from sen.training import gen_contrastive_task

for sigma in (0.0, 0.3, 0.6, 1.0):
    task = gen_contrastive_task(8, 16, sigma, 2000, seed=1)
    classes = ClassEmbeddings.from_raw(task.extras["classes"])
    pred, _ = contrastive_predict(Tensor(task.extras["video"]), Tensor(task.extras["audio"]), classes)
    print(f"sigma={sigma:.1f}  accuracy={np.mean(pred == task.targets):.3f}")
