"""Build a three-modality SEN, run one forward pass and count parameters.

    python demos/quickstart.py
"""
import numpy as np

from sen.config import default_config
from sen.experiments import build_model
from sen.network import count_parameters, sen_forward
from sen.tensor import Tensor

cfg = default_config()
sen = build_model(cfg)
frozen, trainable = count_parameters(sen)
print(f"modalities: {[m.name for m in cfg.modalities]}, d={cfg.shared_dim}, L={cfg.ra.layers}")
print(f"frozen encoder params: {frozen}, trainable RA params: {trainable}")

rng = np.random.default_rng(0)
inputs = [Tensor(rng.normal(size=(2, m.seq_len, m.input_dim))) for m in cfg.modalities]
finals, context = sen_forward(sen, inputs)
print("final features:", [f.shape for f in finals], "context:", context.shape)

print("encoder digest:", sen.encoder_digest()[:16])
