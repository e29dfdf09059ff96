"""
Synthetic motions and the latent codecs
========================================

Builds the procedural text-motion corpus, trains a small deterministic
autoencoder and a residual quantizer on it, and looks at what each codec
keeps of a motion.
"""

import numpy as np
import torch

from cdamd.codec import AEConfig, ae_decode, ae_encode, rvq_dequantize, rvq_quantize, train_ae, train_rvq
from cdamd.motion import CorpusSpec, generate_corpus, split_corpus

torch.set_num_threads(1)

# Each item pairs a joint-coordinate sequence (T, 8, 3) with a template caption.
items = generate_corpus(CorpusSpec(class_count=4, sequences_per_class=40, length_range=(32, 48)))
train, test = split_corpus(items, test_fraction=0.2)
print(f"{len(train)} train / {len(test)} test items")
for it in items[::40]:
    print(f"  class {it.class_id}: {it.text!r}, {it.motion.frames} frames")

# The autoencoder maps 4 frames to one continuous latent.
motions = [it.motion for it in train]
ae, losses = train_ae(motions, AEConfig(), epochs=8, seed=0)
print("AE loss per epoch:", np.round(losses, 4))

m = test[0].motion
z = ae_encode(m, ae)
rec = ae_decode(z, ae, m.fps)
print(f"{m.frames} frames -> {z.l} latents of dim {z.d}")
print("mean joint error of the reconstruction:", float(np.abs(rec.coords[: m.frames] - m.coords).mean()))

# The residual quantizer turns the same kind of latent into a stack of code indices.
rvq, _ = train_rvq(motions, AEConfig(), epochs=8, seed=0, levels=4, codebook_size=64)
with torch.no_grad():
    zq = rvq.encode(torch.from_numpy(m.coords).unsqueeze(0))[0].numpy()
cb = rvq.quantizer.codebook()
tokens, residuals = rvq_quantize(zq, cb)
print("token indices (levels x positions):")
print(tokens.indices[:, :8])
print("residual norm (input, then after each level):", [round(float(np.linalg.norm(r)), 4) for r in residuals])
approx = rvq_dequantize(tokens, cb).tokens
print("dequantized error:", float(np.abs(approx - zq).mean()))
