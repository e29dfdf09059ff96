"""
Attention masks for conditioned generation
===========================================

Compares the dual-constrained mask with the plain causal and bidirectional
baselines on a layout whose first and last latents are conditions, and
writes the masks as PGM images.
"""

import sys
from pathlib import Path

import numpy as np

from cdamd.generation import build_edit_mask
from cdamd.masks import SequenceLayout, build_conditional_mask, build_latent_mask, build_mask_set, export_mask

flags = np.array([1, 1, 0, 0, 0, 0, 1, 1], np.uint8)
print("condition flags:", flags)

# On its own the conditional mask opens every condition column to every row and
# keeps condition rows away from generative columns.  Intersecting it with the
# lower-triangular temporal mask gives the dual-constrained (DCCM) mask.
print("\nconditional mask\n", build_conditional_mask(flags))

for kind in ("DCCM", "CM", "BCM"):
    print(f"\n{kind} self-attention mask\n", build_latent_mask(kind, flags))

# The two mask kinds only differ where a flag is set; without conditions they coincide.
free = np.zeros(8, np.uint8)
print("\nDCCM == CM without conditions:", np.array_equal(build_latent_mask("DCCM", free), build_latent_mask("CM", free)))

# Edit tasks are just flag patterns over latent positions.
for task in ("inpaint", "outpaint", "prefix", "suffix"):
    print(f"{task:>9}: generate {build_edit_mask(task, 12).m}")

# Full mask set for one layout: self-attention plus cross-attention to text and motion tokens.
out = Path(sys.argv[1] if len(sys.argv) > 1 else "masks_demo")
out.mkdir(exist_ok=True)
layout = SequenceLayout(n_text=1, n_motion_tokens=8, n_latent=8, condition_flags=tuple(int(f) for f in flags))
for name, mask in build_mask_set(layout).items():
    print("wrote", export_mask(mask, out / f"{name}.pgm", "pgm"), mask.shape)
