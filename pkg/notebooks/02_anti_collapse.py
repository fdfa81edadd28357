# %% [markdown]
# # Anti-collapse diagnostics
#
# Train the same model with and without the variance and diversity terms and
# compare view spread (circular variance) and view redundancy.

# %%
from dataclasses import replace

import numpy as np

from emdepart import AlignmentConfig, Config, ModelConfig, SynthConfig, TrainConfig, gen_synthetic, train
from emdepart.sdm import circular_variance

data = gen_synthetic(SynthConfig(c_seen=12, c_unseen=4, images_per_class=12, seed=0)).dataset()
base = Config(model=ModelConfig(r=32, k=4),
              alignment=AlignmentConfig(tau=0.1, p=3, lambda_var=1.0, lambda_div=3.0),
              train=TrainConfig(base_lr=3e-3, batch_size=32, epochs=12, seed=0))
plain = replace(base, alignment=replace(base.alignment, lambda_var=0.0, lambda_div=0.0))

runs = {"with terms": train(base, data), "without": train(plain, data)}

# %%
for name, res in runs.items():
    last = res.log[-1]
    print(f"{name:11s} S_var_V={last['S_var_V']:.4f} S_var_T={last['S_var_T']:.4f} "
          f"L_div={last['L_div']:.4f}")

# %% [markdown]
# Off-diagonal cosines between the k view embeddings of each class. Values
# near 1 mean the views have collapsed onto one direction.

# %%
for name, res in runs.items():
    text = res.model.class_embeddings(data.docs.embeddings, sorted(data.split.seen))
    B = text.B.data / np.linalg.norm(text.B.data, axis=-1, keepdims=True)
    M = np.einsum("cir,cjr->cij", B, B)
    k = M.shape[1]
    off = M[:, ~np.eye(k, dtype=bool)]
    print(f"{name:11s} mean off-diagonal cosine {off.mean():.3f}, "
          f"circular variance {circular_variance(text.B).data.mean():.4f}")
