# %% [markdown]
# # Partial score and calibrated stacking
#
# Sweep the number of matched partners p used by the partial score, then sweep
# the calibration penalty on seen classes and watch U, S and H trade off.

# %%
import numpy as np

from emdepart import AlignmentConfig, Config, ModelConfig, SynthConfig, TrainConfig, evaluate, gen_synthetic, train

data = gen_synthetic(SynthConfig(c_seen=12, c_unseen=4, images_per_class=12, seed=0)).dataset()
cfg = Config(model=ModelConfig(r=32, k=4),
             alignment=AlignmentConfig(tau=0.1, p=3),
             train=TrainConfig(base_lr=3e-3, batch_size=32, epochs=12, seed=0))
model = train(cfg, data).model

# %%
print("full set score  T1", round(evaluate(model, data, partial=False).T1, 2))
for p in range(1, model.k + 1):
    print(f"partial p={p}     T1", round(evaluate(model, data, p=p).T1, 2))

# %% [markdown]
# A penalty of zero is the plain argmax. Large penalties push every prediction
# to an unseen class, so S drops to zero and U reaches the ZSL accuracy.

# %%
for g in np.linspace(0.0, 1.0, 11):
    r = evaluate(model, data, gamma_cs=float(g))
    print(f"gamma_cs={g:.1f}  U={r.U:5.1f}  S={r.S:5.1f}  H={r.H:5.1f}")
