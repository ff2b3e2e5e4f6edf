"""Training the joint model: encoder q(z|x,s), decoder p(x|z) and a U-Net p(s|x,z).

Runs in well under a minute on one core.
"""
# %%
import numpy as np

from raterseg.autodiff import Tape
from raterseg.evaluation import continuous_dice, evaluate_model
from raterseg.nets import ArchConfig, init_params, segnet_forward
from raterseg.synthetic import DatasetManifest, generate_dataset
from raterseg.trainer import TrainConfig, train_joint

manifest = DatasetManifest(n_train=12, n_val=4, n_test=1, height=16, width=16, blur_sigma=1.0)
data = generate_dataset(manifest)
arch = ArchConfig(height=16, width=16, base_width=4)

model = init_params(arch, seed=0)
model, history = train_joint(model, data["train"], TrainConfig(epochs=120, batch_size=2, lr=3e-3))

# %% The three loss terms per epoch, as written to metrics.csv by the CLI
for h in history[::20] + history[-1:]:
    print(f"epoch {h['epoch']:3d}  ce {h['ce']:.4f}  rec {h['rec']:8.3f}  kl {h['kl']:.3f}")

# %% Different latent codes give different segmentations of the same image
x = data["val"][0].image
for z in (np.full(6, -1.5), np.zeros(6), np.full(6, 1.5)):
    probs = 1 / (1 + np.exp(-segnet_forward(Tape(), model.segnet, arch, x, z.astype(np.float32)).data))
    print("z =", z[0], "predicted foreground area", float(probs.sum()))

# %% Scoring: the mean of seven prior samples against the rater average
result = evaluate_model(model, data["val"], M=7, seed=0)
print(result.table())
print("rater average against itself:", np.mean([continuous_dice(s.rater_mean(), s.rater_mean())
                                                 for s in data["val"]]))
