"""The two baselines: one network per rater, and a single network with MC dropout."""
# %%
from raterseg.evaluation import evaluate_model, predict_maps
from raterseg.nets import ArchConfig
from raterseg.synthetic import DatasetManifest, generate_dataset
from raterseg.trainer import TrainConfig, train_independent_baseline, train_mc_dropout_baseline

manifest = DatasetManifest(n_train=12, n_val=4, n_test=1, height=16, width=16, blur_sigma=1.0)
data = generate_dataset(manifest)
arch = ArchConfig(height=16, width=16, base_width=4)
cfg = TrainConfig(epochs=60, batch_size=2, lr=3e-3)

# %% Seven deterministic networks, network k only ever sees rater k
nets, logs = train_independent_baseline(data["train"], manifest.num_raters, cfg, arch)
print("final CE per rater net:", [round(log[-1]["ce"], 3) for log in logs])
print("independent average, val dice:", evaluate_model(nets, data["val"]).mean)

# %% One network with dropout left on at test time; each pass drops different units
net, _ = train_mc_dropout_baseline(data["train"], cfg, arch)
maps = predict_maps(net, data["val"][0].image, M=3, seed=0)
print("two dropout passes differ:", (maps[0] != maps[1]).any())
print("MC dropout, val dice:", evaluate_model(net, data["val"]).mean)
