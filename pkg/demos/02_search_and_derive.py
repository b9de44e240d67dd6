"""A short shift search on synthetic scenes, then derivation of the discrete network.

Run: python demos/02_search_and_derive.py   (about 15 s)
"""
import numpy as np

from bscnet.metrics import count_cost
from bscnet.nets import NetworkSpec, build_network
from bscnet.search import SupernetConv, derive_architecture, relax
from bscnet.synthetic import SceneConfig, generate_scenes
from bscnet.train import Dataset, StageConfig, evaluate, run_stage

scenes = Dataset(generate_scenes(SceneConfig(num_points=2000, extent=1.2, seed=3), 6))
spec = NetworkSpec(family="unet", levels=2, base_filters=8, filters_step=8, num_classes=3, groups=4, search_mode=True)
supernet = build_network(spec)

stage = StageConfig("binary", "supernet-search", max_epochs=10, lr_steps=(), confidence_weight=0.1, arch_lr=0.1)
run_stage(supernet, scenes, stage, log=print)

pis = np.concatenate([relax(m.alpha.value).ravel() for _, m in supernet.named_modules() if isinstance(m, SupernetConv)])
print(f"mean |pi - 0.5| after search: {np.mean(np.abs(pis - 0.5)):.3f}")

config, net = derive_architecture(supernet)
print("derived shift configuration (one line per searchable layer):")
print(config.dumps())
net.set_binary(True)
print(f"derived binary net site mIoU before fine-tuning: {evaluate(net, scenes).miou:.3f}")
report = count_cost(net, scenes.get(0).tensor)
print(f"OPs {report.ops:.3g} (BOPs {report.bops:.3g}, FLOPs {report.flops:.3g}), storage {report.storage_m:.4f} M")
