"""A shortened ablation: every arm trained briefly on a small dataset.

The real experiment is `drpc ablate` on the default config (2000 steps per
arm); this version finishes in a few minutes and only shows the plumbing.
"""

from drpc import config
from drpc import sceneforge as sf
from drpc import trainer as tr

cfg = config.defaults().with_values(trainer__steps=60, eval__seeds=(0,))
registry = cfg.registry()
dataset = sf.build_dataset(cfg.scene_spec(), registry, 40, 10, 10)

report = tr.ablate(cfg.train_config(), dataset, registry, seeds=(0,))
print(report.format())
for run in report.runs:
    print(f"{run['arm']:<5s} final segLoss {run['finalSegLoss']:.3f}  ({run['wall']:.0f}s)")
