"""Render procedural street scenes and look at what the stylizers do to them.

Writes PPM files into ./demo_out so the before/after pairs can be opened in any image viewer.
"""

import os

import numpy as np

from drpc import sceneforge as sf
from drpc import stylizer as st
from drpc.tensorio import write_ppm

out = "demo_out"
os.makedirs(out, exist_ok=True)

spec = sf.SceneSpec()
image, label = sf.render_scene(spec, 0)
counts = np.bincount(label.reshape(-1), minlength=spec.num_classes)
for name, n in zip(sf.CLASS_NAMES, counts):
    print(f"{name:<11s} {n / label.size:6.1%}")

registry = st.default_registry()
group = st.make_group(image, label, registry, "scene0")
print(f"group of {group.size} images, one label map shared by all of them")

# training styles in one strip, held-out test styles in another
write_ppm(os.path.join(out, "train_styles.ppm"), np.concatenate(group.images[:6], axis=2))
held = [image] + [st.apply(s, image) for s in registry.test + registry.validation]
write_ppm(os.path.join(out, "held_out_styles.ppm"), np.concatenate(held, axis=2))
print("unseen domains:", ", ".join(s.id for s in registry.test), "| validation:", registry.validation[0].id)
print(f"wrote {out}/train_styles.ppm and {out}/held_out_styles.ppm")
