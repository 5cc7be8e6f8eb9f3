"""Pool network activations into pyramids and measure the two consistency penalties.

An untrained network reacts to style changes, so PCD across stylized copies is
well above zero; PCI compares a crop's pyramid with the matching region of the
full image (the trainer applies it at the logits).
"""

import numpy as np

from drpc import consistency as C
from drpc import pyramid as P
from drpc import sceneforge as sf
from drpc import segnet
from drpc import stylizer as st
from drpc import trainer as tr

image, label = sf.render_scene(sf.SceneSpec(), 3)
registry = st.default_registry(5)
group = st.make_group(image, label, registry)
net = segnet.build(6, channels_base=8, depth=3, seed=0)

_, taps = segnet.forward(net, np.stack(group.images))
for name, act in taps.items():
    pyramids = [P.spp(act[i]) for i in range(group.size)]
    print(f"tap {name:<7s} {tuple(act.shape[1:])} -> pyramid {pyramids[0].values.shape}  "
          f"PCD {C.pcd_loss(pyramids).item():.4f}")

# a single copy repeated K+1 times has no disagreement at all
same = [P.spp(taps["ctx"][0])] * group.size
print("PCD of identical copies:", C.pcd_loss(same).item())

rng = np.random.default_rng(0)
crop = tr.sample_crop(64, 64, (0.5, 0.9), 8, rng)
zoomed = tr.crop_and_rescale(image[None], crop)
_, full_taps = segnet.forward(net, image[None])
_, crop_taps = segnet.forward(net, zoomed)
for name in ("head", "logits"):  # the 8x8 context map is too coarse for a crop
    feat = full_taps[name][0]
    region = P.spp_region(feat, P.feature_crop(crop, 64, feat.shape[1]))
    print(f"crop {crop.height}x{crop.width} at ({crop.top},{crop.left}), tap {name}: "
          f"PCI {C.pci_loss(region, P.spp(crop_taps[name][0])).item():.4f}")
