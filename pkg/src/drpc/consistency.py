"""Training objective: pixel cross-entropy plus pyramid consistency terms.

Both consistency targets are treated as constants: the cross-domain mean
pyramid for PCD and the full-image region pyramid for PCI. Distances are
per-element mean absolute differences, so a weight means the same thing
regardless of a layer's channel count.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError
from .pyramid import PyramidVector

DEFAULT_LAMBDAS = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class LossConfig:
    lambdas: tuple = DEFAULT_LAMBDAS
    pci_weight: float = 1.0
    beta: float = 1.0
    rho_range: tuple = (0.5, 0.9)
    ignore_index: int = 255
    use_pcd: bool = True
    use_pci: bool = True
    extra: dict = field(default_factory=dict)

    def validate(self, tap_count=None):
        if tap_count is not None and len(self.lambdas) != tap_count:
            raise ConfigError(f"{len(self.lambdas)} lambdas for {tap_count} taps")
        if any(l < 0 for l in self.lambdas):
            raise ConfigError(f"lambdas must be non-negative: {self.lambdas}")
        lo, hi = self.rho_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"rho_range must satisfy 0 < min <= max <= 1, got {self.rho_range}")
        if self.beta < 0 or self.pci_weight < 0:
            raise ConfigError("beta and pci_weight must be non-negative")


def normalizer(num_aux_domains, num_source):
    """Z = (K + 1) |D0|, the count of (image, domain) pairs in one epoch."""
    return (num_aux_domains + 1) * num_source


def seg_loss(logits, labels, ignore_index=255):
    """Mean over images of each image's mean pixel cross-entropy.

    Averaging these per-batch values over an epoch of the (K+1)-fold data
    gives the domain-randomised objective normalised by Z.
    """
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ContractError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= k))
    if bad.any():
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        raise DataError(f"label {int(labels[idx])} at pixel (image, row, col)={idx} is outside [0, {k})")
    return T.cross_entropy(logits, labels, ignore_index=ignore_index)


def _values(p):
    return p.values if isinstance(p, PyramidVector) else p


def pcd_from_stack(stacked, target=None):
    """PCD for one group given its pyramids stacked as ``(K+1) x C x 85``.

    ``target`` overrides the detached cross-domain mean (test hook).
    """
    if target is None:
        data = stacked.data
        # elements where every domain agrees use that exact value, so identical copies give exactly 0
        target = np.where((data == data[0]).all(axis=0), data[0], data.mean(axis=0))
    members = stacked.shape[0]
    return T.abs_diff_const(stacked, target).mean() * float(members)


def pcd_loss(pyramids):
    """Sum over domains of mean |mean pyramid - pyramid_k| for one group at one layer."""
    vals = [_values(p) for p in pyramids]
    if not vals:
        raise ContractError("pcd_loss needs at least one pyramid")
    shape = vals[0].shape
    for i, v in enumerate(vals):
        if v.shape != shape:
            raise ContractError(f"pyramid {i} has shape {v.shape}, expected {shape}")
    return pcd_from_stack(T.stack(vals))


def pci_loss(full_pyramid, crop_pyramid):
    """Mean |full-image region pyramid - crop pyramid|; only the crop branch gets gradient."""
    full, crop = _values(full_pyramid), _values(crop_pyramid)
    if full.shape != crop.shape:
        raise ContractError(f"pci shapes differ: {full.shape} vs {crop.shape}")
    return T.abs_diff_const(crop, full.data.copy()).mean()


def total_loss(seg, pcd_terms, pci, cfg):
    """L + beta * (sum_l lambda_l PCD_l + pci_weight * PCI)."""
    if len(pcd_terms) != len(cfg.lambdas):
        raise ContractError(f"{len(pcd_terms)} PCD terms for {len(cfg.lambdas)} lambdas")
    if cfg.beta == 0:
        return seg
    reg = None
    for lam, term in zip(cfg.lambdas, pcd_terms):
        if term is None or lam == 0:
            continue
        piece = term * lam
        reg = piece if reg is None else reg + piece
    if pci is not None and cfg.pci_weight:
        piece = pci * cfg.pci_weight
        reg = piece if reg is None else reg + piece
    if reg is None:
        return seg
    return seg + reg * cfg.beta
