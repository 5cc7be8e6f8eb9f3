"""Adam training over the combined objective, evaluation, and the ablation.

Modes follow the ablation rows:

=========  ====  ===  ===
mode       aux   PCD  PCI
=========  ====  ===  ===
baseline   no    no   no
dr         yes   no   no
dr_pcd     yes   yes  no
dr_pci     yes   no   yes
full       yes   yes  yes
=========  ====  ===  ===
"""

import csv
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import consistency as C
from . import pyramid as P
from . import segnet
from . import tensor as T
from .errors import ConfigError, ContractError, NonFiniteLossError
from .metrics import MetricReport, evaluate_domains, g_perf
from .sceneforge import GroupLoader
from .stylizer import DomainRegistry

log = logging.getLogger(__name__)

MODES = ("baseline", "dr", "dr_pcd", "dr_pci", "full")
ARMS = (("FCN", "baseline"), ("+DR", "dr"), ("+PCD", "dr_pcd"), ("+PCI", "dr_pci"), ("All", "full"))
# full-scale reference values (FCN8s-VGG16, GTA source); orderings only, not targets
FULL_SCALE_REFERENCE = {
    "Cityscapes": {"FCN": 29.81, "+DR": 34.64, "+PCD": 35.47, "+PCI": 35.12, "All": 36.11},
    "BDDS": {"FCN": 24.59, "+DR": 30.14, "+PCD": 31.21, "+PCI": 30.87, "All": 31.56},
    "Mapillary": {"FCN": 26.63, "+DR": 31.64, "+PCD": 32.06, "+PCI": 32.12, "All": 32.25},
}


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class NetworkConfig:
    num_classes: int = 6
    channels_base: int = 8
    depth: int = 3
    tap_count: int = 5
    upsample: str = "bilinear"


@dataclass
class TrainConfig:
    mode: str = "full"
    steps: int = 2000
    batch_images: int = 16
    batch_groups: int = None
    adam: AdamConfig = field(default_factory=AdamConfig)
    loss: C.LossConfig = field(default_factory=C.LossConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    init_seed: int = 0
    data_seed: int = 0
    crop_seed: int = 0
    eval_every: int = 500
    crop_resize: str = "bilinear"

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.crop_resize not in ("nearest", "bilinear", "area"):
            raise ConfigError(f"unknown crop_resize {self.crop_resize!r}")
        self.loss.validate(self.network.tap_count)


@dataclass
class Plan:
    """What a mode actually switches on."""

    use_aux: bool
    use_pcd: bool
    use_pci: bool
    loss: C.LossConfig
    batch_groups: int


def resolve_mode(cfg, registry):
    cfg.validate()
    use_aux = cfg.mode != "baseline"
    use_pcd = cfg.mode in ("dr_pcd", "full") and cfg.loss.use_pcd
    use_pci = cfg.mode in ("dr_pci", "full") and cfg.loss.use_pci
    beta = cfg.loss.beta if (use_pcd or use_pci) else 0.0
    loss = replace(cfg.loss, beta=beta, use_pcd=use_pcd, use_pci=use_pci)
    k = registry.k if use_aux else 0
    if use_aux and k == 0:
        raise ConfigError(f"mode {cfg.mode} needs at least one training stylizer")
    groups = cfg.batch_groups
    if groups is None:
        if cfg.batch_images % (k + 1):
            raise ConfigError(f"batch_images={cfg.batch_images} is not a multiple of the group size K+1={k + 1}")
        groups = cfg.batch_images // (k + 1)
    elif cfg.batch_images is not None and groups * (k + 1) != cfg.batch_images:
        raise ConfigError(f"batch_groups={groups} x (K+1)={k + 1} != batch_images={cfg.batch_images}")
    return Plan(use_aux, use_pcd, use_pci, loss, groups)


# optimiser -------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    @classmethod
    def from_config(cls, params, cfg):
        return cls(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {p.name or p.shape} has no gradient; call backward() first")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# crops -------------------------------------------------------------------------


def crop_heights(h, rho_range, stride_align):
    lo = math.ceil(rho_range[0] * h / stride_align - 1e-9) * stride_align
    hi = math.floor(rho_range[1] * h / stride_align + 1e-9) * stride_align
    return lo, hi


def sample_crop(h, w, rho_range, stride_align, rng, feature_h=None):
    """Random aspect-preserving crop with height, top and left on the stride grid."""
    lo_rho, hi_rho = rho_range
    if not 0 < lo_rho <= hi_rho <= 1:
        raise ConfigError(f"rho range must lie in (0, 1], got {rho_range}")
    lo, hi = crop_heights(h, rho_range, stride_align)
    if lo > hi or lo < 1:
        raise ConfigError(f"no crop height in rho range {rho_range} is a multiple of {stride_align}")
    feature_h = h if feature_h is None else feature_h
    if lo * feature_h // h < P.MIN_EXTENT:
        need = P.MIN_EXTENT * h / feature_h / h
        raise ConfigError(f"rho_min={lo_rho} gives a {lo * feature_h // h}-cell feature crop; "
                          f"need rho_min >= {need:.3f} for {P.MIN_EXTENT} cells")
    rho = rng.uniform(lo_rho, hi_rho)
    height = int(min(max(round(rho * h / stride_align) * stride_align, lo), hi))
    if (height * w) % h:
        raise ConfigError(f"crop height {height} gives a non-integer width for a {h} x {w} image")
    width = height * w // h
    if width % stride_align and width != w:
        raise ConfigError(f"crop width {width} is not a multiple of {stride_align}")
    top = int(rng.integers(0, (h - height) // stride_align + 1)) * stride_align
    left = int(rng.integers(0, (w - width) // stride_align + 1)) * stride_align
    return P.CropSpec(top, left, height, width, height / h)


def crop_and_rescale(images, crop, mode="bilinear"):
    """Cut ``crop`` out of an ``N x 3 x H x W`` array and scale it back to ``H x W``."""
    h, w = images.shape[2:]
    piece = images[:, :, crop.top:crop.top + crop.height, crop.left:crop.left + crop.width]
    return T.resize2d(T.Tensor(piece), h, w, mode=mode).data


# training --------------------------------------------------------------------


@dataclass
class StepLosses:
    seg: float
    pcd: list
    pci: float
    total: float


def group_losses(net, groups, plan, crops=None, crop_resize="bilinear"):
    """Build the graph for one batch of groups. Returns ``(total, StepLosses)``."""
    size = groups[0].size
    images = np.stack([img for g in groups for img in g.images])
    labels = np.stack([g.label for g in groups for _ in range(g.size)]).astype(np.int64)
    n_full = images.shape[0]
    h, w = images.shape[2:]
    batch = images
    if plan.use_pci:
        crop_imgs = [crop_and_rescale(images[i * size:(i + 1) * size], crops[i], crop_resize)
                     for i in range(len(groups))]
        batch = np.concatenate([images] + crop_imgs)
    logits, acts = segnet.forward(net, T.Tensor(batch))
    full_logits = logits[:n_full] if plan.use_pci else logits
    seg = C.seg_loss(full_logits, labels, plan.loss.ignore_index)

    pcd_terms = [None] * len(net.tap_names)
    if plan.use_pcd:
        for li, name in enumerate(net.tap_names):
            act = acts[name][:n_full] if plan.use_pci else acts[name]
            pyr = P.spp(act).values  # (n_full, C, 85)
            per_group = pyr.reshape((len(groups), size) + pyr.shape[1:])
            terms = [C.pcd_from_stack(per_group[gi]) for gi in range(len(groups))]
            pcd_terms[li] = _mean(terms)

    pci = None
    if plan.use_pci:
        last = acts[net.tap_names[-1]]
        fh, fw = last.shape[2:]
        terms = []
        for gi, crop in enumerate(crops):
            sl = slice(gi * size, (gi + 1) * size)
            full_region = P.spp_region(last[sl], P.feature_crop(crop, h, fh, w, fw))
            crop_pyr = P.spp(last[n_full + gi * size:n_full + (gi + 1) * size])
            terms.append(C.pci_loss(full_region, crop_pyr) * float(size))
        pci = _mean(terms)

    total = C.total_loss(seg, pcd_terms, pci, plan.loss)
    record = StepLosses(seg.item(), [0.0 if t is None else t.item() for t in pcd_terms],
                        0.0 if pci is None else pci.item(), total.item())
    return total, record


def _mean(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc / len(terms) if len(terms) > 1 else acc


@dataclass
class TrainResult:
    net: segnet.SegNetwork
    losses: list
    val_history: list
    run_dir: str = None
    checkpoint: str = None
    elapsed: float = 0.0


def loss_columns(tap_count):
    return ["step", "segLoss"] + [f"pcd_l{i}" for i in range(tap_count)] + ["pci", "total"]


def evaluate(net, dataset, split="test", domains=None, ignore_index=255):
    by_domain = {}
    for d in (domains or dataset.domains(split)):
        samples = dataset.split(split, d)
        if not samples:
            raise ConfigError(f"dataset has no '{split}' samples for domain {d!r}")
        by_domain[d] = samples
    return evaluate_domains(lambda x: segnet.predict(net, x), by_domain, net.num_classes, ignore_index)


def train(cfg, dataset, registry, net=None, run_dir=None, config_hash=None, batch_log=None):
    """Optimise ``net`` (built from ``cfg.network`` when omitted) for ``cfg.steps`` steps."""
    plan = resolve_mode(cfg, registry)
    ncfg = cfg.network
    if net is None:
        net = segnet.build(ncfg.num_classes, ncfg.channels_base, ncfg.depth, ncfg.tap_count,
                           seed=cfg.init_seed, upsample_mode=ncfg.upsample)
    if len(net.tap_names) != len(cfg.loss.lambdas):
        raise ConfigError(f"{len(cfg.loss.lambdas)} lambdas for {len(net.tap_names)} taps")
    h, w = dataset.spec.height, dataset.spec.width
    align = 2 ** net.depth
    if plan.use_pcd and (h // align < P.MIN_EXTENT or w // align < P.MIN_EXTENT):
        raise ConfigError(f"{h}x{w} inputs give a {h // align}x{w // align} deepest map; pyramid pooling needs 8x8")
    feature_h = h  # the PCI tap (logits) is at input resolution
    if plan.use_pci:
        sample_crop(h, w, plan.loss.rho_range, align, np.random.default_rng(0), feature_h)  # validates range

    loader = GroupLoader(dataset, registry, plan.batch_groups, seed=cfg.data_seed, use_aux=plan.use_aux)
    opt = Adam.from_config(net.parameters, cfg.adam)
    crop_rng = np.random.default_rng(cfg.crop_seed)
    val_domains = dataset.domains("val")

    writer = timing = fh = tfh = None
    if run_dir:
        for sub in ("logs", "checkpoints", "reports"):
            os.makedirs(os.path.join(run_dir, sub), exist_ok=True)
        fh = open(os.path.join(run_dir, "logs", "losses.csv"), "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(loss_columns(len(net.tap_names)))
        tfh = open(os.path.join(run_dir, "logs", "timing.csv"), "w", newline="", encoding="utf-8")
        timing = csv.writer(tfh, lineterminator="\n")
        timing.writerow(["step", "wall_time"])

    losses, val_history = [], []
    start = time.perf_counter()
    try:
        for step in range(1, cfg.steps + 1):
            groups = loader.next_batch()
            if batch_log is not None:
                batch_log.append([(g.sample_id, d) for g in groups for d in g.domain_ids])
            crops = None
            if plan.use_pci:
                crops = [sample_crop(h, w, plan.loss.rho_range, align, crop_rng, feature_h) for _ in groups]
            total, rec = group_losses(net, groups, plan, crops, cfg.crop_resize)
            if not math.isfinite(rec.total):
                ids = [g.sample_id for g in groups]
                dump = None
                if run_dir:
                    dump = os.path.join(run_dir, "logs", "nonfinite_dump.json")
                    with open(dump, "w", encoding="utf-8") as dfh:
                        json.dump({"step": step, "batch_ids": ids, "losses": asdict(rec)}, dfh, indent=2)
                raise NonFiniteLossError(f"non-finite loss {rec.total} at step {step}; batch {ids}",
                                         step=step, batch_ids=ids, dump_path=dump)
            net.zero_grad()
            total.backward()
            opt.step()
            losses.append(rec)
            if writer:
                writer.writerow([step, repr(rec.seg)] + [repr(v) for v in rec.pcd] + [repr(rec.pci), repr(rec.total)])
                timing.writerow([step, f"{time.perf_counter() - start:.3f}"])
            if val_domains and cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps):
                report = evaluate(net, dataset, "val", val_domains)
                val_history.append((step, report.g_perf))
                log.info("step %d mode %s seg %.4f total %.4f val mIoU %.4f", step, cfg.mode, rec.seg,
                         rec.total, report.g_perf)
    finally:
        if fh:
            fh.close()
            tfh.close()

    result = TrainResult(net, losses, val_history, run_dir, elapsed=time.perf_counter() - start)
    if run_dir:
        with open(os.path.join(run_dir, "logs", "val.csv"), "w", newline="", encoding="utf-8") as vfh:
            vw = csv.writer(vfh, lineterminator="\n")
            vw.writerow(["step", "val_miou"])
            vw.writerows([(s, repr(v)) for s, v in val_history])
        result.checkpoint = os.path.join(run_dir, "checkpoints", "final")
        segnet.save_checkpoint(net, result.checkpoint, config_hash)
    return result


# ablation -------------------------------------------------------------------


def _arm_job(args):
    cfg, dataset, registry, arm, seed, domains = args
    t0, c0 = time.perf_counter(), time.process_time()
    result = train(cfg, dataset, registry)
    report = evaluate(result.net, dataset, "test", domains, cfg.loss.ignore_index)
    return {
        "arm": arm, "mode": cfg.mode, "seed": seed,
        "perDomain": {d: v["miou"] for d, v in report.per_domain.items()},
        "gPerf": report.g_perf,
        "finalSegLoss": result.losses[-1].seg,
        "wall": time.perf_counter() - t0,
        "cpu": time.process_time() - c0,
    }


def seeded(cfg, seed):
    return replace(cfg, init_seed=seed, data_seed=seed, crop_seed=seed)


@dataclass
class AblationReport:
    rows: list  # one dict per arm: name, mode, median per domain, median gPerf
    runs: list  # every (arm, seed) job result
    domains: list
    wall_time: float = 0.0

    def table(self):
        header = ["arm"] + self.domains + ["gPerf"]
        lines = [header]
        for row in self.rows:
            lines.append([row["arm"]] + [f"{row['perDomain'][d]:.4f}" for d in self.domains] + [f"{row['gPerf']:.4f}"])
        return lines

    def format(self):
        lines = self.table()
        widths = [max(len(str(r[i])) for r in lines) for i in range(len(lines[0]))]
        out = ["  ".join(str(c).ljust(wd) for c, wd in zip(r, widths)) for r in lines]
        out.append("")
        out.append("Full-scale reference (FCN8s-VGG16, GTA source, mIoU %): "
                   + "; ".join(f"{dom}: " + " -> ".join(f"{a} {v}" for a, v in ref.items())
                               for dom, ref in FULL_SCALE_REFERENCE.items()))
        return "\n".join(out)

    def to_json(self):
        return {"rows": self.rows, "runs": self.runs, "domains": self.domains,
                "reference": FULL_SCALE_REFERENCE}

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "ablation.json"), "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(directory, "ablation.csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerows(self.table())
            writer.writerow([])
            writer.writerow(["# reference (not reproduced)", "Cityscapes FCN 29.81 -> +DR 34.64 -> +PCD 35.47 "
                             "-> +PCI 35.12 -> All 36.11"])


def ablate(base_cfg, dataset, registry, seeds=(0, 1, 2, 3, 4), workers=1, arms=ARMS, domains=None):
    """Train every ablation arm for every seed and tabulate held-out medians."""
    jobs = [(replace(seeded(base_cfg, s), mode=mode), dataset, registry, name, s, domains)
            for s in seeds for name, mode in arms]
    start = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_arm_job, jobs))
    else:
        runs = [_arm_job(j) for j in jobs]
    domains = list(runs[0]["perDomain"])
    rows = []
    for name, mode in arms:
        mine = [r for r in runs if r["arm"] == name]
        rows.append({
            "arm": name, "mode": mode,
            "perDomain": {d: statistics.median(r["perDomain"][d] for r in mine) for d in domains},
            "gPerf": statistics.median(r["gPerf"] for r in mine),
        })
    return AblationReport(rows, runs, domains, time.perf_counter() - start)


def projected_makespan(durations, workers=8):
    """Longest-processing-time schedule length of independent jobs on ``workers`` machines."""
    loads = [0.0] * workers
    for d in sorted(durations, reverse=True):
        i = loads.index(min(loads))
        loads[i] += d
    return max(loads)
