"""Label-preserving parametric stylizers used as auxiliary domains.

Each stylizer is a fixed colour/texture transform: hue rotation and
saturation scaling through HSV, an affine contrast/brightness change, a
convex blend towards grayscale, and an additive value-noise texture whose
pattern is fixed by the stylizer's own seed. Images never carry labels into
these functions, so labels cannot be altered.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, DataError

LUMA = np.array([0.299, 0.587, 0.114])
MAX_NOISE = 0.1


@dataclass(frozen=True)
class Stylizer:
    id: str
    hue: float = 0.0
    saturation: float = 1.0
    contrast: float = 1.0
    brightness: float = 0.0
    gray: float = 0.0
    noise: float = 0.0
    noise_seed: int = 0
    noise_cells: int = 8

    def __post_init__(self):
        if not 0.0 <= self.gray <= 1.0:
            raise ConfigError(f"{self.id}: gray blend must be in [0, 1], got {self.gray}")
        if not 0.0 <= self.noise <= MAX_NOISE:
            raise ConfigError(f"{self.id}: noise amplitude must be in [0, {MAX_NOISE}], got {self.noise}")
        if self.saturation < 0 or self.contrast < 0:
            raise ConfigError(f"{self.id}: saturation and contrast must be non-negative")
        if self.noise_cells < 1:
            raise ConfigError(f"{self.id}: noise_cells must be >= 1")

    @property
    def is_identity(self):
        return (self.hue % 360 == 0 and self.saturation == 1 and self.contrast == 1
                and self.brightness == 0 and self.gray == 0 and self.noise == 0)

    def to_block(self):
        """``id: key=value, ...`` text form used in experiment configs."""
        parts = [f"{f.name}={getattr(self, f.name)}" for f in fields(self) if f.name != "id"]
        return f"{self.id}: " + ", ".join(parts)

    @classmethod
    def from_block(cls, text):
        ident, _, rest = text.partition(":")
        ident = ident.strip()
        if not ident or not rest.strip():
            raise ConfigError(f"stylizer block must look like 'id: key=value, ...', got {text!r}")
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for item in rest.split(","):
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep or key not in kinds or key == "id":
                raise ConfigError(f"stylizer {ident}: unknown or malformed entry {item.strip()!r}")
            kwargs[key] = int(value) if key in ("noise_seed", "noise_cells") else float(value)
        return cls(ident, **kwargs)


IDENTITY = Stylizer("source")


def rgb_to_hsv(rgb):
    """``3 x H x W`` RGB in [0,1] to HSV with hue in [0, 1)."""
    r, g, b = rgb
    v = rgb.max(axis=0)
    c = v - rgb.min(axis=0)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(c > 0, c, 1.0)
    h = np.where(v == r, ((g - b) / safe) % 6.0,
                 np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(c > 0, h / 6.0, 0.0)
    return np.stack([h % 1.0, s, v])


def hsv_to_rgb(hsv):
    h, s, v = hsv
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.empty((3,) + h.shape)
    for ch in range(3):
        out[ch] = np.choose(sector, [row[ch] for row in table])
    return out


def value_noise(shape, cells, seed):
    """Smooth noise in [-1, 1]: a random lattice bilinearly interpolated."""
    c, h, w = shape
    rng = np.random.default_rng(seed)
    lattice = rng.uniform(-1.0, 1.0, size=(c, cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(np.floor(ys).astype(int), cells - 1)
    x0 = np.minimum(np.floor(xs).astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = lattice[:, y0][:, :, x0] * (1 - fx) + lattice[:, y0][:, :, x0 + 1] * fx
    bot = lattice[:, y0 + 1][:, :, x0] * (1 - fx) + lattice[:, y0 + 1][:, :, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def apply(stylizer, image):
    """Stylize a ``3 x H x W`` float image with values in [0, 1]."""
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"expected a 3 x H x W image, got shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise DataError(f"pixel values must lie in [0, 1], got [{img.min()}, {img.max()}]")
    if stylizer.is_identity:
        return img.copy()
    out = img
    if stylizer.hue % 360 != 0 or stylizer.saturation != 1:
        hsv = rgb_to_hsv(out)
        hsv[0] = (hsv[0] + stylizer.hue / 360.0) % 1.0
        hsv[1] = np.clip(hsv[1] * stylizer.saturation, 0.0, 1.0)
        out = hsv_to_rgb(hsv)
    if stylizer.contrast != 1 or stylizer.brightness != 0:
        out = (out - 0.5) * stylizer.contrast + 0.5 + stylizer.brightness
    if stylizer.gray > 0:
        lum = np.tensordot(LUMA, out, axes=1)
        out = (1 - stylizer.gray) * out + stylizer.gray * lum[None]
    if stylizer.noise > 0:
        out = out + stylizer.noise * value_noise(out.shape, stylizer.noise_cells, stylizer.noise_seed)
    return np.clip(out, 0.0, 1.0)


@dataclass
class DomainRegistry:
    """Training stylizers, plus disjoint held-out ones for validation and test."""

    train: list
    test: list = field(default_factory=list)
    validation: list = field(default_factory=list)

    def __post_init__(self):
        ids = [s.id for s in self.train + self.test + self.validation]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ConfigError(f"stylizer ids must be unique across train/test/validation: {dupes}")
        if IDENTITY.id in ids:
            raise ConfigError(f"'{IDENTITY.id}' is reserved for the untouched source domain")

    @property
    def k(self):
        return len(self.train)

    def by_id(self, ident):
        if ident == IDENTITY.id:
            return IDENTITY
        for s in self.train + self.test + self.validation:
            if s.id == ident:
                return s
        raise KeyError(ident)

    def subset(self, k):
        """Registry restricted to the first ``k`` training stylizers."""
        return DomainRegistry(list(self.train[:k]), list(self.test), list(self.validation))


@dataclass
class DomainGroup:
    """One source sample: its original image, K stylized copies, one label map."""

    images: list
    label: np.ndarray
    domain_ids: list
    sample_id: str = ""

    @property
    def size(self):
        return len(self.images)


def make_group(image, label, registry, sample_id="", allow_empty=False):
    if registry.k == 0 and not allow_empty:
        raise ConfigError("registry has no training stylizers; a domain group needs K >= 1")
    base = np.asarray(getattr(image, "data", image), dtype=np.float64)
    images = [base] + [apply(s, base) for s in registry.train]
    return DomainGroup(images, label, [IDENTITY.id] + [s.id for s in registry.train], sample_id)


def _train_styles():
    # (hue, saturation, contrast, brightness, gray, noise)
    table = [
        (24, 1.0, 1.0, 0.00, 0.0, 0.00),
        (-24, 0.8, 1.1, 0.05, 0.0, 0.04),
        (48, 1.2, 0.9, -0.05, 0.0, 0.00),
        (-48, 1.0, 0.8, 0.10, 0.0, 0.06),
        (72, 0.7, 1.2, 0.00, 0.2, 0.00),
        (-72, 1.3, 1.0, -0.10, 0.0, 0.08),
        (96, 1.0, 0.7, 0.05, 0.0, 0.03),
        (-96, 0.9, 1.3, 0.00, 0.0, 0.00),
        (120, 1.1, 1.0, 0.12, 0.0, 0.05),
        (-120, 0.6, 0.9, -0.08, 0.3, 0.00),
        (144, 1.0, 1.2, -0.04, 0.0, 0.07),
        (-144, 1.4, 0.8, 0.06, 0.0, 0.00),
        (168, 0.8, 1.0, 0.00, 0.0, 0.09),
        (-168, 1.0, 1.1, 0.08, 0.5, 0.00),
        (180, 1.2, 0.75, -0.12, 0.0, 0.04),
    ]
    return [Stylizer(f"aux{i:02d}", hue=h, saturation=s, contrast=c, brightness=b, gray=g, noise=n,
                     noise_seed=1000 + i) for i, (h, s, c, b, g, n) in enumerate(table)]


def default_registry(k=15):
    """15 training domains, 3 held-out test domains and 1 validation domain."""
    train = _train_styles()
    if not 1 <= k <= len(train):
        raise ConfigError(f"default registry supports 1..{len(train)} training stylizers, got {k}")
    test = [
        Stylizer("test_dusk", hue=60, saturation=1.25, contrast=0.85, brightness=-0.08, noise=0.05, noise_seed=2001),
        Stylizer("test_fog", hue=-132, saturation=0.7, contrast=0.75, brightness=0.1, gray=0.25, noise_seed=2002),
        Stylizer("test_neon", hue=156, saturation=1.35, contrast=1.15, noise=0.07, noise_seed=2003, noise_cells=5),
    ]
    validation = [Stylizer("val_haze", hue=-60, saturation=0.9, contrast=0.9, brightness=0.06, noise=0.04,
                           noise_seed=3001)]
    return DomainRegistry(train[:k], test, validation)
