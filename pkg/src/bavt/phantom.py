"""Synthetic branching-vessel phantoms with exact masks."""
import math
import warnings
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import imgproc, kernels

FG_MIN = 0.01
FG_MAX = 0.40
MAX_ATTEMPTS = 100
DEFAULT_SPLIT = 0.776


class PhantomError(ValueError):
    pass


@dataclass
class PhantomConfig:
    size: int = 64
    n_trees: int = 2
    branch_depth: int = 3
    width_root: float = 4.0
    width_decay: float = 0.7
    noise_std: float = 0.03
    background_level: float = 0.8
    vessel_contrast: float = 0.5
    seed: int = 0

    def validate(self):
        if self.size < 4:
            raise PhantomError("size must be at least 4")
        if self.width_root < 1:
            raise PhantomError("width_root must be >= 1")
        if not 0 < self.width_decay <= 1:
            raise PhantomError("width_decay must lie in (0, 1]")
        if self.n_trees < 1 or self.branch_depth < 0:
            raise PhantomError("need n_trees >= 1 and branch_depth >= 0")
        if self.vessel_contrast <= self.noise_std:
            warnings.warn("vessel_contrast <= noise_std: vessels may be invisible", stacklevel=2)
        return self


def _draw_tree(mask, rng, cfg):
    size = cfg.size
    # roots start near a random border and head roughly inward
    side = rng.integers(4)
    t = rng.uniform(0.15, 0.85) * (size - 1)
    edge = rng.uniform(0.0, 0.1) * (size - 1)
    root = [(edge, t), (t, size - 1 - edge), (size - 1 - edge, t), (t, edge)][side]
    inward = [math.pi / 2, math.pi, -math.pi / 2, 0.0][side]
    heading = inward + rng.uniform(-math.pi / 6, math.pi / 6)

    stack = [(root[0], root[1], heading, 0)]
    while stack:
        r, c, ang, level = stack.pop()
        length = size * rng.uniform(0.25, 0.45) * (0.75 ** level)
        # angle measured from +row axis toward +col axis
        r1 = r + length * math.sin(ang)
        c1 = c + length * math.cos(ang)
        width = max(1.0, cfg.width_root * cfg.width_decay ** level)
        kernels.rasterize_segment(mask, float(r), float(c), float(r1), float(c1), 0.5 * width)
        if level < cfg.branch_depth:
            for _ in range(2):
                stack.append((r1, c1, ang + math.radians(rng.uniform(-60.0, 60.0)), level + 1))


def render_mask(cfg, rng):
    mask = np.zeros((cfg.size, cfg.size), dtype=np.uint8)
    for _ in range(cfg.n_trees):
        _draw_tree(mask, rng, cfg)
    return mask


def render_image(mask, cfg, rng):
    soft = gaussian_filter(mask.astype(np.float64), 1.0, mode="nearest")
    image = cfg.background_level - cfg.vessel_contrast * soft
    if cfg.noise_std > 0:
        image = image + rng.normal(0.0, cfg.noise_std, size=mask.shape)
    return np.clip(image, 0.0, 1.0)


def generate_phantom(config):
    """(image, mask) for ``config``; regenerates until foreground is within [1%, 40%]."""
    config.validate()
    for attempt in range(MAX_ATTEMPTS):
        seed = config.seed if attempt == 0 else [config.seed, attempt]
        rng = np.random.default_rng(seed)
        mask = render_mask(config, rng)
        frac = mask.mean()
        if FG_MIN <= frac <= FG_MAX:
            return render_image(mask, config, rng), mask
    raise PhantomError(f"no phantom with foreground in [{FG_MIN}, {FG_MAX}] after {MAX_ATTEMPTS} attempts")


def derive_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint32)[0])


@dataclass
class Sample:
    index: int
    seed: int
    split: str
    image: np.ndarray = None
    mask: np.ndarray = None


def split_sizes(n, ratio):
    if n < 3:
        raise PhantomError(f"need at least 3 samples for a train/val/test split, got {n}")
    if not 0 < ratio < 1:
        raise PhantomError(f"split ratio must lie in (0, 1), got {ratio}")
    n_train = int(round(n * ratio))
    held = n - n_train
    n_test = held // 2
    n_val = held - n_test
    if min(n_train, n_val, n_test) == 0:
        raise PhantomError(f"split of {n} at ratio {ratio} leaves an empty subset "
                           f"(train={n_train}, val={n_val}, test={n_test})")
    return n_train, n_val, n_test


def make_dataset(n, template, split_ratio=DEFAULT_SPLIT, seed=0, render=True):
    """``n`` phantoms with per-index derived seeds and a seeded train/val/test split."""
    n_train, n_val, _ = split_sizes(n, split_ratio)
    perm = np.random.default_rng(seed).permutation(n)
    split = np.empty(n, dtype=object)
    split[perm[:n_train]] = "train"
    split[perm[n_train:n_train + n_val]] = "val"
    split[perm[n_train + n_val:]] = "test"
    samples = []
    for i in range(n):
        s = derive_seed(seed, i)
        sample = Sample(i, s, str(split[i]))
        if render:
            sample.image, sample.mask = generate_phantom(replace(template, seed=s))
        samples.append(sample)
    return samples


def subset(samples, name):
    return [s for s in samples if s.split == name]


# -------------------------------------------------------------------- on disk

MANIFEST = "manifest.txt"


def image_name(index):
    return f"images/{index:04d}.png"


def mask_name(index):
    return f"masks/{index:04d}.png"


def write_dataset(out_dir, samples, template, split_ratio, seed):
    """Image/mask PNG pairs plus ``manifest.txt``.

    Manifest grammar: header lines ``key=value`` (``n``, ``split_ratio``,
    ``seed``, ``phantom.<field>``), then one line per sample of
    space-separated ``index=`` ``seed=`` ``split=`` ``image=`` ``mask=`` pairs.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = [f"n={len(samples)}", f"split_ratio={split_ratio!r}", f"seed={seed}"]
    for f in fields(template):
        if f.name != "seed":
            lines.append(f"phantom.{f.name}={getattr(template, f.name)!r}")
    for s in samples:
        imgproc.write_image(out / image_name(s.index), s.image)
        imgproc.write_mask(out / mask_name(s.index), s.mask)
        lines.append(f"index={s.index} seed={s.seed} split={s.split} "
                     f"image={image_name(s.index)} mask={mask_name(s.index)}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    """Return ``(header dict, list of per-sample dicts)``."""
    header, rows = {}, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("index="):
            row = dict(tok.split("=", 1) for tok in line.split())
            rows.append(row)
        else:
            if "=" not in line:
                raise PhantomError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
    return header, rows


def load_dataset(data_dir, splits=None):
    """Load samples listed in ``data_dir/manifest.txt``, optionally only some splits."""
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest}: manifest not found")
    _, rows = read_manifest(manifest)
    samples = []
    for row in rows:
        if splits is not None and row["split"] not in splits:
            continue
        img_path = data_dir / row["image"]
        mask_path = data_dir / row["mask"]
        for p in (img_path, mask_path):
            if not p.exists():
                raise FileNotFoundError(f"sample {row['index']}: missing {p} "
                                        f"(pair {row['image']}, {row['mask']})")
        image = imgproc.read_image(img_path)
        mask = imgproc.read_mask(mask_path)
        if image.shape != mask.shape:
            raise imgproc.ImageFormatError(f"sample {row['index']}: image/mask sizes differ")
        samples.append(Sample(int(row["index"]), int(row["seed"]), row["split"], image, mask))
    return samples
