"""Synthetic attribute-grid benchmark and dataset directory IO.

Each class is a sparse attribute vector; each image renders the class's
active attributes as deterministic signal blocks at attribute-specific
grid cells, over a Gaussian-noise background.  Unseen classes reuse the
same attribute vocabulary in new combinations, so recognizing them from
attribute predictions alone is possible by construction, and the
informative evidence is spatially localized (prunable background).
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .tensor_io import read_tensor, write_tensor


class ClassPrototype:
    """Attribute vector of one class; reads are counted so tests can
    verify the inference path never consults them."""

    __slots__ = ("class_id", "seen", "read_count", "_z")

    def __init__(self, class_id, z, seen):
        self.class_id = int(class_id)
        self._z = np.asarray(z, dtype=np.float64)
        self.seen = bool(seen)
        self.read_count = 0

    @property
    def z(self):
        self.read_count += 1
        return self._z

    @property
    def attr_dim(self):
        return self._z.shape[0]

    def __repr__(self):
        kind = "seen" if self.seen else "unseen"
        return f"ClassPrototype(id={self.class_id}, {kind}, |A|={self._z.shape[0]})"


@dataclass
class SynthSpec:
    num_seen: int = 20
    num_unseen: int = 5
    attr_dim: int = 16
    train_per_seen: int = 40
    test_per_seen: int = 20
    test_per_unseen: int = 20
    image_size: int = 32
    channels: int = 1
    grid: int = 8  # attribute cells per image side
    signal_strength: float = 1.0
    background_noise_std: float = 0.25
    attr_patch_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        counts = (
            self.num_seen,
            self.num_unseen,
            self.attr_dim,
            self.train_per_seen,
            self.test_per_seen,
            self.test_per_unseen,
            self.image_size,
            self.channels,
            self.grid,
        )
        if any(c < 1 for c in counts):
            raise ConfigError("all SynthSpec counts must be positive")
        if not 0.0 < self.attr_patch_fraction < 1.0:
            raise ConfigError(
                f"attr_patch_fraction must lie in (0,1), got {self.attr_patch_fraction}"
            )
        if self.image_size % self.grid != 0:
            raise ConfigError(f"grid {self.grid} does not divide image_size {self.image_size}")
        if self.background_noise_std < 0 or self.signal_strength <= 0:
            raise ConfigError("signal_strength must be positive, noise std non-negative")

    @property
    def cell(self):
        return self.image_size // self.grid

    @property
    def num_classes(self):
        return self.num_seen + self.num_unseen


@dataclass
class ZslDataset:
    prototypes: list
    splits: dict  # {"trs"|"tes"|"teu": [(image_key, class_id)]}
    images: dict  # image_key -> (C,H,W) float64 array
    attr_dim: int
    channels: int
    image_size: int
    synth_spec: SynthSpec = None
    attr_cells: dict = field(default_factory=dict)  # attr -> [(gy, gx)] (synthetic only)
    attr_gain: dict = field(default_factory=dict)  # attr -> expected cell mean per unit value

    def prototype(self, class_id):
        return self._by_id[class_id]

    @property
    def _by_id(self):
        return {p.class_id: p for p in self.prototypes}

    @property
    def seen_ids(self):
        return [p.class_id for p in self.prototypes if p.seen]

    @property
    def unseen_ids(self):
        return [p.class_id for p in self.prototypes if not p.seen]

    def prototype_matrix(self, class_ids, normalize=False):
        rows = np.stack([self.prototype(c).z for c in class_ids])
        if normalize:
            norms = np.linalg.norm(rows, axis=1, keepdims=True)
            rows = rows / np.maximum(norms, 1e-12)
        return rows

    def image(self, key):
        return self.images[key]

    def total_reads(self):
        return sum(p.read_count for p in self.prototypes)


def _sample_prototypes(spec, rng):
    """Sparse [0,1] attribute vectors with pairwise-distinct active sets."""
    k_active = max(1, round(spec.attr_dim / 4))
    if math.comb(spec.attr_dim, k_active) < spec.num_classes:
        raise ConfigError(
            f"attr_dim {spec.attr_dim} cannot give {spec.num_classes} classes "
            f"distinct {k_active}-attribute patterns"
        )
    taken = set()
    prototypes = []
    for class_id in range(spec.num_classes):
        for _ in range(10000):
            active = frozenset(rng.choice(spec.attr_dim, size=k_active, replace=False).tolist())
            if active not in taken:
                taken.add(active)
                break
        else:
            raise ConfigError("could not sample distinct attribute patterns")
        z = np.zeros(spec.attr_dim)
        z[sorted(active)] = rng.uniform(0.5, 1.0, size=k_active)
        prototypes.append(ClassPrototype(class_id, z, seen=class_id < spec.num_seen))
    return prototypes


def _assign_cells(spec, rng):
    """Give each attribute an exclusive set of grid cells."""
    total_cells = spec.grid * spec.grid
    signal_cells = int(round(spec.attr_patch_fraction * total_cells))
    if signal_cells < spec.attr_dim:
        raise ConfigError(
            f"attr_patch_fraction {spec.attr_patch_fraction} yields {signal_cells} signal "
            f"cells, fewer than {spec.attr_dim} attributes"
        )
    per_attr = signal_cells // spec.attr_dim
    order = rng.permutation(total_cells)
    cells = {}
    pos = 0
    for a in range(spec.attr_dim):
        mine = order[pos : pos + per_attr]
        cells[a] = [(int(c) // spec.grid, int(c) % spec.grid) for c in mine]
        pos += per_attr
    return cells


def _render(spec, proto, cells, templates, rng):
    img = (
        rng.normal(0.0, spec.background_noise_std, size=(spec.channels, spec.image_size, spec.image_size))
        if spec.background_noise_std > 0
        else np.zeros((spec.channels, spec.image_size, spec.image_size))
    )
    p = spec.cell
    z = proto._z
    for a in range(spec.attr_dim):
        if z[a] == 0.0:
            continue
        for gy, gx in cells[a]:
            img[:, gy * p : (gy + 1) * p, gx * p : (gx + 1) * p] = (
                z[a] * spec.signal_strength * templates[a]
            )
    return img


def generate(spec):
    """Deterministic synthetic dataset for the given spec (incl. seed)."""
    rng = np.random.default_rng(spec.seed)
    prototypes = _sample_prototypes(spec, rng)
    cells = _assign_cells(spec, rng)
    templates = {
        a: rng.uniform(0.5, 1.0, size=(spec.cell, spec.cell)) for a in range(spec.attr_dim)
    }
    gains = {a: spec.signal_strength * templates[a].mean() for a in range(spec.attr_dim)}
    images = {}
    splits = {"trs": [], "tes": [], "teu": []}
    counter = 0

    def emit(proto, split):
        nonlocal counter
        key = f"img_{counter:05d}"
        counter += 1
        images[key] = _render(spec, proto, cells, templates, rng)
        splits[split].append((key, proto.class_id))

    for proto in prototypes:
        if proto.seen:
            for _ in range(spec.train_per_seen):
                emit(proto, "trs")
            for _ in range(spec.test_per_seen):
                emit(proto, "tes")
        else:
            for _ in range(spec.test_per_unseen):
                emit(proto, "teu")
    return ZslDataset(
        prototypes=prototypes,
        splits=splits,
        images=images,
        attr_dim=spec.attr_dim,
        channels=spec.channels,
        image_size=spec.image_size,
        synth_spec=spec,
        attr_cells=cells,
        attr_gain=gains,
    )


def oracle_attribute_estimate(ds, image):
    """Mean in-cell intensity per attribute, rescaled by the render gain.

    Only defined for synthetic datasets (needs the cell map); recovers the
    class attribute vector exactly on noise-free images.
    """
    if not ds.attr_cells:
        raise ContractError("oracle estimate needs a synthetic dataset with a cell map")
    spec = ds.synth_spec
    p = spec.cell
    est = np.zeros(ds.attr_dim)
    for a, cell_list in ds.attr_cells.items():
        vals = [
            image[:, gy * p : (gy + 1) * p, gx * p : (gx + 1) * p].mean()
            for gy, gx in cell_list
        ]
        est[a] = np.mean(vals) / ds.attr_gain[a]
    return est


# ---------------------------------------------------------------------------
# directory IO
# ---------------------------------------------------------------------------

def save(ds, directory):
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    with open(os.path.join(directory, "attributes.tsv"), "w") as fh:
        for p in ds.prototypes:
            flag = "seen" if p.seen else "unseen"
            fh.write("\t".join([str(p.class_id), *[repr(float(v)) for v in p._z], flag]) + "\n")
    with open(os.path.join(directory, "splits.tsv"), "w") as fh:
        for split in ("trs", "tes", "teu"):
            for key, class_id in ds.splits[split]:
                fh.write(f"{key}.zvt\t{class_id}\t{split}\n")
    for key, img in ds.images.items():
        write_tensor(os.path.join(directory, "images", f"{key}.zvt"), img)
    if ds.synth_spec is not None:
        from .runconfig import dataclass_to_kv, write_kv

        write_kv(os.path.join(directory, "spec.txt"), dataclass_to_kv(ds.synth_spec))


def load(directory):
    attr_path = os.path.join(directory, "attributes.tsv")
    split_path = os.path.join(directory, "splits.tsv")
    for required in (attr_path, split_path):
        if not os.path.exists(required):
            raise FormatError(f"missing dataset file {required}")
    prototypes = []
    attr_dim = None
    with open(attr_path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise FormatError(f"{attr_path}:{ln}: truncated attribute row {line!r}")
            class_id, flag = parts[0], parts[-1]
            if flag not in ("seen", "unseen"):
                raise FormatError(f"{attr_path}:{ln}: bad seen/unseen flag {flag!r}")
            try:
                cid = int(class_id)
                values = [float(v) for v in parts[1:-1]]
            except ValueError:
                raise FormatError(f"{attr_path}:{ln}: unparseable attribute row")
            if attr_dim is None:
                attr_dim = len(values)
            elif len(values) != attr_dim:
                raise FormatError(
                    f"{attr_path}:{ln}: class {cid} has {len(values)} attributes, "
                    f"expected {attr_dim}"
                )
            prototypes.append(ClassPrototype(cid, values, seen=flag == "seen"))
    if not prototypes:
        raise FormatError(f"{attr_path}: no classes")
    by_id = {p.class_id: p for p in prototypes}

    splits = {"trs": [], "tes": [], "teu": []}
    images = {}
    geometry = None
    with open(split_path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{split_path}:{ln}: expected 3 columns, got {len(parts)}")
            fname, cid_txt, split = parts
            if split not in splits:
                raise FormatError(f"{split_path}:{ln}: unknown split {split!r}")
            try:
                cid = int(cid_txt)
            except ValueError:
                raise FormatError(f"{split_path}:{ln}: bad class id {cid_txt!r}")
            if cid not in by_id:
                raise FormatError(f"{split_path}:{ln}: class {cid} has no prototype")
            if split == "teu" and by_id[cid].seen:
                raise FormatError(f"{split_path}:{ln}: seen class {cid} in unseen split")
            if split in ("trs", "tes") and not by_id[cid].seen:
                raise FormatError(f"{split_path}:{ln}: unseen class {cid} in seen split")
            key = fname[:-4] if fname.endswith(".zvt") else fname
            img_path = os.path.join(directory, "images", f"{key}.zvt")
            if not os.path.exists(img_path):
                raise FormatError(f"{split_path}:{ln}: missing image file {img_path}")
            img = read_tensor(img_path)
            if img.ndim != 3:
                raise FormatError(f"{img_path}: expected a C,H,W tensor, got rank {img.ndim}")
            if geometry is None:
                geometry = img.shape
            elif img.shape != geometry:
                raise FormatError(
                    f"{img_path}: geometry {img.shape} differs from {geometry}"
                )
            images[key] = img
            splits[split].append((key, cid))

    spec = None
    spec_path = os.path.join(directory, "spec.txt")
    if os.path.exists(spec_path):
        from .runconfig import dataclass_from_kv, read_kv

        spec = dataclass_from_kv(SynthSpec, read_kv(spec_path))
    if geometry is None:
        raise FormatError(f"{split_path}: no images referenced")
    return ZslDataset(
        prototypes=prototypes,
        splits=splits,
        images=images,
        attr_dim=attr_dim,
        channels=geometry[0],
        image_size=geometry[1],
        synth_spec=spec,
    )
