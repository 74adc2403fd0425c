"""Bags of patch embeddings: synthetic generation, the SGCD bag file and TSV manifests.

Bag file layout (little-endian)::

    offset 0   4 bytes  magic b"SGCD"
    offset 4   u32      version (1)
    offset 8   u32      M, number of patches
    offset 12  u32      D, embedding width
    offset 16  M*D f32  row-major embeddings

Manifest: UTF-8 text, one ``slide_id<TAB>path<TAB>label`` record per line.
Blank lines and lines starting with ``#`` are skipped. Relative paths resolve
against the manifest's directory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError

BAG_MAGIC = b"SGCD"
BAG_VERSION = 1
_HEADER = struct.Struct("<4sIII")

SPLITS = ("train", "val", "test")


@dataclass
class PatchBag:
    slide_id: str
    embeddings: np.ndarray
    label: int

    def __post_init__(self):
        emb = np.asarray(self.embeddings)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise InputError(f"bag {self.slide_id!r}: embeddings must be a non-empty (M, D) matrix, "
                             f"got shape {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise InputError(f"bag {self.slide_id!r}: non-finite embedding values")
        self.embeddings = emb
        self.label = int(self.label)

    @property
    def num_patches(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class Dataset:
    bags: list[PatchBag]
    num_classes: int
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        for b in self.bags:
            if not 0 <= b.label < self.num_classes:
                raise InputError(f"bag {b.slide_id!r} has label {b.label} outside [0, {self.num_classes})")
        if not self.splits:
            self.splits = {"train": list(range(len(self.bags)))}
        seen: set[int] = set()
        for name, idx in self.splits.items():
            if seen.intersection(idx):
                raise InputError(f"split {name!r} overlaps another split")
            seen.update(idx)
        if seen != set(range(len(self.bags))):
            raise InputError("splits must cover every bag exactly once")

    def __len__(self) -> int:
        return len(self.bags)

    def split(self, name: str) -> list[PatchBag]:
        return [self.bags[i] for i in self.splits.get(name, [])]

    def check_train_classes(self) -> None:
        present = {b.label for b in self.split("train")}
        missing = sorted(set(range(self.num_classes)) - present)
        if missing:
            raise InputError(f"classes {missing} are missing from the train split")


@dataclass
class SyntheticSpec:
    """Per-class Gaussian patches mixed with a shared background component.

    A bag of class ``c`` holds ``round(signal_fraction * M)`` patches drawn around
    the class mean and the rest around the background mean; all components share
    isotropic noise ``noise_scale``. Class means are drawn as
    ``N(0, separation**2 / patch_dim)`` per coordinate, so their expected
    pairwise distance is about ``separation * sqrt(2)``.
    """

    num_classes: int = 2
    slides_per_class: int = 150
    patches_min: int = 16
    patches_max: int = 48
    patch_dim: int = 32
    separation: float = 4.0
    noise_scale: float = 1.0
    signal_fraction: float = 0.5
    test_fraction: float = 1 / 3
    val_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1 or self.slides_per_class < 1:
            raise ConfigError("synthetic spec needs at least one class and one slide per class")
        if self.patch_dim < 1:
            raise ConfigError("synthetic patch_dim must be >= 1")
        if not 1 <= self.patches_min <= self.patches_max:
            raise ConfigError("need 1 <= patches_min <= patches_max")
        if not 0.0 <= self.signal_fraction <= 1.0:
            raise ConfigError("signal_fraction must lie in [0, 1]")
        if self.noise_scale < 0 or self.separation < 0:
            raise ConfigError("noise_scale and separation must be non-negative")
        if not (0 <= self.test_fraction and 0 <= self.val_fraction
                and self.test_fraction + self.val_fraction < 1):
            raise ConfigError("test_fraction + val_fraction must lie in [0, 1)")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic synthetic dataset with stratified train/val/test splits."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.patch_dim
    class_means = rng.normal(0.0, spec.separation / np.sqrt(d), size=(spec.num_classes, d))
    background = np.zeros(d)

    bags: list[PatchBag] = []
    splits: dict[str, list[int]] = {s: [] for s in SPLITS}
    n_test = int(round(spec.test_fraction * spec.slides_per_class))
    n_val = int(round(spec.val_fraction * spec.slides_per_class))
    for c in range(spec.num_classes):
        order = rng.permutation(spec.slides_per_class)
        role = np.empty(spec.slides_per_class, dtype=object)
        role[order[:n_test]] = "test"
        role[order[n_test:n_test + n_val]] = "val"
        role[order[n_test + n_val:]] = "train"
        for j in range(spec.slides_per_class):
            m = int(rng.integers(spec.patches_min, spec.patches_max + 1))
            n_signal = int(round(spec.signal_fraction * m))
            centers = np.vstack([np.repeat(class_means[c][None], n_signal, axis=0),
                                 np.repeat(background[None], m - n_signal, axis=0)])
            patches = centers + rng.normal(0.0, spec.noise_scale, size=(m, d))
            patches = patches[rng.permutation(m)].astype(np.float32)
            splits[role[j]].append(len(bags))
            bags.append(PatchBag(f"syn-c{c}-{j:04d}", patches, c))
    splits = {k: v for k, v in splits.items() if v}
    return Dataset(bags, spec.num_classes, splits)


# ----------------------------------------------------------------------------
# bag files


def write_bag_file(bag: PatchBag, path) -> None:
    emb = np.ascontiguousarray(bag.embeddings, dtype="<f4")
    m, d = emb.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BAG_MAGIC, BAG_VERSION, m, d))
        fh.write(emb.tobytes())


def load_bag_file(path, slide_id: str | None = None, label: int = 0) -> PatchBag:
    """Read a bag file. The file carries no id or label; pass them from the manifest."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need {_HEADER.size} bytes)")
    magic, version, m, d = _HEADER.unpack_from(raw, 0)
    if magic != BAG_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != BAG_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    need = _HEADER.size + 4 * m * d
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload, file ends at offset {len(raw)}, expected {need}")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after offset {need}")
    emb = np.frombuffer(raw, dtype="<f4", count=m * d, offset=_HEADER.size).reshape(m, d)
    return PatchBag(slide_id if slide_id is not None else path.stem, emb.astype(np.float32), label)


# ----------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRecord:
    slide_id: str
    path: Path
    label: int


def parse_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    base = path.parent
    records: list[ManifestRecord] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        slide_id, bag_path, label_s = (p.strip() for p in parts)
        if not slide_id or not bag_path:
            raise FormatError(f"{path}:{lineno}: empty slide_id or path")
        try:
            label = int(label_s)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: label {label_s!r} is not an integer") from None
        if label < 0:
            raise FormatError(f"{path}:{lineno}: negative label {label}")
        if slide_id in seen:
            raise FormatError(f"{path}:{lineno}: duplicate slide_id {slide_id!r} (first on line {seen[slide_id]})")
        seen[slide_id] = lineno
        p = Path(bag_path)
        records.append(ManifestRecord(slide_id, p if p.is_absolute() else base / p, label))
    return records


def write_manifest(records, path) -> None:
    lines = [f"{r.slide_id}\t{r.path}\t{r.label}" for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_manifest_bags(path) -> list[PatchBag]:
    return [load_bag_file(r.path, r.slide_id, r.label) for r in parse_manifest(path)]


def load_dataset(manifests: dict[str, str | Path], num_classes: int) -> Dataset:
    """Build a dataset from one manifest per split name."""
    bags: list[PatchBag] = []
    splits: dict[str, list[int]] = {}
    for name, mpath in manifests.items():
        loaded = load_manifest_bags(mpath)
        splits[name] = list(range(len(bags), len(bags) + len(loaded)))
        bags.extend(loaded)
    return Dataset(bags, num_classes, splits)


def export_dataset(dataset: Dataset, out_dir) -> dict[str, Path]:
    """Write every bag plus one manifest per split; returns the manifest paths."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    manifests = {}
    for name, idx in dataset.splits.items():
        records = []
        for i in idx:
            bag = dataset.bags[i]
            rel = Path("bags") / f"{bag.slide_id}.sgcd"
            write_bag_file(bag, out_dir / rel)
            records.append(ManifestRecord(bag.slide_id, rel, bag.label))
        manifests[name] = out_dir / f"{name}.tsv"
        write_manifest(records, manifests[name])
    return manifests
