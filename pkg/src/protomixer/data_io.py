"""Matrix files, manifests and the synthetic bag generator.

Matrix file layout (all little-endian)::

    offset 0   magic  b"PMB1"
    offset 4   rows   uint32
    offset 8   cols   uint32
    offset 12  rows*cols float64, row-major

``b"PMF1"`` files carry float32 payloads; they are only accepted when the
caller asks for widening.

Manifests are tab-separated text. Optional ``# key=value`` lines carry the
dataset name, class count and bag kind; the first non-comment line is the
header ``slide_id  class_label  domain_id  path``. Paths are resolved
relative to the manifest's directory.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bags import EmbeddingBag, PrototypeBag
from .errors import ConfigError, DataError, FormatError

MATRIX_MAGIC = b"PMB1"
MATRIX32_MAGIC = b"PMF1"
_HEADER = struct.Struct("<4sII")
MANIFEST_COLUMNS = ("slide_id", "class_label", "domain_id", "path")


def write_matrix(m, path) -> None:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise FormatError(f"only 2-D matrices can be written, got {m.shape}")
    rows, cols = m.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MATRIX_MAGIC, rows, cols))
        fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def matrix_bytes(m) -> bytes:
    m = np.asarray(m, dtype=np.float64)
    return _HEADER.pack(MATRIX_MAGIC, *m.shape) + m.astype("<f8").tobytes()


def read_matrix(path, allow_float32: bool = False) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise FormatError("file shorter than magic", offset=len(raw), path=path)
    magic = raw[:4]
    if magic == MATRIX_MAGIC:
        dtype, width = "<f8", 8
    elif magic == MATRIX32_MAGIC and allow_float32:
        dtype, width = "<f4", 4
    elif magic == MATRIX32_MAGIC:
        raise FormatError("float32 matrix file; pass allow_float32 to widen",
                          offset=0, path=path)
    else:
        raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", offset=len(raw), path=path)
    _, rows, cols = _HEADER.unpack_from(raw)
    expected = _HEADER.size + rows * cols * width
    if len(raw) != expected:
        raise FormatError(
            f"length mismatch: {rows}x{cols} needs {expected} bytes, "
            f"file has {len(raw)}", offset=min(len(raw), expected), path=path)
    data = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size)
    return data.astype(np.float64).reshape(rows, cols)


@dataclass
class ManifestEntry:
    slide_id: str
    class_label: int
    domain_id: int
    path: str


@dataclass
class Manifest:
    dataset_name: str
    num_classes: int
    entries: list[ManifestEntry] = field(default_factory=list)
    kind: str = "embedding"
    root: Path = field(default_factory=Path)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    lines = [
        f"# dataset={manifest.dataset_name}",
        f"# num_classes={manifest.num_classes}",
        f"# kind={manifest.kind}",
        "\t".join(MANIFEST_COLUMNS),
    ]
    for e in manifest.entries:
        lines.append(f"{e.slide_id}\t{e.class_label}\t{e.domain_id}\t{e.path}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    meta = {}
    header = None
    entries = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                meta[key.strip()] = value.strip()
            continue
        cols = line.split("\t")
        if header is None:
            header = tuple(c.strip() for c in cols)
            if header != MANIFEST_COLUMNS:
                raise DataError(f"{path}:{lineno}: unexpected header {header}")
            continue
        if len(cols) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 columns, got {len(cols)}")
        sid, cls, dom, rel = cols
        if sid in seen:
            raise DataError(f"duplicate slide_id {sid!r} in {path}")
        seen.add(sid)
        try:
            entries.append(ManifestEntry(sid, int(cls), int(dom), rel))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    if "num_classes" in meta:
        num_classes = int(meta["num_classes"])
    else:
        num_classes = max((e.class_label for e in entries), default=-1) + 1
    for e in entries:
        if not 0 <= e.class_label < num_classes:
            raise DataError(
                f"slide {e.slide_id!r}: class {e.class_label} outside "
                f"[0, {num_classes})")
    return Manifest(meta.get("dataset", path.stem), num_classes, entries,
                    meta.get("kind", "embedding"), path.parent)


def sizes_path(bag_path: Path) -> Path:
    return bag_path.with_suffix(".sizes.pmb")


def load_entry(manifest: Manifest, entry: ManifestEntry,
               allow_float32: bool = False):
    path = manifest.resolve(entry)
    if not path.exists():
        raise DataError(f"slide {entry.slide_id!r}: missing file {path}")
    m = read_matrix(path, allow_float32=allow_float32)
    if manifest.kind == "prototype":
        sp = sizes_path(path)
        sizes = read_matrix(sp)[0].astype(np.int64) if sp.exists() else None
        return PrototypeBag(entry.slide_id, entry.class_label, entry.domain_id,
                            m, sizes)
    return EmbeddingBag(entry.slide_id, entry.class_label, entry.domain_id, m)


def load_dataset(manifest_path, allow_float32: bool = False):
    """Load every bag listed in a manifest, in manifest order."""
    manifest = read_manifest(manifest_path)
    bags = []
    width = None
    for entry in manifest.entries:
        bag = load_entry(manifest, entry, allow_float32)
        if width is None:
            width = bag.width
        elif bag.width != width:
            raise DataError(
                f"slide {entry.slide_id!r} has width {bag.width}, "
                f"expected {width}")
        bags.append(bag)
    return bags


def content_hash(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def manifest_hash(manifest_path) -> str:
    """Hash of a manifest and every file it references."""
    manifest = read_manifest(manifest_path)
    files = [Path(manifest_path)]
    for e in manifest.entries:
        p = manifest.resolve(e)
        files.append(p)
        sp = sizes_path(p)
        if sp.exists():
            files.append(sp)
    return content_hash(files)


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticSpec:
    num_bags: int = 60
    num_classes: int = 3
    num_domains: int = 4
    patches_min: int = 50
    patches_max: int = 200
    N: int = 64
    signal_fraction: float = 0.3
    domain_shift_magnitude: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    num_shared: int = 3
    center_scale: float = 1.0
    # probability that a bag's site is tied to its class (site = class mod
    # num_domains); otherwise the site is drawn uniformly
    site_class_confound: float = 0.0

    def validate(self) -> None:
        if self.num_bags < 1 or self.num_classes < 1 or self.N < 1:
            raise ConfigError("num_bags, num_classes and N must be >= 1")
        if not 0 < self.signal_fraction <= 1:
            raise ConfigError("signal_fraction must lie in (0, 1]")
        if not 1 <= self.num_domains <= self.num_bags:
            raise ConfigError("need 1 <= num_domains <= num_bags")
        if not 1 <= self.patches_min <= self.patches_max:
            raise ConfigError("need 1 <= patches_min <= patches_max")
        if self.noise_sigma < 0 or self.domain_shift_magnitude < 0:
            raise ConfigError("noise_sigma and domain_shift_magnitude must be >= 0")
        if self.num_shared < 0:
            raise ConfigError("num_shared must be >= 0")
        if self.num_shared == 0 and self.signal_fraction < 1:
            raise ConfigError("background patches need num_shared >= 1")
        if not 0 <= self.site_class_confound <= 1:
            raise ConfigError("site_class_confound must lie in [0, 1]")


@dataclass
class SyntheticTruth:
    class_centers: np.ndarray
    shared_centers: np.ndarray
    domain_offsets: np.ndarray
    sites: list[int]
    signal_counts: list[int]


def _bag_name(i: int, num_bags: int) -> str:
    return f"slide_{i:0{max(3, len(str(num_bags - 1)))}d}"


def gen_synthetic(spec: SyntheticSpec, out_dir) -> tuple[Path, SyntheticTruth]:
    """Write a synthetic MIL corpus and its ground truth under ``out_dir``.

    Signal patches sit on their class center, background patches on one of
    ``num_shared`` centers common to all classes. Every patch of a bag is
    moved by its site's offset (a unit direction scaled by
    ``domain_shift_magnitude``) and perturbed by isotropic noise. Returns the
    manifest path and the truth record (also written to ``truth/``).
    """
    spec.validate()
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    class_centers = spec.center_scale * rng.standard_normal((spec.num_classes, spec.N))
    shared = spec.center_scale * rng.standard_normal((spec.num_shared, spec.N))
    directions = rng.standard_normal((spec.num_domains, spec.N))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    offsets = spec.domain_shift_magnitude * directions

    labels = np.arange(spec.num_bags) % spec.num_classes
    rng.shuffle(labels)

    entries = []
    sites = []
    signal_counts = []
    for i in range(spec.num_bags):
        y = int(labels[i])
        if rng.random() < spec.site_class_confound:
            site = y % spec.num_domains
        else:
            site = int(rng.integers(spec.num_domains))
        K = int(rng.integers(spec.patches_min, spec.patches_max + 1))
        n_sig = min(K, max(1, int(round(spec.signal_fraction * K))))
        rows = np.empty((K, spec.N))
        rows[:n_sig] = class_centers[y]
        if K > n_sig:
            which = rng.integers(spec.num_shared, size=K - n_sig)
            rows[n_sig:] = shared[which]
        rows += offsets[site]
        if spec.noise_sigma > 0:
            rows += spec.noise_sigma * rng.standard_normal(rows.shape)
        rows = rows[rng.permutation(K)]

        name = _bag_name(i, spec.num_bags)
        rel = f"bags/{name}.pmb"
        write_matrix(rows, out / rel)
        entries.append(ManifestEntry(name, y, i, rel))
        sites.append(site)
        signal_counts.append(n_sig)

    manifest_path = out / "manifest.tsv"
    write_manifest(Manifest(f"synthetic-{spec.seed}", spec.num_classes,
                            entries, "embedding", out), manifest_path)
    truth = SyntheticTruth(class_centers, shared, offsets, sites, signal_counts)
    write_matrix(class_centers, out / "truth" / "class_centers.pmb")
    if spec.num_shared:
        write_matrix(shared, out / "truth" / "shared_centers.pmb")
    write_matrix(offsets, out / "truth" / "domain_offsets.pmb")
    index = ["slide_id\tclass_label\tsite\tsignal_patches"]
    for e, s, n in zip(entries, sites, signal_counts):
        index.append(f"{e.slide_id}\t{e.class_label}\t{s}\t{n}")
    (out / "truth" / "index.tsv").write_text("\n".join(index) + "\n")
    return manifest_path, truth


def read_truth(corpus_dir) -> SyntheticTruth:
    d = Path(corpus_dir) / "truth"
    shared_p = d / "shared_centers.pmb"
    sites, counts = [], []
    for line in (d / "index.tsv").read_text().splitlines()[1:]:
        _, _, site, n = line.split("\t")
        sites.append(int(site))
        counts.append(int(n))
    return SyntheticTruth(
        read_matrix(d / "class_centers.pmb"),
        read_matrix(shared_p) if shared_p.exists() else np.zeros((0, 0)),
        read_matrix(d / "domain_offsets.pmb"),
        sites, counts)
