"""Seeded synthetic multi-view datasets, a line-delimited file format, and
deterministic batch iteration.

Generation model: each class gets a latent prototype mu_k ~ N(0, sigma_proto^2 I)
in R^D; subcategory prototypes sit at mu_k + N(0, sigma_subcat^2 I); an object's
latent z adds N(0, sigma_object^2 I) to its subcategory prototype. Domain-0
objects are observed through V fixed random view maps A_v (entries N(0, 1/D),
drawn once per dataset, like a fixed camera rig): view v = A_v z + noise.
Domain-1 objects are single-view and noisier: B z + noise with its own map B.
Both domains share the class set and prototypes, so shared centers are
meaningful in two-domain training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ContractViolation


@dataclass
class DatasetSpec:
    """Shape and noise parameters of a synthetic dataset."""

    num_classes: int = 20
    subcats_per_class: int = 2
    views_per_object: int = 4
    view_dim: int = 32
    train_per_class: int = 25
    test_per_class: int = 10
    sigma_proto: float = 1.0
    sigma_subcat: float = 0.3
    sigma_object: float = 0.1
    sigma_view: float = 0.05
    domains: int = 1
    sigma_domain2: float = 0.1  # 2 * sigma_view by default
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractViolation("need at least two classes")
        if self.subcats_per_class < 1 or self.views_per_object < 1:
            raise ContractViolation("subcats and views must be >= 1")
        if self.view_dim < 1:
            raise ContractViolation("view_dim must be >= 1")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ContractViolation("objects per class must be >= 1")
        for name in ("sigma_proto", "sigma_subcat", "sigma_object",
                     "sigma_view", "sigma_domain2"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")
        if self.domains not in (1, 2):
            raise ContractViolation("domains must be 1 or 2")


@dataclass
class MultiViewObject:
    """One labeled object: V view vectors of dimension D (domain 1 has V=1)."""

    id: str
    label: int
    subcat: int
    domain: int
    views: np.ndarray  # (V, D)

    def __post_init__(self):
        self.views = np.asarray(self.views, dtype=np.float64)
        if self.views.ndim != 2 or self.views.shape[0] < 1:
            raise ContractViolation(f"object {self.id}: views must be a V x D matrix")
        if not np.all(np.isfinite(self.views)):
            raise ContractViolation(f"object {self.id}: non-finite views")
        if self.label < 0 or self.subcat < 0 or self.domain < 0:
            raise ContractViolation(f"object {self.id}: negative index field")


@dataclass
class Split:
    train: list[MultiViewObject]
    test: list[MultiViewObject]
    spec: DatasetSpec | None = None

    def __post_init__(self):
        ids = [o.id for o in self.train] + [o.id for o in self.test]
        if len(set(ids)) != len(ids):
            raise ContractViolation("duplicate object ids across the split")


def draw_view_maps(rng: np.random.Generator, views: int, dim: int):
    """V fixed D x D view maps with entries N(0, 1/D), plus the domain-1 map."""
    scale = 1.0 / np.sqrt(dim)
    maps = [rng.normal(0.0, scale, size=(dim, dim)) for _ in range(views)]
    domain2_map = rng.normal(0.0, scale, size=(dim, dim))
    return maps, domain2_map


def synthesize_objects(spec: DatasetSpec, prototypes: np.ndarray,
                       view_maps, domain2_map, rng: np.random.Generator) -> Split:
    """Builds the train/test object lists from prototypes and fixed view maps.

    `prototypes` has shape (K, S, D): one latent prototype per (class, subcat).
    Draw order is fixed: domain -> class -> object -> (latent, views).
    """
    K, S, D = prototypes.shape
    train, test = [], []
    for domain in range(spec.domains):
        for k in range(K):
            per_class = spec.train_per_class + spec.test_per_class
            for idx in range(per_class):
                subcat = idx % S
                z = prototypes[k, subcat] + rng.normal(0.0, spec.sigma_object, size=D)
                if domain == 0:
                    views = np.stack([
                        a @ z + rng.normal(0.0, spec.sigma_view, size=D)
                        for a in view_maps])
                else:
                    views = (domain2_map @ z
                             + rng.normal(0.0, spec.sigma_domain2, size=D))[None, :]
                obj = MultiViewObject(id=f"d{domain}-c{k:02d}-{idx:03d}",
                                      label=k, subcat=subcat, domain=domain,
                                      views=views)
                (train if idx < spec.train_per_class else test).append(obj)
    return Split(train=train, test=test, spec=spec)


def generate(spec: DatasetSpec) -> Split:
    """Deterministically generates a dataset from spec.seed."""
    rng = np.random.default_rng(spec.seed)
    K, S, D = spec.num_classes, spec.subcats_per_class, spec.view_dim
    class_protos = rng.normal(0.0, spec.sigma_proto, size=(K, D))
    subcat_offsets = rng.normal(0.0, spec.sigma_subcat, size=(K, S, D))
    prototypes = class_protos[:, None, :] + subcat_offsets
    view_maps, domain2_map = draw_view_maps(rng, spec.views_per_object, D)
    return synthesize_objects(spec, prototypes, view_maps, domain2_map, rng)


# ---------------------------------------------------------------------------
# File format: one JSON object per line, manifest first.

def save(split: Split, path) -> None:
    """Writes the split as line-delimited JSON: a manifest line, then one
    record per object (train objects first; the manifest carries the count)."""
    if not split.train and not split.test:
        raise ContractViolation("refusing to save an empty split")
    manifest = {"manifest": {
        "spec": asdict(split.spec) if split.spec else None,
        "train_count": len(split.train),
    }}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest) + "\n")
        for obj in split.train + split.test:
            rec = {"id": obj.id, "class": obj.label, "subcat": obj.subcat,
                   "domain": obj.domain, "views": obj.views.tolist()}
            fh.write(json.dumps(rec) + "\n")


def load(path) -> Split:
    """Reads a dataset file back; values round-trip exactly (repr-format floats)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ContractViolation(f"{path}: empty dataset file")

    def fail(lineno, msg):
        raise ContractViolation(f"{path}:{lineno}: {msg}")

    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as e:
        fail(1, f"malformed manifest: {e}")
    if "manifest" not in head:
        fail(1, "first line must be the manifest")
    manifest = head["manifest"]
    spec = DatasetSpec(**manifest["spec"]) if manifest.get("spec") else None
    train_count = manifest.get("train_count")
    if not isinstance(train_count, int) or train_count < 0:
        fail(1, "manifest is missing a valid train_count")

    num_classes = spec.num_classes if spec else None
    objects = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            fail(lineno, f"malformed record: {e}")
        missing = {"id", "class", "subcat", "domain", "views"} - rec.keys()
        if missing:
            fail(lineno, f"record missing fields {sorted(missing)}")
        if num_classes is not None and rec["class"] >= num_classes:
            fail(lineno, f"class {rec['class']} out of range (K={num_classes})")
        try:
            obj = MultiViewObject(id=rec["id"], label=rec["class"],
                                  subcat=rec["subcat"], domain=rec["domain"],
                                  views=np.asarray(rec["views"], dtype=np.float64))
        except ContractViolation as e:
            fail(lineno, str(e))
        objects.append(obj)
    if not objects:
        raise ContractViolation(f"{path}: dataset contains no objects")
    if train_count > len(objects):
        raise ContractViolation(f"{path}: train_count exceeds the record count")
    return Split(train=objects[:train_count], test=objects[train_count:], spec=spec)


def batches(objects, batch_size: int, seed: int, epoch: int):
    """Deterministic shuffle keyed by (seed, epoch), then contiguous chunks.

    The last partial batch is kept. Two-domain object lists are shuffled as a
    union, so batches naturally interleave domains.
    """
    if batch_size < 1:
        raise ContractViolation("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(objects))
    shuffled = [objects[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]
