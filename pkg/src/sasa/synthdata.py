"""Synthetic face anti-spoofing domains.

Each sample is a small RGB image whose *class* lives in its structure
(smooth blobs for live faces, blobs plus a periodic high-frequency grid for
spoofs) and whose *domain* lives in global appearance (per-channel colour
map, blur, sensor noise).  Everything is a pure function of ``(spec, seed)``;
per-sample generators are keyed on ``(seed, subject, frame, label)`` so the
output does not depend on generation order.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

LIVE = 1
SPOOF = 0

SLOTS = ("source", "target", "aux")


class SpecError(ValueError):
    """Invalid generator or sampling parameter; ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class LeakageError(RuntimeError):
    """An evaluation-only dataset was handed to a training sampler."""


def domain_kind(tag: str) -> str:
    """Map a domain tag (``source``, ``target-2``, ``aux``...) to its kind."""
    for kind in SLOTS:
        if tag == kind or tag.startswith(kind + "-"):
            return kind
    raise SpecError("domain", f"unknown domain tag {tag!r}")


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    label: int
    domain: str
    subject_id: int


@dataclass(frozen=True)
class ClassSignal:
    blob_scale: float = 0.18
    n_blobs: int = 4
    grid_amplitude: float = 0.06
    grid_period: int = 2
    amplitude_jitter: float = 0.5
    spoof_contrast: float = 1.0


@dataclass(frozen=True)
class StyleSignal:
    color_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    color_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    blur_sigma: float = 0.0
    noise_sigma: float = 0.01


@dataclass(frozen=True)
class DomainSpec:
    domain: str = "source"
    class_signal: ClassSignal = field(default_factory=ClassSignal)
    style_signal: StyleSignal = field(default_factory=StyleSignal)
    image_size: tuple[int, int] = (32, 32)
    n_subjects: int = 20
    frames_per_subject: int = 20

    def validate(self) -> "DomainSpec":
        domain_kind(self.domain)
        cs, ss = self.class_signal, self.style_signal
        h, w = self.image_size
        if h <= 0 or w <= 0 or h % 2 or w % 2:
            raise SpecError("image_size", f"H and W must be positive and even, got {self.image_size}")
        if self.n_subjects < 1:
            raise SpecError("n_subjects", "must be >= 1")
        if self.frames_per_subject < 1:
            raise SpecError("frames_per_subject", "must be >= 1")
        if cs.blob_scale <= 0:
            raise SpecError("class_signal.blob_scale", "must be > 0")
        if cs.n_blobs < 1:
            raise SpecError("class_signal.n_blobs", "must be >= 1")
        if cs.grid_amplitude < 0:
            raise SpecError("class_signal.grid_amplitude", "must be >= 0")
        if cs.grid_period < 2:
            raise SpecError("class_signal.grid_period", "must be >= 2 pixels")
        if not 0 <= cs.amplitude_jitter < 1:
            raise SpecError("class_signal.amplitude_jitter", "must lie in [0, 1)")
        if cs.spoof_contrast <= 0:
            raise SpecError("class_signal.spoof_contrast", "must be > 0")
        if len(ss.color_gain) != 3 or any(g <= 0 for g in ss.color_gain):
            raise SpecError("style_signal.color_gain", "needs three gains > 0")
        if len(ss.color_bias) != 3:
            raise SpecError("style_signal.color_bias", "needs three biases")
        if ss.blur_sigma < 0:
            raise SpecError("style_signal.blur_sigma", "must be >= 0")
        if ss.noise_sigma < 0:
            raise SpecError("style_signal.noise_sigma", "must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DomainSpec":
        d = dict(d)
        cs = d.pop("class_signal", {})
        cs = ClassSignal(**{k: tuple(v) if isinstance(v, list) else v for k, v in cs.items()})
        ss = d.pop("style_signal", {})
        ss = StyleSignal(**{k: tuple(v) if isinstance(v, list) else v for k, v in ss.items()})
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(class_signal=cs, style_signal=ss, **d)


@dataclass
class DomainDataset:
    """Immutable set of samples from a single domain.

    ``origin`` maps each row back to the generated dataset it was cut from, so
    subsets can be checked for disjointness against their parent.  ``provenance``
    is only set for stylized (aux) data: one ``(content_index, style_index)``
    row per sample.
    """

    images: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    domain: str
    splits: dict[str, np.ndarray]
    spec: DomainSpec | None = None
    seed: int = 0
    origin: np.ndarray | None = None
    provenance: np.ndarray | None = None
    alpha: float | None = None
    eval_only: bool = False

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        n = len(self.labels)
        if self.origin is None:
            self.origin = np.arange(n, dtype=np.int64)
        self.origin = np.asarray(self.origin, dtype=np.int64)
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}
        if self.images.shape[0] != n or self.subject_ids.shape[0] != n:
            raise ValueError("images, labels and subject_ids disagree in length")
        seen = np.zeros(n, dtype=bool)
        for name, idx in self.splits.items():
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError(f"split {name!r} has out-of-range indices")
            if seen[idx].any():
                raise ValueError(f"split {name!r} overlaps another split")
            seen[idx] = True
        for arr in (self.images, self.labels, self.subject_ids, self.origin):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), self.domain, int(self.subject_ids[i]))

    @property
    def kind(self) -> str:
        return domain_kind(self.domain)

    def subjects(self, split: str | None = None) -> np.ndarray:
        idx = self.splits[split] if split else slice(None)
        return np.unique(self.subject_ids[idx])

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def subset(self, indices: Sequence[int], *, eval_only: bool | None = None, keep_splits: bool = True,
               domain: str | None = None) -> "DomainDataset":
        indices = np.asarray(indices, dtype=np.int64)
        splits = {}
        if keep_splits:
            pos = np.full(len(self), -1, dtype=np.int64)
            pos[indices] = np.arange(len(indices))
            for name, idx in self.splits.items():
                kept = pos[idx]
                splits[name] = np.sort(kept[kept >= 0])
        else:
            splits = {"train": np.arange(len(indices))}
        prov = None if self.provenance is None else self.provenance[indices]
        return DomainDataset(
            images=self.images[indices], labels=self.labels[indices],
            subject_ids=self.subject_ids[indices], domain=domain or self.domain,
            splits=splits, spec=self.spec, seed=self.seed, origin=self.origin[indices],
            provenance=prov, alpha=self.alpha,
            eval_only=self.eval_only if eval_only is None else eval_only)

    def split(self, name: str, **kw) -> "DomainDataset":
        return self.subset(self.splits[name], keep_splits=False, **kw)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _subject_blobs(spec: DomainSpec, seed: int, subject: int):
    cs = spec.class_signal
    h, w = spec.image_size
    r = _rng(seed, subject)
    tone = r.uniform(0.35, 0.6, size=3)
    centers = r.uniform(0.2, 0.8, size=(cs.n_blobs, 2)) * np.array([h, w])
    sigmas = cs.blob_scale * min(h, w) * r.uniform(0.7, 1.3, size=cs.n_blobs)
    amps = r.uniform(-0.25, 0.25, size=(cs.n_blobs, 3))
    return tone, centers, sigmas, amps


def _render_content(spec: DomainSpec, seed: int, subject: int, frame: int) -> np.ndarray:
    h, w = spec.image_size
    tone, centers, sigmas, amps = _subject_blobs(spec, seed, subject)
    r = _rng(seed, subject, frame)
    centers = centers + r.normal(0.0, 1.0, size=centers.shape)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((3, h, w)) + tone[:, None, None] + r.normal(0.0, 0.03)
    for (cy, cx), s, a in zip(centers, sigmas, amps):
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += a[:, None, None] * bump
    return img


def spoof_grid(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    cs = spec.class_signal
    h, w = spec.image_size
    p = cs.grid_period
    sy, sx = rng.integers(0, p, size=2)
    amp = cs.grid_amplitude * rng.uniform(1 - cs.amplitude_jitter, 1 + cs.amplitude_jitter)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    g = np.cos(2 * np.pi * (xx + sx) / p) * np.cos(2 * np.pi * (yy + sy) / p)
    return amp * g[None]


def apply_style(img: np.ndarray, style: StyleSignal, rng: np.random.Generator | None,
                grid: np.ndarray | None = None) -> np.ndarray:
    """Colour map, (optional) spoof grid, blur, sensor noise, clip to [0, 1]."""
    gain = np.asarray(style.color_gain, dtype=np.float64)[:, None, None]
    bias = np.asarray(style.color_bias, dtype=np.float64)[:, None, None]
    out = gain * img + bias
    if grid is not None:
        out = out + grid
    if style.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(0, style.blur_sigma, style.blur_sigma), mode="reflect")
    if style.noise_sigma > 0 and rng is not None:
        out = out + rng.normal(0.0, style.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def render_sample(spec: DomainSpec, seed: int, subject: int, frame: int, label: int) -> np.ndarray:
    content = _render_content(spec, seed, subject, frame)
    r = _rng(seed, subject, frame, 2 + label)
    grid = None
    if label == SPOOF:
        k = spec.class_signal.spoof_contrast
        m = content.mean(axis=(1, 2), keepdims=True)
        content = m + k * (content - m)
        grid = spoof_grid(spec, r)
    return apply_style(content, spec.style_signal, r, grid)


def generate_domain(spec: DomainSpec, seed: int) -> DomainDataset:
    spec.validate()
    imgs, labels, subjects = [], [], []
    for s in range(spec.n_subjects):
        for f in range(spec.frames_per_subject):
            for label in (LIVE, SPOOF):
                imgs.append(render_sample(spec, seed, s, f, label))
                labels.append(label)
                subjects.append(s)
    n = len(labels)
    return DomainDataset(np.stack(imgs).astype(np.float32), np.array(labels), np.array(subjects),
                         spec.domain, {"train": np.arange(n)}, spec=spec, seed=seed)


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (counts[i] - raw[i], i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_dataset(ds: DomainDataset, fractions: Mapping[str, float], seed: int) -> DomainDataset:
    """Assign whole subjects to splits; frames of a subject never straddle splits."""
    total = sum(fractions.values())
    if abs(total - 1.0) > 1e-9:
        raise SpecError("fractions", f"must sum to 1, got {total}")
    if any(f < 0 for f in fractions.values()):
        raise SpecError("fractions", "must be nonnegative")
    subjects = np.unique(ds.subject_ids)
    if len(subjects) < sum(1 for f in fractions.values() if f > 0):
        raise SpecError("fractions", f"{len(subjects)} subjects cannot fill {len(fractions)} splits")
    order = _rng(seed, 0x5B17).permutation(subjects)
    counts = _allocate(len(subjects), list(fractions.values()))
    splits, start = {}, 0
    for name, c in zip(fractions, counts):
        chosen = order[start:start + c]
        start += c
        splits[name] = np.flatnonzero(np.isin(ds.subject_ids, chosen))
    return replace(ds, splits=splits)


def make_fewshot_target(ds: DomainDataset, n_subjects: int, seed: int) -> tuple[DomainDataset, DomainDataset]:
    """Pick ``n_subjects`` training subjects as the labelled few-shot set.

    Everything else (other training subjects, val, test) becomes the held-out
    set, which is flagged evaluation-only.
    """
    train_idx = ds.splits.get("train", np.arange(len(ds)))
    pool = np.unique(ds.subject_ids[train_idx])
    if n_subjects < 1:
        raise SpecError("n_subjects", "must be >= 1")
    if n_subjects > len(pool):
        raise SpecError("n_subjects", f"requested {n_subjects} but only {len(pool)} training subjects")
    chosen = np.sort(_rng(seed, 0xF5).choice(pool, size=n_subjects, replace=False))
    in_train = np.zeros(len(ds), dtype=bool)
    in_train[train_idx] = True
    mask = in_train & np.isin(ds.subject_ids, chosen)
    fewshot = ds.subset(np.flatnonzero(mask), keep_splits=False)
    heldout = ds.subset(np.flatnonzero(~mask), eval_only=True)
    return fewshot, heldout


def _check_pair_domains(a: DomainDataset, b: DomainDataset):
    kinds = {a.kind, b.kind}
    if kinds not in ({"source", "target"}, {"target", "aux"}):
        raise SpecError("domain", f"pairs between {a.domain!r} and {b.domain!r} are not allowed; "
                                  "only (source, target) and (target, aux)")


def sample_same_class_pair_indices(a: DomainDataset, b: DomainDataset, count: int, seed: int,
                                   balanced: bool = False):
    """Index version of :func:`sample_same_class_pairs`.

    Returns ``(idx_a, idx_b, labels)``.  With ``balanced`` the first half of
    the pairs is live and the rest spoof; otherwise each pair's class is a
    fair coin flip.
    """
    _check_pair_domains(a, b)
    for ds, name in ((a, "a"), (b, "b")):
        for label, cname in ((LIVE, "live"), (SPOOF, "spoof")):
            if not (ds.labels == label).any():
                raise SpecError(name, f"dataset {ds.domain!r} has no {cname} samples")
    r = _rng(seed, 0xA1)
    if balanced:
        labels = np.array([LIVE] * (count // 2) + [SPOOF] * (count - count // 2))
    else:
        labels = np.where(r.random(count) < 0.5, LIVE, SPOOF)
    ia = np.empty(count, dtype=np.int64)
    ib = np.empty(count, dtype=np.int64)
    for label in (LIVE, SPOOF):
        m = labels == label
        ia[m] = r.choice(a.class_indices(label), size=m.sum(), replace=True)
        ib[m] = r.choice(b.class_indices(label), size=m.sum(), replace=True)
    return ia, ib, labels


def sample_same_class_pairs(a: DomainDataset, b: DomainDataset, count: int, seed: int,
                            balanced: bool = False) -> list[tuple[Sample, Sample]]:
    ia, ib, _ = sample_same_class_pair_indices(a, b, count, seed, balanced)
    return [(a[i], b[j]) for i, j in zip(ia, ib)]


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    slots: np.ndarray  # 0 source, 1 target, 2 aux
    counts: dict[str, int]
    balance: dict[str, tuple[int, int]]
    indices: dict[str, np.ndarray]

    def mask(self, slot: str) -> np.ndarray:
        return self.slots == SLOTS.index(slot)


def _draw(ds: DomainDataset, label: int, n: int, r: np.random.Generator) -> np.ndarray:
    pool = ds.class_indices(label)
    if pool.size == 0:
        raise SpecError(ds.domain, f"no {'live' if label == LIVE else 'spoof'} samples to draw from")
    return r.choice(pool, size=n, replace=n > pool.size)


def compose_batch(src: DomainDataset | None, tgt: DomainDataset | None, aux: DomainDataset | None,
                  sizes: Sequence[int], seed: int | Sequence[int]) -> Batch:
    """Class-balanced batch with fixed per-domain counts.

    Each domain slot draws from its own generator, so adding or removing a
    slot leaves the other slots' draws unchanged.
    """
    key = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
    imgs, labels, slots, counts, balance, indices = [], [], [], {}, {}, {}
    for k, (name, ds, n) in enumerate(zip(SLOTS, (src, tgt, aux), sizes)):
        if n % 2:
            raise SpecError(f"sizes.{name}", f"batch size {n} must be even for live/spoof balance")
        counts[name] = n
        if n == 0:
            balance[name] = (0, 0)
            indices[name] = np.empty(0, dtype=np.int64)
            continue
        if ds is None or len(ds) == 0:
            raise SpecError(f"sizes.{name}", "requested samples from an empty domain")
        if ds.eval_only:
            raise LeakageError(f"dataset {ds.domain!r} is evaluation-only and cannot be batched for training")
        r = _rng(*key, k)
        idx = np.concatenate([_draw(ds, LIVE, n // 2, r), _draw(ds, SPOOF, n // 2, r)])
        indices[name] = idx
        imgs.append(ds.images[idx])
        labels.append(ds.labels[idx])
        slots.append(np.full(n, k))
        balance[name] = (int((ds.labels[idx] == LIVE).sum()), int((ds.labels[idx] == SPOOF).sum()))
    return Batch(np.concatenate(imgs), np.concatenate(labels), np.concatenate(slots),
                 counts, balance, indices)


def concat_datasets(parts: Iterable[DomainDataset], domain: str) -> DomainDataset:
    """Pool several datasets (e.g. per-target few-shot sets) under one tag."""
    parts = list(parts)
    offset, splits = 0, {}
    for p in parts:
        for name, idx in p.splits.items():
            splits.setdefault(name, []).append(idx + offset)
        offset += len(p)
    prov = None
    if all(p.provenance is not None for p in parts):
        prov = np.concatenate([p.provenance for p in parts])
    return DomainDataset(
        np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]),
        np.concatenate([p.subject_ids for p in parts]), domain,
        {k: np.concatenate(v) for k, v in splits.items()}, spec=None, seed=parts[0].seed,
        origin=np.concatenate([p.origin for p in parts]), provenance=prov,
        alpha=parts[0].alpha, eval_only=any(p.eval_only for p in parts))


# -- serialization -----------------------------------------------------------

def save_dataset(ds: DomainDataset, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "domain": ds.domain,
        "spec": ds.spec.to_dict() if ds.spec is not None else None,
        "seed": ds.seed,
        "shape": list(ds.images.shape),
        "splits": {k: v.tolist() for k, v in ds.splits.items()},
        "eval_only": ds.eval_only,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    np.ascontiguousarray(ds.images, dtype="<f4").tofile(path / "images.f32")
    with open(path / "samples.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "label", "subject_id", "origin"])
        for i in range(len(ds)):
            wr.writerow([i, int(ds.labels[i]), int(ds.subject_ids[i]), int(ds.origin[i])])
    if ds.provenance is not None:
        with open(path / "provenance.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["aux_index", "content_index", "style_index", "alpha"])
            for i, (c, s) in enumerate(ds.provenance):
                wr.writerow([i, int(c), int(s), ds.alpha])
    return path


def load_dataset(path: str | Path) -> DomainDataset:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"{path}: no dataset manifest")
    manifest = json.loads((path / "manifest.json").read_text())
    images = np.fromfile(path / "images.f32", dtype="<f4").reshape(manifest["shape"])
    rows = list(csv.DictReader(open(path / "samples.csv", newline="")))
    prov, alpha = None, None
    if (path / "provenance.csv").exists():
        prow = list(csv.DictReader(open(path / "provenance.csv", newline="")))
        prov = np.array([[int(r["content_index"]), int(r["style_index"])] for r in prow], dtype=np.int64)
        alpha = float(prow[0]["alpha"]) if prow else None
    spec = DomainSpec.from_dict(manifest["spec"]) if manifest["spec"] else None
    return DomainDataset(
        images, np.array([int(r["label"]) for r in rows]), np.array([int(r["subject_id"]) for r in rows]),
        manifest["domain"], {k: np.array(v, dtype=np.int64) for k, v in manifest["splits"].items()},
        spec=spec, seed=manifest["seed"], origin=np.array([int(r["origin"]) for r in rows]),
        provenance=prov, alpha=alpha, eval_only=manifest.get("eval_only", False))

