import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sasa.synthdata import (LIVE, SPOOF, ClassSignal, DomainSpec, LeakageError, SpecError, StyleSignal,
                            apply_style, compose_batch, concat_datasets, generate_domain, load_dataset,
                            make_fewshot_target, render_sample, sample_same_class_pairs,
                            sample_same_class_pair_indices, save_dataset, split_dataset)


def spec(domain="source", subjects=4, frames=3, **style):
    return DomainSpec(domain, ClassSignal(), StyleSignal(**style), n_subjects=subjects, frames_per_subject=frames)


@pytest.fixture(scope="module")
def src():
    return split_dataset(generate_domain(spec("source", 10, 4), 3), {"train": 0.8, "val": 0.1, "test": 0.1}, 0)


@pytest.fixture(scope="module")
def tgt():
    return split_dataset(generate_domain(spec("target-1", 5, 6, color_gain=(1.2, 1.0, 0.8)), 4),
                         {"train": 0.6, "val": 0.2, "test": 0.2}, 0)


def nyquist_energy(images):
    """Mean power of the (pi, pi) checkerboard component, per image, via FFT."""
    h, w = images.shape[-2:]
    F = np.fft.fft2(images - images.mean(axis=(-2, -1), keepdims=True))
    return (np.abs(F[..., h // 2, w // 2]) ** 2).mean(axis=-1) / (h * w) ** 2


# -- generate_domain ---------------------------------------------------------------

def test_counts():
    ds = generate_domain(spec(subjects=4, frames=3), 7)
    assert len(ds) == 24
    assert (ds.labels == LIVE).sum() == 12 and (ds.labels == SPOOF).sum() == 12
    assert ds.images.shape == (24, 3, 32, 32)


def test_values_in_unit_range():
    ds = generate_domain(spec(noise_sigma=0.2), 1)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_determinism_and_order_independence():
    a = generate_domain(spec(), 7)
    b = generate_domain(spec(), 7)
    assert np.array_equal(a.images, b.images)
    s = spec()
    # rendering a single sample out of order reproduces the dataset row
    i = int(np.flatnonzero((a.subject_ids == 2) & (a.labels == SPOOF))[1])
    assert np.array_equal(render_sample(s, 7, 2, 1, SPOOF).astype(np.float32), a.images[i])
    assert not np.array_equal(a.images, generate_domain(spec(), 8).images)


def test_dataset_is_immutable():
    ds = generate_domain(spec(), 0)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1.0


@pytest.mark.parametrize("field,kw", [
    ("style_signal.color_gain", dict(style_signal=StyleSignal(color_gain=(1.0, 0.0, 1.0)))),
    ("style_signal.noise_sigma", dict(style_signal=StyleSignal(noise_sigma=-0.1))),
    ("class_signal.grid_amplitude", dict(class_signal=ClassSignal(grid_amplitude=-1))),
    ("image_size", dict(image_size=(31, 32))),
])
def test_invalid_spec_names_field(field, kw):
    with pytest.raises(SpecError) as e:
        generate_domain(DomainSpec(**kw), 0)
    assert e.value.field == field


def test_red_gain_scales_red_mean_and_keeps_grid_energy():
    base = DomainSpec("source", n_subjects=6, frames_per_subject=5)
    tinted = DomainSpec("target-1", style_signal=StyleSignal(color_gain=(1.3, 1.0, 1.0)),
                        n_subjects=6, frames_per_subject=5)
    a, b = generate_domain(base, 5), generate_domain(tinted, 5)
    ratio = b.images[:, 0].mean() / a.images[:, 0].mean()
    assert abs(ratio - 1.3) <= 0.05 * 1.3
    # pattern energy: spoof minus live Nyquist power, channels averaged
    def pattern(ds):
        e = nyquist_energy(ds.images)
        return e[ds.labels == SPOOF].mean() - e[ds.labels == LIVE].mean()
    pa, pb = pattern(a), pattern(b)
    assert pa > 0
    assert abs(pb / pa - 1) <= 0.05


def test_style_transform_keeps_live_free_of_grid():
    # a live image pushed through a strong style map must not gain a spoof pattern
    s = spec()
    live = render_sample(s, 0, 0, 0, LIVE)
    styled = apply_style(live, StyleSignal((1.3, 0.8, 1.1), (0.05, 0.0, -0.05), 0.0, 0.0), None)
    spoof = render_sample(s, 0, 0, 0, SPOOF)
    assert nyquist_energy(styled) < 0.1 * nyquist_energy(spoof)


# -- split_dataset -------------------------------------------------------------------

def test_split_counts():
    ds = split_dataset(generate_domain(spec(subjects=10, frames=2), 0), {"train": 0.8, "val": 0.1, "test": 0.1}, 1)
    assert [len(ds.subjects(k)) for k in ("train", "val", "test")] == [8, 1, 1]


def test_split_deterministic():
    g = generate_domain(spec(subjects=10, frames=2), 0)
    a = split_dataset(g, {"train": 0.5, "test": 0.5}, 3)
    b = split_dataset(g, {"train": 0.5, "test": 0.5}, 3)
    assert all(np.array_equal(a.splits[k], b.splits[k]) for k in a.splits)


@settings(max_examples=30, deadline=None)
@given(n_subj=st.integers(3, 12), seed=st.integers(0, 2**31 - 1),
       fr=st.lists(st.floats(0.05, 1.0), min_size=2, max_size=3))
def test_split_subject_disjoint(n_subj, seed, fr):
    fr = [f / sum(fr) for f in fr]
    fr[-1] = 1.0 - sum(fr[:-1])
    names = ["train", "val", "test"][: len(fr)]
    ds = split_dataset(generate_domain(spec(subjects=n_subj, frames=1), 0), dict(zip(names, fr)), seed)
    owner = {}
    for name in names:
        for s in ds.subject_ids[ds.splits[name]]:
            assert owner.setdefault(int(s), name) == name
    assert sorted(np.concatenate(list(ds.splits.values()))) == list(range(len(ds)))


def test_split_errors():
    g = generate_domain(spec(subjects=2, frames=1), 0)
    with pytest.raises(SpecError):
        split_dataset(g, {"train": 0.5, "val": 0.3, "test": 0.2}, 0)
    with pytest.raises(SpecError):
        split_dataset(g, {"train": 0.5, "val": 0.4}, 0)


# -- few-shot target -----------------------------------------------------------------

def test_fewshot_twelve_frames():
    ds = split_dataset(generate_domain(spec("target-1", 6, 6), 0), {"train": 0.5, "test": 0.5}, 0)
    few, held = make_fewshot_target(ds, 1, 0)
    assert len(few) == 12 and len(few.subjects()) == 1
    assert (few.labels == LIVE).sum() == 6
    assert held.eval_only and not few.eval_only


def test_fewshot_union_disjoint(tgt):
    few, held = make_fewshot_target(tgt, 2, 9)
    assert set(few.origin).isdisjoint(held.origin)
    assert sorted(np.concatenate([few.origin, held.origin])) == list(range(len(tgt)))
    assert set(few.subjects()) <= set(tgt.subjects("train"))


def test_fewshot_all_subjects(tgt):
    n = len(tgt.subjects("train"))
    few, held = make_fewshot_target(tgt, n, 0)
    assert held.splits["train"].size == 0
    assert held.splits["test"].size == tgt.splits["test"].size
    with pytest.raises(SpecError):
        make_fewshot_target(tgt, n + 1, 0)


# -- pairs ---------------------------------------------------------------------------

def test_pairs_label_matched(src, tgt):
    pairs = sample_same_class_pairs(src, tgt, 10, 0)
    assert len(pairs) == 10
    assert all(a.label == b.label for a, b in pairs)
    assert all(a.domain == "source" and b.domain == "target-1" for a, b in pairs)


def test_single_target_sample_reused(src, tgt):
    one = concat_datasets([tgt.subset([0]), tgt.subset([1])], "target-1")  # one live, one spoof
    _, ib, _ = sample_same_class_pair_indices(src, one, 50, 0)
    assert set(ib.tolist()) == {0, 1}
    assert np.bincount(ib).min() > 5


def test_pair_class_frequency(src, tgt):
    _, _, labels = sample_same_class_pair_indices(src, tgt, 10_000, 11)
    assert abs((labels == LIVE).mean() - 0.5) <= 0.03


@pytest.mark.parametrize("da,db", [("source", "source"), ("target-1", "target-2"), ("aux", "aux"),
                                   ("source", "aux"), ("aux", "source")])
def test_forbidden_pair_domains(src, da, db):
    with pytest.raises(SpecError):
        sample_same_class_pairs(src.subset(range(4), domain=da), src.subset(range(4), domain=db), 2, 0)


def test_allowed_pair_domains(src, tgt):
    aux = src.subset(range(8), domain="aux")
    sample_same_class_pairs(tgt, aux, 4, 0)
    sample_same_class_pairs(tgt, src, 4, 0)


def test_missing_class_named(src, tgt):
    live_only = tgt.subset(tgt.class_indices(LIVE))
    with pytest.raises(SpecError, match="no spoof"):
        sample_same_class_pairs(src, live_only, 4, 0)


# -- batches -------------------------------------------------------------------------

def test_default_batch_composition(src, tgt):
    aux = src.split("train", domain="aux")
    b = compose_batch(src.split("train"), tgt.split("train"), aux, (64, 4, 8), seed=0)
    assert b.counts == {"source": 64, "target": 4, "aux": 8}
    assert b.balance == {"source": (32, 32), "target": (2, 2), "aux": (4, 4)}
    assert b.images.shape == (76, 3, 32, 32)


def test_small_batch(src, tgt):
    b = compose_batch(src, tgt, src.subset(range(10), domain="aux"), (2, 2, 2), seed=1)
    for slot in ("source", "target", "aux"):
        assert sorted(b.labels[b.mask(slot)].tolist()) == [SPOOF, LIVE]


def test_odd_batch_rejected(src, tgt):
    with pytest.raises(SpecError):
        compose_batch(src, tgt, src.subset(range(10), domain="aux"), (64, 4, 7), seed=0)


def test_empty_class_rejected(src, tgt):
    with pytest.raises(SpecError):
        compose_batch(src, tgt.subset(tgt.class_indices(LIVE)), None, (4, 2, 0), seed=0)


def test_eval_only_never_batched(tgt):
    _, held = make_fewshot_target(tgt, 1, 0)
    with pytest.raises(LeakageError):
        compose_batch(None, held, None, (0, 4, 0), seed=0)


@settings(max_examples=40, deadline=None)
@given(ns=st.integers(0, 20), nt=st.integers(0, 6), na=st.integers(0, 10), seed=st.integers(0, 10**6))
def test_batch_balance_property(src, tgt, ns, nt, na, seed):
    sizes = (2 * ns, 2 * nt, 2 * na)
    if sum(sizes) == 0:
        return
    aux = src.subset(range(20), domain="aux")
    b = compose_batch(src, tgt, aux, sizes, seed=seed)
    for slot, n in zip(("source", "target", "aux"), sizes):
        lab = b.labels[b.mask(slot)]
        assert len(lab) == n and (lab == LIVE).sum() == n // 2
    again = compose_batch(src, tgt, aux, sizes, seed=seed)
    assert np.array_equal(b.images, again.images)


def test_slot_draws_independent_of_other_slots(src, tgt):
    a = compose_batch(src, tgt, None, (8, 2, 0), seed=(4, 2))
    b = compose_batch(src, tgt, src.subset(range(10), domain="aux"), (8, 2, 4), seed=(4, 2))
    assert np.array_equal(a.indices["source"], b.indices["source"])
    assert np.array_equal(a.indices["target"], b.indices["target"])


# -- serialization -------------------------------------------------------------------

def test_roundtrip(tmp_path, src):
    path = save_dataset(src, tmp_path / "src")
    back = load_dataset(path)
    assert np.array_equal(back.images, src.images)
    assert np.array_equal(back.labels, src.labels)
    assert np.array_equal(back.subject_ids, src.subject_ids)
    assert back.spec == src.spec and back.seed == src.seed
    assert all(np.array_equal(back.splits[k], src.splits[k]) for k in src.splits)
    manifest = json.loads((path / "manifest.json").read_text())
    assert set(manifest) >= {"domain", "spec", "seed", "splits"}
    raw = np.fromfile(path / "images.f32", dtype="<f4")
    assert raw.size == src.images.size
