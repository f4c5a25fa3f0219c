"""Single-target, multi-target and ablation protocols on the synthetic domains.

A protocol fixes the source and target generators, the seeds and the list of
methods.  For every seed the source model is pretrained once and shared by
all methods and targets; each method then adapts its own copy.  Outputs go to
``<out>/<protocol>/<method>/<seed>/`` (per-seed report, scores, step log) with
seed-aggregated reports and CSV tables one level up.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .evalmetrics import MetricsReport, evaluate, table_mt, table_st, write_report, write_scores
from .losses import LossConfig
from .nets import ArchConfig, ModelBundle
from .stylizer import StylizerConfig, build_aux_domain
from .synthdata import (ClassSignal, DomainDataset, DomainSpec, StyleSignal, concat_datasets, generate_domain,
                        make_fewshot_target, split_dataset)
from .trainer import (JOINT, SASA, SOURCE_ONLY, MethodConfig, PretrainConfig, Trainer, TrainConfig,
                      pretrain_source, score_dataset, write_step_log)

log = logging.getLogger(__name__)


# grid contrast the source model learns without residual error at the default pretraining budget
SPOOF_SIGNAL = ClassSignal(grid_amplitude=0.05, amplitude_jitter=0.5)

# Lfc weight for the summed squared distance used by the loss module; equals a weight of 10 on the
# per-element mean over a 64 x 128 batch of source features
LAMBDA3 = 10.0 / (64 * 128)


def default_source() -> DomainSpec:
    return DomainSpec("source", SPOOF_SIGNAL, StyleSignal(noise_sigma=0.02), n_subjects=40, frames_per_subject=10)


def default_targets() -> tuple[DomainSpec, ...]:
    """Three dim, warm-tinted targets: mild tint, stronger tint + blur, and that plus heavier noise."""
    def target(name, gain, blur, noise):
        return DomainSpec(name, SPOOF_SIGNAL, StyleSignal(gain, (0.0, 0.0, 0.0), blur, noise),
                          n_subjects=20, frames_per_subject=6)
    return (
        target("target-1", (0.45, 0.35, 0.25), 0.0, 0.02),
        target("target-2", (0.45, 0.3, 0.15), 0.3, 0.02),
        target("target-3", (0.45, 0.3, 0.15), 0.3, 0.04),
    )


@dataclass(frozen=True)
class ProtocolSpec:
    name: str = "st"
    source: DomainSpec = field(default_factory=default_source)
    targets: tuple[DomainSpec, ...] = field(default_factory=default_targets)
    fewshot_subjects: int = 1
    # None draws a fresh few-shot subject per seed; an int pins the draw for every run
    fewshot_seed: int | None = None
    seeds: tuple[int, ...] = (0, 1, 2)
    methods: tuple[MethodConfig, ...] = (SOURCE_ONLY, JOINT, SASA)
    data_seed: int = 0
    source_split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    target_split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(steps=500))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=500, loss=LossConfig(lambda3=LAMBDA3)))
    # full style transfer on every wavelet band
    stylizer: StylizerConfig = field(default_factory=lambda: StylizerConfig(keep_detail_levels=0,
                                                                            detail_alpha_scale=1.0))
    arch: ArchConfig = field(default_factory=ArchConfig)

    def validate(self) -> "ProtocolSpec":
        if not self.targets:
            raise ValueError("a protocol needs at least one target")
        if not self.seeds:
            raise ValueError("a protocol needs at least one seed")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ValueError(f"method names must be unique, got {names}")
        for t in self.targets:
            t.validate()
        self.source.validate()
        self.stylizer.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Domains:
    src_train: DomainDataset
    src_val: DomainDataset
    src_test: DomainDataset
    targets: dict[str, DomainDataset]


def _splits(fr: Sequence[float]) -> dict[str, float]:
    return dict(zip(("train", "val", "test"), fr))


def generate_domains(spec: ProtocolSpec) -> tuple[DomainDataset, dict[str, DomainDataset]]:
    """The source and every target, generated and split by subject."""
    src = split_dataset(generate_domain(spec.source, spec.data_seed), _splits(spec.source_split), spec.data_seed)
    targets = {}
    for k, t in enumerate(spec.targets):
        seed = spec.data_seed + 1 + k
        targets[t.domain] = split_dataset(generate_domain(t, seed), _splits(spec.target_split), seed)
    return src, targets


def prepare_domains(spec: ProtocolSpec) -> Domains:
    src, targets = generate_domains(spec)
    return Domains(src.split("train"), src.split("val"), src.split("test"), targets)


@dataclass
class SeedContext:
    """Everything a method run needs for one seed: the shared pretrained model and the data."""

    seed: int
    pretrained: ModelBundle
    domains: Domains
    fewshot: dict[str, DomainDataset]
    heldout: dict[str, DomainDataset]
    aux: dict[str, DomainDataset]


def seed_context(spec: ProtocolSpec, domains: Domains, seed: int, targets: Sequence[str] | None = None,
                 pretrained: ModelBundle | None = None) -> SeedContext:
    if pretrained is None:
        pretrained = pretrain_source(domains.src_train, replace(spec.pretrain, seed=seed), spec.arch).bundle
    names = list(domains.targets) if targets is None else list(targets)
    fs_seed = seed if spec.fewshot_seed is None else spec.fewshot_seed
    fewshot, heldout, aux = {}, {}, {}
    for name in names:
        fewshot[name], heldout[name] = make_fewshot_target(domains.targets[name], spec.fewshot_subjects, fs_seed)
        aux[name] = build_aux_domain(domains.src_train, fewshot[name], spec.stylizer, fs_seed)
    return SeedContext(seed, pretrained, domains, fewshot, heldout, aux)


def train_method(spec: ProtocolSpec, ctx: SeedContext, method: MethodConfig, fewshot: DomainDataset | None,
                 aux: DomainDataset | None) -> tuple[ModelBundle, list[dict]]:
    """Adapt the shared pretrained model with one method; source-only returns it untouched."""
    if not (method.use_target or method.use_aux):
        return ctx.pretrained, []
    cfg = replace(spec.train, method=method, seed=ctx.seed)
    tr = Trainer(ctx.pretrained, ctx.domains.src_train, fewshot if method.use_target else None,
                 aux if method.use_aux else None, cfg).run()
    return tr.bundle, tr.rows


def evaluate_bundle(bundle: ModelBundle, ctx: SeedContext, targets: Sequence[str]):
    val = score_dataset(bundle, ctx.domains.src_val, "source")
    test = score_dataset(bundle, ctx.domains.src_test, "source")
    held = {t: score_dataset(bundle, ctx.heldout[t], t) for t in targets}
    tau, per = evaluate(val, test, held)
    return tau, per, [test, *held.values()]


def _persist(out: Path | None, method: str, seed: int, tau: float, per: dict, scores, rows):
    if out is None:
        return
    d = out / method / str(seed)
    d.mkdir(parents=True, exist_ok=True)
    rep = MetricsReport(method)
    rep.add_seed(seed, tau, per)
    write_report(d / "report.json", rep)
    write_scores(d / "scores.csv", scores)
    if rows:
        write_step_log(rows, d / "step_log.csv")


def _finish(out: Path | None, reports: dict[str, MetricsReport]):
    if out is None:
        return
    for name, rep in reports.items():
        (out / name).mkdir(parents=True, exist_ok=True)
        write_report(out / name / "report.json", rep)


def run_protocol_st(spec: ProtocolSpec, out: str | Path | None = None,
                    pretrained: dict[int, ModelBundle] | None = None) -> dict[str, dict[str, MetricsReport]]:
    """Each target on its own: returns ``{target: {method: report}}``."""
    spec.validate()
    out = Path(out) / spec.name if out is not None else None
    domains = prepare_domains(spec)
    results = {t.domain: {m.name: MetricsReport(m.name) for m in spec.methods} for t in spec.targets}
    for seed in spec.seeds:
        ctx = seed_context(spec, domains, seed, pretrained=(pretrained or {}).get(seed))
        for t in spec.targets:
            name = t.domain
            for m in spec.methods:
                bundle, rows = train_method(spec, ctx, m, ctx.fewshot[name], ctx.aux[name])
                tau, per, scores = evaluate_bundle(bundle, ctx, [name])
                results[name][m.name].add_seed(seed, tau, per)
                sub = out / name if out is not None else None
                _persist(sub, m.name, seed, tau, per, scores, rows)
                log.info("st %s %s seed %d: source ACER %.4f target HTER %.4f", name, m.name, seed,
                         per["source"]["acer"], per[name]["hter"])
    if out is not None:
        for name, reps in results.items():
            _finish(out / name, reps)
        (out / "table.csv").write_text(table_st(results))
        (out / "protocol.json").write_text(_dump(spec))
    return results


def run_protocol_mt(spec: ProtocolSpec, out: str | Path | None = None,
                    pretrained: dict[int, ModelBundle] | None = None) -> dict[str, MetricsReport]:
    """One run per method on the pooled few-shot sets of every target."""
    spec.validate()
    out = Path(out) / spec.name if out is not None else None
    domains = prepare_domains(spec)
    names = [t.domain for t in spec.targets]
    results = {m.name: MetricsReport(m.name) for m in spec.methods}
    for seed in spec.seeds:
        ctx = seed_context(spec, domains, seed, pretrained=(pretrained or {}).get(seed))
        if len(names) == 1:
            fewshot, aux = ctx.fewshot[names[0]], ctx.aux[names[0]]
        else:
            fewshot = concat_datasets([ctx.fewshot[n] for n in names], "target")
            aux = concat_datasets([ctx.aux[n] for n in names], "aux")
        for m in spec.methods:
            bundle, rows = train_method(spec, ctx, m, fewshot, aux)
            tau, per, scores = evaluate_bundle(bundle, ctx, names)
            results[m.name].add_seed(seed, tau, per)
            _persist(out, m.name, seed, tau, per, scores, rows)
    if out is not None:
        _finish(out, results)
        (out / "table.csv").write_text(table_mt(results, names))
        (out / "protocol.json").write_text(_dump(spec))
    return results


# -- ablation -----------------------------------------------------------------------------------

def _m(name, aux=True, lfc=False, cont=False, adv=False, target=True, progressive=True) -> MethodConfig:
    return MethodConfig(name, use_target=target, use_aux=aux, use_lfc=lfc, use_cont=cont, use_adv=adv,
                        progressive=progressive)


ABLATION_METHODS: tuple[MethodConfig, ...] = (
    SOURCE_ONLY,
    replace(JOINT, name="joint"),
    _m("joint_aux"),
    _m("aux_lfc", lfc=True),
    _m("aux_cont", cont=True),
    _m("aux_lfc_cont", lfc=True, cont=True),
    _m("aux_lfc_adv", lfc=True, adv=True),
    replace(SASA, name="full"),
    _m("full_nonprogressive", lfc=True, cont=True, adv=True, progressive=False),
)


@dataclass
class AblationRow:
    method: MethodConfig
    flags: dict[str, bool]
    source_acer: float
    target_hter: float
    report: MetricsReport


def ablation_spec(base: ProtocolSpec | None = None, target: str = "target-2") -> ProtocolSpec:
    base = base or ProtocolSpec()
    t = [s for s in base.targets if s.domain == target]
    if not t:
        raise ValueError(f"protocol has no target {target!r}")
    fs = base.fewshot_seed if base.fewshot_seed is not None else 0
    return replace(base, name="ablation", targets=tuple(t), methods=ABLATION_METHODS, fewshot_seed=fs)


def run_ablation(spec: ProtocolSpec | None = None, out: str | Path | None = None,
                 pretrained: dict[int, ModelBundle] | None = None) -> list[AblationRow]:
    """The ablation grid on a single target with a pinned few-shot draw."""
    spec = spec if spec is not None and spec.name == "ablation" else ablation_spec(spec)
    if len(spec.targets) != 1:
        raise ValueError("the ablation runs on exactly one target")
    reps = run_protocol_st(spec, out, pretrained)
    name = spec.targets[0].domain
    rows = []
    for m in spec.methods:
        rep = reps[name][m.name]
        flags = {"use_target": m.use_target, "use_aux": m.use_aux, "use_lfc": m.use_lfc, "use_cont": m.use_cont,
                 "use_adv": m.use_adv, "progressive": m.progressive}
        rows.append(AblationRow(m, flags, rep.mean("source", "acer"), rep.mean(name, "hter"), rep))
    return rows


def _dump(spec: ProtocolSpec) -> str:
    return json.dumps(spec.to_dict(), indent=1, sort_keys=True, default=str)
