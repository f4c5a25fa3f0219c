"""Source pretraining, the two-stage SASA loop, and the cross-entropy baselines.

One :class:`Trainer` covers every method: flags in :class:`MethodConfig`
switch the auxiliary slot and each extra objective on or off, so the joint
baseline and every ablation row run through the same code path.

Batches are drawn from a generator keyed on ``(seed, step)``; nothing else
is random during training, which is what makes resumed runs bit-identical to
uninterrupted ones.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .losses import LossConfig, LossParts, Stage
from .nets import (ArchConfig, ModelBundle, build_models, load_checkpoint, save_checkpoint,
                   snapshot_teacher)
from .synthdata import LIVE, DomainDataset, compose_batch
from .evalmetrics import ScoreSet

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "stage", "L_Cls", "L_Sem", "L_Sep", "L_Adv_ta", "L_Adv_cs", "L_Lfc", "L_total",
               "D_ta_acc", "D_cs_acc")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MethodConfig:
    name: str = "sasa"
    use_target: bool = True
    use_aux: bool = True
    use_lfc: bool = True
    use_cont: bool = True
    use_adv: bool = True
    progressive: bool = True
    keep_ta_in_cs: bool = False


SOURCE_ONLY = MethodConfig("source_only", use_target=False, use_aux=False, use_lfc=False, use_cont=False,
                           use_adv=False)
JOINT = MethodConfig("joint", use_aux=False, use_lfc=False, use_cont=False, use_adv=False)
SASA = MethodConfig("sasa")


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 64
    steps: int = 1500
    seed: int = 0
    single_threaded: bool = True


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_sizes: tuple[int, int, int] = (64, 4, 8)
    steps: int = 2000
    switch_policy: str = "fraction"  # or "accuracy"
    switch_fraction: float = 0.3
    acc_window: int = 50
    acc_threshold: float = 0.55
    acc_fallback: float = 0.8
    loss: LossConfig = field(default_factory=LossConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    seed: int = 0
    adv_live_only: bool = True
    warm_start: bool = True
    single_threaded: bool = True

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.steps <= 0:
            raise ValueError("steps must be > 0")
        if not 0 < self.switch_fraction < 1:
            raise ValueError("switch_fraction must lie in (0, 1)")
        if self.switch_policy not in ("fraction", "accuracy"):
            raise ValueError(f"unknown switch_policy {self.switch_policy!r}")
        self.loss.validate()
        return self

    @property
    def effective_batch_sizes(self) -> tuple[int, int, int]:
        n_s, n_t, n_a = self.batch_sizes
        return n_s, n_t if self.method.use_target else 0, n_a if self.method.use_aux else 0

    @property
    def effective_loss(self) -> LossConfig:
        m = self.method
        return replace(self.loss, lambda1=self.loss.lambda1 if m.use_cont else 0.0,
                       lambda2=self.loss.lambda2 if m.use_adv else 0.0,
                       lambda3=self.loss.lambda3 if m.use_lfc else 0.0)


@dataclass
class TrainState:
    step: int = 0
    stage: Stage = Stage.TA
    counters: dict[str, int] = field(default_factory=lambda: {"G": 0, "H": 0, "D_ta": 0, "D_cs": 0})
    acc_history: list[float] = field(default_factory=list)
    switch_step: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainState":
        d = dict(d)
        d["stage"] = Stage(d["stage"])
        return cls(**d)


def stage_controller(state: TrainState, cfg: TrainConfig) -> Stage:
    """TA until the switch condition holds, then CS for good."""
    if state.stage is Stage.CS:
        return Stage.CS
    if cfg.switch_policy == "fraction":
        return Stage.TA if state.step < cfg.switch_fraction * cfg.steps else Stage.CS
    if state.step >= cfg.acc_fallback * cfg.steps:
        return Stage.CS
    k = cfg.acc_window
    if len(state.acc_history) >= k and float(np.mean(state.acc_history[-k:])) < cfg.acc_threshold:
        return Stage.CS
    return Stage.TA


def use_single_thread(flag: bool):
    if flag and torch.get_num_threads() != 1:
        torch.set_num_threads(1)


def _check_finite(value: torch.Tensor, step: int, row: dict):
    if not torch.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at step {step}: {row}")


def write_step_log(rows: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def read_step_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k == "stage" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


# -- pretraining -------------------------------------------------------------------

@dataclass
class PretrainResult:
    bundle: ModelBundle
    log: list[dict]
    val_acer: float | None = None


def pretrain_source(src_train: DomainDataset, cfg: PretrainConfig = PretrainConfig(),
                    arch: ArchConfig = ArchConfig(), src_val: DomainDataset | None = None) -> PretrainResult:
    """Cross-entropy training on source only; the result's teacher is a frozen copy of G."""
    if len(src_train) == 0:
        raise ValueError("source training set is empty")
    use_single_thread(cfg.single_threaded)
    bundle = build_models(replace(arch, seed=arch.seed + cfg.seed))
    params = list(bundle.G.parameters()) + list(bundle.H.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rows = []
    bundle.G.train()
    for step in range(cfg.steps):
        batch = compose_batch(src_train, None, None, (cfg.batch_size, 0, 0), seed=(cfg.seed, step, 0x9E))
        logits = bundle.H(bundle.G(torch.from_numpy(batch.images)))
        loss = L.classification_loss(logits, torch.from_numpy(batch.labels))
        row = {"step": step, "stage": "PRE", "L_Cls": loss.item(), "L_total": loss.item()}
        _check_finite(loss, step, row)
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append(row)
    bundle.teacher = snapshot_teacher(bundle.G)
    val_acer = None
    if src_val is not None:
        from .evalmetrics import error_rates, select_threshold
        s = score_dataset(bundle, src_val)
        val_acer = error_rates(s, select_threshold(s))[2]
        log.info("pretrain done: source-val ACER %.4f", val_acer)
    return PretrainResult(bundle, rows, val_acer)


# -- adaptation ----------------------------------------------------------------------

def adversarial_features(features: torch.Tensor, labels: torch.Tensor, slots: torch.Tensor, live_only: bool):
    """Split features into (target, aux, source) sides for the discriminators."""
    keep = labels == LIVE if live_only else torch.ones_like(labels, dtype=torch.bool)
    return tuple(features[keep & (slots == k)] for k in (L.SLOT_TARGET, L.SLOT_AUX, L.SLOT_SOURCE))


def adversarial_terms(stage: Stage, features, labels, slots, bundle: ModelBundle, cfg: TrainConfig) -> L.AdvTerms:
    """Stage-gated adversarial terms; a side with no samples contributes exactly zero."""
    m = cfg.method
    ft, fa, fs = adversarial_features(features, labels, slots, cfg.adv_live_only)
    both = not m.progressive
    ta_on = both or stage is Stage.TA or m.keep_ta_in_cs
    cs_on = both or stage is Stage.CS
    if ta_on and (len(ft) == 0 or len(fa) == 0):
        log.warning("no target/aux features for D_ta; its term is zero this step")
        ta_on = False
    if cs_on and (len(ft) + len(fa) == 0 or len(fs) == 0):
        log.warning("no combined/source features for D_cs; its term is zero this step")
        cs_on = False
    zero = features.new_zeros(())
    terms = L.AdvTerms((zero, zero), (zero, zero))
    if ta_on:
        sub = L.progressive_adv_loss(Stage.TA, ft, fa, fs, bundle.D_ta, bundle.D_cs)
        terms.ta, terms.acc_ta = sub.ta, sub.acc_ta
    if cs_on:
        sub = L.progressive_adv_loss(Stage.CS, ft, fa, fs, bundle.D_ta, bundle.D_cs)
        terms.cs, terms.acc_cs = sub.cs, sub.acc_cs
    return terms


def _active(terms: L.AdvTerms) -> tuple[bool, bool]:
    return terms.ta[0].requires_grad, terms.cs[0].requires_grad


class Trainer:
    """Runs SASA (or any ablation of it) on top of a pretrained source model."""

    def __init__(self, pre: ModelBundle, src: DomainDataset, tgt: DomainDataset | None,
                 aux: DomainDataset | None, cfg: TrainConfig):
        cfg.validate()
        use_single_thread(cfg.single_threaded)
        if pre.teacher is None:
            raise ValueError("a teacher snapshot is required; run pretrain_source first")
        self.cfg, self.src, self.tgt, self.aux = cfg, src, tgt, aux
        self.bundle = build_models(replace(pre.cfg, seed=pre.cfg.seed + 7919 * (cfg.seed + 1)))
        if cfg.warm_start:
            self.bundle.G.load_state_dict(pre.G.state_dict())
            self.bundle.H.load_state_dict(pre.H.state_dict())
        self.bundle.teacher = pre.teacher
        b = self.bundle
        self.opt_gh = torch.optim.Adam(list(b.G.parameters()) + list(b.H.parameters()), lr=cfg.lr,
                                       weight_decay=cfg.weight_decay)
        self.opt_ta = torch.optim.Adam(b.D_ta.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.opt_cs = torch.optim.Adam(b.D_cs.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.state = TrainState()
        self.rows: list[dict] = []

    @property
    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"gh": self.opt_gh, "d_ta": self.opt_ta, "d_cs": self.opt_cs}

    def current_stage(self) -> Stage:
        stage = stage_controller(self.state, self.cfg)
        if stage is not self.state.stage:
            self.state.stage = stage
            self.state.switch_step = self.state.step
            log.info("stage switch TA -> CS at step %d", self.state.step)
        return stage

    def step(self) -> dict:
        cfg, st, b = self.cfg, self.state, self.bundle
        lc = cfg.effective_loss
        m = cfg.method
        batch = compose_batch(self.src, self.tgt, self.aux, cfg.effective_batch_sizes, seed=(cfg.seed, st.step))
        x = torch.from_numpy(batch.images)
        y = torch.from_numpy(batch.labels)
        slots = torch.from_numpy(batch.slots)
        stage = self.current_stage()
        b.G.train()
        f = b.G(x)
        parts = LossParts(L.classification_loss(b.H(f), y))
        row = dict.fromkeys(LOG_COLUMNS, 0.0)
        row.update(step=st.step, stage=stage.value, D_ta_acc=math.nan, D_cs_acc=math.nan)

        if m.use_lfc:
            src_mask = slots == L.SLOT_SOURCE
            with torch.no_grad():
                f0 = b.teacher(x[src_mask])
            parts.lfc = L.less_forgetting_loss(f[src_mask], f0)
            row["L_Lfc"] = parts.lfc.item()
        if m.use_cont:
            pos, neg = L.build_pairs(f, y, slots)
            if len(pos) + len(neg) == 0:
                log.warning("step %d: no cross-domain pairs in batch", st.step)
            sem, sep = L.semantic_alignment_loss(pos), L.separation_loss(neg, lc.margin)
            parts.cont = sem + sep
            row["L_Sem"], row["L_Sep"] = sem.item(), sep.item()
            log.debug("step %d per-pair L_Sem %.4g L_Sep %.4g", st.step,
                      row["L_Sem"] / max(len(pos), 1), row["L_Sep"] / max(len(neg), 1))
        if m.use_adv:
            # discriminators first, on detached features
            terms = adversarial_terms(stage, f, y, slots, b, cfg)
            ta_on, cs_on = _active(terms)
            if ta_on or cs_on:
                self.opt_ta.zero_grad()
                self.opt_cs.zero_grad()
                terms.loss_D.backward()
                if ta_on:
                    self.opt_ta.step()
                    st.counters["D_ta"] += 1
                if cs_on:
                    self.opt_cs.step()
                    st.counters["D_cs"] += 1
            if ta_on:
                st.acc_history.append(terms.acc_ta)
            row["D_ta_acc"], row["D_cs_acc"] = terms.acc_ta, terms.acc_cs
            # generator side sees the freshly updated discriminators
            terms = adversarial_terms(stage, f, y, slots, b, cfg)
            parts.adv = terms.loss_G
            row["L_Adv_ta"], row["L_Adv_cs"] = terms.ta[1].item(), terms.cs[1].item()

        total = L.total_loss(parts, lc)
        row["L_Cls"], row["L_total"] = parts.cls.item(), total.item()
        _check_finite(total, st.step, row)
        self.opt_gh.zero_grad()
        total.backward()
        self.opt_gh.step()
        st.counters["G"] += 1
        st.counters["H"] += 1
        st.step += 1
        self.rows.append(row)
        return row

    def run(self, until: int | None = None, checkpoint_dir=None, checkpoint_every: int = 0) -> "Trainer":
        until = self.cfg.steps if until is None else min(until, self.cfg.steps)
        while self.state.step < until:
            self.step()
            if checkpoint_dir and checkpoint_every and self.state.step % checkpoint_every == 0:
                self.save(Path(checkpoint_dir) / f"step-{self.state.step:06d}")
        return self

    def save(self, path) -> Path:
        return save_checkpoint(path, self.bundle, step=self.state.step, stage=self.state.stage.value,
                               extra={"state": self.state.to_dict(), "method": asdict(self.cfg.method)},
                               optimizers=self.optimizers)

    @classmethod
    def resume(cls, path, src, tgt, aux, cfg: TrainConfig) -> "Trainer":
        bundle, manifest = load_checkpoint(path)
        self = cls(bundle, src, tgt, aux, cfg)
        for name, mod in bundle.modules().items():
            getattr(self.bundle, name).load_state_dict(mod.state_dict())
        load_checkpoint(path, optimizers=self.optimizers)
        self.state = TrainState.from_dict(manifest["extra"]["state"])
        return self


def train_sasa(pre: ModelBundle, src: DomainDataset, tgt_fewshot: DomainDataset, aux: DomainDataset | None,
               cfg: TrainConfig = TrainConfig()) -> Trainer:
    return Trainer(pre, src, tgt_fewshot, aux, cfg).run()


def train_joint_baseline(pre: ModelBundle, src: DomainDataset, tgt_fewshot: DomainDataset | None,
                         cfg: TrainConfig = TrainConfig()) -> Trainer:
    """Cross-entropy only on source plus the few-shot target slice."""
    cfg = replace(cfg, method=replace(JOINT, use_target=tgt_fewshot is not None and len(tgt_fewshot) > 0))
    return Trainer(pre, src, tgt_fewshot, None, cfg).run()


# -- inference -------------------------------------------------------------------------

@torch.no_grad()
def extract_features(G, ds: DomainDataset, batch: int = 256) -> np.ndarray:
    G.eval()
    out = [G(torch.tensor(ds.images[i:i + batch])) for i in range(0, len(ds), batch)]
    G.train()
    return torch.cat(out).numpy() if out else np.zeros((0, G.feat_dim), dtype=np.float32)


@torch.no_grad()
def score_dataset(bundle: ModelBundle, ds: DomainDataset, name: str | None = None) -> ScoreSet:
    """Liveness score = softmax probability of the live logit."""
    f = torch.from_numpy(extract_features(bundle.G, ds))
    p = torch.softmax(bundle.H(f).double(), dim=1)[:, LIVE].numpy()
    return ScoreSet(np.clip(p, 0.0, 1.0), ds.labels.copy(), name or ds.domain)
