"""Feature generator, classifier, domain discriminators and checkpoints."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn


@dataclass(frozen=True)
class ArchConfig:
    backbone: str = "small"  # "small" or "resnet18"
    widths: tuple[int, ...] = (16, 32, 64)
    feat_dim: int = 128
    disc_hidden: int = 64
    disc_activation: str = "relu"
    norm_groups: int = 4
    in_channels: int = 3
    seed: int = 0

    def validate(self) -> "ArchConfig":
        if self.feat_dim <= 0:
            raise ValueError("feat_dim must be > 0")
        if self.disc_hidden <= 0:
            raise ValueError("disc_hidden must be > 0")
        if self.backbone not in ("small", "resnet18"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.disc_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.disc_activation!r}")
        if any(w % self.norm_groups for w in self.widths):
            raise ValueError("every width must be divisible by norm_groups")
        return self

    @classmethod
    def resnet_shape(cls, **kw) -> "ArchConfig":
        base = dict(backbone="resnet18", widths=(64, 128, 256, 512), feat_dim=512, disc_hidden=512)
        return cls(**{**base, **kw})

    @classmethod
    def from_dict(cls, d) -> "ArchConfig":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", cls.widths))
        return cls(**d)


_ACTIVATIONS = {"relu": nn.ReLU, "leaky_relu": nn.LeakyReLU, "tanh": nn.Tanh}


def _conv_block(cin: int, cout: int, groups: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(groups, cout), nn.ReLU(),
                         nn.AvgPool2d(2))


class _BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = nn.GroupNorm(groups, cout)
        self.skip = nn.Identity()
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.GroupNorm(groups, cout))

    def forward(self, x):
        y = torch.relu(self.n1(self.conv1(x)))
        return torch.relu(self.n2(self.conv2(y)) + self.skip(x))


class FeatureGenerator(nn.Module):
    """Image -> d-dim feature.  All normalization is per sample (GroupNorm)."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        g = cfg.norm_groups
        if cfg.backbone == "small":
            layers, cin = [], cfg.in_channels
            for w in cfg.widths:
                layers.append(_conv_block(cin, w, g))
                cin = w
            self.body = nn.Sequential(*layers)
        else:
            w0 = cfg.widths[0]
            layers = [nn.Conv2d(cfg.in_channels, w0, 3, 1, 1, bias=False), nn.GroupNorm(g, w0), nn.ReLU()]
            cin = w0
            for i, w in enumerate(cfg.widths):
                stride = 1 if i == 0 else 2
                layers += [_BasicBlock(cin, w, stride, g), _BasicBlock(w, w, 1, g)]
                cin = w
            self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.proj = nn.Linear(cin, cfg.feat_dim)
        self.feat_dim = cfg.feat_dim

    def forward(self, x):
        return self.proj(self.pool(self.body(x)).flatten(1))


class Classifier(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.fc = nn.Linear(cfg.feat_dim, 2)

    def forward(self, f):
        return self.fc(f)


class Discriminator(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(cfg.feat_dim, cfg.disc_hidden), _ACTIVATIONS[cfg.disc_activation](),
                                 nn.Linear(cfg.disc_hidden, 2))

    def forward(self, f):
        return self.net(f)


@dataclass
class ModelBundle:
    cfg: ArchConfig
    G: FeatureGenerator
    H: Classifier
    D_ta: Discriminator
    D_cs: Discriminator
    teacher: FeatureGenerator | None = None

    def modules(self) -> dict[str, nn.Module]:
        return {"G": self.G, "H": self.H, "D_ta": self.D_ta, "D_cs": self.D_cs}

    def to(self, dtype) -> "ModelBundle":
        for m in self.modules().values():
            m.to(dtype)
        if self.teacher is not None:
            self.teacher.to(dtype)
        return self


def build_models(cfg: ArchConfig = ArchConfig()) -> ModelBundle:
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        G, H = FeatureGenerator(cfg), Classifier(cfg)
        D_ta, D_cs = Discriminator(cfg), Discriminator(cfg)
    return ModelBundle(cfg, G, H, D_ta, D_cs)


def snapshot_teacher(G: FeatureGenerator) -> FeatureGenerator:
    """Frozen deep copy of ``G``; later updates to ``G`` never reach it."""
    teacher = copy.deepcopy(G)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def forward_features(G: nn.Module, images) -> torch.Tensor:
    x = torch.as_tensor(images)
    if x.ndim != 4:
        raise ValueError(f"expected (n, C, H, W) images, got {tuple(x.shape)}")
    return G(x.to(next(G.parameters()).dtype))


def forward_logits(H: nn.Module, features: torch.Tensor) -> torch.Tensor:
    if features.ndim != 2 or features.shape[1] != H.fc.in_features:
        raise ValueError(f"expected (n, {H.fc.in_features}) features, got {tuple(features.shape)}")
    return H(features)


def forward_domain(D: nn.Module, features: torch.Tensor) -> torch.Tensor:
    d_in = D.net[0].in_features
    if features.ndim != 2 or features.shape[1] != d_in:
        raise ValueError(f"expected (n, {d_in}) features, got {tuple(features.shape)}")
    return D(features)


# -- checkpoints ---------------------------------------------------------------
# A checkpoint is a directory: manifest.json plus one little-endian .npy file per
# tensor, named "<module>.<parameter path>.npy".

def _save_module(path: Path, prefix: str, module: nn.Module) -> list[str]:
    names = []
    for name, t in module.state_dict().items():
        fname = f"{prefix}.{name}.npy"
        np.save(path / fname, t.detach().cpu().numpy(), allow_pickle=False)
        names.append(fname)
    return names


def _load_module(path: Path, prefix: str, module: nn.Module):
    state = {}
    for name, t in module.state_dict().items():
        fname = path / f"{prefix}.{name}.npy"
        if not fname.exists():
            raise FileNotFoundError(f"checkpoint {path} lacks {fname.name}")
        state[name] = torch.from_numpy(np.load(fname, allow_pickle=False)).to(t.dtype)
    module.load_state_dict(state)


def save_checkpoint(path, bundle: ModelBundle, step: int = 0, stage: str | None = None,
                    extra: dict | None = None, optimizers: dict[str, torch.optim.Optimizer] | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = []
    for name, m in bundle.modules().items():
        files += _save_module(path, name, m)
    if bundle.teacher is not None:
        files += _save_module(path, "teacher", bundle.teacher)
    optim_meta = {}
    for oname, opt in (optimizers or {}).items():
        st = opt.state_dict()
        optim_meta[oname] = {"param_groups": st["param_groups"], "steps": {}}
        for pid, s in st["state"].items():
            optim_meta[oname]["steps"][str(pid)] = float(s["step"])
            for key in ("exp_avg", "exp_avg_sq"):
                fname = f"optim.{oname}.{pid}.{key}.npy"
                np.save(path / fname, s[key].numpy(), allow_pickle=False)
                files.append(fname)
    manifest = {"arch": asdict(bundle.cfg), "step": step, "stage": stage, "has_teacher": bundle.teacher is not None,
                "optimizers": optim_meta, "extra": extra or {}, "files": sorted(files)}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path, optimizers: dict[str, torch.optim.Optimizer] | None = None):
    """Returns ``(bundle, manifest)``; fills ``optimizers`` in place when given."""
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"{path}: no checkpoint manifest")
    manifest = json.loads((path / "manifest.json").read_text())
    bundle = build_models(ArchConfig.from_dict(manifest["arch"]))
    for name, m in bundle.modules().items():
        _load_module(path, name, m)
    if manifest["has_teacher"]:
        teacher = FeatureGenerator(bundle.cfg)
        _load_module(path, "teacher", teacher)
        bundle.teacher = snapshot_teacher(teacher)
    for oname, opt in (optimizers or {}).items():
        meta = manifest["optimizers"][oname]
        state = {}
        for pid, step in meta["steps"].items():
            state[int(pid)] = {"step": torch.tensor(step),
                               **{k: torch.from_numpy(np.load(path / f"optim.{oname}.{pid}.{k}.npy"))
                                  for k in ("exp_avg", "exp_avg_sq")}}
        opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
    return bundle, manifest


def save_teacher(path, teacher: FeatureGenerator, cfg: ArchConfig) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = _save_module(path, "teacher", teacher)
    (path / "manifest.json").write_text(json.dumps({"arch": asdict(cfg), "files": files}, indent=1, sort_keys=True))
    return path


def load_teacher(path) -> FeatureGenerator:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    teacher = FeatureGenerator(ArchConfig.from_dict(manifest["arch"]))
    _load_module(path, "teacher", teacher)
    return snapshot_teacher(teacher)
