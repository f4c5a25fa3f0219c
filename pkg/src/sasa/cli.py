"""Command-line entry points.

Configuration is a flat ``key = value`` file with dotted keys that address
fields of :class:`~sasa.bench.ProtocolSpec` (``source.style_signal.noise_sigma``,
``targets.0.n_subjects``, ``train.loss.lambda3``...) plus command options under
``run.``.  ``--set key=value`` overrides the file, and the merged result is
written next to the outputs of every command.

Failures print one JSON line on stderr (``{"error": ..., "field": ..., "message": ...}``)
and exit with status 2 for bad configuration and 1 for anything else.
"""
from __future__ import annotations

import argparse
import ast
import dataclasses
import json
import logging
import sys
import types
import typing
from pathlib import Path

import numpy as np

from . import bench
from .bench import ABLATION_METHODS, ProtocolSpec
from .evalmetrics import MetricsReport, evaluate, read_scores, write_report, write_scores
from .nets import load_checkpoint, save_checkpoint
from .stylizer import build_aux_domain
from .synthdata import LIVE, SpecError, load_dataset, make_fewshot_target, save_dataset
from .trainer import (JOINT, SASA, SOURCE_ONLY, MethodConfig, Trainer, extract_features, pretrain_source,
                      read_step_log, score_dataset, write_step_log)

log = logging.getLogger("sasa")

COMMANDS = ("gen-data", "augment", "pretrain", "train", "baseline", "eval", "protocol", "plot")

# command options and their defaults; None means "derive from --out"
RUN_KEYS: dict[str, object] = {
    "run.target": None,       # target domain name; defaults to the first target
    "run.method": None,       # method name for train/baseline
    "run.kind": "st",         # protocol kind: st, mt or ablation
    "run.data": None,         # dataset directory written by gen-data
    "run.aux": None,          # aux dataset directory written by augment
    "run.checkpoint": None,   # model checkpoint to adapt, evaluate or plot
    "run.scores": None,       # score file for plot
    "run.report": None,       # report JSON for plot (threshold)
    "run.step_log": None,     # step log for plot
    "run.sheet_rows": 6,      # rows of the augment contact sheet
    "run.seed": None,         # same as --seed; the flag wins
}

ALIASES = {"trainer.": "train.", "loss.": "train.loss.", "method.": "train.method."}

METHODS: dict[str, MethodConfig] = {m.name: m for m in (SOURCE_ONLY, JOINT, SASA, *ABLATION_METHODS)}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# -- dataclass <-> nested dict ---------------------------------------------------------

def build(tp, value):
    """Rebuild a (nested, frozen) dataclass or tuple from plain JSON-like data."""
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = set(value) - names
        if unknown:
            raise ConfigError(sorted(unknown)[0], f"not a field of {tp.__name__}")
        return tp(**{k: build(hints[k], v) for k, v in value.items()})
    if origin in (typing.Union, types.UnionType):
        if value is None:
            return None
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return build(args[0], value)
    if origin is tuple:
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(build(args[0], v) for v in value)
        return tuple(build(a, v) for a, v in zip(args, value))
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def flatten(d, prefix: str = "") -> dict[str, object]:
    out = {}
    if isinstance(d, dict):
        for k, v in d.items():
            out.update(flatten(v, f"{prefix}{k}."))
    elif isinstance(d, (list, tuple)) and d and isinstance(d[0], dict):
        for i, v in enumerate(d):
            out.update(flatten(v, f"{prefix}{i}."))
    else:
        out[prefix[:-1]] = list(d) if isinstance(d, tuple) else d
    return out


def unflatten(flat: dict[str, object]):
    root: dict = {}
    for key, v in flat.items():
        node = root
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v

    def lists(node):
        if isinstance(node, dict):
            node = {k: lists(v) for k, v in node.items()}
            if node and all(k.isdigit() for k in node):
                return [node[k] for k in sorted(node, key=int)]
        return node
    return lists(root)


# -- flat config files -------------------------------------------------------------------

def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        v = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if len(text) >= 2 and text[0] + text[-1] in ("()", "[]"):
            # bare-word lists such as (joint, sasa)
            return [parse_value(x) for x in text[1:-1].split(",") if x.strip()]
        return text
    return list(v) if isinstance(v, tuple) else v


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return "(" + ", ".join(format_value(x) for x in v) + ("," if len(v) == 1 else "") + ")"
    if isinstance(v, str):
        return v
    return repr(v)


def read_config(path) -> dict[str, object]:
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"no such file {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path.name}:{n}", "expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def write_config(path, flat: dict[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k} = {format_value(flat[k])}\n" for k in sorted(flat)))
    return path


def _canonical(key: str) -> str:
    for a, b in ALIASES.items():
        if key.startswith(a):
            return b + key[len(a):]
    return key


def _check_type(key: str, old, new):
    if old is None or new is None:
        return
    if isinstance(old, bool) != isinstance(new, bool):
        raise ConfigError(key, f"expected {type(old).__name__}, got {new!r}")
    if isinstance(old, (int, float)) and not isinstance(new, (int, float)):
        raise ConfigError(key, f"expected a number, got {new!r}")
    if isinstance(old, list) and not isinstance(new, list):
        raise ConfigError(key, f"expected a tuple, got {new!r}")
    if isinstance(old, str) and not isinstance(new, str):
        raise ConfigError(key, f"expected a string, got {new!r}")


def resolve(overrides: dict[str, object], base: ProtocolSpec | None = None) -> tuple[ProtocolSpec, dict]:
    """Apply dotted overrides to the default protocol; returns (spec, run options)."""
    flat = flatten((base or ProtocolSpec()).to_dict())
    run = dict(RUN_KEYS)
    methods = None
    for raw, v in overrides.items():
        key = _canonical(raw)
        if key in run:
            run[key] = v
        elif key == "methods":
            names = v if isinstance(v, list) else [v]
            unknown = [n for n in names if n not in METHODS]
            if unknown:
                raise ConfigError(key, f"unknown method {unknown[0]!r}; known: {sorted(METHODS)}")
            methods = [METHODS[n] for n in names]
        elif key.startswith("methods."):
            raise ConfigError(key, "set methods by name, e.g. methods = (joint, sasa)")
        elif key in flat:
            _check_type(key, flat[key], v)
            flat[key] = v
        else:
            raise ConfigError(key, "unknown configuration key")
    nested = unflatten({k: v for k, v in flat.items() if not k.startswith("methods.")})
    nested["methods"] = []
    try:
        spec = build(ProtocolSpec, nested)
        spec = dataclasses.replace(spec, methods=tuple(methods) if methods is not None
                                   else (base or ProtocolSpec()).methods)
        spec.validate()
    except SpecError as e:
        raise ConfigError(e.field, str(e).split(": ", 1)[-1]) from e
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError("config", str(e)) from e
    return spec, run


def snapshot(spec: ProtocolSpec, run: dict) -> dict[str, object]:
    flat = {k: v for k, v in flatten(spec.to_dict()).items() if not k.startswith("methods.")}
    flat["methods"] = [m.name for m in spec.methods]
    flat.update({k: v for k, v in run.items() if v is not None})
    return flat


# -- shared helpers -----------------------------------------------------------------------------

def _dir(run: dict, key: str, default: Path) -> Path:
    return Path(run[key]) if run[key] is not None else default


def _require(path: Path, what: str) -> Path:
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"{what} not found at {path}")
    return path


def _target_name(spec: ProtocolSpec, run: dict) -> str:
    names = [t.domain for t in spec.targets]
    name = run["run.target"] or names[0]
    if name not in names:
        raise ConfigError("run.target", f"{name!r} is not one of {names}")
    return name


def _load_source(data: Path):
    src = load_dataset(_require(data / "source", "source dataset"))
    return src.split("train"), src.split("val"), src.split("test")


def _fewshot(spec: ProtocolSpec, data: Path, target: str, seed: int):
    tds = load_dataset(_require(data / target, f"dataset {target!r}"))
    fs_seed = seed if spec.fewshot_seed is None else spec.fewshot_seed
    return make_fewshot_target(tds, spec.fewshot_subjects, fs_seed)


def _method(run: dict, default: str) -> MethodConfig:
    name = run["run.method"] or default
    if name not in METHODS:
        raise ConfigError("run.method", f"unknown method {name!r}; known: {sorted(METHODS)}")
    return METHODS[name]


# -- commands ---------------------------------------------------------------------------------

def cmd_gen_data(spec: ProtocolSpec, run: dict, out: Path, seed: int):
    data = out / "data"
    spec = dataclasses.replace(spec, data_seed=seed)
    src, targets = bench.generate_domains(spec)
    save_dataset(src, data / "source")
    for name, ds in targets.items():
        save_dataset(ds, data / name)
    return {"data": str(data), "domains": ["source", *targets]}


def contact_sheet(aux, src_train, fewshot, path: Path, rows: int) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = max(1, min(rows, len(aux)))
    fig, axes = plt.subplots(rows, 3, figsize=(4.5, 1.5 * rows), squeeze=False)
    for r in range(rows):
        ci, si = aux.provenance[r]
        for c, (img, title) in enumerate(((src_train.images[ci], "content"), (fewshot.images[si], "style"),
                                          (aux.images[r], "stylized"))):
            ax = axes[r, c]
            ax.imshow(np.clip(np.transpose(img, (1, 2, 0)), 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(title, fontsize=8)
        axes[r, 0].set_ylabel("live" if aux.labels[r] == LIVE else "spoof", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def cmd_augment(spec: ProtocolSpec, run: dict, out: Path, seed: int):
    data = _dir(run, "run.data", out / "data")
    target = _target_name(spec, run)
    src_train, _, _ = _load_source(data)
    fewshot, _ = _fewshot(spec, data, target, seed)
    fs_seed = seed if spec.fewshot_seed is None else spec.fewshot_seed
    aux = build_aux_domain(src_train, fewshot, spec.stylizer, fs_seed)
    dest = out / "aux" / target
    save_dataset(aux, dest)
    sheet = contact_sheet(aux, src_train, fewshot, dest / "contact_sheet.png", int(run["run.sheet_rows"]))
    return {"aux": str(dest), "size": len(aux), "contact_sheet": str(sheet)}


def cmd_pretrain(spec: ProtocolSpec, run: dict, out: Path, seed: int):
    data = _dir(run, "run.data", out / "data")
    src_train, src_val, _ = _load_source(data)
    res = pretrain_source(src_train, dataclasses.replace(spec.pretrain, seed=seed), spec.arch, src_val)
    dest = out / "pretrain"
    save_checkpoint(dest / "checkpoint", res.bundle, step=spec.pretrain.steps, stage="PRE")
    write_step_log(res.log, dest / "step_log.csv")
    summary = {"source_val_acer": res.val_acer, "steps": spec.pretrain.steps, "seed": seed}
    (dest / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def _adapt(spec: ProtocolSpec, run: dict, out: Path, seed: int, method: MethodConfig, group: str):
    data = _dir(run, "run.data", out / "data")
    target = _target_name(spec, run)
    pre, _ = load_checkpoint(_require(_dir(run, "run.checkpoint", out / "pretrain" / "checkpoint"),
                                      "pretrained checkpoint"))
    src_train, _, _ = _load_source(data)
    fewshot, _ = _fewshot(spec, data, target, seed)
    aux = None
    if method.use_aux:
        aux = load_dataset(_require(_dir(run, "run.aux", out / "aux" / target), "aux dataset (run augment)"))
    dest = out / group / method.name
    if not (method.use_target or method.use_aux):
        save_checkpoint(dest / "checkpoint", pre, stage="PRE")
        return {"checkpoint": str(dest / "checkpoint"), "steps": 0}
    cfg = dataclasses.replace(spec.train, method=method, seed=seed)
    tr = Trainer(pre, src_train, fewshot if method.use_target else None, aux, cfg).run()
    tr.save(dest / "checkpoint")
    write_step_log(tr.rows, dest / "step_log.csv")
    return {"checkpoint": str(dest / "checkpoint"), "steps": tr.state.step, "switch_step": tr.state.switch_step}


def cmd_train(spec, run, out, seed):
    return _adapt(spec, run, out, seed, _method(run, "sasa"), "train")


def cmd_baseline(spec, run, out, seed):
    method = _method(run, "joint")
    if method.use_aux or method.use_lfc or method.use_cont or method.use_adv:
        raise ConfigError("run.method", "baselines are source_only or joint")
    return _adapt(spec, run, out, seed, method, "baseline")


def cmd_eval(spec: ProtocolSpec, run: dict, out: Path, seed: int):
    data = _dir(run, "run.data", out / "data")
    ckpt = _dir(run, "run.checkpoint", out / "train" / "sasa" / "checkpoint")
    bundle, manifest = load_checkpoint(_require(ckpt, "checkpoint"))
    _, src_val, src_test = _load_source(data)
    names = [run["run.target"]] if run["run.target"] else [t.domain for t in spec.targets]
    held = {n: score_dataset(bundle, _fewshot(spec, data, n, seed)[1], n) for n in names}
    val, test = score_dataset(bundle, src_val, "source"), score_dataset(bundle, src_test, "source")
    tau, per = evaluate(val, test, held)
    name = manifest.get("extra", {}).get("method", {}).get("name", "model")
    rep = MetricsReport(name)
    rep.add_seed(seed, tau, per)
    dest = out / "eval"
    write_report(dest / "report.json", rep)
    write_scores(dest / "scores.csv", [test, *held.values()])
    return {"report": str(dest / "report.json"), "threshold": tau}


def cmd_protocol(spec: ProtocolSpec, run: dict, out: Path, seed: int | None):
    if seed is not None:
        spec = dataclasses.replace(spec, seeds=(seed,))
    kind = run["run.kind"]
    if kind == "st":
        res = bench.run_protocol_st(spec, out)
        return {t: {m: rep.mean(t, "hter") for m, rep in reps.items()} for t, reps in res.items()}
    if kind == "mt":
        res = bench.run_protocol_mt(dataclasses.replace(spec, name="mt" if spec.name == "st" else spec.name), out)
        return {m: rep.mean("target_avg", "hter") for m, rep in res.items()}
    if kind == "ablation":
        target = _target_name(spec, run) if run["run.target"] else bench.ablation_spec(spec).targets[0].domain
        rows = bench.run_ablation(bench.ablation_spec(spec, target), out)
        return {r.method.name: {"source_acer": r.source_acer, "target_hter": r.target_hter} for r in rows}
    raise ConfigError("run.kind", f"expected st, mt or ablation, got {kind!r}")


def cmd_plot(spec: ProtocolSpec, run: dict, out: Path, seed: int):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    scores_path = _dir(run, "run.scores", out / "eval" / "scores.csv")
    report_path = _dir(run, "run.report", out / "eval" / "report.json")
    log_path = _dir(run, "run.step_log", out / "train" / "sasa" / "step_log.csv")
    ckpt = _dir(run, "run.checkpoint", out / "train" / "sasa" / "checkpoint")
    data = _dir(run, "run.data", out / "data")
    for p in (scores_path, report_path, log_path):
        if not p.exists():
            raise FileNotFoundError(f"plot input missing: {p}")
    dest = out / "plots"
    dest.mkdir(parents=True, exist_ok=True)
    tau = json.loads(report_path.read_text())["seeds"][0]["threshold"]

    sets = read_scores(scores_path)
    fig, axes = plt.subplots(1, len(sets), figsize=(3.2 * len(sets), 2.6), squeeze=False)
    bins = np.linspace(0, 1, 26)
    for ax, (name, s) in zip(axes[0], sets.items()):
        ax.hist(s.live, bins=bins, alpha=0.6, label="live")
        ax.hist(s.spoof, bins=bins, alpha=0.6, label="spoof")
        ax.axvline(tau, color="k", lw=1, ls="--")
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("live score")
    axes[0, 0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(dest / "score_histograms.png", dpi=100)
    plt.close(fig)

    rows = read_step_log(log_path)
    fig, ax = plt.subplots(figsize=(6, 3))
    steps = [r["step"] for r in rows]
    for key in ("L_Cls", "L_Sem", "L_Sep", "L_Adv_ta", "L_Adv_cs", "L_Lfc", "L_total"):
        vals = np.array([r[key] for r in rows], dtype=float)
        if np.nanmax(np.abs(vals), initial=0.0) > 0:
            ax.plot(steps, vals, lw=0.8, label=key)
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.set_xlabel("step")
    ax.legend(fontsize=6, ncol=4)
    fig.tight_layout()
    fig.savefig(dest / "loss_curves.png", dpi=100)
    plt.close(fig)

    bundle, _ = load_checkpoint(_require(ckpt, "checkpoint"))
    src_train, _, _ = _load_source(data)
    groups = [("source", src_train.subset(np.arange(min(len(src_train), 200)), keep_splits=False))]
    for t in spec.targets:
        if (data / t.domain / "manifest.json").exists():
            groups.append((t.domain, _fewshot(spec, data, t.domain, seed)[1]))
    feats = [extract_features(bundle.G, ds) for _, ds in groups]
    allf = np.concatenate(feats)
    mu = allf.mean(axis=0)
    _, _, vt = np.linalg.svd(allf - mu, full_matrices=False)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for k, ((name, ds), f) in enumerate(zip(groups, feats)):
        z = (f - mu) @ vt[:2].T
        for lab, marker in ((LIVE, "o"), (1 - LIVE, "x")):
            m = ds.labels == lab
            ax.scatter(z[m, 0], z[m, 1], s=8, marker=marker, color=f"C{k}",
                       label=f"{name} {'live' if lab == LIVE else 'spoof'}")
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(dest / "feature_pca.png", dpi=100)
    plt.close(fig)
    return {"plots": sorted(p.name for p in dest.glob("*.png"))}


HANDLERS = {"gen-data": cmd_gen_data, "augment": cmd_augment, "pretrain": cmd_pretrain, "train": cmd_train,
            "baseline": cmd_baseline, "eval": cmd_eval, "protocol": cmd_protocol, "plot": cmd_plot}


# -- entry point ----------------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sasa", description="Few-shot domain expansion experiments on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default="results", help="output directory")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(kind: str, field: str | None, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "field": field, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = read_config(args.config) if args.config else {}
        for item in args.overrides:
            if "=" not in item:
                raise ConfigError("--set", f"expected KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = parse_value(v)
        spec, run = resolve(overrides)
        out = Path(args.out)
        seed = args.seed if args.seed is not None else run["run.seed"]
        if args.command != "protocol" and seed is None:
            seed = spec.data_seed if args.command == "gen-data" else spec.seeds[0]
        run["run.seed"] = seed
        snap = snapshot(spec, run)
        write_config(out / f"config.{args.command}.cfg", snap)
        result = HANDLERS[args.command](spec, run, out, seed)
    except ConfigError as e:
        return _fail("ConfigError", e.field, str(e), 2)
    except SpecError as e:
        return _fail("SpecError", e.field, str(e), 2)
    except FileNotFoundError as e:
        return _fail("MissingInput", None, str(e), 1)
    except Exception as e:  # noqa: BLE001 - any failure becomes one parsable line
        return _fail(type(e).__name__, None, str(e), 1)
    print(json.dumps({"command": args.command, "result": result}, sort_keys=True, default=str))
    return 0
