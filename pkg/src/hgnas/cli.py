"""Command-line entry point: ``hgnas <group> <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(including an oracle out-of-memory verdict).  Commands that take ``--out``
write ``config.json``, ``log.jsonl``, ``summary.json`` and ``weights/`` there.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset as D
from .design_space import (
    Genotype,
    SpaceConfig,
    SpaceError,
    canonical_form,
    dgcnn_like_preset,
    enumerate_space,
    space_size,
)
from .device_model import InputSpec, OutOfMemory, builtin_profiles, load_profile, oracle_latency
from .dot import export_dot

log = logging.getLogger("hgnas")


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("HGNAS_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"HGNAS_SEED must be an integer, got {env!r}") from None


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _clean(obj):
    """Replace non-finite floats by None so strict JSON always holds."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


class RunDir:
    """config.json, log.jsonl, summary.json and weights/ under one directory."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "weights").mkdir(exist_ok=True)
        self._log = []

    def config(self, cfg: dict):
        (self.path / "config.json").write_text(_dumps(_clean(cfg)))

    def log(self, record: dict):
        self._log.append(json.dumps(_clean(record), sort_keys=True, default=_json_default))

    def log_text(self, text: str):
        self._log.extend(ln for ln in text.splitlines() if ln)

    def summary(self, obj: dict):
        (self.path / "log.jsonl").write_text("".join(ln + "\n" for ln in self._log))
        (self.path / "summary.json").write_text(_dumps(_clean(obj)))

    @property
    def weights(self) -> Path:
        return self.path / "weights"


def _emit(obj, out: str | None):
    text = _dumps(_clean(obj))
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# --- argument helpers ---------------------------------------------------------


def _space_from(args) -> SpaceConfig:
    if getattr(args, "space", None):
        d = _read_json(args.space, "space")
        try:
            space = SpaceConfig.from_dict(d)
        except (SpaceError, TypeError) as e:
            raise ConfigError(f"{args.space}: {e}") from None
    else:
        space = SpaceConfig()
    if getattr(args, "positions", None) is not None:
        if args.positions < 1:
            raise UsageError("--positions must be >= 1")
        space = SpaceConfig.from_dict({**space.to_dict(), "num_positions": args.positions})
    return space


def _read_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: {what} file not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def load_genotype(ref: str) -> Genotype:
    """``preset:dgcnn`` or a JSON file holding a genotype or a search summary."""
    if ref.startswith("preset:"):
        name = ref.split(":", 1)[1]
        if name not in ("dgcnn", "dgcnn_like"):
            raise ConfigError(f"{ref}: unknown preset (known: preset:dgcnn)")
        return dgcnn_like_preset(SpaceConfig())
    d = _read_json(ref, "genotype")
    if isinstance(d, dict) and "best" in d and isinstance(d["best"], dict):
        d = d["best"]
    if isinstance(d, dict) and "genotype" in d:
        d = d["genotype"]
    try:
        return Genotype.from_dict(d)
    except (SpaceError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{ref}: not a genotype ({e})") from None


def _profile(ref: str):
    try:
        return load_profile(ref)
    except (KeyError, FileNotFoundError):
        raise ConfigError(f"{ref}: unknown device profile (builtin: {', '.join(builtin_profiles())})") from None
    except (ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"{ref}: {e}") from None


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("widths must be positive")
    return vals


def _input_spec(args, feature_dim: int = 3) -> InputSpec:
    try:
        return InputSpec(args.points, feature_dim, args.batch, args.k)
    except ValueError as e:
        raise UsageError(str(e)) from None


# --- space ----------------------------------------------------------------------


def cmd_space_count(args):
    space = _space_from(args)
    print(space_size(space, shared_halves=args.shared))
    return 0


def cmd_space_enumerate(args):
    space = _space_from(args)
    total = space_size(space, shared_halves=args.shared)
    if args.limit is None and total > 10**6:
        raise UsageError(f"space holds {total} genotypes; pass --limit")
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for i, g in enumerate(enumerate_space(space, shared_halves=args.shared)):
            if args.limit is not None and i >= args.limit:
                break
            out.write(json.dumps(g.to_dict(), sort_keys=True) + "\n")
    finally:
        if args.out:
            out.close()
    return 0


# --- dataset --------------------------------------------------------------------


def cmd_dataset_gen(args):
    seed = _seed(args)
    try:
        split = D.gen_synthetic(per_class=args.per_class, points=args.points, noise=args.noise, seed=seed,
                                rotate=args.rotate, val_fraction=args.val_fraction)
    except ValueError as e:
        raise UsageError(str(e)) from None
    D.save_dataset(split, args.out)
    _emit({"train": len(split.train), "val": len(split.val), "num_points": split.num_points,
           "classes": list(split.class_names), "seed": seed}, None)
    return 0


def cmd_dataset_import_off(args):
    """ModelNet layout: ``root/<class>/{train,test}/*.off``, or ``root/<class>/*.off``
    split by ``--val-fraction``."""
    seed = _seed(args)
    root = Path(args.root)
    if not root.is_dir():
        raise ConfigError(f"{root}: not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if args.classes:
        want = args.classes.split(",")
        missing = [c for c in want if c not in classes]
        if missing:
            raise ConfigError(f"{root}: classes not found: {missing}")
        classes = want
    if len(classes) < 2:
        raise ConfigError(f"{root}: need at least two class directories")
    rng = np.random.default_rng(seed)
    train, val = [], []
    skipped = []
    for label, name in enumerate(classes):
        cdir = root / name
        if (cdir / "train").is_dir():
            parts = [(sorted((cdir / "train").glob("*.off")), train), (sorted((cdir / "test").glob("*.off")), val)]
        else:
            files = sorted(cdir.glob("*.off"))
            order = rng.permutation(len(files))
            n_val = int(round(args.val_fraction * len(files)))
            parts = [([files[i] for i in sorted(order[n_val:])], train), ([files[i] for i in sorted(order[:n_val])], val)]
        for files, dest in parts:
            if args.max_per_class is not None:
                files = files[: args.max_per_class]
            for f in files:
                try:
                    dest.append(D.load_off(f, args.points, label, seed=int(rng.integers(2**31))))
                except (D.OffError, ValueError) as e:
                    if args.strict:
                        raise ConfigError(f"{f}: {e}") from None
                    skipped.append({"file": str(f), "error": str(e)})
    if not train or not val:
        raise ConfigError(f"{root}: no usable OFF files for one of the splits")
    split = D.DatasetSplit(train, val, len(classes), seed, tuple(classes),
                           {"source": "off", "points": args.points, "skipped": len(skipped)})
    D.save_dataset(split, args.out)
    _emit({"train": len(train), "val": len(val), "classes": classes, "skipped": skipped, "seed": seed}, None)
    return 0


def _load_data(path):
    try:
        return D.load_dataset(path)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no dataset (expected manifest.json)") from None
    except (ValueError, KeyError) as e:
        raise ConfigError(f"{path}: {e}") from None


# --- supernet -------------------------------------------------------------------


def cmd_supernet_train(args):
    from .design_space import FunctionSet
    from .supernet import Supernet, eval_genotype, finalize, path_sampler, train_supernet

    seed = _seed(args)
    data = _load_data(args.data)
    space = _space_from(args)
    space = SpaceConfig.from_dict({**space.to_dict(), "num_classes": data.num_classes})
    fixed = load_genotype(args.genotype) if args.genotype else None
    if fixed is not None:
        fixed = Genotype(fixed.positions, space.input_dim, data.num_classes)
        if len(fixed) != space.num_positions:
            space = SpaceConfig.from_dict({**space.to_dict(), "num_positions": len(fixed)})
    fs = None
    if args.function_set:
        try:
            fs = FunctionSet.from_dict(_read_json(args.function_set, "function set"))
        except (SpaceError, KeyError, TypeError) as e:
            raise ConfigError(f"{args.function_set}: {e}") from None
    run = RunDir(args.out)
    cfg = {"command": "supernet train", "seed": seed, "data": str(args.data), "epochs": args.epochs,
           "hidden": args.hidden, "lr": args.lr, "batch_size": args.batch_size, "space": space.to_dict(),
           "genotype": fixed.to_dict() if fixed else None, "function_set": fs.to_dict() if fs else None}
    run.config(cfg)
    try:
        net = Supernet(space, args.hidden, seed)
    except SpaceError as e:
        raise ConfigError(str(e)) from None
    sampler = path_sampler(space, fs)
    report = {}
    for epoch in range(args.epochs):
        train_supernet(net, data, 1, seed + epoch, lr=args.lr, batch_size=args.batch_size, sampler=sampler, fixed=fixed)
        rec = {"epoch": epoch, "loss": net.loss_history[-1]}
        if fixed is not None and (epoch + 1) % args.eval_every == 0:
            rec["acc_val"] = eval_genotype(net, fixed, data, seed, train=False).acc_val
        run.log(rec)
    net.save(run.weights / "supernet")
    if fixed is not None:
        rep = eval_genotype(net, fixed, data, seed)
        report = {"acc_val": rep.acc_val, "acc_train": rep.acc_train}
        finalize(fixed, net).save(run.weights / "finalized")
    else:
        rng = np.random.default_rng(seed)
        accs = [eval_genotype(net, sampler(rng), data, seed, train=False).acc_val for _ in range(args.eval_paths)]
        report = {"mean_path_acc_val": float(np.mean(accs)), "paths": args.eval_paths}
    run.summary({"epochs": args.epochs, "final_loss": net.loss_history[-1] if net.loss_history else None, **report})
    return 0


def cmd_supernet_eval(args):
    from .supernet import Supernet, eval_genotype

    try:
        net = Supernet.load(args.weights)
    except FileNotFoundError:
        raise ConfigError(f"{args.weights}: no supernet checkpoint") from None
    data = _load_data(args.data)
    g = load_genotype(args.genotype)
    g = Genotype(g.positions, net.space.input_dim, net.space.num_classes)
    try:
        net.check(g)
    except SpaceError as e:
        raise ConfigError(f"{args.genotype}: {e}") from None
    rep = eval_genotype(net, g, data, _seed(args))
    _emit({"acc_val": rep.acc_val, "acc_train": rep.acc_train, "genotype": g.to_dict()}, args.out)
    return 0


# --- predictor ------------------------------------------------------------------


def _profiles_arg(text: str):
    names = list(builtin_profiles()) if text == "all" else text.split(",")
    return [_profile(n) for n in names]


def _predictor_data(space, profiles, spec, n, noise, seed):
    from .predictor import labeled_samples, sample_architectures

    gs = sample_architectures(space, n, seed)
    return labeled_samples(gs, profiles, spec, noise, seed)


def cmd_predictor_train(args):
    from .predictor import evaluate_predictor, train_predictor

    seed = _seed(args)
    space = _space_from(args)
    spec = _input_spec(args, space.input_dim)
    profiles = _profiles_arg(args.profiles)
    if not 0 < args.split < 1:
        raise UsageError("--split must lie in (0, 1)")
    run = RunDir(args.out)
    cfg = {"command": "predictor train", "seed": seed, "samples": args.samples, "epochs": args.epochs,
           "noise": args.noise, "split": args.split, "profiles": [p.to_dict() for p in profiles],
           "input": spec.__dict__, "space": space.to_dict(), "gcn_widths": list(args.gcn_widths),
           "mlp_widths": list(args.mlp_widths), "lr": args.lr, "batch_size": args.batch_size}
    run.config(cfg)
    data = _predictor_data(space, profiles, spec, args.samples, args.noise, seed)
    perm = np.random.default_rng(seed + 1).permutation(len(data))
    n_fit = int(round(args.split * len(data)))
    fit, val = [data[i] for i in perm[:n_fit]], [data[i] for i in perm[n_fit:]]
    model = train_predictor(fit, epochs=args.epochs, seed=seed, lr=args.lr, batch_size=args.batch_size,
                            gcn_widths=args.gcn_widths, mlp_widths=args.mlp_widths, loss=args.loss)
    for epoch, score in enumerate(model.meta.pop("history", [])):
        run.log({"epoch": epoch, "holdout_mape": score})
    model.save(run.weights / "predictor")
    summary = {"train": evaluate_predictor(model, fit).to_dict(), "best_epoch": model.meta.get("best_epoch")}
    if val:
        summary["val"] = evaluate_predictor(model, val).to_dict()
        names = sorted({s.profile.name for s in val})
        summary["val_by_profile"] = {
            n: evaluate_predictor(model, [s for s in val if s.profile.name == n]).to_dict() for n in names
        }
    run.summary(summary)
    return 0


def cmd_predictor_eval(args):
    from .predictor import PredictorModel, evaluate_predictor

    try:
        model = PredictorModel.load(args.weights)
    except FileNotFoundError:
        raise ConfigError(f"{args.weights}: no predictor checkpoint") from None
    except ValueError as e:
        raise ConfigError(f"{args.weights}: {e}") from None
    space = _space_from(args)
    spec = _input_spec(args, space.input_dim)
    data = _predictor_data(space, _profiles_arg(args.profiles), spec, args.samples, args.noise, _seed(args))
    rep = evaluate_predictor(model, data, resample_seed=args.resample_seed)
    _emit(rep.to_dict(), args.out)
    return 0


# --- oracle ---------------------------------------------------------------------


def cmd_oracle_latency(args):
    g = load_genotype(args.genotype)
    profile = _profile(args.profile)
    spec = _input_spec(args, g.input_dim)
    try:
        est = oracle_latency(g, spec, profile, check_memory=not args.no_memory_check)
    except OutOfMemory as e:
        sys.stderr.write(f"out of memory: {e}\n")
        _emit({"error": "out_of_memory", "profile": profile.name, "capacity_mb": e.capacity,
               **e.estimate.to_dict()}, args.out)
        return 2
    _emit({"profile": profile.name, "input": spec.__dict__, **est.to_dict()}, args.out)
    return 0


# --- search ---------------------------------------------------------------------

SEARCH_KEYS = {
    "seed", "space", "device", "input", "objective", "ea", "stage1_ea", "budget", "stage1_share",
    "accuracy", "predictor",
}
INPUT_KEYS = {"points", "batch", "default_k"}
OBJECTIVE_KEYS = {"alpha", "beta", "constraint", "source", "ref_ms"}
EA_KEYS = {"population", "iterations", "parent_fraction", "mutation_rate", "crossover_prob", "seed"}
ACCURACY_KEYS = {"kind", "data", "stage1_epochs", "stage2_epochs", "hidden", "paths", "lr"}


def _check_keys(d, allowed, where, src):
    if not isinstance(d, dict):
        raise ConfigError(f"{src}: {where} must be an object")
    bad = sorted(set(d) - allowed)
    if bad:
        raise ConfigError(f"{src}: unknown key {where + '.' if where else ''}{bad[0]}")


def load_search_config(path, seed_override: int | None = None) -> dict:
    """Validate a search config and resolve every default; the result is what runs."""
    from .search import EAConfig, SearchObjective, default_ref_ms

    src = str(path)
    raw = _read_json(path, "search config")
    _check_keys(raw, SEARCH_KEYS, "", src)
    base = Path(path).parent
    seed = seed_override if seed_override is not None else int(raw.get("seed", 0))
    try:
        space = SpaceConfig.from_dict(raw.get("space", {}))
    except (SpaceError, TypeError) as e:
        raise ConfigError(f"{src}: space: {e}") from None
    profile = raw.get("device", "gpu_like")
    if not isinstance(profile, str):
        raise ConfigError(f"{src}: device must be a profile name or path")
    if profile not in builtin_profiles():
        profile = str((base / profile).resolve()) if not Path(profile).is_absolute() else profile
    prof = _profile(profile)
    inp = raw.get("input", {})
    _check_keys(inp, INPUT_KEYS, "input", src)
    try:
        spec = InputSpec(int(inp.get("points", 1024)), space.input_dim, int(inp.get("batch", 1)),
                         int(inp.get("default_k", space.default_k)))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{src}: input: {e}") from None
    obj = dict(raw.get("objective", {}))
    _check_keys(obj, OBJECTIVE_KEYS, "objective", src)
    if obj.get("ref_ms") is None:
        obj["ref_ms"] = default_ref_ms(spec, prof)
    try:
        objective = SearchObjective.from_dict(obj)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{src}: objective: {e}") from None
    eas = {}
    for key in ("ea", "stage1_ea"):
        d = dict(raw.get(key, {}))
        _check_keys(d, EA_KEYS, key, src)
        d.setdefault("seed", seed)
        try:
            eas[key] = EAConfig.from_dict(d)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{src}: {key}: {e}") from None
    budget = raw.get("budget", 2000)
    if not isinstance(budget, int) or budget < 1:
        raise ConfigError(f"{src}: budget must be a positive integer")
    share = raw.get("stage1_share", 0.25)
    if not isinstance(share, (int, float)) or not 0 < share < 1:
        raise ConfigError(f"{src}: stage1_share must lie in (0, 1)")
    acc = dict(raw.get("accuracy", {"kind": "surrogate"}))
    _check_keys(acc, ACCURACY_KEYS, "accuracy", src)
    kind = acc.setdefault("kind", "surrogate")
    if kind not in ("surrogate", "supernet"):
        raise ConfigError(f"{src}: accuracy.kind must be surrogate or supernet")
    acc.setdefault("paths", 16 if kind == "surrogate" else 4)
    if kind == "supernet":
        if "data" not in acc:
            raise ConfigError(f"{src}: accuracy.data is required for supernet accuracy")
        acc["data"] = str((base / acc["data"]).resolve())
        acc.setdefault("stage1_epochs", 2)
        acc.setdefault("stage2_epochs", 10)
        acc.setdefault("hidden", 32)
        acc.setdefault("lr", 0.01)
    pred = raw.get("predictor")
    if objective.source == "predictor":
        if not pred:
            raise ConfigError(f"{src}: objective.source is predictor but no predictor checkpoint is given")
        pred = str((base / pred).resolve())
    return {
        "seed": seed,
        "space": space.to_dict(),
        "device": prof.to_dict(),
        "input": {"points": spec.points, "batch": spec.batch, "default_k": spec.default_k},
        "objective": objective.to_dict(),
        "ea": eas["ea"].to_dict(),
        "stage1_ea": eas["stage1_ea"].to_dict(),
        "budget": budget,
        "stage1_share": share,
        "accuracy": acc,
        "predictor": pred,
    }


class _Resolved:
    def __init__(self, cfg: dict):
        from .device_model import DeviceProfile
        from .search import EAConfig, SearchObjective

        self.cfg = cfg
        self.space = SpaceConfig.from_dict(cfg["space"])
        self.profile = DeviceProfile.from_dict(cfg["device"])
        i = cfg["input"]
        self.spec = InputSpec(i["points"], self.space.input_dim, i["batch"], i["default_k"])
        self.objective = SearchObjective.from_dict(cfg["objective"])
        self.ea = EAConfig.from_dict(cfg["ea"])
        self.ea1 = EAConfig.from_dict(cfg["stage1_ea"])

    def with_seed(self, seed: int) -> "_Resolved":
        cfg = json.loads(json.dumps(self.cfg))
        cfg["seed"] = seed
        cfg["ea"]["seed"] = cfg["stage1_ea"]["seed"] = seed
        return _Resolved(cfg)

    def latency(self):
        from .search import oracle_source, predictor_source

        if self.objective.source == "predictor":
            from .predictor import PredictorModel

            return predictor_source(PredictorModel.load(self.cfg["predictor"]), self.spec, self.profile)
        return oracle_source(self.spec, self.profile)

    def accuracy(self):
        """(stage-1 evaluator, stage-2 accuracy factory, one-stage accuracy, supernet holder)."""
        from .search import SupernetAccuracy, SurrogateAccuracy, supernet_stage1, surrogate_stage1

        a = self.cfg["accuracy"]
        seed = self.cfg["seed"]
        if a["kind"] == "surrogate":
            sur = SurrogateAccuracy()
            return surrogate_stage1(self.space, sur, a["paths"], seed), (lambda fs: sur), sur, None
        data = D.load_dataset(a["data"])
        stage1 = supernet_stage1(self.space, data, a["stage1_epochs"], a["hidden"], a["paths"], seed, a["lr"])
        holder = SupernetAccuracy(self.space, data, a["stage2_epochs"], a["hidden"], seed, a["lr"])
        return stage1, holder, None, holder


def _oracle_objective(r: _Resolved, rec) -> float:
    """f_obj of a record with latency re-measured by the oracle."""
    from .device_model import latency_ms
    from .search import f_obj

    if rec.acc_val is None:
        return 0.0
    return f_obj(rec.acc_val, latency_ms(rec.genotype, r.spec, r.profile), r.objective)


def _run_multistage(r: _Resolved):
    from .search import run_multistage

    stage1, factory, _, holder = r.accuracy()
    res = run_multistage(r.space, r.objective, stage1, factory, r.latency(), r.ea1, r.ea, r.cfg["budget"],
                         r.cfg["stage1_share"])
    return res, holder


def cmd_search_run(args):
    from .supernet import finalize

    cfg = load_search_config(args.config, args.seed)
    run = RunDir(args.out)
    run.config(cfg)
    r = _Resolved(cfg)
    res, holder = _run_multistage(r)
    run.log_text(res.history_jsonl())
    if holder is not None and holder.net is not None:
        holder.net.save(run.weights / "supernet")
        finalize(res.best.genotype, holder.net).save(run.weights / "finalized")
    summary = res.summary(r.objective)
    summary["oracle_objective"] = _oracle_objective(r, res.best)
    summary["seed"] = cfg["seed"]
    run.summary(summary)
    return 0


def _ablate_one(cfg: dict, seed: int) -> dict:
    from .search import one_stage_baseline

    r = _Resolved(cfg).with_seed(seed)
    multi, _ = _run_multistage(r)
    _, _, one_acc, holder = r.accuracy()
    if one_acc is None:
        # the baseline has no fixed function set; a supernet over the whole space scores it
        from .search import AccuracyCache
        from .supernet import Supernet, eval_genotype, train_supernet

        a = cfg["accuracy"]
        data = D.load_dataset(a["data"])
        net = Supernet(r.space, a["hidden"], seed)
        train_supernet(net, data, a["stage2_epochs"], seed, lr=a["lr"])
        one_acc = AccuracyCache(lambda g: eval_genotype(net, g, data, seed, train=False).acc_val)
    one = one_stage_baseline(r.space, r.objective, r.ea, r.latency(), one_acc, cfg["budget"])
    return {
        "seed": seed,
        "multistage": {"objective": multi.best.objective, "oracle_objective": _oracle_objective(r, multi.best),
                       "evaluations": multi.evaluations, "genotype": multi.best.genotype.to_dict()},
        "one_stage": {"objective": one.best.objective, "oracle_objective": _oracle_objective(r, one.best),
                      "evaluations": one.evaluations, "genotype": one.best.genotype.to_dict()},
    }


def cmd_search_ablate(args):
    cfg = load_search_config(args.config, args.seed)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    run = RunDir(args.out)
    run.config({**cfg, "seeds": args.seeds})
    seeds = [cfg["seed"] + i for i in range(args.seeds)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_ablate_one, [cfg] * len(seeds), seeds))
    else:
        rows = [_ablate_one(cfg, s) for s in seeds]
    for row in rows:
        run.log(row)
    multi = [row["multistage"]["objective"] for row in rows]
    one = [row["one_stage"]["objective"] for row in rows]
    run.summary({
        "seeds": seeds,
        "multistage_median": float(np.median(multi)),
        "one_stage_median": float(np.median(one)),
        "multistage_wins": int(sum(m > o for m, o in zip(multi, one))),
        "ties": int(sum(m == o for m, o in zip(multi, one))),
    })
    return 0


# --- export ---------------------------------------------------------------------


def cmd_export_dot(args):
    g = load_genotype(args.genotype)
    text = export_dot(g, args.name)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_export_json(args):
    g = load_genotype(args.genotype)
    c = canonical_form(g)
    _emit({"genotype": g.to_dict(), "canonical": c.to_dict(),
           "op_counts": {op.value: g.count(op) for op in g.ops}}, args.out)
    return 0


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hgnas", description="Hardware-aware NAS for point-cloud GNNs")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for multi-seed commands")
    p.add_argument("-v", "--verbose", action="store_true")
    groups = p.add_subparsers(dest="group", required=True, parser_class=_Parser)

    def seed(sp):
        sp.add_argument("--seed", type=int, default=None, help="default: $HGNAS_SEED or 0")

    def input_flags(sp):
        sp.add_argument("--points", type=int, default=1024)
        sp.add_argument("--batch", type=int, default=1)
        sp.add_argument("--k", type=int, default=16)

    g = groups.add_parser("space").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    for name, fn in (("count", cmd_space_count), ("enumerate", cmd_space_enumerate)):
        sp = g.add_parser(name)
        sp.add_argument("--positions", type=int, default=None)
        sp.add_argument("--space", help="space config JSON")
        sp.add_argument("--shared", action="store_true", help="half-shared functions")
        if name == "enumerate":
            sp.add_argument("--limit", type=int, default=None)
            sp.add_argument("--out")
        sp.set_defaults(fn=fn)

    g = groups.add_parser("dataset").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    sp = g.add_parser("gen")
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-class", type=int, default=200)
    sp.add_argument("--points", type=int, default=64)
    sp.add_argument("--noise", type=float, default=0.01)
    sp.add_argument("--val-fraction", type=float, default=0.2)
    sp.add_argument("--rotate", action="store_true")
    seed(sp)
    sp.set_defaults(fn=cmd_dataset_gen)
    sp = g.add_parser("import-off")
    sp.add_argument("root")
    sp.add_argument("--out", required=True)
    sp.add_argument("--points", type=int, default=1024)
    sp.add_argument("--classes", help="comma-separated subset")
    sp.add_argument("--val-fraction", type=float, default=0.2)
    sp.add_argument("--max-per-class", type=int, default=None)
    sp.add_argument("--strict", action="store_true", help="fail on the first bad file")
    seed(sp)
    sp.set_defaults(fn=cmd_dataset_import_off)

    g = groups.add_parser("supernet").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    sp = g.add_parser("train")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--hidden", type=int, default=32)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--genotype", help="train this genotype standalone")
    sp.add_argument("--function-set", help="fix functions (JSON)")
    sp.add_argument("--positions", type=int, default=None)
    sp.add_argument("--space")
    sp.add_argument("--eval-every", type=int, default=5)
    sp.add_argument("--eval-paths", type=int, default=8)
    seed(sp)
    sp.set_defaults(fn=cmd_supernet_train)
    sp = g.add_parser("eval")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--genotype", required=True)
    sp.add_argument("--out")
    seed(sp)
    sp.set_defaults(fn=cmd_supernet_eval)

    g = groups.add_parser("predictor").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    sp = g.add_parser("train")
    sp.add_argument("--out", required=True)
    sp.add_argument("--samples", type=int, default=2000)
    sp.add_argument("--epochs", type=int, default=250)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--split", type=float, default=0.7)
    sp.add_argument("--profiles", default="all")
    sp.add_argument("--gcn-widths", type=_int_list, default=(256, 512, 512))
    sp.add_argument("--mlp-widths", type=_int_list, default=(256, 128))
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--loss", choices=("log", "mape"), default="log")
    sp.add_argument("--space")
    sp.add_argument("--positions", type=int, default=None)
    input_flags(sp)
    seed(sp)
    sp.set_defaults(fn=cmd_predictor_train)
    sp = g.add_parser("eval")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--samples", type=int, default=500)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--profiles", default="all")
    sp.add_argument("--resample-seed", type=int, default=None)
    sp.add_argument("--space")
    sp.add_argument("--positions", type=int, default=None)
    sp.add_argument("--out")
    input_flags(sp)
    seed(sp)
    sp.set_defaults(fn=cmd_predictor_eval)

    g = groups.add_parser("oracle").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    sp = g.add_parser("latency")
    sp.add_argument("--genotype", required=True, help="JSON file or preset:dgcnn")
    sp.add_argument("--profile", default="gpu_like", help="builtin name or JSON file")
    sp.add_argument("--no-memory-check", action="store_true")
    sp.add_argument("--out")
    input_flags(sp)
    sp.set_defaults(fn=cmd_oracle_latency)

    g = groups.add_parser("search").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    for name, fn in (("run", cmd_search_run), ("ablate", cmd_search_ablate)):
        sp = g.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        if name == "ablate":
            sp.add_argument("--seeds", type=int, default=10)
        seed(sp)
        sp.set_defaults(fn=fn)

    g = groups.add_parser("export").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    sp = g.add_parser("dot")
    sp.add_argument("--genotype", required=True)
    sp.add_argument("--name", default="genotype")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_export_dot)
    sp = g.add_parser("json")
    sp.add_argument("--genotype", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_export_json)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        sys.stderr.write("hgnas: --jobs must be >= 1\n")
        return 1
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        sys.stderr.write(f"hgnas: {e}\n")
        return 1
    except OutOfMemory as e:
        sys.stderr.write(f"hgnas: out of memory: {e}\n")
        return 2
    except (RuntimeError, ValueError, OSError, ArithmeticError) as e:
        sys.stderr.write(f"hgnas: {type(e).__name__}: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
