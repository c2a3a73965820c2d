"""Batch entry points: data generation, training, evaluation, querying,
self-intersection repair, benchmarking and grid export.

Every command accepts ``--config FILE`` with ``key=value`` lines (``#`` starts
a comment). Flags given on the command line override the file, unknown keys
are rejected, and the effective settings are echoed into the JSON report.
Exit codes: 0 success, 2 contract violation, 3 I/O or format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import body as B
from . import formats as F
from . import interact as I
from . import oracle as O
from . import training as TR
from .errors import ArchitectureMismatch, ContractViolation, FormatError, RejectedInput, TrainingDiverged
from .numerics import T
from .volsdf import MODES, VolumetricSDF

log = logging.getLogger("avsdf")

REPORT_SCHEMA_VERSION = 1
BENCH_MIX_VERSION = 1
BENCH_FAR_MARGIN = 0.5  # metres added around the body bounds for the far half


class UsageError(ContractViolation):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# configuration


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def read_config_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_config(parser: argparse.ArgumentParser, ns: argparse.Namespace) -> dict:
    """Defaults, then config file, then explicit flags."""
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}
    eff = {k: a.default for k, a in actions.items()}
    if getattr(ns, "config", None):
        for key, value in read_config_file(ns.config).items():
            if key not in actions:
                raise UsageError(f"unknown config key: {key}")
            a = actions[key]
            if a.nargs in ("*", "+"):
                value = [a.type(v) if a.type else v for v in value.split()]
            elif a.type is not None:
                try:
                    value = a.type(value)
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"bad value for {key}: {value!r}") from exc
            eff[key] = value
    for key in actions:
        v = getattr(ns, key, None)
        if v is not None:
            eff[key] = v
    return eff


def _threads(cfg: dict) -> int:
    n = cfg.get("threads")
    if n is None:
        n = int(os.environ.get("AVSDF_THREADS", "1"))
    if n < 1:
        raise UsageError("threads must be at least 1")
    # the query and training kernels are serial, so every thread count takes
    # the deterministic path; the value is recorded for provenance
    return n


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_report(path, report: dict) -> None:
    text = _dump(report)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _report(command: str, cfg: dict, **body) -> dict:
    return {"schema_version": REPORT_SCHEMA_VERSION, "command": command, "config": cfg, **body}


def schema_path(name: str = "repair_report.schema.json"):
    return resources.files("avsdf") / "data" / name


def demo_poses() -> list:
    text = (resources.files("avsdf") / "data" / "demo_poses.json").read_text()
    return json.loads(text)["poses"]


# --------------------------------------------------------------------------
# shared loaders


def _load_model(cfg: dict):
    if cfg.get("ckpt"):
        state = TR.load_checkpoint(cfg["ckpt"])
        return state.model, state.config.padding
    spec = TR.TrainConfig(rank=cfg.get("rank", 80), width=cfg.get("width", 64)).spec()
    return VolumetricSDF(spec, seed=cfg["seed"]), B.DEFAULT_PADDING


def _load_body(cfg: dict, padding: float):
    """``--body FILE`` or a seeded synthetic body; returns (body, clouds, gt)."""
    if cfg.get("body"):
        return B.load_external_body(cfg["body"], padding=padding)
    s = TR.fixed_body(cfg["seed"], padding, cfg.get("cloud_points", O.DEFAULT_CLOUD_SIZE))
    return s.body, s.clouds, None


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict) -> dict:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg["seed"], 21])
    files = []
    for i in range(cfg["count"]):
        beta, theta = TR.random_params(rng)
        body = B.forward_kinematics(beta, theta, padding=cfg["padding"])
        local_rng = np.random.default_rng([cfg["seed"], 22, i])
        clouds = O.sample_surface(body, cfg["cloud_points"], local_rng)
        uni, near = O.eval_points(body, local_rng, cfg["gt_uniform"], cfg["gt_surface"])
        pts = np.concatenate([uni, near]).astype(np.float32)
        gt = np.concatenate([pts, O.gt_sdf(pts, body)[:, None].astype(np.float32)], axis=1)
        path = out / f"body_{i:05d}.avsb"
        F.write_body(path, B.to_external(body, clouds, gt))
        files.append(path.name)
    return _report("gen-data", cfg, files=files)


def _train_config(cfg: dict) -> TR.TrainConfig:
    keys = {f.name for f in fields(TR.TrainConfig)}
    return TR.TrainConfig(**{k: v for k, v in cfg.items() if k in keys}).validate()


def cmd_train(cfg: dict) -> dict:
    tcfg = _train_config(cfg)
    state = TR.load_checkpoint(cfg["resume"], expect=tcfg) if cfg.get("resume") else None
    if state is not None:
        state.config = tcfg
    state = TR.fit(tcfg, state=state)
    TR.save_checkpoint(cfg["out"], state)
    hist = state.history
    every = max(1, tcfg.log_every)
    return _report("train", cfg, steps=state.step, final_loss=hist[-1] if hist else None,
                   loss_curve=[[i + 1, hist[i]] for i in range(every - 1, len(hist), every)])


def _eval_items(cfg: dict, padding: float):
    """External body files, or held-out synthetic bodies when none are given."""
    if cfg.get("bodies"):
        paths = []
        for p in cfg["bodies"]:
            p = Path(p)
            paths += sorted(p.glob("*.avsb")) if p.is_dir() else [p]
        return [("file", p) for p in paths]
    pool = TR.body_pool(cfg["count"], cfg["seed"] + 1_000_003, padding)
    return [("synthetic", s) for s in pool]


def cmd_eval(cfg: dict) -> dict:
    if cfg["mode"] not in MODES:
        raise UsageError(f"mode must be one of {MODES}")
    model, padding = _load_model(cfg)
    reports, sources = [], []
    for i, (kind, item) in enumerate(_eval_items(cfg, padding)):
        if kind == "file":
            body, clouds, gt = B.load_external_body(item, padding=padding)
            if gt is None:
                raise FormatError(f"{item} has no ground-truth samples")
            cond = model.prepare(body, clouds)
            f = model.sdf_function(body, cond, cfg["mode"])
            n_uni = len(gt) // 2
            reports.append(O.score_samples(f, gt[:, :3], gt[:, 3], n_uni))
            sources.append(str(item))
        else:
            cond = model.prepare(item.body, item.clouds)
            rng = np.random.default_rng([cfg["seed"], 11, i])
            reports.append(O.evaluate(model.sdf_function(item.body, cond, cfg["mode"]), item.body,
                                      rng, cfg["n_uniform"], cfg["n_surface"]))
            sources.append(f"synthetic:{i}")
    if not reports:
        raise UsageError("no bodies to evaluate")
    mean = O.mean_reports(reports)
    return _report("eval", cfg, bodies=sources, metrics=asdict(mean),
                   per_body=[asdict(r) for r in reports])


def cmd_query(cfg: dict) -> dict:
    if cfg["mode"] not in MODES:
        raise UsageError(f"mode must be one of {MODES}")
    model, padding = _load_model(cfg)
    body, clouds, _ = _load_body(cfg, padding)
    pts = F.read_points(cfg["points_file"])
    cond = model.prepare(body, clouds)
    values = model.sdf_function(body, cond, cfg["mode"])(pts)
    F.write_sdf(cfg["out"], np.asarray(values, np.float32))
    return _report("query", cfg, points=int(len(pts)))


def cmd_export_grid(cfg: dict) -> dict:
    model, padding = _load_model(cfg)
    body, clouds, _ = _load_body(cfg, padding)
    cond = model.prepare(body, clouds)
    f = model.sdf_function(body, cond, cfg["mode"])
    O.export_grid(f, body, cfg["resolution"], cfg["out"])
    bounds = O.world_bounds(body)
    if cfg.get("points_out"):
        F.write_points(cfg["points_out"], O.grid_points(bounds, cfg["resolution"]))
    return _report("export-grid", cfg, bounds=bounds.tolist())


def _pose_from_cfg(cfg: dict):
    if cfg.get("pose_file"):
        data = json.loads(Path(cfg["pose_file"]).read_text())
        if "poses" in data:
            data = _pick_pose(data["poses"], cfg.get("pose_name"))
    else:
        data = _pick_pose(demo_poses(), cfg.get("pose_name"))
    beta = np.asarray(data.get("beta", np.zeros(B.N_BETA)), np.float64)
    theta = np.asarray(data["theta"], np.float64)
    if beta.shape != (B.N_BETA,) or theta.shape != (B.K, 3):
        raise UsageError("pose needs beta (10,) and theta (15, 3)")
    return beta, theta


def _pick_pose(poses: list, name):
    if name is None:
        return poses[0]
    for p in poses:
        if p.get("name") == name:
            return p
    raise UsageError(f"no pose named {name!r}")


def cmd_resolve_selfpen(cfg: dict) -> dict:
    beta, theta0 = _pose_from_cfg(cfg)
    rcfg = I.RepairConfig(lr=cfg["lr"], max_iters=cfg["max_iters"],
                          pose_prior_weight=cfg["prior_weight"], selfpen_weight=cfg["selfpen_weight"],
                          samples_per_region=cfg["samples"], literal_sign=cfg["literal_sign"],
                          seed=cfg["seed"])
    if cfg.get("ckpt"):
        state = TR.load_checkpoint(cfg["ckpt"])
        model, padding, name = state.model, state.config.padding, "checkpoint"
        body0 = B.forward_kinematics(beta, theta0, padding=padding)
        clouds = O.sample_surface(body0, O.DEFAULT_CLOUD_SIZE, np.random.default_rng([cfg["seed"], 23]))
    else:
        model, padding, name, clouds = O.CapsuleModel(), B.DEFAULT_PADDING, "capsule", None
    _, rep = I.resolve_selfpen(model, beta, theta0, clouds, rcfg, padding)
    return {**rep.to_dict(), "command": "resolve-selfpen", "config": cfg, "model": name}


def bench_points(body: B.BodyState, n: int, seed: int) -> np.ndarray:
    """Standardized mix: half uniform in the inflated bounds, half near the surface."""
    rng = np.random.default_rng([seed, 31])
    n_far = n // 2
    lo, hi = O.world_bounds(body).astype(np.float64)
    lo, hi = lo - BENCH_FAR_MARGIN, hi + BENCH_FAR_MARGIN
    far = lo + (hi - lo) * rng.random((n_far, 3))
    near = O.sample_near_surface(body, n - n_far, rng) if n - n_far else np.zeros((0, 3))
    return np.concatenate([far, near]).astype(np.float32)


def time_queries(f, pts: np.ndarray, repeat: int, warmup: int = 1) -> list:
    for _ in range(warmup):
        f(pts)
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        f(pts)
        samples.append((time.perf_counter() - t0) * 1e3)
    return samples


def cmd_bench(cfg: dict) -> dict:
    if cfg["repeat"] < 1:
        raise UsageError("repeat must be at least 1")
    modes = ["hybrid", "implicit-only"] if cfg["mode"] == "both" else [cfg["mode"]]
    for m in modes:
        if m not in MODES:
            raise UsageError(f"mode must be one of {MODES} or 'both'")
    model, padding = _load_model(cfg)
    body, clouds, _ = _load_body(cfg, padding)
    pts = bench_points(body, cfg["points"], cfg["seed"])
    cond = model.prepare(body, clouds)
    out = {}
    for m in modes:
        f = model.sdf_function(body, cond, m)
        s = time_queries(f, pts, cfg["repeat"], cfg["warmup"])
        out[m] = {"median_ms": statistics.median(s), "samples_ms": s}
    res = _report("bench", cfg, mix_version=BENCH_MIX_VERSION, points=int(len(pts)), timings=out)
    if len(modes) == 2:
        imp = out["implicit-only"]["median_ms"]
        res["hybrid_over_implicit"] = out["hybrid"]["median_ms"] / imp if imp > 0 else None
    return res


# --------------------------------------------------------------------------
# argument parsing


def _common(p, model=True, body=False):
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="defaults to $AVSDF_THREADS or 1")
    p.add_argument("--report", default=None, help="JSON report path (stdout if omitted)")
    if model:
        p.add_argument("--ckpt", default=None, help="checkpoint; a seeded untrained model if omitted")
        p.add_argument("--rank", type=int, default=80, help="rank of the untrained fallback model")
        p.add_argument("--width", type=int, default=64)
    if body:
        p.add_argument("--body", default=None, help="external body file; a seeded body if omitted")
        p.add_argument("--cloud-points", type=int, default=O.DEFAULT_CLOUD_SIZE)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="avsdf", description="Volumetric body SDF: data, training, queries and pose repair.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write random bodies in the external body format")
    _common(p, model=False)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", default="bodies")
    p.add_argument("--padding", type=float, default=B.DEFAULT_PADDING)
    p.add_argument("--cloud-points", type=int, default=O.DEFAULT_CLOUD_SIZE)
    p.add_argument("--gt-uniform", type=int, default=30_000)
    p.add_argument("--gt-surface", type=int, default=30_000)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p, model=False)
    d = TR.TrainConfig()
    for f in fields(TR.TrainConfig):
        if f.name == "seed":
            continue
        default = getattr(d, f.name)
        typ = _bool if isinstance(default, bool) else type(default)
        p.add_argument("--" + f.name.replace("_", "-"), type=typ, default=default)
    p.add_argument("--out", default="model.avsc")
    p.add_argument("--resume", default=None)

    p = sub.add_parser("eval", help="IoU and SDF errors against ground truth")
    _common(p)
    p.add_argument("--bodies", nargs="*", default=None, help="body files or directories")
    p.add_argument("--count", type=int, default=5, help="held-out synthetic bodies when no files")
    p.add_argument("--mode", default="hybrid")
    p.add_argument("--n-uniform", type=int, default=30_000)
    p.add_argument("--n-surface", type=int, default=30_000)

    p = sub.add_parser("query", help="signed distances for a points file")
    _common(p, body=True)
    p.add_argument("--points-file", required=False, default=None)
    p.add_argument("--out", default="sdf.avsd")
    p.add_argument("--mode", default="hybrid")

    p = sub.add_parser("export-grid", help="dense SDF grid over the body bounds")
    _common(p, body=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", default="grid.avsg")
    p.add_argument("--points-out", default=None, help="also write the lattice as a points file")
    p.add_argument("--mode", default="hybrid")

    p = sub.add_parser("resolve-selfpen", help="repair self-intersections of a pose")
    _common(p, model=False)
    p.add_argument("--ckpt", default=None, help="checkpoint; the exact capsule model if omitted")
    p.add_argument("--pose-file", default=None, help="JSON with beta and theta (shipped demos if omitted)")
    p.add_argument("--pose-name", default=None)
    rc = I.RepairConfig()
    p.add_argument("--lr", type=float, default=rc.lr)
    p.add_argument("--max-iters", type=int, default=rc.max_iters)
    p.add_argument("--prior-weight", type=float, default=rc.pose_prior_weight)
    p.add_argument("--selfpen-weight", type=float, default=rc.selfpen_weight)
    p.add_argument("--samples", type=int, default=rc.samples_per_region)
    p.add_argument("--literal-sign", type=_bool, default=rc.literal_sign)

    p = sub.add_parser("bench", help="median query time on the standardized point mix")
    _common(p, body=True)
    p.add_argument("--points", type=int, default=60_000)
    p.add_argument("--mode", default="both", help="hybrid, implicit-only, full or both")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    return ap


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "query": cmd_query,
    "export-grid": cmd_export_grid, "resolve-selfpen": cmd_resolve_selfpen, "bench": cmd_bench,
}


def _argv_to_flags(argv):
    """Record which options were typed so defaults can be told apart from flags."""
    ap = build_parser()
    for a in ap._actions:
        if isinstance(a, argparse._SubParsersAction):
            for sp in a.choices.values():
                for act in sp._actions:
                    if act.dest not in ("help", "config"):
                        act.default = None
    return ap


def run(argv=None) -> dict:
    """Parse, execute and return the report dict (raises on failure)."""
    ns = _argv_to_flags(argv).parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sub = build_parser()._subparsers._group_actions[0].choices[ns.command]
    cfg = resolve_config(sub, ns)
    cfg["threads"] = _threads(cfg)
    if ns.command == "query" and not cfg.get("points_file"):
        raise UsageError("--points-file is required")
    report_path = cfg.pop("report", None)
    with T.no_grad() if ns.command not in ("train", "resolve-selfpen") else _null():
        report = COMMANDS[ns.command](cfg)
    report["config"] = {**cfg, "report": report_path}
    _write_report(report_path, report)
    return report


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (OSError, FormatError)):
        return 3
    return 2


def main(argv=None) -> int:
    try:
        run(argv)
    except (ContractViolation, RejectedInput, ArchitectureMismatch, TrainingDiverged,
            FormatError, OSError) as exc:
        code = _exit_code(exc)
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if isinstance(exc, TrainingDiverged):
            err["step"] = exc.step
            err["detail"] = exc.detail
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
