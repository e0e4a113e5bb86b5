"""``sot-head`` command line: gradient checks, the deflation-vs-SVD oracle,
normalization benchmarks, toy training and the fusion x pooling grid.

Usage::

    sot-head <gradcheck|prop1|bench|train|pool-compare> [--config FILE]
             [--seed N] [--out PATH] [key=value ...]

Config files hold ``key=value`` lines with ``#`` comments; command-line pairs
override them. Exit codes: 0 success, 1 a check failed, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import io
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, SotError
from .gradcheck import max_relative_error, numerical_grad
from .linalg import frobenius_norm, read_matrix_csv, svd
from .model import OptimSettings, SynthTaskSpec, ToyModelConfig, train
from .normalization import (
    SvpnConfig,
    deflation_sequence,
    svpn_approx,
    svpn_approx_backward,
    svpn_approx_forward,
    svpn_exact,
    svpn_exact_backward,
)
from .pooling import pooled_size
from .seeding import STREAM_INSTANCES, rng_for

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------------------
# configuration


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _strs(s: str) -> tuple:
    return tuple(x.strip() for x in s.split(",") if x.strip())


_MODEL_KEYS = {
    f.name: (type(f.default) if f.default is not None else int, f.default)
    for f in fields(ToyModelConfig)
    if f.name != "seed"
}
_MODEL_KEYS["input_dim"] = (int, 0)
_TASK_KEYS = {"task": (str, "covariance_task"), "noise": (float, 0.5)}
_OPTIM_KEYS = {f.name: (type(f.default), f.default) for f in fields(OptimSettings)}

SCHEMA = {
    "gradcheck": {
        "n": (int, 20),
        "tol": (float, 1e-4),
        "h": (float, 1e-5),
        "min_size": (int, 3),
        "max_size": (int, 8),
        "alphas": (_floats, (0.3, 0.5, 0.7)),
        "min_gap": (float, 0.1),
        "approx_r": (_ints, (1, 2)),
        "approx_iters": (int, 3),
        "degenerate": (_bool, True),
    },
    "prop1": {
        "n": (int, 10),
        "rows": (int, 5),
        "cols": (int, 7),
        "iters": (int, 200),
        "tol": (float, 1e-6),
        "matrix": (str, ""),
    },
    "bench": {
        "sizes": (_ints, (16, 32, 64)),
        "repeats": (int, 200),
        "alpha": (float, 0.5),
        "error_size": (int, 16),
        "error_r": (_ints, (1, 2, 3, 4, 6, 8)),
        "error_iters": (_ints, (1, 3, 10, 200)),
    },
    "train": {**_MODEL_KEYS, **_TASK_KEYS, **_OPTIM_KEYS, "steps": (int, 500), "loss_csv": (str, "")},
    "pool-compare": {
        **{k: v for k, v in _MODEL_KEYS.items() if k not in ("scheme", "pooling")},
        **_TASK_KEYS,
        **_OPTIM_KEYS,
        "steps": (int, 300),
        "schemes": (_strs, ("sum", "concat", "aggr_all", "late")),
        "poolings": (_strs, ("gap", "gcp", "mgcrp")),
    },
}


def parse_pairs(lines, source: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected key=value, got {raw.strip()!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class RunConfig:
    command: str
    seed: int
    values: dict
    out: str | None = None

    @classmethod
    def resolve(cls, command, pairs: dict[str, str], seed=0, out=None) -> "RunConfig":
        schema = SCHEMA[command]
        unknown = sorted(set(pairs) - set(schema))
        if unknown:
            raise ConfigurationError(f"unknown keys for {command}: {', '.join(unknown)}")
        values = {}
        for key, (conv, default) in schema.items():
            if key in pairs:
                try:
                    values[key] = conv(pairs[key])
                except ValueError as exc:
                    raise ConfigurationError(f"bad value for {key}: {exc}") from exc
            else:
                values[key] = default
        return cls(command, seed, values, out)

    def resolved(self) -> dict:
        d = {"command": self.command, "seed": self.seed}
        for k, v in self.values.items():
            d[k] = ",".join(str(x) for x in v) if isinstance(v, tuple) else v
        return d

    def __getitem__(self, key):
        return self.values[key]


@dataclass
class Report:
    config: dict
    rows: list = field(default_factory=list)
    columns: tuple = ()
    summary: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK

    def to_text(self) -> str:
        buf = io.StringIO()
        if self.columns:
            for k, v in self.config.items():
                buf.write(f"# config.{k}={v}\n")
            for k, v in self.summary.items():
                buf.write(f"# {k}={_fmt(v)}\n")
            buf.write(",".join(self.columns) + "\n")
            for row in self.rows:
                buf.write(",".join(_fmt(row.get(c, "")) for c in self.columns) + "\n")
        else:
            for k, v in self.config.items():
                buf.write(f"config.{k}={v}\n")
            for k, v in self.summary.items():
                buf.write(f"{k}={_fmt(v)}\n")
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}" if abs(v) >= 1e-3 or v == 0 else f"{v:.3e}"
    return str(v)


# ---------------------------------------------------------------------------
# instance generation


def _well_separated(rng, rows, cols, min_gap):
    """Gaussian matrix whose singular values (and the smallest one) differ by more than ``min_gap``."""
    for _ in range(1000):
        q = rng.standard_normal((rows, cols))
        s = np.linalg.svd(q, compute_uv=False)
        gaps = np.append(-np.diff(s), s[-1])
        if gaps.min() > min_gap:
            return q
    raise ConfigurationError(f"could not draw a {rows}x{cols} matrix with singular gap > {min_gap}")


def _degenerate_instance(rng, rows, cols):
    k = min(rows, cols)
    u, _ = np.linalg.qr(rng.standard_normal((rows, k)))
    v, _ = np.linalg.qr(rng.standard_normal((cols, k)))
    s = np.linspace(2.0, 1.0, k)
    s[1] = s[0]  # tie between the two largest values
    return (u * s) @ v.T


def _fd_exact(q, alpha, g, h):
    _, factors = svpn_exact(q, alpha)
    res = svpn_exact_backward(factors, alpha, g)
    qq = q.copy()
    num = numerical_grad(lambda: float(np.sum(g * svpn_exact(qq, alpha)[0])), qq, h)
    return max_relative_error(res.grad, num), res.degenerate


def _fd_approx(q, cfg, g, h):
    _, cache = svpn_approx_forward(q, cfg)
    an = svpn_approx_backward(cache, g)
    qq = q.copy()
    num = numerical_grad(lambda: float(np.sum(g * svpn_approx(qq, cfg))), qq, h)
    return max_relative_error(an, num)


def cmd_gradcheck(cfg: RunConfig) -> Report:
    """Finite-difference suites for the exact and approximate svPN backwards."""
    cols = ("instance", "suite", "rows", "cols", "alpha", "r", "iters", "max_rel_error", "status")
    rep = Report(cfg.resolved(), columns=cols)
    lo, hi = cfg["min_size"], cfg["max_size"]
    if lo < 1 or hi < lo:
        raise ConfigurationError("need 1 <= min_size <= max_size")
    alphas = cfg["alphas"]
    failures = 0
    for i in range(cfg["n"]):
        rng = rng_for(cfg.seed, STREAM_INSTANCES, i)
        m, n = (int(x) for x in rng.integers(lo, hi + 1, size=2))
        q = _well_separated(rng, m, n, cfg["min_gap"])
        g = rng.standard_normal((m, n))
        alpha = alphas[i % len(alphas)]
        err, _ = _fd_exact(q, alpha, g, cfg["h"])
        ok = err < cfg["tol"]
        failures += not ok
        rep.rows.append(dict(instance=i, suite="exact", rows=m, cols=n, alpha=alpha, r="", iters="",
                             max_rel_error=err, status="pass" if ok else "FAIL"))
        r = min(cfg["approx_r"][i % len(cfg["approx_r"])], m, n)
        acfg = SvpnConfig(alpha, r, cfg["approx_iters"])
        err = _fd_approx(q, acfg, g, cfg["h"])
        ok = err < cfg["tol"]
        failures += not ok
        rep.rows.append(dict(instance=i, suite="approx", rows=m, cols=n, alpha=alpha, r=r,
                             iters=cfg["approx_iters"], max_rel_error=err, status="pass" if ok else "FAIL"))
    if cfg["degenerate"] and cfg["n"] > 0:
        rng = rng_for(cfg.seed, STREAM_INSTANCES, cfg["n"])
        q = _degenerate_instance(rng, 4, 3)
        g = rng.standard_normal(q.shape)
        err, degenerate = _fd_exact(q, alphas[0], g, cfg["h"])
        status = "skipped-degenerate" if degenerate else ("pass" if err < cfg["tol"] else "FAIL")
        failures += status == "FAIL"
        rep.rows.append(dict(instance=cfg["n"], suite="exact", rows=4, cols=3, alpha=alphas[0], r="",
                             iters="", max_rel_error=err, status=status))
    errs = [r["max_rel_error"] for r in rep.rows if r["status"] != "skipped-degenerate"]
    rep.summary = {"instances": len(rep.rows), "failures": failures,
                   "max_rel_error": max(errs) if errs else 0.0}
    rep.exit_code = EXIT_FAIL if failures else EXIT_OK
    return rep


def cmd_prop1(cfg: RunConfig) -> Report:
    """Compare deflated power-iteration values with the SVD spectrum."""
    cols = ("instance", "seed", "rows", "cols", "index", "svd_value", "power_value", "abs_error")
    rep = Report(cfg.resolved(), columns=cols)
    if cfg["matrix"]:
        instances = [(0, read_matrix_csv(cfg["matrix"]))]
    else:
        instances = []
        for i in range(cfg["n"]):
            rng = rng_for(cfg.seed, STREAM_INSTANCES, i)
            instances.append((i, rng.standard_normal((cfg["rows"], cfg["cols"]))))
    worst = 0.0
    for i, q in instances:
        exact = svd(q).s
        est = [t.value for t in deflation_sequence(q, len(exact), cfg["iters"])]
        for k, (a, b) in enumerate(zip(exact, est)):
            err = abs(a - b)
            worst = max(worst, err)
            rep.rows.append(dict(instance=i, seed=f"{cfg.seed}/{STREAM_INSTANCES}/{i}", rows=q.shape[0],
                                 cols=q.shape[1], index=k + 1, svd_value=repr(float(a)),
                                 power_value=repr(float(b)), abs_error=err))
    rep.summary = {"instances": len(instances), "max_abs_error": worst}
    rep.exit_code = EXIT_FAIL if worst > cfg["tol"] else EXIT_OK
    return rep


def _throughput(fn, repeats):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return repeats / (time.perf_counter() - t0)


def cmd_bench(cfg: RunConfig) -> Report:
    """Throughput of exact vs (1,1) approximate svPN, and approximation error vs (r, iters)."""
    cols = ("table", "size", "method", "r", "iters", "hz", "speedup", "rel_error")
    rep = Report(cfg.resolved(), columns=cols)
    alpha = cfg["alpha"]
    for size in cfg["sizes"]:
        rng = rng_for(cfg.seed, STREAM_INSTANCES, size)
        q = rng.standard_normal((size, size))
        hz_exact = _throughput(lambda: svpn_exact(q, alpha), cfg["repeats"])
        one = SvpnConfig(alpha, 1, 1)
        hz_approx = _throughput(lambda: svpn_approx(q, one), cfg["repeats"])
        rep.rows.append(dict(table="speed", size=size, method="exact", hz=hz_exact, speedup=1.0))
        rep.rows.append(dict(table="speed", size=size, method="approx", r=1, iters=1, hz=hz_approx,
                             speedup=hz_approx / hz_exact))
        rep.summary[f"speedup_{size}"] = hz_approx / hz_exact
    size = cfg["error_size"]
    rng = rng_for(cfg.seed, STREAM_INSTANCES, 10_000 + size)
    q = rng.standard_normal((size, size))
    exact, _ = svpn_exact(q, alpha)
    ref = frobenius_norm(exact)
    for r in cfg["error_r"]:
        if r > size:
            continue
        for iters in cfg["error_iters"]:
            approx = svpn_approx(q, SvpnConfig(alpha, r, iters))
            rep.rows.append(dict(table="error", size=size, method="approx", r=r, iters=iters,
                                 rel_error=frobenius_norm(approx - exact) / ref))
    top = max(cfg["error_iters"], default=0)
    errs = [r["rel_error"] for r in rep.rows if r["table"] == "error" and r["iters"] == top]
    rep.summary["error_monotone_in_r"] = all(a > b for a, b in zip(errs, errs[1:]))
    rep.summary["full_scale_reference_speedup"] = "~20x (full-scale, GPU); desk-scale ratio is measured above"
    return rep


def _model_cfg(cfg: RunConfig, **over) -> ToyModelConfig:
    kw = {k: cfg[k] for k in _MODEL_KEYS if k in cfg.values}
    kw.update(over)
    kw["input_dim"] = kw.get("input_dim") or None
    return ToyModelConfig(seed=cfg.seed, **kw)


def _task(cfg: RunConfig, model: ToyModelConfig) -> SynthTaskSpec:
    return SynthTaskSpec(cfg["task"], model.class_count, model.d_in, model.seq_len, cfg["noise"], cfg.seed)


def _optim(cfg: RunConfig) -> OptimSettings:
    return OptimSettings(**{k: cfg[k] for k in _OPTIM_KEYS})


def cmd_train(cfg: RunConfig) -> Report:
    model = _model_cfg(cfg)
    result = train(model, _task(cfg, model), cfg["steps"], _optim(cfg))
    rep = Report(cfg.resolved())
    rep.summary = {k: v for k, v in result.summary().items() if not k.startswith(("config.", "optim."))}
    if cfg["loss_csv"]:
        Path(cfg["loss_csv"]).write_text(result.loss_csv())
    rep.exit_code = EXIT_OK if result.status == "ok" else EXIT_FAIL
    return rep


def cmd_pool_compare(cfg: RunConfig) -> Report:
    """Train every fusion scheme x pooling cell plus the class-token baseline."""
    cols = ("cell", "scheme", "pooling", "repr_size", "status", "train_accuracy", "test_accuracy", "diagnostic")
    rep = Report(cfg.resolved(), columns=cols)
    cells = [("sum", "none")] + [(s, p) for s in cfg["schemes"] for p in cfg["poolings"]]
    for idx, (scheme, pooling) in enumerate(cells):
        model = _model_cfg(cfg, scheme=scheme, pooling=pooling)
        if pooling == "mgcrp":
            size = model.mgcrp_heads * model.mgcrp_m * model.mgcrp_n
        elif pooling == "none":
            size = model.token_dim
        else:
            size = pooled_size(pooling, model.token_dim)
        try:
            result = train(model, _task(cfg, model), cfg["steps"], _optim(cfg))
            status, diag = result.status, result.diagnostic
            tr, te = result.train_accuracy, result.test_accuracy
        except SotError as exc:
            status, diag, tr, te = "failed", str(exc), float("nan"), float("nan")
        rep.rows.append(dict(cell=idx, scheme=scheme, pooling="classT-only" if pooling == "none" else pooling,
                             repr_size=size, status=status, train_accuracy=tr, test_accuracy=te,
                             diagnostic=diag.replace(",", ";")))
    rep.summary = {"cells": len(cells), "failed": sum(r["status"] != "ok" for r in rep.rows)}
    return rep


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "prop1": cmd_prop1,
    "bench": cmd_bench,
    "train": cmd_train,
    "pool-compare": cmd_pool_compare,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sot-head", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="key=value file; command-line pairs override it")
    ap.add_argument("--seed", type=int, default=None, help="64-bit run seed (default 0)")
    ap.add_argument("--out", help="write the report here instead of stdout")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("pairs", nargs="*", metavar="key=value")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_intermixed_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        pairs = {}
        if args.config:
            pairs.update(parse_pairs(Path(args.config).read_text().splitlines(), args.config))
        pairs.update(parse_pairs(args.pairs, "argv"))
        seed = args.seed
        if "seed" in pairs:
            file_seed = int(pairs.pop("seed"))
            seed = file_seed if seed is None else seed
        run = RunConfig.resolve(args.command, pairs, seed or 0, args.out)
        report = COMMANDS[args.command](run)
    except (ConfigurationError, OSError, ValueError) as exc:
        print(f"sot-head: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SotError as exc:
        print(f"sot-head: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
