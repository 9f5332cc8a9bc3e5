"""Command line runner: ``roelab <subcommand> --config <path> [--out <dir>] [--threads N]``.

Exit codes: 0 success, 2 invalid input (config, files, preconditions),
3 an invariant violation, named in the message.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from contextlib import nullcontext
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np

from .coarse_space import assemble_box_space, ball_growth_bound, bounded_geometry_profile
from .config import RunConfig, load_config, resolve_out, resolve_threads
from .errors import InvariantViolation, NotEquivariantError, SizeBudgetError, ValidationError
from .expander import (cheeger_bounds, ghost_projection, is_expander_family, kazhdan_table,
                       spectral_gap, write_convergence_csv)
from .groups import CoverMap, cayley_graph
from .lifting import (SCHEMA_VERSION, check_equivariance, check_intertwining, lift_multiplicativity_check,
                      lift_operator, obstruction_data, psi_D, psi_D_inverse, required_cover_radius, tau)
from .operators import ghost_profile, max_abs, random_operator, trace

SUBCOMMANDS = ("build", "expander", "kazhdan", "ghost", "lift", "obstruction", "report")


def load_schema() -> dict:
    text = resources.files("roelab").joinpath(f"schemas/obstruction-{SCHEMA_VERSION}.schema.json").read_text()
    return json.loads(text)


def validate_obstruction(doc: dict) -> None:
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"obstruction document violates schema {SCHEMA_VERSION}: {exc.message}") from None


# -- output helpers ---------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def write_csv(path: Path, header: tuple[str, ...], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def write_json(path: Path, doc) -> None:
    def default(o):
        if isinstance(o, Fraction):
            return str(o)
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(f"not serializable: {type(o).__name__}")

    path.write_text(json.dumps(doc, indent=2, default=default, allow_nan=False) + "\n", encoding="utf-8")


def _box(cfg: RunConfig):
    return assemble_box_space(cfg.chain())


# -- subcommands --------------------------------------------------------------

def cmd_build(cfg: RunConfig, out: Path) -> list[str]:
    box = _box(cfg)
    fam = box.components[0].family
    write_json(out / "build.json", {
        "space": box.name,
        "family": fam.name,
        "moduli": list(cfg.moduli),
        "levels": box.levels,
        "orders": [g.order for g in box.components],
        "expected_orders": [fam.expected_order(m) for m in cfg.moduli],
        "diameters": [int(d) for d in box.diameters],
        "degrees": [g.degree for g in box.components],
    })
    deg = max(g.degree for g in box.components)
    rows = [(R, bounded_geometry_profile(box, R), ball_growth_bound(deg, int(R))) for R in cfg.R_list]
    write_csv(out / "bounded_geometry.csv", ("R", "N_R", "growth_bound"), rows)
    return [f"built {box.name}: {len(box.components)} components, orders {[g.order for g in box.components]}"]


def cmd_expander(cfg: RunConfig, out: Path) -> list[str]:
    box = _box(cfg)
    mu = cfg.mu()
    ok, report = is_expander_family(box, cfg.cheeger_tau)
    rows = []
    for entry, g in zip(report, box.components):
        rho = spectral_gap(g, mu)
        rows.append((entry["level"], g.modulus, g.order, rho, entry["lower"], entry["upper"], entry["exact"]))
    write_csv(out / "expander.csv",
              ("level", "modulus", "N", "rho", "cheeger_lower", "cheeger_upper", "cheeger_exact"), rows)
    write_json(out / "expander.json", {
        "space": box.name,
        "tau": cfg.cheeger_tau,
        "is_expander_family": ok,
        "sup_rho": max(r[3] for r in rows),
        "levels": [{"level": r[0], "N": r[2], "rho": r[3], "cheeger_lower": r[4],
                    "cheeger_upper": r[5], "cheeger_exact": r[6]} for r in rows],
    })
    return [f"expander family at tau={cfg.cheeger_tau}: {ok}; sup rho = {max(r[3] for r in rows):.6g}"]


def cmd_kazhdan(cfg: RunConfig, out: Path) -> list[str]:
    rows = kazhdan_table(_box(cfg), cfg.mu(), cfg.n_values, cfg.p_values, seed=cfg.seed)
    write_convergence_csv(rows, out / "kazhdan.csv")
    return [f"kazhdan table: {len(rows)} rows"]


def cmd_ghost(cfg: RunConfig, out: Path) -> list[str]:
    box = _box(cfg)
    Q = ghost_projection(box, cfg.obstruction.internal_rank)
    rows = []
    for p in cfg.p_values:
        prof = ghost_profile(Q, cfg.R_list, p)
        for R in sorted(cfg.R_list):
            for level, g in zip(box.levels, box.components):
                e = prof.value(R, level)
                b = min(int(np.count_nonzero(g.word_length <= R)), g.order)
                law = b ** (1 - 1 / p) * g.order ** (1 / p - 1)
                rows.append((p, R, level, g.order, e.lower, e.upper, law))
    write_csv(out / "ghost.csv", ("p", "R", "level", "N", "lower", "upper", "law"), rows)
    return [f"ghost profile: {len(rows)} rows"]


def cmd_lift(cfg: RunConfig, out: Path) -> list[str]:
    fam = cfg.group_family()
    lift_cfg, tol = cfg.lift, cfg.tolerances
    results, failures = [], []
    for idx, (m_src, m_tgt) in enumerate(cfg.cover_pairs()):
        cover = CoverMap(cayley_graph(fam, m_src), cayley_graph(fam, m_tgt))
        S = lift_cfg.S
        if S is None:
            S = 0
            while required_cover_radius(S + 1) <= cover.radius:
                S += 1
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(idx,)))
        mult_ok, equi_ok, recon_ok = 0, True, True
        tau_err = inter_err = 0.0
        for _ in range(lift_cfg.trials):
            a = int(rng.integers(0, S + 1))
            b = int(rng.integers(0, S - a + 1))
            A = random_operator(cover.target, a, rng, lift_cfg.block_dim)
            B = random_operator(cover.target, b, rng, lift_cfg.block_dim)
            mult_ok += lift_multiplicativity_check(A, B, cover, S, atol=tol.algebra)
            L = lift_operator(A, cover, S)
            try:
                check_equivariance(L.op, cover)
            except NotEquivariantError:
                equi_ok = False
            tau_err = max(tau_err, abs(tau(L) - trace(A)))
            back = psi_D_inverse(psi_D(L)).op.to_sparse()
            recon_ok &= max_abs(back - L.op.to_sparse()) == 0
            inter_err = max(inter_err, check_intertwining(A, L, seed=int(rng.integers(2**31))))
        res = {
            "source": cover.source.name, "target": cover.target.name, "deck_order": cover.deck_order,
            "cover_radius": cover.radius, "S": S, "trials": lift_cfg.trials,
            "multiplicative": mult_ok, "equivariant": equi_ok, "max_trace_error": tau_err,
            "reconstruction_exact": bool(recon_ok), "max_intertwining_error": inter_err,
        }
        results.append(res)
        if mult_ok < lift_cfg.trials:
            failures.append(("lift multiplicativity", f"{cover!r}: {lift_cfg.trials - mult_ok} failing pairs"))
        if not equi_ok:
            failures.append(("lift equivariance", repr(cover)))
        if tau_err > tol.algebra:
            failures.append(("trace compatibility tau(lift S) = Tr S", f"{cover!r}: error {tau_err:.3g}"))
        if not recon_ok:
            failures.append(("psi_D reconstruction", repr(cover)))
        if inter_err > tol.intertwining:
            failures.append(("cover intertwining", f"{cover!r}: error {inter_err:.3g}"))
    write_json(out / "lift.json", {"covers": results})
    if failures:
        raise InvariantViolation(failures[0][0], failures[0][1])
    return [f"lift {r['source']} -> {r['target']} (S={r['S']}): {r['multiplicative']}/{r['trials']} "
            "multiplicative, equivariant, traces and reconstruction exact" for r in results]


def cmd_obstruction(cfg: RunConfig, out: Path) -> list[str]:
    ob = cfg.obstruction
    n = ob.n if ob.n is not None else cfg.n_range[1]
    p = ob.p if ob.p is not None else cfg.p_values[0]
    n_values = list(range(min(cfg.n_range[0], n), n + 1))
    doc = obstruction_data(_box(cfg), cfg.mu(), n, p, cfg.ball_radius, seed=cfg.seed,
                           internal_rank=ob.internal_rank, n_values=n_values, c=ob.c,
                           decay_target=ob.decay_target)
    validate_obstruction(doc)
    write_json(out / "obstruction.json", doc)
    return [doc["summary"]]


# -- report -----------------------------------------------------------------

def _read_csv(path: Path, required: tuple[str, ...]) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, csv.Error, UnicodeDecodeError) as exc:
        raise ValidationError(f"cannot read {path.name}: {exc}") from None
    if not rows or any(col not in rows[0] for col in required):
        raise ValidationError(f"{path.name} is empty or lacks columns {list(required)}")
    return rows


def _float(row: dict, key: str, path: Path) -> float:
    try:
        return float(row[key])
    except (TypeError, ValueError):
        raise ValidationError(f"{path.name}: bad value {row.get(key)!r} in column {key}") from None


def decay_fit(rows: list[dict], path: Path) -> list[tuple]:
    """Per (level, p): least-squares slope of log(upper) against n."""
    groups: dict[tuple, list] = {}
    for r in rows:
        key = (int(_float(r, "level", path)), _float(r, "p", path))
        groups.setdefault(key, []).append((_float(r, "n", path), _float(r, "upper", path), _float(r, "rho", path)))
    out = []
    for (level, p), pts in sorted(groups.items()):
        pts = [t for t in pts if t[1] > 0]
        if len(pts) < 2:
            continue
        n = np.array([t[0] for t in pts])
        y = np.log([t[1] for t in pts])
        slope = float(np.polyfit(n, y, 1)[0])
        rho = pts[0][2]
        out.append((level, p, slope, float(np.exp(slope)), rho, abs(np.exp(slope) - rho) / rho if rho else None))
    return out


def cmd_report(cfg: RunConfig, out: Path) -> list[str]:
    if not out.is_dir():
        raise ValidationError(f"run directory {out} does not exist")
    lines: list[str] = []
    found = False
    path = out / "build.json"
    if path.exists():
        found = True
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            lines.append(f"space {doc['space']}: orders {doc['orders']}, diameters {doc['diameters']}")
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationError(f"build.json is corrupt: {exc}") from None
    path = out / "expander.csv"
    if path.exists():
        found = True
        rows = _read_csv(path, ("level", "N", "rho"))
        plot = [(int(r["level"]), int(r["N"]), _float(r, "rho", path), 1 - _float(r, "rho", path)) for r in rows]
        write_csv(out / "plot_gaps.csv", ("level", "N", "rho", "gap"), plot)
        lines.append("spectral gaps 1 - rho: " + ", ".join(f"{g:.4g}" for *_, g in plot))
    path = out / "kazhdan.csv"
    if path.exists():
        found = True
        rows = _read_csv(path, ("level", "N", "n", "p", "lower", "upper", "interp_bound", "rho"))
        write_csv(out / "plot_kazhdan.csv", ("n", "level", "p", "lower", "upper"),
                  [(int(r["n"]), int(r["level"]), _float(r, "p", path), _float(r, "lower", path),
                    _float(r, "upper", path)) for r in rows])
        fits = decay_fit(rows, path)
        write_csv(out / "decay_fit.csv", ("level", "p", "slope", "rho_fit", "rho", "relative_error"), fits)
        for level, p, slope, rho_fit, rho, _ in fits:
            lines.append(f"level {level} p={p:g}: decay rate {rho_fit:.6g} per step (rho = {rho:.6g})")
    path = out / "ghost.csv"
    if path.exists():
        found = True
        rows = _read_csv(path, ("p", "R", "level", "upper"))
        write_csv(out / "plot_ghost.csv", ("level", "R", "p", "value"),
                  [(int(r["level"]), _float(r, "R", path), _float(r, "p", path), _float(r, "upper", path))
                   for r in rows])
        lines.append(f"ghost profile: {len(rows)} values")
    path = out / "lift.json"
    if path.exists():
        found = True
        try:
            covers = json.loads(path.read_text(encoding="utf-8"))["covers"]
            for c in covers:
                lines.append(f"lift {c['source']} -> {c['target']}: {c['multiplicative']}/{c['trials']} multiplicative")
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationError(f"lift.json is corrupt: {exc}") from None
    path = out / "obstruction.json"
    if path.exists():
        found = True
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"obstruction.json is corrupt: {exc}") from None
        validate_obstruction(doc)
        ae, ln = doc["approx_error"], doc["lift_norm"]
        write_csv(out / "plot_obstruction.csv", ("n", "level", "approx_lower", "approx_upper"),
                  [(n, level, lo, hi) for n, los, his in zip(ae["n"], ae["lower"], ae["upper"])
                   for level, lo, hi in zip(doc["levels"], los, his)])
        write_csv(out / "plot_lift.csv", ("n", "lift_lower", "lift_upper"),
                  list(zip(ln["n"], ln["lower"], ln["upper"])))
        lines.append(doc["summary"])
    if not found:
        raise ValidationError(f"no run artifacts found in {out}")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return lines


COMMANDS: dict[str, Callable[[RunConfig, Path], list[str]]] = {
    "build": cmd_build,
    "expander": cmd_expander,
    "kazhdan": cmd_kazhdan,
    "ghost": cmd_ghost,
    "lift": cmd_lift,
    "obstruction": cmd_obstruction,
    "report": cmd_report,
}


def _thread_limit(threads: int | None):
    if threads is None:
        return nullcontext()
    if threads < 1:
        raise ValidationError("thread count must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def run(config: RunConfig | str | Path, subcommand: str, out: str | Path | None = None,
        threads: int | None = None) -> int:
    """Execute one subcommand; returns the process exit code."""
    try:
        cfg = config if isinstance(config, RunConfig) else load_config(config)
        if subcommand not in COMMANDS:
            raise ValidationError(f"unknown subcommand {subcommand!r}")
        out_dir = resolve_out(cfg, None if out is None else str(out))
        if subcommand != "report":
            out_dir.mkdir(parents=True, exist_ok=True)
        with _thread_limit(resolve_threads(threads)):
            lines = COMMANDS[subcommand](cfg, out_dir)
    except InvariantViolation as exc:
        print(f"roelab: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, SizeBudgetError) as exc:
        print(f"roelab: error: {exc}", file=sys.stderr)
        return 2
    for line in lines:
        print(line)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="roelab", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="YAML or JSON run configuration")
    parser.add_argument("--out", help="output directory (overrides ROELAB_OUT and the config)")
    parser.add_argument("--threads", type=int, help="BLAS thread limit (overrides ROELAB_THREADS)")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    return run(args.config, args.subcommand, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
