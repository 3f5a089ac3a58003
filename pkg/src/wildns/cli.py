"""Command line entry point ``wildns``.

Subcommands: ``verify-identities``, ``simulate-noise``, ``run-scheme``,
``compare-K``, ``glue`` and ``report``.  The exit status is 0 iff every
asserted check passed; failing checks are printed by name.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from . import field as F
from . import geometry as Geo
from . import jets as J
from . import ledger as Led
from . import noise as N
from . import scheme as S

log = logging.getLogger("wildns")


def _check(name: str, ok: bool, detail: str, failures: list) -> None:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if not ok:
        failures.append(name)


def verify_identities(n: int = 16, seed: int = 0) -> list[str]:
    """Exact identities of the building blocks on an n^3 grid; returns failing names."""
    fails: list[str] = []
    rng = np.random.default_rng(seed)
    g = F.Grid3(n)
    ds = Geo.default_direction_set()
    # geometry
    R = np.eye(3) + 0.3 * rng.uniform(-1, 1, (200, 3, 3)) / 3
    R = 0.5 * (R + np.swapaxes(R, -1, -2))
    err = float(np.max(np.abs(Geo.reconstruct(Geo.gamma_squared(R, ds), ds) - R)))
    _check("geometry reconstruction", err <= 1e-10, f"max error {err:.2e}", fails)
    g2 = np.array([float(x) for x in ds.gamma2_id])
    _check("geometry gamma^2(Id)", bool(np.allclose(g2, 0.5, atol=1e-14)), f"values {g2.round(12).tolist()}", fails)
    # inverse divergence
    worst = 0.0
    for _ in range(5):
        v = F.random_field(g, rng)
        Rv = F.inv_divergence(v)
        worst = max(worst, F.norm(F.div_tensor(Rv) - v, "L", 2) / F.norm(v, "L", 2))
    _check("inverse divergence", worst <= 1e-12, f"relative error {worst:.2e}", fails)
    # Leray projection
    v = F.random_field(g, rng)
    Pv = S.leray(v)
    dv = F.norm(F.div(Pv), "L", 2)
    idem = F.norm(S.leray(Pv) - Pv, "L", 2)
    _check("Leray projection", dv <= 1e-12 and idem <= 1e-12, f"|div Pv| {dv:.1e}, |PPv - Pv| {idem:.1e}", fails)
    # jets
    jp = J.desk_jet_params(1, 0.05, 0.9, 10.0)
    bank = J.JetBank(jp, g, normalize=True)
    worst_div = 0.0
    worst_mean = 0.0
    for k in range(6):
        W, Wc, V = bank.fields(k, 0.3)
        s = W + Wc
        worst_div = max(worst_div, F.norm(F.div(s), "L", 2) / max(F.norm(s, "L", 2), 1e-300))
        cc = F.curl(F.curl(V))
        worst_div = max(worst_div, F.norm(cc - s, "L", 2) / max(F.norm(s, "L", 2), 1e-300))
        WW = F.tensor_product(W, W).mean()
        xi = bank.xi(k)
        want = np.array([xi[a] * xi[b] for a, b in F.SYM_PAIRS])
        worst_mean = max(worst_mean, float(np.max(np.abs(WW - want))))
    _check("jets div(W + W^c) and curl curl V", worst_div <= 1e-12, f"relative {worst_div:.1e}", fails)
    _check("jets mean W (x) W (normalised)", worst_mean <= 1e-12, f"max error {worst_mean:.1e}", fails)
    ov = J.support_overlap(jp, n_samples=4000)
    _check("jets disjoint supports", ov["overlap"] == 0.0, f"min distance ratio {ov['min_ratio']:.3f}", fails)
    # amplitudes: cancellation with the mean normalisation
    Rl = 0.05 * rng.standard_normal((6, 4, 4, 4))
    Rl[5] = -Rl[0] - Rl[3]
    rho = S.build_rho_gamma(Rl, 0.1, 0.01)
    asq = S.build_amplitudes(rho, Rl, ds, squared=True)
    dirs = ds.dirs_float
    recon = np.einsum("x...,xa,xb->ab...", asq, dirs, dirs)
    target = rho[None, None] * np.eye(3)[:, :, None, None, None] - _full(Rl)
    e = float(np.max(np.abs(recon - target)) / np.max(np.abs(target)))
    _check("amplitude cancellation", e <= 1e-12, f"relative {e:.1e}", fails)
    return fails


def _full(R: np.ndarray) -> np.ndarray:
    out = np.empty((3, 3, *R.shape[1:]))
    for s, (a, b) in enumerate(F.SYM_PAIRS):
        out[a, b] = R[s]
        out[b, a] = R[s]
    return out


def _level0_report(st: S.IterationState) -> Led.IterationReport:
    vals = st.diagnostics["level0"]["R_L1"]
    bound = st.vb.ML if st.variant == "B" else float("inf")
    return Led.IterationReport(0, st.variant, [{"name": "R0 C_t L1", "value": float(max(vals)), "bound": bound, "zone": "all", "passed": bool(max(vals) <= bound)}])


def _emit_run(res: C.RunResult, cfg: C.RunConfig, out: Path) -> list[Led.IterationReport]:
    reports = [_level0_report(res.states[0])] + [Led.IterationReport.from_dict(r) for r in res.final.reports]
    samples = {s.q: s.diagnostics.get("samples", []) for s in res.states[1:]}
    summary = {
        "config": cfg.to_json(),
        "t_stop": res.t_stop,
        "stopping": res.stopping.to_json() if res.stopping else None,
        "parameter_ledger": res.validation,
    }
    Led.report_emit(reports, out, samples=samples, summary=summary)
    F.write_snapshot(out / "v_final.wns", res.final.v)
    return reports


def _asserted_failures(reports, cfg: C.RunConfig) -> list[str]:
    if cfg.regime != "paper":
        return []
    return [f"level {r.level}: {x['name']}" for r in reports for x in r.rows if not x["passed"]]


def _progress(done: int, total: int) -> None:
    log.info("sample %d/%d", done, total)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="wildns", description="Convex-integration constructions for stochastic Navier-Stokes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-identities", help="exact identities of the building blocks")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)

    for name in ("simulate-noise", "run-scheme", "compare-K", "glue"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--output", type=str)
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=("A", "B"))
        p.add_argument("--levels", type=int, dest="Q_levels")
        p.add_argument("--dt", type=float)
        p.add_argument("--grid-n", type=int, dest="grid_n")
        if name == "compare-K":
            p.add_argument("--K", type=float)
            p.add_argument("--K2", type=float)
    p = sub.add_parser("report", help="print a ledger directory")
    p.add_argument("input", type=Path)

    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (C.ConfigError, S.SchemeError, N.NoiseError, J.JetError, Geo.GeometryError, F.FieldError) as exc:
        print(f"FAIL {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _config(args) -> C.RunConfig:
    keys = ("output", "seed", "variant", "Q_levels", "dt", "grid_n", "K", "K2")
    over = {k: getattr(args, k, None) for k in keys}
    if args.config is not None:
        return C.load_config(args.config, over)
    return C.config_from_dict({k: v for k, v in over.items() if v is not None})


def _dispatch(args) -> int:
    if args.command == "verify-identities":
        t0 = time.time()
        fails = verify_identities(args.n, args.seed)
        print(f"{'all identities hold' if not fails else 'failed: ' + ', '.join(fails)} ({time.time() - t0:.1f} s)")
        return 1 if fails else 0
    if args.command == "report":
        return _report(args.input)
    cfg = _config(args)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "simulate-noise":
        Z = C.simulate_noise(cfg)
        F.write_snapshot(out / "Z.wns", Z)
        C_S = N.sobolev_constant(Z.grid, cfg.stopping.sigma)
        sp = N.stopping_params_A(cfg.a, cfg.b, cfg.beta, C_S, cfg.stopping.delta) if cfg.variant == "A" else N.stopping_params_B(cfg.L, C_S, cfg.stopping.delta)
        rec = N.stopping_time(Z, sp, cfg.variant)
        info = {"C_G": cfg.noise_spec().C_G, "C_S": C_S, "stopping": rec.to_json(), "samples": Z.nt}
        (out / "noise.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        print(json.dumps(info, sort_keys=True))
        return 0
    if args.command == "run-scheme":
        res = C.run_scheme(cfg, progress=_progress)
        reports = _emit_run(res, cfg, out)
        for r in reports:
            for x in r.rows:
                print(f"level {r.level} {'ok  ' if x['passed'] else 'over'} {x['name']}: {x['value']:.4g} (bound {x['bound']:.4g})")
        fails = _asserted_failures(reports, cfg)
        for f in fails:
            print(f"FAIL {f}")
        return 1 if fails else 0
    if args.command == "compare-K":
        K1 = cfg.K
        K2 = cfg.K2
        res = C.compare_K(replace_variant(cfg), K1, K2, progress=_progress)
        res.pop("runs")
        (out / "compare_K.json").write_text(json.dumps(Led._jsonable(res), indent=2, sort_keys=True) + "\n")
        print(json.dumps(Led._jsonable(res), sort_keys=True))
        return 0
    if args.command == "glue":
        res = C.glue_runs(replace_variant(cfg), progress=_progress)
        res.pop("runs")
        (out / "glue.json").write_text(json.dumps(Led._jsonable(res), indent=2, sort_keys=True) + "\n")
        print(json.dumps(Led._jsonable(res), sort_keys=True))
        ok = res["seam_L2"] <= 1e-9
        if not ok:
            print("FAIL seam mismatch")
        return 0 if ok else 1
    raise C.ConfigError(f"unknown command {args.command}")  # pragma: no cover


def replace_variant(cfg: C.RunConfig) -> C.RunConfig:
    from dataclasses import replace

    return replace(cfg, variant="B")


def _report(path: Path) -> int:
    lev = path / "levels.csv"
    if not lev.exists():
        print(f"FAIL no ledger in {path}", file=sys.stderr)
        return 2
    print(lev.read_text(), end="")
    summ = json.loads((path / "summary.json").read_text())
    regime = summ.get("run", {}).get("config", {}).get("regime", "desk")
    bad = [x for x in summ["levels"] if not x["passed"]]
    if regime == "paper" and bad:
        for x in bad:
            print(f"FAIL level {x['level']}")
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
