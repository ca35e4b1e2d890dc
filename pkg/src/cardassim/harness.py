"""Twin-experiment orchestration: POD bases, estimation runs, artifacts, comparisons."""

from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .coupled import (
    CoupledModel,
    CoupledObserverConfig,
    StackedObservation,
    initial_filter,
    observability_gramian,
    sensitivity_curves,
    support_width,
)
from .errors import ConfigurationError, NumericalError, UsageError
from .filters import (
    FilterState,
    ObservationRecord,
    ekf_step,
    physical_params,
    pod_roukf_step,
    roekf_step,
    roukf_step,
    simplex_sigma_points,
    ukf_step,
)
from .pod import PodBasis, SnapshotSet, build_pod, electrical_gram
from .scenario import ObservationTable, TruthRun, TwinScenario, add_noise, NoiseModel, simulate_truth

__all__ = [
    "build_basis",
    "EstimationResult",
    "run_estimation",
    "run_scenario",
    "diagnose",
    "compare_runs",
    "write_table",
    "read_table",
    "write_truth",
    "write_pod",
    "summary_table",
]

SCHEMA = 1


# -- CSV helpers -------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def write_csv(path: Path, kind: str, header, rows) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# cardassim {kind} v{SCHEMA}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: Path, kind: str):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"missing file {path}")
    with path.open() as fh:
        first = fh.readline().strip()
        if not first.startswith(f"# cardassim {kind} "):
            raise UsageError(f"{path} is not a {kind} table (header {first!r})")
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body]) if body else np.zeros((0, len(header)))
    return header, data


def write_table(path: Path, table: ObservationTable, kind: str = "observations") -> None:
    write_csv(path, kind, ("time",) + table.channels, np.column_stack([table.times, table.values]))


def read_table(path: Path, kind: str = "observations") -> ObservationTable:
    header, data = read_csv(path, kind)
    return ObservationTable(data[:, 0], tuple(header[1:]), data[:, 1:])


def write_truth(out: Path, truth: TruthRun) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "truth.csv", "truth", ("time",) + truth.state_names,
              np.column_stack([truth.times, truth.states]))
    write_table(out / "observations_clean.csv", truth.observations)


def _write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- POD ---------------------------------------------------------------------

def snapshots(scn: TwinScenario) -> SnapshotSet:
    """Forward runs of the cable for every configured parameter set."""
    pod = scn.config["pod"]
    period = float(pod["snapshot_period_ms"])
    n_steps = int(round(float(pod["snapshot_duration_ms"]) / period))
    if n_steps < 1:
        raise ConfigurationError("snapshot duration shorter than the sampling period", key="pod.snapshot_duration_ms")
    cols, tags = [], []
    n = scn.cable().n_nodes
    base = scn.ms_base()
    for i, params in enumerate(pod["snapshot_params"]):
        em = scn.electro_model(params=dict(params))
        em = type(em)(em.cable, em.params, em.spec, em.stim, dt_e=em.dt_e, dt_obs=period, monodomain=em.monodomain)
        x = np.concatenate([np.full(n, base.v_min), np.full(n, base.w_max)])
        for k in range(n_steps):
            x = em.step(x, k * period)
            cols.append(x.copy())
            tags.append((i, (k + 1) * period))
    return SnapshotSet.stack(cols, tags)


def build_basis(scn: TwinScenario, rank: int | None = None) -> PodBasis | None:
    pod = scn.config["pod"]
    r = int(pod["rank"] if rank is None else rank)
    if r == 0:
        return None
    gram = electrical_gram(scn.cable().lumped_mass(), pod["gram"], float(pod["w_scale"]))
    basis = build_pod(snapshots(scn), r, gram)
    basis.meta.update(gram=pod["gram"], w_scale=float(pod["w_scale"]))
    return basis


def write_pod(path: Path, basis: PodBasis) -> Path:
    """Modes as columns; singular values go to a ``<stem>_sv.csv`` sidecar."""
    path = Path(path)
    gram = basis.meta.get("gram", "custom")
    with path.open("w", newline="") as fh:
        fh.write(f"# pod rank={basis.rank} gram={gram}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"mode_{i}" for i in range(basis.rank)])
        for row in basis.phi:
            w.writerow([_fmt(v) for v in row])
    side = path.with_name(path.stem + "_sv.csv")
    write_csv(side, "singular-values", ("index", "singular_value"),
              [(i, s) for i, s in enumerate(basis.singular_values)])
    return side


# -- estimation --------------------------------------------------------------

@dataclass
class EstimationResult:
    times: np.ndarray
    p: np.ndarray              # (n_steps, k) reparametrized estimates
    theta: np.ndarray          # physical estimates
    innov_e: np.ndarray
    innov_m: np.ndarray
    lam_u: np.ndarray
    final: FilterState
    HL: list
    L_reduced: list
    weights: list
    n_ecg: int
    basis_rank: int
    y_e_mean: float
    y_m_mean: float


def _observation_setup(scn: TwinScenario, model, mode: str):
    ecg, mech = scn.observation_ops(model)
    if mode == "ecg":
        return ecg, ecg, None
    if mode == "mech":
        return mech, None, mech
    return StackedObservation([ecg, mech]), ecg, mech


def records_from_table(scn: TwinScenario, table: ObservationTable, obs_op, ecg, mech):
    """Filter records on the window grid plus the displacement data held per window.

    Channels marked ``nan`` get zero weight.  The held data of a window is the
    latest displacement observation at or before the window end.
    """
    start = float(scn.config["observations"]["start_ms"])
    e_vals = table.columns("lead_")
    m_vals = table.columns("disp_")
    recs, held_seq = [], []
    held = None
    for i, t in enumerate(table.times):
        ym = m_vals[i] if m_vals.shape[1] else None
        if ym is not None and np.all(np.isfinite(ym)):
            held = ym
        if t <= start + 1e-9:
            continue
        parts = []
        if ecg is not None:
            parts.append(e_vals[i])
        if mech is not None:
            parts.append(ym)
        y = np.concatenate(parts)
        w = obs_op.noise_norm(float(t)).copy()
        bad = ~np.isfinite(y)
        w[bad] = 0.0
        y = np.where(bad, 0.0, y)
        recs.append(ObservationRecord(float(t), y, w))
        held_seq.append(held)
    if not recs:
        raise ConfigurationError("no observations after the estimation start", key="observations.start_ms")
    return recs, held_seq


def _full_covariance(scn: TwinScenario, model) -> np.ndarray:
    if scn.has_mech:
        raise ConfigurationError("full-covariance filters support electrical scenarios only", key="filter.kind")
    fcfg = scn.config["filter"]
    n = scn.cable().n_nodes
    base = scn.ms_base()
    s = float(fcfg["state_std"])
    # gate spread scaled to the gate range per unit of potential
    std = np.concatenate([np.full(n, s), np.full(n, s * base.w_max / (base.v_max - base.v_min)),
                          np.full(len(scn.param_names), float(fcfg["param_std"]))])
    return np.diag(std**2)


def run_estimation(scn: TwinScenario, table: ObservationTable, basis: PodBasis | None = None,
                   keep_factors: bool = True) -> EstimationResult:
    """Run the configured filter on ``table`` and collect the per-step trace."""
    fcfg = scn.config["filter"]
    kind, mode = fcfg["kind"], fcfg["obs"]
    model = scn.model(estimator=True)
    obs_op, ecg, mech = _observation_setup(scn, model, mode)
    recs, held = records_from_table(scn, table, obs_op, ecg, mech)
    t0 = float(scn.config["observations"]["start_ms"])
    x0 = scn.initial_state()
    k = len(scn.param_names)
    reduced = kind in ("roukf", "roekf", "pod-roukf", "coupled")
    if kind == "roukf":
        basis = None
    elif kind in ("pod-roukf", "coupled", "roekf") and basis is None and int(scn.config["pod"]["rank"]) > 0:
        basis = build_basis(scn)
    if reduced:
        ocfg = CoupledObserverConfig(basis, gamma=getattr(model, "gamma", 0.0),
                                     alpha_std=fcfg["alpha_std"], param_std=fcfg["param_std"])
        f = initial_filter(model, x0, ocfg, t0)
        sp = simplex_sigma_points(f.lowrank.rank)
    else:
        f = FilterState(x0, t0, cov=_full_covariance(scn, model))
        sp = simplex_sigma_points(x0.size) if kind == "ukf" else None
    r = basis.rank if basis is not None else 0
    n_ecg = ecg.output_dim if ecg is not None else 0
    out = dict(p=[], innov_e=[], innov_m=[], lam=[], HL=[], Lr=[], w=[])
    ye_abs, ym_norm = [], []
    for i, rec in enumerate(recs):
        op = model.with_data(held[i]) if isinstance(model, CoupledModel) and mech is not None else model
        try:
            if kind == "ukf":
                f = ukf_step(f, op, obs_op, rec, sp)
            elif kind == "ekf":
                f = ekf_step(f, op, obs_op, rec)
            elif kind == "roekf":
                f = roekf_step(f, op, obs_op, rec)
            elif basis is not None:
                f = pod_roukf_step(f, op, obs_op, rec, basis, sp)
            else:
                f = roukf_step(f, op, obs_op, rec, sp)
        except NumericalError as exc:
            raise NumericalError(f"{kind} filter failed at t={rec.time} ms", step=i, **exc.diagnostics) from exc
        innov, w = f.info["innovation"], rec.noise_norm
        e_mask = np.zeros(w.size, bool)
        e_mask[:n_ecg] = True
        out["innov_e"].append(_norm(innov, w, e_mask))
        out["innov_m"].append(_norm(innov, w, ~e_mask))
        out["p"].append(f.estimate[f.estimate.size - k:])
        if reduced:
            out["lam"].append(float(np.linalg.eigvalsh(f.lowrank.U)[0]))
        else:
            out["lam"].append(float("nan"))
        if n_ecg and w[0] > 0:
            ye_abs.append(abs(rec.value[0]))
        if mech is not None and np.any(w[n_ecg:] > 0):
            ym = rec.value[n_ecg:]
            ym_norm.append(float(np.sqrt(np.sum(w[n_ecg:] * ym**2))))
        if keep_factors and reduced and k:
            L = f.lowrank.L
            lr = [L[L.shape[0] - k:]]
            if r:
                lr.insert(0, basis.coefficients(L[: basis.dim]))
            out["HL"].append(f.info["HL"])
            out["Lr"].append(np.vstack(lr))
            out["w"].append(w)
    p = np.array(out["p"]).reshape(len(recs), k)
    theta = np.array([physical_params(row, scn.prior) for row in p]) if k else p
    return EstimationResult(
        times=np.array([rec.time for rec in recs]), p=p, theta=theta,
        innov_e=np.array(out["innov_e"]), innov_m=np.array(out["innov_m"]), lam_u=np.array(out["lam"]),
        final=f, HL=out["HL"], L_reduced=out["Lr"], weights=out["w"], n_ecg=n_ecg, basis_rank=r,
        y_e_mean=float(np.mean(ye_abs)) if ye_abs else 0.0,
        y_m_mean=float(np.mean(ym_norm)) if ym_norm else 0.0,
    )


def _norm(innov, w, mask) -> float:
    sel = mask & (w > 0)
    return float(np.linalg.norm(innov[sel])) if np.any(sel) else float("nan")


def param_sensitivity(HL_seq, Lr_seq, n_params: int):
    """``HL Lr^-1`` restricted to the parameter columns, step by step."""
    out = []
    for HL, Lr in zip(HL_seq, Lr_seq):
        cond = np.linalg.cond(Lr)
        if not np.isfinite(cond) or cond > 1e14:
            raise NumericalError("reduced extension factor is numerically singular", condition=cond)
        S = np.linalg.solve(Lr.T, HL.T).T
        out.append(S[:, S.shape[1] - n_params:])
    return out


def _sensitivity(scn: TwinScenario, res: EstimationResult, HL_seq, Lr_seq, n_ecg: int, w_m):
    k = len(scn.param_names)
    eff = param_sensitivity(HL_seq, Lr_seq, k)
    return sensitivity_curves(res.times[: len(eff)], eff, [np.eye(k)] * len(eff), n_ecg,
                              res.y_e_mean or 1.0, res.y_m_mean or 1.0, scn.param_names, w_m=w_m, lead=0)


def _mech_weight(scn: TwinScenario, n_obs: int, n_ecg: int):
    if n_obs == n_ecg:
        return None
    m = scn.config["observations"]["mech_period_ms"] / scn.config["noise"]["sigma_m"] ** 2
    return np.full(n_obs - n_ecg, m)


# -- artifacts ---------------------------------------------------------------

def summary_table(names, truth, prior, estimate) -> str:
    lines = [f"{'parameter':<16}{'target':>10}{'prior':>12}{'(err%)':>10}{'estimate':>12}{'(err%)':>10}"]
    for n, t, p, e in zip(names, truth, prior, estimate):
        lines.append(f"{n:<16}{t:>10.2f}{p:>12.2f}{100 * abs(p - t) / t:>9.2f}%{e:>12.2f}{100 * abs(e - t) / t:>9.2f}%")
    return "\n".join(lines) + "\n"


def _meta(scn: TwinScenario, extra=None) -> dict:
    meta = {
        "schema": SCHEMA,
        "scenario": scn.to_dict(),
        "seed": scn.seed,
        "versions": {"cardassim": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    meta.update(extra or {})
    return meta


def prepare_observations(scn: TwinScenario, out: Path) -> ObservationTable:
    truth = simulate_truth(scn)
    write_truth(out, truth)
    noisy = add_noise(truth.observations, NoiseModel.from_scenario(scn))
    write_table(out / "observations.csv", noisy)
    return noisy


def run_scenario(scn: TwinScenario, out, table: ObservationTable | None = None,
                 basis: PodBasis | None = None) -> dict:
    """Estimation run with the full artifact directory; returns the report."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if table is None:
        table = prepare_observations(scn, out)
    res = run_estimation(scn, table, basis)
    names = scn.param_names
    header = ["time"] + [f"p_{n}" for n in names] + list(names) + ["innov_e", "innov_m", "lambda_min_U"]
    rows = np.column_stack([res.times, res.p, res.theta, res.innov_e, res.innov_m, res.lam_u])
    write_csv(out / "estimate.csv", "estimate", header, rows)
    report = {"names": list(names), "truth": scn.truth.tolist(), "prior": scn.prior.tolist(),
              "estimate": res.theta[-1].tolist() if names else []}
    report["error_pct"] = [100 * abs(e - t) / t for e, t in zip(report["estimate"], report["truth"])]
    gram = {"kind": "empirical-proxy", "obs": scn.config["filter"]["obs"]}
    if res.HL:
        try:
            lam, G, ok = observability_gramian(res.HL, res.L_reduced, res.weights, scn.window,
                                               float(scn.config["diagnostics"]["threshold"]))
            gram.update(lambda_min=lam, threshold_rel=float(scn.config["diagnostics"]["threshold"]),
                        satisfied=ok, matrix=G.tolist())
            w_m = _mech_weight(scn, res.HL[0].shape[0], res.n_ecg)
            sens = _sensitivity(scn, res, res.HL, res.L_reduced, res.n_ecg, w_m)
            write_sensitivity(out / "sensitivity.csv", sens)
        except NumericalError as exc:
            gram.update(error=str(exc))
    else:
        gram.update(error="no reduced factors recorded for this filter")
    _write_json(out / "gramian.json", gram)
    _write_json(out / "meta.json", _meta(scn, {"report": report}))
    text = summary_table(names, scn.truth, scn.prior, report["estimate"]) if names else "no estimated parameters\n"
    (out / "summary.txt").write_text(text)
    report["summary"] = text
    report["result"] = res
    return report


def write_sensitivity(path: Path, sens) -> None:
    header = ["time"] + [f"se_{n}" for n in sens.names] + [f"sm_{n}" for n in sens.names]
    write_csv(path, "sensitivity", header, np.column_stack([sens.times, sens.s_e, sens.s_m]))


# -- diagnostics ---------------------------------------------------------------

def diagnose(scn: TwinScenario, table: ObservationTable | None = None) -> dict:
    """Prediction-only parameter-mode run around the true parameters.

    The particles sample ``p* + diag(std) I``; no correction is applied, so
    the parameter rows of the extension factor stay ``diag(std)`` and ``HL``
    is a secant sensitivity of the outputs.  Returns Gramians for the
    electrical observations alone and for all observations, the sensitivity
    curves and their support widths.
    """
    if not scn.param_names:
        raise ConfigurationError("diagnostics need estimated parameters", key="prior")
    model = scn.model(estimator=False)
    mode = "both" if scn.has_mech else "ecg"
    obs_op, ecg, mech = _observation_setup(scn, model, mode)
    if table is None:
        table = simulate_truth(scn).observations
    recs, _ = records_from_table(scn, table, obs_op, ecg, mech)
    k = len(scn.param_names)
    std = float(scn.config["diagnostics"]["param_std"])
    ocfg = CoupledObserverConfig(None, gamma=0.0, param_std=std)
    t0 = float(scn.config["observations"]["start_ms"])
    f = initial_filter(model, scn.initial_state(scn.true_p()), ocfg, t0)
    sp = simplex_sigma_points(k)
    HL, Lr, W, ye, ym = [], [], [], [], []
    n_ecg = ecg.output_dim
    for rec in recs:
        f = roukf_step(f, model, obs_op, ObservationRecord(rec.time, rec.value, np.zeros_like(rec.noise_norm)), sp)
        HL.append(f.info["HL"])
        L = f.lowrank.L
        Lr.append(L[L.shape[0] - k:])
        W.append(rec.noise_norm)
        if rec.noise_norm[0] > 0:
            ye.append(abs(rec.value[0]))
        if mech is not None and np.any(rec.noise_norm[n_ecg:] > 0):
            v = rec.value[n_ecg:]
            ym.append(float(np.sqrt(np.sum(rec.noise_norm[n_ecg:] * v**2))))
    thr = float(scn.config["diagnostics"]["threshold"])
    lam_e, G_e, ok_e = observability_gramian([h[:n_ecg] for h in HL], Lr, [w[:n_ecg] for w in W], scn.window, thr)
    out = {"kind": "prediction-only secant", "lambda_min_ecg": lam_e, "G_ecg": G_e, "satisfied_ecg": ok_e}
    if mech is not None:
        lam_b, G_b, ok_b = observability_gramian(HL, Lr, W, scn.window, thr)
        out.update(lambda_min_both=lam_b, G_both=G_b, satisfied_both=ok_b)
    times = np.array([r.time for r in recs])
    w_m = _mech_weight(scn, HL[0].shape[0], n_ecg)
    sens = sensitivity_curves(times, HL, Lr, n_ecg, float(np.mean(ye)) if ye else 1.0,
                              float(np.mean(ym)) if ym else 1.0, scn.param_names, w_m=w_m, lead=0)
    out["sensitivity"] = sens
    out["width_e"] = [support_width(times, sens.s_e[:, j]) for j in range(k)]
    out["width_m"] = [support_width(times, sens.s_m[:, j]) for j in range(k)] if mech is not None else None
    return out


def write_diagnostics(run_dir: Path, diag: dict, gramian: bool = True, sensitivity: bool = True) -> None:
    run_dir = Path(run_dir)
    if gramian:
        doc = {"kind": diag["kind"], "lambda_min_ecg": diag["lambda_min_ecg"],
               "satisfied_ecg": diag["satisfied_ecg"], "G_ecg": diag["G_ecg"].tolist()}
        if "G_both" in diag:
            doc.update(lambda_min_both=diag["lambda_min_both"], satisfied_both=diag["satisfied_both"],
                       G_both=diag["G_both"].tolist())
        _write_json(run_dir / "gramian_diag.json", doc)
    if sensitivity:
        write_sensitivity(run_dir / "sensitivity_diag.csv", diag["sensitivity"])


def load_run_scenario(run_dir: Path) -> TwinScenario:
    meta = Path(run_dir) / "meta.json"
    if not meta.is_file():
        raise UsageError(f"{run_dir} has no meta.json")
    return TwinScenario.from_dict(json.loads(meta.read_text())["scenario"])


# -- comparison ----------------------------------------------------------------

def _run_errors(run_dir: Path):
    scn = load_run_scenario(run_dir)
    header, data = read_csv(Path(run_dir) / "estimate.csv", "estimate")
    names = scn.param_names
    cols = [header.index(n) for n in names]
    err = np.abs(data[:, cols] - scn.truth) / scn.truth
    return names, data[:, 0], err


def compare_runs(a_dir, b_dir) -> dict:
    """Final relative errors of two runs; ``b_dominant`` iff B is strictly better on every parameter."""
    names_a, t_a, err_a = _run_errors(a_dir)
    names_b, t_b, err_b = _run_errors(b_dir)
    if names_a != names_b:
        raise UsageError(f"runs estimate different parameters: {names_a} vs {names_b}")
    if not names_a:
        raise UsageError("runs have no estimated parameters")
    fa, fb = err_a[-1], err_b[-1]
    winners = ["B" if b < a else ("A" if a < b else "tie") for a, b in zip(fa, fb)]
    rows = [{"parameter": n, "error_a": float(a), "error_b": float(b), "delta": float(b - a), "winner": w}
            for n, a, b, w in zip(names_a, fa, fb, winners)]
    return {"rows": rows, "b_dominant": all(w == "B" for w in winners),
            "series_a": (t_a, err_a), "series_b": (t_b, err_b)}


def comparison_text(cmp: dict) -> str:
    lines = [f"{'parameter':<16}{'err A %':>10}{'err B %':>10}{'delta %':>10}  winner"]
    for r in cmp["rows"]:
        lines.append(f"{r['parameter']:<16}{100 * r['error_a']:>10.2f}{100 * r['error_b']:>10.2f}"
                     f"{100 * r['delta']:>10.2f}  {r['winner']}")
    lines.append("B dominant" if cmp["b_dominant"] else "B not dominant")
    return "\n".join(lines) + "\n"
