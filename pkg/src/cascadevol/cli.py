"""Command-line interface.

Every subcommand reads an optional JSON config, applies flag overrides,
writes its artifacts into ``--out`` and records them in ``manifest.json``
there.  Exit codes: 0 success, 2 configuration error, 3 numerical-stage error.
"""

import argparse
import copy
import hashlib
import json
import logging
import os
import re
import sys
import tempfile
import time
from dataclasses import dataclass, field
from importlib import metadata

import numpy as np

from . import cascade, fpsolve, ingest, kmest, wavelet, wtmm
from .rng import stage_seed

logger = logging.getLogger("cascadevol")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
STAGES = ("ingest", "synth", "cwt", "wtmm", "simulate", "km-estimate", "fp-solve", "report")
MANIFEST = "manifest.json"

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "stages": [],
    "model": {"gamma_M": 0.51, "sigma_M2": 0.026, "epsilon": 0.16, "L": 131072.0},
    "ingest": {"input": [], "dt": 1,
               "schema": {"timestamp": "timestamp", "issue": "issue", "price": "price"}},
    "synth": {"kind": "cascade", "length": 65536, "hurst": 0.5, "n_issues": 3,
              "n_sessions": 5, "session_minutes": 511},
    "cwt": {"path": None, "scales": "4:2048:48", "wavelet": "mexican_hat",
            "support_radius": 6.0, "write_coefficients": False},
    "wtmm": {"path": None, "scales": "4:2048:48", "q_range": "-20:20:0.5",
             "fit_range": "2^-10:2^-5", "window": 1.0},
    "simulate": {"n_paths": 10000, "s0": 8192.0, "s2_values": "8,16,32,64,128,256,512,1024,2048,4096",
                 "ladder": "0.05,0.1,0.15,0.2,0.3,0.4", "extra_scales": "1,2,4",
                 "dlambda": 0.01, "mode": "signed", "scheme": "euler", "csv_max_paths": 20000},
    "km-estimate": {"ensemble": None, "path": None,
                    "s2_values": "8,16,32,64,128,256,512,1024,2048,4096",
                    "ladder": "0.05,0.1,0.15,0.2,0.3,0.4", "bins": 24, "min_count": 50},
    "fp-solve": {"s0": 128.0, "scales": "64,32,16,8,4,2,1", "n_nodes": 2048,
                 "x_max_factor": 20.0, "max_step": 1e-3, "n_initial": 100000,
                 "use_estimates": False, "qs": "0:3.5:0.5"},
    "report": {"hist_bins": 80},
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


# --------------------------------------------------------------------------
# value parsing


def _num(text):
    text = str(text).strip()
    m = re.fullmatch(r"([-+0-9.eE]+)\^([-+0-9.eE]+)", text)
    try:
        return float(m.group(1)) ** float(m.group(2)) if m else float(text)
    except ValueError as exc:
        raise ConfigError(f"not a number: {text!r}") from exc


def parse_list(spec):
    """Comma list of numbers, or an existing list."""
    if isinstance(spec, (list, tuple)):
        return np.array([_num(v) for v in spec])
    return np.array([_num(v) for v in str(spec).split(",") if v.strip()])


def parse_range(spec):
    """``start:stop:step`` inclusive arithmetic range."""
    if isinstance(spec, (list, tuple)):
        return np.asarray(spec, dtype=float)
    parts = str(spec).split(":")
    if len(parts) != 3:
        raise ConfigError(f"range must look like start:stop:step, got {spec!r}")
    a, b, st = (_num(p) for p in parts)
    if st <= 0 or b < a:
        raise ConfigError(f"empty range {spec!r}")
    return np.round(np.arange(a, b + 0.5 * st, st), 12)


def parse_pair(spec):
    parts = spec if isinstance(spec, (list, tuple)) else str(spec).split(":")
    if len(parts) != 2:
        raise ConfigError(f"expected lo:hi, got {spec!r}")
    lo, hi = (_num(p) for p in parts)
    if not 0 < lo < hi:
        raise ConfigError(f"need 0 < lo < hi, got {spec!r}")
    return lo, hi


# --------------------------------------------------------------------------
# config and manifest


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    """Resolved configuration: defaults, then config file, then flags."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path=None, overrides=None):
        data = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    user = json.load(fh)
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
            if not isinstance(user, dict):
                raise ConfigError("config file must hold a JSON object")
            unknown = set(user) - set(DEFAULTS)
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            data = _merge(data, user)
        if overrides:
            data = _merge(data, overrides)
        cfg = cls(data)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self):
        return int(self.data["seed"])

    @property
    def out(self):
        return self.data["out"]

    def params(self):
        try:
            return cascade.ModelParams.from_dict(self.data["model"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model parameters: {exc}") from exc

    def validate(self):
        bad = [s for s in self.data["stages"] if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages {bad}; choose from {list(STAGES)}")
        for f in self.data["ingest"]["input"]:
            if not os.path.exists(f):
                raise ConfigError(f"input file not found: {f}")
        for sec, key in (("cwt", "path"), ("wtmm", "path"), ("km-estimate", "ensemble"),
                         ("km-estimate", "path")):
            p = self.data[sec][key]
            if p is not None and not os.path.exists(p):
                raise ConfigError(f"{sec}.{key} not found: {p}")
        if self.data["simulate"]["mode"] not in cascade.MODES:
            raise ConfigError(f"simulate.mode must be one of {cascade.MODES}")
        self.params()


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def atomic_write_json(path, obj):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


class RunManifest:
    """``manifest.json`` in the output directory, updated stage by stage."""

    def __init__(self, out):
        self.out = out
        self.path = os.path.join(out, MANIFEST)
        self.data = {"tool": "cascadevol", "version": _version(), "stages": {}}
        if os.path.exists(self.path):
            with open(self.path, encoding="utf-8") as fh:
                self.data = json.load(fh)

    def stage(self, name):
        return self.data["stages"].get(name)

    def output(self, stage, key):
        st = self.stage(stage)
        if st is None or key not in st["outputs"]:
            return None
        path = os.path.join(self.out, st["outputs"][key]["file"])
        return path if os.path.exists(path) else None

    def record(self, name, cfg, outputs, derived, elapsed):
        self.data["version"] = _version()
        self.data["seed"] = cfg.seed
        self.data["config"] = cfg.data
        self.data["stages"][name] = {
            "seed": stage_seed(cfg.seed, name),
            "elapsed_s": round(elapsed, 3),
            "outputs": {k: {"file": os.path.basename(p), "sha256": sha256(p)}
                        for k, p in outputs.items()},
            "derived": derived,
        }
        atomic_write_json(self.path, self.data)


# --------------------------------------------------------------------------
# artifact helpers


def _write_csv(path, header, rows, fmt="{:.10g}"):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else fmt.format(v) for v in row) + "\n")
    return path


def _read_csv(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    return header, rows


def _save_ensemble(out, ens, L, csv_max_paths):
    npy = os.path.join(out, "ensemble.npy")
    np.save(npy, ens.x_paths)
    meta = os.path.join(out, "ensemble.json")
    atomic_write_json(meta, {"lambda_grid": ens.lambda_grid, "seed": ens.seed, "mode": ens.mode,
                             "scheme": ens.scheme, "L": L, "n_paths": ens.n_paths})
    outputs = {"ensemble_npy": npy, "ensemble_json": meta}
    if ens.n_paths <= csv_max_paths:
        csv = os.path.join(out, "ensemble.csv")
        ens.write(csv)
        outputs["ensemble_csv"] = csv
    return outputs


def load_ensemble(path):
    """Ensemble from ``ensemble.npy`` (+ ``ensemble.json``) or a ``path_id,lambda,x`` CSV.

    Returns ``(Ensemble, L or None)``.
    """
    if path.endswith(".npy"):
        x = np.load(path)
        with open(path[:-4] + ".json", encoding="utf-8") as fh:
            meta = json.load(fh)
        ens = cascade.Ensemble(x, np.asarray(meta["lambda_grid"]), int(meta["seed"]),
                               meta["mode"], meta["scheme"])
        return ens, meta.get("L")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    lam = np.unique(data[:, 1])
    n = int(data[:, 0].max()) + 1
    x = np.full((n, lam.size), np.nan)
    x[data[:, 0].astype(int), np.searchsorted(lam, data[:, 1])] = data[:, 2]
    meta_path = os.path.join(os.path.dirname(path), "ensemble.json")
    L = None
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            L = json.load(fh).get("L")
    return cascade.Ensemble(x, lam, 0), L


def _load_path(path):
    meta = path[:-4] + ".json" if path.endswith(".csv") else None
    if meta is not None and not os.path.exists(meta):
        meta = None
    return ingest.SeriesPath.read(path, meta)


def _resolve_path(cfg, man, section):
    p = cfg[section]["path"]
    if p is None:
        p = man.output("ingest", "path_csv") or man.output("synth", "path_csv")
    if p is None:
        raise ConfigError(f"{section}: no input path given and no ingest/synth output in {cfg.out}")
    return _load_path(p)


def _scale_grid(spec, L):
    grid = wavelet.ScaleGrid.parse(spec, L) if isinstance(spec, str) else \
        wavelet.ScaleGrid(np.asarray(spec, dtype=float), L)
    if grid.scales[-1] > L / 8:
        raise ConfigError(f"wavelet precondition violated: max scale {grid.scales[-1]:g} "
                          f"exceeds L/8 = {L / 8:g}")
    return grid


# --------------------------------------------------------------------------
# stages


def stage_ingest(cfg, man):
    c = cfg["ingest"]
    if not c["input"]:
        raise ConfigError("ingest: no input CSV given (--input)")
    series = []
    for f in c["input"]:
        series.extend(ingest.load_csv(f, c["schema"]))
    returns, stats = ingest.deseasonalize(series, int(c["dt"]))
    path = ingest.average_path(returns, stats, float(c["dt"]))
    csv, js = os.path.join(cfg.out, "path.csv"), os.path.join(cfg.out, "path.json")
    path.write(csv, js)
    return {"path_csv": csv, "path_json": js}, {"L": path.L, "n_issues": len(series),
                                                "session_breaks": len(path.session_breaks)}


def stage_synth(cfg, man):
    c = cfg["synth"]
    seed = stage_seed(cfg.seed, "synth")
    kind = c["kind"]
    if kind == "issues":
        series = ingest.synthesize_issue_series(int(c["n_issues"]), int(c["n_sessions"]),
                                                int(c["session_minutes"]), seed)
        csv = os.path.join(cfg.out, "issues.csv")
        ingest.write_csv(series, csv)
        return {"issues_csv": csv}, {"n_issues": len(series)}
    L = int(c["length"])
    if kind == "cascade":
        path = ingest.synthesize_cascade_path(cfg.params(), L, seed)
    elif kind == "fbm":
        if L < 2 or L & (L - 1):
            raise ConfigError(f"synth.length must be a power of two, got {L}")
        from .rng import block_rng

        noise = ingest.fgn(L, float(c["hurst"]), block_rng(seed, 0))
        path = ingest.SeriesPath(np.cumsum(noise), 1.0, ())
    else:
        raise ConfigError(f"synth.kind must be cascade, fbm or issues, got {kind!r}")
    csv, js = os.path.join(cfg.out, "path.csv"), os.path.join(cfg.out, "path.json")
    path.write(csv, js)
    return {"path_csv": csv, "path_json": js}, {"L": L, "kind": kind}


def stage_cwt(cfg, man):
    c = cfg["cwt"]
    path = _resolve_path(cfg, man, "cwt")
    grid = _scale_grid(c["scales"], path.L)
    wav = wavelet.AnalyzingWavelet(c["wavelet"], float(c["support_radius"]))
    if wav.kind == "delta_difference":
        grid = wavelet.ScaleGrid(np.unique(np.round(grid.scales)), grid.L)
    field_ = wavelet.cwt(path, grid, wav)
    outputs = {}
    js = os.path.join(cfg.out, "cwt_grid.json")
    if c["write_coefficients"]:
        csv = os.path.join(cfg.out, "cwt.csv")
        field_.write(csv, js)
        outputs["cwt_csv"] = csv
    else:
        atomic_write_json(js, dict(grid.to_dict(), wavelet=wav.kind,
                                   support_radius=wav.support_radius))
    outputs["cwt_grid"] = js
    rows = []
    for j, s in enumerate(grid.scales):
        x = wavelet.volatility_series(field_, j).values
        rows.append((s, x.mean(), x.std(ddof=1), x.size))
    outputs["cwt_moments"] = _write_csv(os.path.join(cfg.out, "cwt_moments.csv"),
                                        ("s", "E", "sd", "n"), rows)
    qs = np.arange(0.0, 4.01, 0.5)
    ms = wavelet.moment_scaling(field_, qs)
    outputs["cwt_tau"] = _write_csv(os.path.join(cfg.out, "cwt_tau.csv"), ("q", "tau", "se"),
                                    zip(ms.qs, ms.exponents, ms.stderr))
    return outputs, {"n_scales": len(grid), "E_exponent": float(ms.exponents[2])}


def stage_wtmm(cfg, man):
    c = cfg["wtmm"]
    path = _resolve_path(cfg, man, "wtmm")
    grid = _scale_grid(c["scales"], path.L)
    qs = parse_range(c["q_range"])
    fit = parse_pair(c["fit_range"])
    pf = wtmm.analyze(path, grid, qs, fit, float(c["window"]))
    res = wtmm.legendre_spectrum(wtmm.scaling_exponents(pf, fit, L=path.L))
    out = cfg.out
    z_rows = ((q, s, pf.Z[i, j]) for i, q in enumerate(pf.qs) for j, s in enumerate(pf.scales))
    outputs = {
        "wtmm_Z": _write_csv(os.path.join(out, "wtmm_Z.csv"), ("q", "s", "Z"), z_rows,
                             "{:.12g}"),
        "wtmm_tau": _write_csv(os.path.join(out, "wtmm_tau.csv"), ("q", "tau", "se"),
                               zip(res.qs, res.tau, res.tau_se)),
        "wtmm_spectrum": _write_csv(os.path.join(out, "wtmm_spectrum.csv"), ("alpha", "D"),
                                    zip(res.alpha, res.D)),
    }
    coef, se = res.quadratic_fit()
    a, d = res.peak()
    return outputs, {"tau_quadratic": coef.tolist(), "tau_quadratic_se": se.tolist(),
                     "peak_alpha": a, "peak_D": d, "fit_range_samples": list(res.fit_range)}


def stage_simulate(cfg, man):
    c = cfg["simulate"]
    p = cfg.params()
    s2 = parse_list(c["s2_values"])
    ladder = parse_list(c["ladder"])
    scales = np.unique(np.concatenate([kmest.km_scales(s2, ladder), parse_list(c["extra_scales"]),
                                       parse_list(cfg["fp-solve"]["scales"]),
                                       [float(cfg["fp-solve"]["s0"]), float(c["s0"])]]))
    if scales.max() > float(c["s0"]):
        raise ConfigError(f"simulate.s0={c['s0']} must be the coarsest scale")
    lam = np.sort(np.log(p.L / scales))
    seed = stage_seed(cfg.seed, "simulate")
    ens = cascade._simulate(p, None, lam, int(c["n_paths"]), seed, float(c["dlambda"]),
                            c["mode"], c["scheme"], 65536, 1)
    outputs = _save_ensemble(cfg.out, ens, p.L, int(c["csv_max_paths"]))
    rows = [(l, p.scale(l), x.mean(), x.std(ddof=1)) for l, x in zip(ens.lambda_grid,
                                                                     ens.x_paths.T)]
    outputs["ensemble_moments"] = _write_csv(os.path.join(cfg.out, "ensemble_moments.csv"),
                                             ("lambda", "s", "E", "sd"), rows)
    dev = max(abs(r[2] - r[3]) / abs(r[2]) for r in rows)
    return outputs, {"n_paths": ens.n_paths, "n_lambda": lam.size, "max_rel_E_minus_sd": dev}


def stage_km(cfg, man):
    c = cfg["km-estimate"]
    s2 = parse_list(c["s2_values"])
    ladder = parse_list(c["ladder"])
    if c["path"] is not None:
        path = _load_path(c["path"])
        grid = kmest.km_scale_grid(path.L, s2, ladder)
        if grid.scales[-1] > path.L / 8:
            raise ConfigError(f"wavelet precondition violated: s2 up to {s2.max():g} "
                              f"exceeds L/8 = {path.L / 8:g}")
        data, L = wavelet.cwt(path, grid), path.L
    else:
        src = c["ensemble"] or man.output("simulate", "ensemble_npy")
        if src is None:
            raise ConfigError("km-estimate: give --ensemble or --path, or run simulate first")
        data, L = load_ensemble(src)
        L = L or cfg.params().L
    est = kmest.estimate_km(data, s2, ladder, L=L, bins=int(c["bins"]),
                            min_count=int(c["min_count"]))
    csv = os.path.join(cfg.out, "km_scales.csv")
    js = os.path.join(cfg.out, "km_summary.json")
    est.write(csv, js)
    pairs = _write_csv(os.path.join(cfg.out, "km_pairs.csv"), est.PAIR_COLUMNS, est.pair_table)
    return {"km_scales": csv, "km_summary": js, "km_pairs": pairs}, est.summary()


def _fp_params(cfg, man):
    p = cfg.params()
    if cfg["fp-solve"]["use_estimates"]:
        js = man.output("km-estimate", "km_summary")
        if js is None:
            raise ConfigError("fp-solve.use_estimates needs a km-estimate run in the same --out")
        with open(js, encoding="utf-8") as fh:
            s = json.load(fh)
        p = cascade.ModelParams(gamma_M=s["gamma_M"]["value"], sigma_M2=max(0.0, s["sigma_M2"]["value"]),
                                epsilon=float(np.exp(s["a_A_fit"]["intercept"])), L=p.L)
    return p


def stage_fp(cfg, man):
    c = cfg["fp-solve"]
    p = _fp_params(cfg, man)
    s0 = float(c["s0"])
    scales = np.sort(parse_list(c["scales"]))[::-1]
    if np.any(scales >= s0):
        raise ConfigError("fp-solve.scales must all be finer than s0")
    ens_path = man.output("simulate", "ensemble_npy")
    x0 = None
    if ens_path is not None:
        ens, _ = load_ensemble(ens_path)
        try:
            x0 = np.abs(ens.at(p.lam(s0)))
        except KeyError:
            x0 = None
    if x0 is None:
        from .rng import block_rng

        gen = block_rng(stage_seed(cfg.seed, "fp-solve"), 0)
        x0 = cascade.default_x0_sampler(p, s0)(gen, int(c["n_initial"]))
    pdf0 = fpsolve.build_initial_pdf(x0, int(c["n_nodes"]), float(c["x_max_factor"]) * x0.mean(),
                                     p.lam(s0))
    snaps = fpsolve.solve(pdf0, fpsolve.FPCoefficients.from_params(p), p.lam(scales),
                          float(c["max_step"]))
    csv = os.path.join(cfg.out, "fp_snapshots.csv")
    with open(csv, "w", encoding="utf-8") as fh:
        fh.write("s,x,p\n")
        for snap in snaps:
            snap.write_rows(fh, snap.scale(p.L))
    rows = [(sn.scale(p.L), sn.lam, sn.mass, sn.mean, sn.sd, sn.clipped_mass) for sn in snaps]
    mom = _write_csv(os.path.join(cfg.out, "fp_moments.csv"),
                     ("s", "lambda", "mass", "E", "sd", "clipped_mass"), rows)
    outputs = {"fp_snapshots": csv, "fp_moments": mom}
    derived = {"params": p.to_dict(), "mass_drift": abs(snaps[-1].mass - snaps[0].mass),
               "truncated_mass": pdf0.truncated_mass, "splice_point": pdf0.meta["splice_point"],
               "spline_bins": pdf0.meta["n_bins"], "steps": snaps[-1].meta.get("steps", 0)}
    if len(snaps) >= 4:
        tau = fpsolve.pdf_moments_tau(snaps, parse_range(c["qs"]), p.L)
        outputs["fp_tau"] = _write_csv(os.path.join(cfg.out, "fp_tau.csv"),
                                       ("q", "tau", "se", "convention"), tau.rows())
    return outputs, derived


# --------------------------------------------------------------------------
# report


def stage_report(cfg, man):
    out = cfg.out
    outputs, notes, summary = {}, [], {}
    # Fig. 1 analogue: E and sd against scale
    rows = []
    for stage, key, src in (("cwt", "cwt_moments", "cwt"), ("simulate", "ensemble_moments", "mc"),
                            ("fp-solve", "fp_moments", "fp")):
        f = man.output(stage, key)
        if f is None:
            continue
        hdr, data = _read_csv(f)
        i_s, i_e, i_sd = hdr.index("s"), hdr.index("E"), hdr.index("sd")
        rows += [(src, float(r[i_s]), float(r[i_e]), float(r[i_sd])) for r in data]
    if rows:
        outputs["fig1_moments"] = _write_csv(os.path.join(out, "fig1_moments.csv"),
                                             ("source", "s", "E", "sd"), rows)
        summary["max_rel_E_minus_sd"] = {
            src: max(abs(e - sd) / abs(e) for so, _, e, sd in rows if so == src)
            for src in {r[0] for r in rows}}
    else:
        notes.append("fig1 skipped: run cwt, simulate or fp-solve first")
    # Fig. 2 analogue: tau(q) and D(alpha)
    tau_f, spec_f = man.output("wtmm", "wtmm_tau"), man.output("wtmm", "wtmm_spectrum")
    if tau_f and spec_f:
        for name, src in (("fig2_tau", tau_f), ("fig2_spectrum", spec_f)):
            hdr, data = _read_csv(src)
            outputs[name] = _write_csv(os.path.join(out, name + ".csv"), hdr,
                                       [[float(v) for v in r] for r in data])
        d = man.stage("wtmm")["derived"]
        summary["tau_quadratic"] = d["tau_quadratic"]
        summary["peak_alpha"] = d["peak_alpha"]
    else:
        notes.append("fig2 skipped: run wtmm first")
    # Fig. 10 analogue: solved pdfs against the Monte Carlo ensemble
    snaps_f = man.output("fp-solve", "fp_snapshots")
    ens_f = man.output("simulate", "ensemble_npy")
    if snaps_f:
        data = np.loadtxt(snaps_f, delimiter=",", skiprows=1, ndmin=2)
        ens = load_ensemble(ens_f)[0] if ens_f else None
        L = cfg.params().L
        nb = int(cfg["report"]["hist_bins"])
        rows, l1 = [], {}
        for s in np.unique(data[:, 0])[::-1]:
            sel = data[:, 0] == s
            x, p = data[sel, 1], data[sel, 2]
            grid = fpsolve.PdfGrid(x, p)
            mc = None
            if ens is not None:
                try:
                    mc = np.abs(ens.at(np.log(L / s)))
                except KeyError:
                    mc = None
            hi = np.quantile(mc, 0.999) if mc is not None else x[np.searchsorted(grid.cdf(), 0.999)]
            edges = np.linspace(0.0, hi, nb + 1)
            pf = grid.bin_probabilities(edges)
            width = np.diff(edges)
            pm = np.histogram(mc, edges)[0] / mc.size if mc is not None else np.full(nb, np.nan)
            if mc is not None:
                l1[f"{s:g}"] = float(np.abs(pf - pm).sum() + abs((1 - pf.sum()) - (mc > hi).mean()))
            for k in range(nb):
                rows.append((s, 0.5 * (edges[k] + edges[k + 1]), pf[k] / width[k],
                             pm[k] / width[k]))
        outputs["fig10_pdfs"] = _write_csv(os.path.join(out, "fig10_pdfs.csv"),
                                           ("s", "x", "p_fp", "p_mc"), rows)
        if l1:
            summary["fp_mc_L1"] = l1
    else:
        notes.append("fig10 skipped: run fp-solve (and simulate for the overlay) first")
    # Fig. 11 analogue: tau from the solved pdfs against the data
    fp_tau = man.output("fp-solve", "fp_tau")
    if fp_tau:
        rows = []
        hdr, data = _read_csv(fp_tau)
        rows += [("fp", float(r[0]), float(r[1]), float(r[2])) for r in data if r[3] == "wtmm"]
        emp = man.output("cwt", "cwt_tau")
        if emp:
            _, data = _read_csv(emp)
            rows += [("data", float(r[0]), float(r[1]) - 1.0, float(r[2])) for r in data]
        outputs["fig11_tau"] = _write_csv(os.path.join(out, "fig11_tau.csv"),
                                          ("source", "q", "tau_wtmm_convention", "se"), rows)
    else:
        notes.append("fig11 skipped: run fp-solve first")
    km = man.stage("km-estimate")
    if km is not None:
        summary["km"] = km["derived"]
    if not outputs:
        raise ConfigError("report: nothing to report; run at least one of "
                          "cwt, wtmm, simulate, fp-solve into this --out first")
    txt = os.path.join(out, "report.txt")
    with open(txt, "w", encoding="utf-8") as fh:
        for k in sorted(outputs):
            fh.write(f"table {k}: {os.path.basename(outputs[k])}\n")
        for n in notes:
            fh.write(f"note: {n}\n")
        fh.write(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    for n in notes:
        logger.info(n)
    outputs["report_txt"] = txt
    return outputs, {"notes": notes, **summary}


STAGE_FUNCS = {
    "ingest": stage_ingest, "synth": stage_synth, "cwt": stage_cwt, "wtmm": stage_wtmm,
    "simulate": stage_simulate, "km-estimate": stage_km, "fp-solve": stage_fp,
    "report": stage_report,
}


def run_stage(name, cfg, man):
    t0 = time.perf_counter()
    try:
        outputs, derived = STAGE_FUNCS[name](cfg, man)
    except ConfigError:
        raise
    except Exception as exc:  # noqa: BLE001 - surfaced as a structured stage error
        raise StageError(name, exc) from exc
    man.record(name, cfg, outputs, derived, time.perf_counter() - t0)
    return outputs


def run_pipeline(cfg):
    """Run ``cfg['stages']`` in dependency order and return the manifest."""
    os.makedirs(cfg.out, exist_ok=True)
    man = RunManifest(cfg.out)
    for name in [s for s in STAGES if s in cfg["stages"]]:
        logger.info("running %s", name)
        run_stage(name, cfg, man)
    return man


# --------------------------------------------------------------------------
# argument parsing


def _common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p):
    p.add_argument("--gamma", type=float, dest="gamma_M")
    p.add_argument("--sigma2", type=float, dest="sigma_M2")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--L", type=float, dest="L")


def build_parser():
    ap = argparse.ArgumentParser(prog="cascadevol", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="CSV prices to an analysis path")
    _common(p)
    p.add_argument("--input", nargs="+")
    p.add_argument("--dt", type=int)

    p = sub.add_parser("synth", help="synthetic path or issue CSV")
    _common(p)
    _model_flags(p)
    p.add_argument("--kind", choices=("cascade", "fbm", "issues"))
    p.add_argument("--length", type=int)
    p.add_argument("--hurst", type=float)

    p = sub.add_parser("cwt", help="wavelet transform and |W| moments")
    _common(p)
    p.add_argument("--path")
    p.add_argument("--scales", help="min:max:count")
    p.add_argument("--wavelet", choices=wavelet.KINDS)
    p.add_argument("--write-coefficients", action="store_true", default=None)

    p = sub.add_parser("wtmm", help="partition function, tau(q), D(alpha)")
    _common(p)
    p.add_argument("--path")
    p.add_argument("--scales", help="min:max:count")
    p.add_argument("--q-range", help="start:stop:step")
    p.add_argument("--fit-range", help="lo:hi as fractions of L, e.g. 2^-10:2^-5")
    p.add_argument("--window", type=float)

    p = sub.add_parser("simulate", help="Monte Carlo ensemble of the cascade SDE")
    _common(p)
    _model_flags(p)
    p.add_argument("--n-paths", type=int)
    p.add_argument("--s0", type=float)
    p.add_argument("--dlambda", type=float)
    p.add_argument("--mode", choices=cascade.MODES)
    p.add_argument("--scheme", choices=("euler", "discrete"))

    p = sub.add_parser("km-estimate", help="Kramers-Moyal coefficient estimation")
    _common(p)
    _model_flags(p)
    p.add_argument("--ensemble")
    p.add_argument("--path")
    p.add_argument("--s2-values")
    p.add_argument("--ladder")
    p.add_argument("--bins", type=int)

    p = sub.add_parser("fp-solve", help="Fokker-Planck evolution of the pdf")
    _common(p)
    _model_flags(p)
    p.add_argument("--s0", type=float)
    p.add_argument("--scales", help="comma list of target scales")
    p.add_argument("--n-nodes", type=int)
    p.add_argument("--use-estimates", action="store_true", default=None)

    p = sub.add_parser("report", help="plot-ready tables from a run directory")
    _common(p)

    p = sub.add_parser("run", help="run the stages listed in the config")
    _common(p)
    p.add_argument("--stages", help="comma list overriding config stages")
    return ap


_FLAG_MAP = {
    "ingest": {"input": "input", "dt": "dt"},
    "synth": {"kind": "kind", "length": "length", "hurst": "hurst"},
    "cwt": {"path": "path", "scales": "scales", "wavelet": "wavelet",
            "write_coefficients": "write_coefficients"},
    "wtmm": {"path": "path", "scales": "scales", "q_range": "q_range", "fit_range": "fit_range",
             "window": "window"},
    "simulate": {"n_paths": "n_paths", "s0": "s0", "dlambda": "dlambda", "mode": "mode",
                 "scheme": "scheme"},
    "km-estimate": {"ensemble": "ensemble", "path": "path", "s2_values": "s2_values",
                    "ladder": "ladder", "bins": "bins"},
    "fp-solve": {"s0": "s0", "scales": "scales", "n_nodes": "n_nodes",
                 "use_estimates": "use_estimates"},
}


def _overrides(args):
    ov = {}
    if args.out is not None:
        ov["out"] = args.out
    if args.seed is not None:
        ov["seed"] = args.seed
    model = {k: getattr(args, k) for k in ("gamma_M", "sigma_M2", "epsilon", "L")
             if getattr(args, k, None) is not None}
    if model:
        ov["model"] = model
    sec = {cfg_key: getattr(args, flag) for flag, cfg_key in _FLAG_MAP.get(args.command, {}).items()
           if getattr(args, flag, None) is not None}
    if sec:
        ov[args.command] = sec
    if args.command == "run":
        if args.stages:
            ov["stages"] = [s.strip() for s in args.stages.split(",") if s.strip()]
    else:
        ov["stages"] = [args.command]
    return ov


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        if not cfg["stages"]:
            raise ConfigError("no stages requested")
        man = run_pipeline(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(man.path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
