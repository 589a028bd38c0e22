"""Utility-privacy sweeps: one train + attack pair per grid cell, a CSV table and an SVG scatter."""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .attack import AttackConfig, run_attack
from .defense import TrainConfig, train

CSV_FIELDS = ("defense", "params", "seed", "accuracy", "mse", "sigma", "status")
OK = "ok"

ABLATION_VARIANTS = ("full", "no_visual_removal", "no_cl", "no_noise")


@dataclass
class TradeoffRecord:
    defense: str
    params: str
    seed: int
    accuracy: float | None
    mse: float | None
    sigma: float | None
    status: str = OK
    calibration: list | None = None
    wall_clock_s: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == OK

    def row(self) -> dict:
        fmt = lambda v: "" if v is None else repr(float(v))
        return {"defense": self.defense, "params": self.params, "seed": self.seed,
                "accuracy": fmt(self.accuracy), "mse": fmt(self.mse), "sigma": fmt(self.sigma),
                "status": self.status}


def run_cell(train_cfg: TrainConfig, attack_cfg: AttackConfig, params: str = "") -> TradeoffRecord:
    """Train, attack, and summarize one cell; any failure becomes a marked record."""
    t0 = time.perf_counter()
    attack_cfg = replace(attack_cfg, seed=train_cfg.seed)
    try:
        res = train(train_cfg)
        rep, _ = run_attack(res.pipeline, res.data.aux_x, res.data.test_x, attack_cfg)
    except Exception as exc:  # recorded, the sweep goes on
        msg = " ".join(str(exc).split())[:200]
        return TradeoffRecord(train_cfg.defense, params, train_cfg.seed, None, None, None,
                              status=f"failed: {type(exc).__name__}: {msg}",
                              wall_clock_s=time.perf_counter() - t0)
    return TradeoffRecord(train_cfg.defense, params, train_cfg.seed, res.report.accuracy, rep.mean_mse,
                          res.report.sigma, calibration=res.report.calibration,
                          wall_clock_s=time.perf_counter() - t0)


def _run_cell_args(args):
    return run_cell(*args)


def run_cells(cells: list[tuple[TrainConfig, str]], attack_cfg: AttackConfig, jobs: int = 1
              ) -> list[TradeoffRecord]:
    """Run cells in order, or across ``jobs`` worker processes; output order follows ``cells``."""
    args = [(cfg, attack_cfg, params) for cfg, params in cells]
    if jobs <= 1 or len(args) <= 1:
        return [run_cell(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell_args, args))


def records_csv(records: list[TradeoffRecord]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def read_records_csv(text: str) -> list[TradeoffRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    num = lambda s: None if s == "" else float(s)
    return [TradeoffRecord(r["defense"], r["params"], int(r["seed"]), num(r["accuracy"]), num(r["mse"]),
                           num(r["sigma"]), r["status"]) for r in rows]


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def records_svg(records: list[TradeoffRecord], width: int = 480, height: int = 360) -> str:
    """Scatter of accuracy against attack MSE, one colored series per defense.

    One ``<circle>`` per successful record; failed records are left out.
    """
    good = [r for r in records if r.ok]
    left, right, top, bottom = 60, 120, 20, 50
    pw, ph = width - left - right, height - top - bottom
    xs = [r.mse for r in good] or [0.0, 1.0]
    ys = [100.0 * r.accuracy for r in good] or [0.0, 100.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 - x0 < 1e-9:
        x0, x1 = x0 - 0.01, x1 + 0.01
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 1.0, y1 + 1.0
    padx, pady = 0.05 * (x1 - x0), 0.05 * (y1 - y0)
    x0, x1, y0, y1 = x0 - padx, x1 + padx, y0 - pady, y1 + pady
    sx = lambda v: left + (v - x0) / (x1 - x0) * pw
    sy = lambda v: top + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{sx(t):.1f}" y="{top + ph + 15}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{left - 5}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">MSE</text>')
    out.append(f'<text transform="translate(15,{top + ph / 2:.1f}) rotate(-90)" '
               f'text-anchor="middle">Accuracy (%)</text>')
    series = list(dict.fromkeys(r.defense for r in good))
    for i, name in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        for r in (r for r in good if r.defense == name):
            out.append(f'<circle cx="{sx(r.mse):.2f}" cy="{sy(100.0 * r.accuracy):.2f}" r="4" '
                       f'fill="{color}" fill-opacity="0.8"><title>{escape(f"{name} {r.params} seed={r.seed}")}'
                       f'</title></circle>')
        ly = top + 10 + 16 * i
        out.append(f'<rect x="{left + pw + 12}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{left + pw + 26}" y="{ly + 1}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_outputs(records: list[TradeoffRecord], out_dir, stem: str = "sweep") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = out / f"{stem}.csv", out / f"{stem}.svg"
    csv_path.write_text(records_csv(records))
    svg_path.write_text(records_svg(records))
    return csv_path, svg_path


def summarize(records: list[TradeoffRecord]) -> list[dict]:
    """Seed-averaged accuracy, MSE and sigma per (defense, params), over successful cells."""
    groups: dict[tuple[str, str], list[TradeoffRecord]] = {}
    for r in records:
        groups.setdefault((r.defense, r.params), []).append(r)
    rows = []
    for (defense, params), rs in groups.items():
        ok = [r for r in rs if r.ok]
        mean = lambda vals: float(np.mean(vals)) if vals else math.nan
        rows.append({"defense": defense, "params": params, "runs": len(rs), "ok": len(ok),
                     "accuracy": mean([r.accuracy for r in ok]), "mse": mean([r.mse for r in ok]),
                     "sigma": mean([r.sigma for r in ok if r.sigma is not None])})
    return rows


def ablation_cells(base: TrainConfig, seeds) -> list[tuple[TrainConfig, str]]:
    """The full InfoDecom config and three variants, each removing one ingredient."""
    if base.defense != "infodecom":
        raise ValueError("ablation needs an infodecom base config")
    variants = {"full": {}, "no_visual_removal": {"retained": 64}, "no_cl": {"lam": 0.0},
                "no_noise": {"force_sigma": 0.0}}
    return [(replace(base, seed=int(s), **variants[name]), name) for name in ABLATION_VARIANTS for s in seeds]


def records_json(records: list[TradeoffRecord]) -> list[dict]:
    """Deterministic record dicts (no wall clock)."""
    out = []
    for r in records:
        d = asdict(r)
        d.pop("wall_clock_s")
        out.append(d)
    return out
