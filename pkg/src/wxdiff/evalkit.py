"""Metrics and controllability probes.

Fidelity (PSNR / SSIM) leans on the procedural ground truth; temporal
consistency is the mean cosine similarity of consecutive-frame features;
structure distance compares patch-feature self-similarity matrices (scaled
by 100); motion smoothness penalizes second differences. Feature extractors
are pluggable; the defaults are handcrafted so results are deterministic and
dependency-free.

The controllability probe synthesizes a strength sweep and checks that an
effect-specific image statistic moves monotonically with the requested
strength (Spearman rank correlation, sign-oriented so +1 is the correct
direction), and that the analytic estimators read the requested strength
back off the outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage, stats

from .autolabel import _transient_mask, estimate_strengths
from .datapipe import HandcraftedEmbedder
from .procsim.effects import EffectParams, luminance
from .types import EFFECTS, SceneMeta, VideoTensor, WeatherStrength

REPORT_SCHEMA_VERSION = 1
PSNR_CAP = 99.0

# Direction in which each effect's probe statistic should move as s grows.
PROBE_ORIENTATION = {
    "fog": -1,            # RMS contrast falls
    "cloud": -1,          # non-sky luminance falls
    "snow_coverage": +1,  # ground whiteness rises
    "puddle": +1,         # ground change fraction rises
    "rain": +1,           # transient pixel count rises
    "snow": +1,
}


def psnr(pred: np.ndarray, ref: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(ref, np.float64)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(pred: np.ndarray, ref: np.ndarray, window: int = 7,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over frames and channels, uniform window, data range 1."""
    x = np.asarray(pred, np.float64)
    y = np.asarray(ref, np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    c1, c2 = k1 ** 2, k2 ** 2
    size = (1, window, window, 1)
    mx = ndimage.uniform_filter(x, size=size, mode="reflect")
    my = ndimage.uniform_filter(y, size=size, mode="reflect")
    sxx = ndimage.uniform_filter(x * x, size=size, mode="reflect") - mx * mx
    syy = ndimage.uniform_filter(y * y, size=size, mode="reflect") - my * my
    sxy = ndimage.uniform_filter(x * y, size=size, mode="reflect") - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def fidelity(pred: VideoTensor, ref: VideoTensor) -> tuple[float, float]:
    if pred.frames.shape != ref.frames.shape:
        raise ValueError("fidelity needs matched shapes")
    return psnr(pred.frames, ref.frames), ssim(pred.frames, ref.frames)


def temporal_consistency(video: VideoTensor, embedder=None) -> float:
    """Mean cosine similarity of consecutive-frame features."""
    if video.L < 2:
        raise ValueError("temporal consistency needs L >= 2")
    embedder = embedder or HandcraftedEmbedder()
    feats = np.stack([embedder.embed_frame(f) for f in video.frames])
    sims = np.sum(feats[:-1] * feats[1:], axis=1)
    return float(np.mean(sims))


def motion_smoothness(video: VideoTensor) -> float:
    """1 - clamp(mean |I_{t+1} - 2 I_t + I_{t-1}| / 0.5)."""
    if video.L < 3:
        raise ValueError("motion smoothness needs L >= 3")
    f = video.frames.astype(np.float64)
    second = f[2:] - 2 * f[1:-1] + f[:-2]
    return float(1.0 - np.clip(np.mean(np.abs(second)) / 0.5, 0.0, 1.0))


def _patch_features(frame: np.ndarray, grid: int = 8) -> np.ndarray:
    """Mean-centered luma patches on a grid x grid tiling; centering makes
    the self-similarity matrix exactly invariant to global offsets."""
    gray = luminance(frame)
    rows = np.array_split(gray, grid, axis=0)
    feats = []
    for r in rows:
        for c in np.array_split(r, grid, axis=1):
            v = c.ravel().astype(np.float64)
            feats.append(v - v.mean())
    # patches may differ in size by a pixel; pad to the longest
    n = max(len(v) for v in feats)
    return np.stack([np.pad(v, (0, n - len(v))) for v in feats])


def _ssm(frame: np.ndarray, grid: int = 8) -> np.ndarray:
    f = _patch_features(frame, grid)
    norms = np.linalg.norm(f, axis=1)
    safe = np.where(norms > 1e-12, norms, 1.0)
    fn = f / safe[:, None]
    fn[norms <= 1e-12] = 0.0
    return fn @ fn.T


def structure_distance(edited: VideoTensor, source: VideoTensor,
                       extractor: Optional[Callable] = None) -> float:
    """Mean |SSM(edited) - SSM(source)| x 100 over frames."""
    if edited.frames.shape != source.frames.shape:
        raise ValueError("structure distance needs matched shapes")
    make_ssm = extractor or _ssm
    diffs = [np.abs(make_ssm(e) - make_ssm(s)).mean()
             for e, s in zip(edited.frames, source.frames)]
    return float(np.mean(diffs) * 100.0)


# --- controllability probe ----------------------------------------------------

def probe_statistic(effect: str, out: VideoTensor, clear: VideoTensor,
                    meta: Optional[SceneMeta], params: EffectParams) -> float:
    w = out.frames.astype(np.float64)
    c = clear.frames.astype(np.float64)
    if effect == "fog":
        return float(np.mean(np.std(luminance(w), axis=(1, 2))))  # RMS contrast
    if effect == "cloud":
        m = ~meta.sky_mask if meta is not None else np.ones(w.shape[:3], bool)
        return float(luminance(w)[m].mean())
    if effect == "snow_coverage":
        m = meta.ground_mask if meta is not None else np.ones(w.shape[:3], bool)
        return float(luminance(w)[m].mean())  # ground whiteness
    if effect == "puddle":
        m = (meta.ground_mask if meta is not None else np.ones(w.shape[:3], bool)).any(axis=0)
        change = np.abs(w - c).mean(axis=(0, 3))
        return float((change[m] > 0.08).mean())
    if effect in ("rain", "snow"):
        return float(_transient_mask(w, c).sum(axis=(1, 2)).mean())
    raise ValueError(f"unknown effect {effect!r}")


@dataclass
class ProbeResult:
    effect: str
    s_grid: list
    spearman_rho: float          # mean over clips, sign-oriented (+1 = correct)
    rows: list = field(default_factory=list)
    degenerate_clips: int = 0

    def to_dict(self) -> dict:
        return {
            "effect": self.effect,
            "s_grid": list(self.s_grid),
            "spearman_rho": self.spearman_rho,
            "degenerate_clips": self.degenerate_clips,
            "rows": self.rows,
        }


def controllability_probe(
    synthesize: Callable[[VideoTensor, WeatherStrength], VideoTensor],
    clear_clips: Sequence[tuple],
    effect: str,
    s_grid: Sequence[float],
    params: EffectParams = EffectParams(),
) -> ProbeResult:
    """Sweep strengths on each clip and rank-correlate the effect statistic.

    clear_clips holds (clip_id, VideoTensor, SceneMeta-or-None) tuples;
    synthesize maps (clear clip, strengths) to the edited clip.
    """
    if len(set(np.round(s_grid, 9))) < 4:
        raise ValueError("s_grid needs at least 4 distinct values")
    orient = PROBE_ORIENTATION[effect]
    rhos, rows, degenerate = [], [], 0
    for clip_id, clip, meta in clear_clips:
        stats_row, est_row = [], []
        for s in s_grid:
            strengths = WeatherStrength(**{effect: float(s)})
            out = synthesize(clip, strengths)
            stats_row.append(probe_statistic(effect, out, clip, meta, params))
            est = estimate_strengths(out, clip, meta, params)
            est_row.append(getattr(est.s_hat, effect))
        if np.ptp(stats_row) == 0:
            degenerate += 1
            rows.append({"clip": clip_id, "stats": stats_row, "rho": None,
                         "estimates": est_row, "degenerate": True})
            continue
        rho = stats.spearmanr(np.asarray(s_grid), np.asarray(stats_row)).statistic
        rhos.append(orient * rho)
        rows.append({"clip": clip_id, "stats": stats_row, "rho": orient * rho,
                     "estimates": est_row, "degenerate": False})
    mean_rho = float(np.mean(rhos)) if rhos else float("nan")
    return ProbeResult(effect=effect, s_grid=list(s_grid), spearman_rho=mean_rho,
                       rows=rows, degenerate_clips=degenerate)


# --- reports and plots ---------------------------------------------------------

@dataclass
class EvalReport:
    """Per-clip metric rows plus aggregates; all fields finite."""

    rows: list = field(default_factory=list)
    probe: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def add_row(self, clip_id: str, **metrics):
        self.rows.append({"clip": clip_id, **metrics})

    def aggregates(self) -> dict:
        agg = {"n_clips": len(self.rows)}
        if self.rows:
            keys = [k for k in self.rows[0] if k != "clip"
                    and isinstance(self.rows[0][k], (int, float))]
            for k in keys:
                agg[k] = float(np.mean([r[k] for r in self.rows]))
        return agg

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "aggregates": self.aggregates(),
            "rows": self.rows,
            "probe": self.probe,
            "extra": self.extra,
        }


def write_report(report: EvalReport, path: Path) -> dict:
    doc = report.to_dict()
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc


def read_report(path: Path) -> dict:
    return json.loads(Path(path).read_text())


def plot_report(report: dict, out_dir: Path, train_log: Optional[Path] = None) -> list:
    """Emit one figure per metric family; returns the written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    agg = report.get("aggregates", {})
    bars = {k: v for k, v in agg.items() if k != "n_clips"}
    if bars:
        fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(bars), 3.2))
        ax.bar(range(len(bars)), list(bars.values()), color="#4878a8")
        ax.set_xticks(range(len(bars)), list(bars.keys()), rotation=30, ha="right")
        ax.set_title(f"aggregate metrics over {agg.get('n_clips', 0)} clips")
        fig.tight_layout()
        p = out_dir / "metrics_bar.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        written.append(p)

    probe = report.get("probe")
    if probe:
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        for row in probe["rows"]:
            ax.plot(probe["s_grid"], row["stats"], marker="o", alpha=0.6)
        ax.set_xlabel(f"requested {probe['effect']} strength")
        ax.set_ylabel("probe statistic")
        ax.set_title(f"{probe['effect']}: mean Spearman rho = {probe['spearman_rho']:.3f}")
        fig.tight_layout()
        p = out_dir / f"probe_{probe['effect']}.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        written.append(p)

    if train_log and Path(train_log).exists():
        steps, losses = [], []
        with open(train_log) as f:
            for line in f:
                rec = json.loads(line)
                steps.append(rec["step"])
                losses.append(rec["loss"])
        if steps:
            fig, ax = plt.subplots(figsize=(4.2, 3.2))
            ax.plot(steps, losses, lw=0.8)
            ax.set_yscale("log")
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
            ax.set_title("training loss")
            fig.tight_layout()
            p = out_dir / "loss_curve.png"
            fig.savefig(p, dpi=110)
            plt.close(fig)
            written.append(p)
    return written
