"""
Ablation grids over network pairing, fusion strategy and loss terms.

Every (row, seed) cell trains from scratch and is scored on the test split
with the spatial branch. Cells run in parallel processes; a failing cell is
recorded with its error and marked in the report.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .config import resolve_config
from .data import DatasetManifest
from .evaluation import METRICS, evaluate_model
from .models import load_branch
from .trainer import train
from .utils import thread_budget, write_json

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationRow:
    label: str
    method: str
    overrides: Dict[str, object] = field(default_factory=dict)
    columns: Dict[str, str] = field(default_factory=dict)


GRIDS: Dict[str, List[AblationRow]] = {
    "network": [
        AblationRow("UNet + UNet", "me-unet-unet", columns={"model_1": "UNet", "model_2": "UNet"}),
        AblationRow("YNet + YNet", "me-ynet-ynet", columns={"model_1": "YNet", "model_2": "YNet"}),
        AblationRow("UNet + YNet", "s2me", columns={"model_1": "UNet", "model_2": "YNet"}),
    ],
    "fusion": [
        AblationRow("Random", "s2me", {"fusion": "random"}, {"mixing": "random"}),
        AblationRow("Equal", "s2me", {"fusion": "equal"}, {"mixing": "equal"}),
        AblationRow("Entropy", "s2me", {"fusion": "entropy"}, {"mixing": "entropy"}),
    ],
    "loss": [
        AblationRow("pCE", "scrib-pce", columns={"scrib": "✓", "mt": "✗", "el": "✗"}),
        AblationRow("pCE + MT", "s2me-mt", columns={"scrib": "✓", "mt": "✓", "el": "✗"}),
        AblationRow("pCE + EL", "s2me-el", columns={"scrib": "✓", "mt": "✗", "el": "✓"}),
        AblationRow("pCE + MT + EL", "s2me", columns={"scrib": "✓", "mt": "✓", "el": "✓"}),
    ],
    "supervision": [
        AblationRow("Scribble (S2ME)", "s2me", columns={"labels": "scribble"}),
        AblationRow("Dense (CE)", "fully-ce", columns={"labels": "dense"}),
    ],
}


def _cell_dir(out_dir: Path, grid: str, row: AblationRow, seed: int) -> Path:
    slug = row.label.lower().replace(" + ", "-").replace(" ", "-").replace("(", "").replace(")", "")
    return out_dir / grid / slug / f"seed-{seed}"


def run_cell(
    grid: str,
    row: AblationRow,
    seed: int,
    manifest_root: str,
    out_dir: str,
    base_overrides: Mapping[str, object],
) -> dict:
    """Train and score one cell; never raises"""
    record = {"grid": grid, "row": row.label, "method": row.method, "seed": seed, **row.columns}
    try:
        manifest = DatasetManifest.load(manifest_root)
        overrides = {**base_overrides, **row.overrides, "seed": seed}
        config = resolve_config(row.method, overrides=overrides)
        cell_dir = _cell_dir(Path(out_dir), grid, row, seed)
        train(config, manifest, cell_dir)
        model = load_branch(cell_dir / "spatial.s2tf")
        frame = evaluate_model(model, manifest.load_split("test"), config.batch_size)
        record.update({m: float(frame[m].mean()) for m in METRICS})
        record["error"] = ""
    except Exception as e:
        logging.getLogger(__name__).error(f"Ablation cell {grid}/{row.label}/seed {seed} failed: {e}")
        record.update({m: np.nan for m in METRICS})
        record["error"] = str(e)
    return record


class AblationRunner:
    def __init__(
        self,
        manifest: DatasetManifest,
        out_dir: Union[str, Path],
        seeds: Sequence[int] = (0, 1, 2),
        base_overrides: Optional[Mapping[str, object]] = None,
        n_jobs: Optional[int] = None,
    ):
        self.manifest = manifest
        self.out_dir = Path(out_dir)
        self.seeds = list(seeds)
        self.base_overrides = dict(base_overrides or {})
        self.n_jobs = n_jobs or thread_budget()
        self.logger = logging.getLogger(__name__)

    def run(self, grids: Sequence[str] = ("network", "fusion", "loss")) -> pd.DataFrame:
        unknown = [g for g in grids if g not in GRIDS]
        if unknown:
            raise ValueError(f"Unknown ablation grids: {unknown} (expected some of {sorted(GRIDS)})")
        os.makedirs(self.out_dir, exist_ok=True)

        cells = [(g, row, seed) for g in grids for row in GRIDS[g] for seed in self.seeds]
        self.logger.info(f"Running {len(cells)} ablation cells over grids {list(grids)} with {self.n_jobs} workers")
        records = Parallel(n_jobs=self.n_jobs)(
            delayed(run_cell)(g, row, seed, str(self.manifest.root), str(self.out_dir), self.base_overrides)
            for g, row, seed in cells
        )
        results = pd.DataFrame(records)
        failed = int((results["error"] != "").sum())
        if failed:
            self.logger.warning(f"{failed} of {len(results)} ablation cells failed")

        results.to_csv(self.out_dir / "ablation.csv", index=False)
        report = render_report(results, grids)
        (self.out_dir / "ablation.md").write_text(report)
        write_json(self.out_dir / "ablation.json", summarize(results).to_dict(orient="records"))
        return results


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """Mean and population stddev per (grid, row) over successful seeds"""
    rows = []
    for (grid, label), group in results.groupby(["grid", "row"], sort=False):
        ok = group[group["error"] == ""]
        row = {"grid": grid, "row": label, "seeds": len(ok), "failed": len(group) - len(ok)}
        for metric in METRICS:
            row[f"{metric}_mean"] = float(ok[metric].mean()) if len(ok) else np.nan
            row[f"{metric}_std"] = float(ok[metric].std(ddof=0)) if len(ok) else np.nan
        rows.append(row)
    return pd.DataFrame(rows)


def _cell(mean: float, std: float, digits: int) -> str:
    return f"{mean:.{digits}f}±{std:.{digits}f}"


def render_report(results: pd.DataFrame, grids: Sequence[str]) -> str:
    summary = summarize(results)
    sections = []
    for grid in grids:
        rows = GRIDS[grid]
        extra = list(rows[0].columns) if rows else []
        header = extra + ["DSC ↑", "IoU ↑", "Prec ↑", "HD ↓"]
        lines = [f"### {grid.capitalize()} ablation", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for row in rows:
            stats = summary[(summary["grid"] == grid) & (summary["row"] == row.label)]
            cells = [row.columns.get(c, "") for c in extra]
            if stats.empty or stats.iloc[0]["seeds"] == 0:
                cells += ["failed"] * 4
            else:
                s = stats.iloc[0]
                cells += [
                    _cell(s["dsc_mean"], s["dsc_std"], 3),
                    _cell(s["iou_mean"], s["iou_std"], 3),
                    _cell(s["precision_mean"], s["precision_std"], 3),
                    _cell(s["hd_mean"], s["hd_std"], 2),
                ]
                if s["failed"]:
                    cells[-1] += f" ({int(s['failed'])} failed)"
            lines.append("| " + " | ".join(cells) + " |")
        sections.append("\n".join(lines))
    return "\n\n".join(sections) + "\n"
