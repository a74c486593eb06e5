"""Desk-scale benchmark harness for the pipeline's performance claims.

Measures, per configuration cell, mean/std wall time over repeated runs
(one discarded warmup) and the exact attention MAC count taken from run
instrumentation. MAC counts are pure shape arithmetic: deterministic,
integer, platform independent. Wall-clock comparisons only ever assert
direction (merging must not be slower beyond one standard deviation),
never absolute seconds, which are hardware-bound.

Cells run strictly sequentially so timings stay uncontaminated.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .codec import ImageBuffer, LatentCodec
from .pipeline import PipelineConfig, stylize
from .schedule import DiffusionSchedule

CSV_COLUMNS = [
    "steps",
    "seac",
    "merge",
    "trials",
    "mean_seconds",
    "std_seconds",
    "attention_macs",
]


@dataclass(frozen=True)
class BenchCellConfig:
    steps: int
    seac_on: bool
    merge_on: bool

    def label(self) -> str:
        seac = "seac" if self.seac_on else "noseac"
        merge = "merge" if self.merge_on else "nomerge"
        return f"T{self.steps}-{seac}-{merge}"


def default_grid(steps: tuple[int, ...] = (1, 2, 4)) -> list[BenchCellConfig]:
    """Baseline, fused+merged, and fused-unmerged cells per step count."""
    grid = []
    for t in steps:
        grid.append(BenchCellConfig(steps=t, seac_on=False, merge_on=True))
        grid.append(BenchCellConfig(steps=t, seac_on=True, merge_on=True))
        grid.append(BenchCellConfig(steps=t, seac_on=True, merge_on=False))
    return grid


@dataclass
class BenchCell:
    config: BenchCellConfig
    trials: int
    mean_seconds: float
    std_seconds: float
    attention_macs: int
    site_macs: dict[str, int]


@dataclass
class BenchMatrix:
    cells: list[BenchCell] = field(default_factory=list)
    valid: bool = True
    failure: str | None = None

    def cell(self, steps: int, seac_on: bool, merge_on: bool) -> BenchCell | None:
        for c in self.cells:
            cfg = c.config
            if (cfg.steps, cfg.seac_on, cfg.merge_on) == (steps, seac_on, merge_on):
                return c
        return None


def run_bench(
    net,
    codec: LatentCodec,
    images: tuple[ImageBuffer, ImageBuffer],
    grid: list[BenchCellConfig],
    trials: int,
    *,
    schedule: DiffusionSchedule,
    base_config: PipelineConfig | None = None,
) -> BenchMatrix:
    """Time every grid cell and collect exact MAC counts.

    Any cell failure aborts the sweep; the partial matrix comes back
    flagged invalid with the failure message attached.
    """
    if trials < 5:
        raise ValueError(f"need at least 5 trials per cell, got {trials}")
    content, style = images
    base = base_config or PipelineConfig()

    matrix = BenchMatrix()
    for cell_cfg in grid:
        cfg = replace(
            base,
            steps=cell_cfg.steps,
            seac_enabled=cell_cfg.seac_on,
            seac=replace(base.seac, merge_enabled=cell_cfg.merge_on),
        )
        try:
            _, warm_record = stylize(net, codec, content, style, cfg, schedule)
            macs = warm_record.total_attention_macs()
            site_macs: dict[str, int] = {}
            if warm_record.extraction is not None:
                for k, v in warm_record.extraction.site_macs.items():
                    site_macs[k] = site_macs.get(k, 0) + v
            for step in warm_record.steps:
                for k, v in step.site_macs.items():
                    site_macs[k] = site_macs.get(k, 0) + v

            seconds = []
            for _ in range(trials):
                t0 = time.perf_counter()
                _, record = stylize(net, codec, content, style, cfg, schedule)
                seconds.append(time.perf_counter() - t0)
                if record.total_attention_macs() != macs:
                    raise RuntimeError(
                        f"non-deterministic MAC count in cell {cell_cfg.label()}"
                    )
        except Exception as err:
            matrix.valid = False
            matrix.failure = f"{cell_cfg.label()}: {err}"
            return matrix

        matrix.cells.append(
            BenchCell(
                config=cell_cfg,
                trials=trials,
                mean_seconds=float(np.mean(seconds)),
                std_seconds=float(np.std(seconds, ddof=1)),
                attention_macs=macs,
                site_macs=site_macs,
            )
        )
    return matrix


@dataclass
class DirectionCheck:
    name: str
    passed: bool
    detail: str


def check_directions(matrix: BenchMatrix) -> list[DirectionCheck]:
    """Assert the compute-parity and merge-speedup directions.

    Per step count: fused attention with merging must cost exactly the
    baseline MACs; disabling merging must cost exactly twice at the
    fused sites; and merged wall time must not exceed unmerged wall time
    plus one standard deviation.
    """
    checks: list[DirectionCheck] = []
    if not matrix.valid:
        checks.append(DirectionCheck("matrix-valid", False, matrix.failure or "invalid"))
        return checks

    step_counts = sorted({c.config.steps for c in matrix.cells})
    for t in step_counts:
        baseline = matrix.cell(t, seac_on=False, merge_on=True)
        fused = matrix.cell(t, seac_on=True, merge_on=True)
        unmerged = matrix.cell(t, seac_on=True, merge_on=False)

        if baseline and fused:
            ok = fused.site_macs == baseline.site_macs
            checks.append(
                DirectionCheck(
                    f"T{t}-parity",
                    ok,
                    f"fused-with-merge MACs {fused.attention_macs} vs baseline "
                    f"{baseline.attention_macs}",
                )
            )
        if fused and unmerged:
            ok = unmerged.attention_macs > fused.attention_macs
            checks.append(
                DirectionCheck(
                    f"T{t}-merge-macs",
                    ok,
                    f"unmerged {unmerged.attention_macs} > merged {fused.attention_macs}",
                )
            )
            budget = unmerged.mean_seconds + unmerged.std_seconds
            ok_time = fused.mean_seconds <= budget
            saved = 1.0 - fused.mean_seconds / unmerged.mean_seconds
            checks.append(
                DirectionCheck(
                    f"T{t}-merge-time",
                    ok_time,
                    f"merged {fused.mean_seconds * 1e3:.1f}ms vs unmerged "
                    f"{unmerged.mean_seconds * 1e3:.1f}ms (+1std "
                    f"{budget * 1e3:.1f}ms); measured saving {saved:+.1%}",
                )
            )
    return checks


def matrix_to_csv(matrix: BenchMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for cell in matrix.cells:
        writer.writerow(
            [
                cell.config.steps,
                "on" if cell.config.seac_on else "off",
                "on" if cell.config.merge_on else "off",
                cell.trials,
                f"{cell.mean_seconds:.6f}",
                f"{cell.std_seconds:.6f}",
                cell.attention_macs,
            ]
        )
    return buf.getvalue()


def format_summary(matrix: BenchMatrix, checks: list[DirectionCheck]) -> str:
    lines = []
    header = f"{'cell':<20} {'trials':>6} {'mean(s)':>10} {'std(s)':>10} {'attn MACs':>14}"
    lines.append(header)
    lines.append("-" * len(header))
    for cell in matrix.cells:
        lines.append(
            f"{cell.config.label():<20} {cell.trials:>6} "
            f"{cell.mean_seconds:>10.4f} {cell.std_seconds:>10.4f} "
            f"{cell.attention_macs:>14,}"
        )
    if not matrix.valid:
        lines.append(f"INVALID: {matrix.failure}")
    lines.append("")
    for check in checks:
        status = "ok " if check.passed else "FAIL"
        lines.append(f"[{status}] {check.name}: {check.detail}")
    return "\n".join(lines)
