"""Result files: results JSON, transfer CSV and diagnostics histogram CSV."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import jsonschema

from ..core import AttackConfig
from ..pipeline import AdversarialExample
from ..resources import RESULTS_SCHEMA_FILE, read_json
from .experiments import ASR_CONVENTION, DiagnosticsReport, TransferCell, TransferMatrix
from .retrieval import IR_LABEL, TR_LABEL

TRANSFER_COLUMNS = ["source", "attack", "target", "tr_r1_asr", "ir_r1_asr", "config_fingerprint", "seed"]
HISTOGRAM_COLUMNS = ["metric", "bin_left", "bin_right", "count", "config_fingerprint", "seed"]
ROW_COLUMNS = ["k", "source", "attack", "target", "tr_r1_asr", "ir_r1_asr", "white_box", "error", "config_fingerprint", "seed"]
NA = "N/A"


def _fmt(value) -> str:
    if value is None:
        return NA
    if isinstance(value, float):
        return repr(value)  # shortest round-trip form
    return str(value)


def _unfmt_asr(text: str) -> float | None:
    return None if text == NA else float(text)


def results_schema() -> dict:
    return read_json(RESULTS_SCHEMA_FILE)


def validate_results(obj: dict) -> None:
    jsonschema.validate(obj, results_schema())


def build_results(
    command: str,
    config: AttackConfig,
    *,
    matrix: TransferMatrix | None = None,
    examples: Sequence[AdversarialExample] | None = None,
    diagnostics: DiagnosticsReport | None = None,
    ablation: list[dict] | None = None,
    sweep: list[dict] | None = None,
    series: dict | None = None,
    gallery_side: str = "clean",
    skipped_lines: list[dict] | None = None,
) -> dict:
    out: dict = {
        "schema_version": 1,
        "command": command,
        "config": config.to_dict(),
        "config_fingerprint": config.fingerprint(),
        "seed": config.seed,
        "asr_convention": ASR_CONVENTION,
        "tr_label": TR_LABEL,
        "ir_label": IR_LABEL,
        "gallery_side": gallery_side,
        "skipped_lines": list(skipped_lines or []),
    }
    if matrix is not None:
        out["transfer"] = matrix.to_dict()
    if examples is not None:
        out["examples"] = [e.to_record() for e in examples]
    if diagnostics is not None:
        out["diagnostics"] = diagnostics.to_dict()
    if ablation is not None:
        out["ablation"] = ablation
    if sweep is not None:
        out["sweep"] = sweep
    if series is not None:
        out["series"] = series
    return out


def write_transfer_csv(matrix: TransferMatrix, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRANSFER_COLUMNS)
        for source in matrix.rows:
            for target in matrix.cols:
                cell = matrix.cells.get((source, target))
                if cell is None:
                    continue
                writer.writerow(
                    [source, cell.attack, target, _fmt(cell.tr_asr), _fmt(cell.ir_asr), matrix.config_fingerprint, matrix.seed]
                )


def read_transfer_csv(path: Path) -> list[TransferCell]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        TransferCell(
            r["source"], r["target"], r["attack"], _unfmt_asr(r["tr_r1_asr"]), _unfmt_asr(r["ir_r1_asr"]),
            r["source"] == r["target"],
        )
        for r in rows
    ]


def write_rows_csv(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROW_COLUMNS)
        for r in rows:
            writer.writerow([_fmt(r.get(c)) if c != "k" else r.get("k", "") for c in ROW_COLUMNS])


def write_histogram_csv(diag: DiagnosticsReport, config: AttackConfig, path: Path) -> None:
    summary = diag.summary()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTOGRAM_COLUMNS)
        for metric in ("euclidean", "cosine"):
            hist = summary[f"{metric}_histogram"]
            edges, counts = hist["edges"], hist["counts"]
            for i, n in enumerate(counts):
                writer.writerow([metric, _fmt(edges[i]), _fmt(edges[i + 1]), n, config.fingerprint(), config.seed])


def write_report(results: dict, out_dir: Path, *, matrix=None, diagnostics=None, rows=None, config=None) -> dict[str, Path]:
    """Validate and write ``results.json`` plus the CSV companions that apply."""
    validate_results(results)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"results": out_dir / "results.json"}
    paths["results"].write_text(json.dumps(results, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if matrix is not None:
        paths["transfer"] = out_dir / "transfer.csv"
        write_transfer_csv(matrix, paths["transfer"])
    if diagnostics is not None:
        if config is None:
            raise ValueError("diagnostics histograms need the config for fingerprinting")
        paths["histograms"] = out_dir / "diagnostics_histograms.csv"
        write_histogram_csv(diagnostics, config, paths["histograms"])
    if rows is not None:
        paths["rows"] = out_dir / f"{results['command'].replace('-', '_')}.csv"
        write_rows_csv(rows, paths["rows"])
    return paths


def read_results(path: Path) -> dict:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    validate_results(obj)
    return obj


def read_matrix(path: Path) -> TransferMatrix:
    return TransferMatrix.from_dict(read_results(path)["transfer"])
