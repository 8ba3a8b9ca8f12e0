# app/report_generator.py
import os
import io
import json
import logging
from datetime import datetime
from typing import Dict, List, Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
from fpdf import FPDF

from app.config import RunPaths, config_hash
from app.schemas import GridCellOut, OrderingCheck, RunConfig

logger = logging.getLogger(__name__)

# Define consistent colors for charts
CONV_BAR_COLOR = '#4285F4'
COPY_BAR_COLOR = '#9E9E9E'
LOSS_LINE_COLOR = '#EA4335'

METRIC_COLUMNS = ["mcd_conv", "mcd_copy", "symbol_error_rate", "success_rate", "valid_l1", "scratch_valid_l1"]
FLOAT_DIGITS = 6


def _round(value: Optional[float]) -> Optional[float]:
    return None if value is None else round(float(value), FLOAT_DIGITS)


def _sorted_cells(cells: List[GridCellOut]) -> List[GridCellOut]:
    return sorted(cells, key=lambda c: (c.variant, -c.target_size, c.repeat))


def _mean(cells: List[GridCellOut], variant: str, size: int, field: str) -> Optional[float]:
    values = [getattr(c, field) for c in cells
              if c.variant == variant and c.target_size == size and c.status == "ok" and getattr(c, field) is not None]
    return sum(values) / len(values) if values else None


# --- START: QUALITATIVE ORDERING CHECKS ---

def ordering_checks(cells: List[GridCellOut], sizes: List[int], min_success: float = 0.8) -> List[OrderingCheck]:
    """
    The qualitative claims the grid is run for. A check whose cells are missing
    or failed reports passed=None.
    """
    small, large = min(sizes), max(sizes)
    best, plain, sep = "combine+separate", "none", "separate"
    checks = []

    success = _mean(cells, best, large, "success_rate")
    checks.append(OrderingCheck(
        name="a2o_success",
        passed=None if success is None else success >= min_success,
        detail={"success_rate": success, "required": min_success},
    ))

    b_mcd, n_mcd, s_mcd = (_mean(cells, v, small, "mcd_conv") for v in (best, plain, sep))
    b_ser, n_ser, s_ser = (_mean(cells, v, small, "symbol_error_rate") for v in (best, plain, sep))
    passed = None
    if None not in (b_mcd, n_mcd, b_ser, n_ser):
        passed = b_mcd < n_mcd and b_ser < n_ser
        # separate-only lies between or ties on both metrics
        if s_mcd is not None:
            passed = passed and b_mcd <= s_mcd <= n_mcd
        if s_ser is not None:
            passed = passed and b_ser <= s_ser <= n_ser
    checks.append(OrderingCheck(
        name="data_efficiency",
        passed=passed,
        detail={"combine+separate_mcd": b_mcd, "none_mcd": n_mcd, "separate_mcd": s_mcd,
                "combine+separate_ser": b_ser, "none_ser": n_ser, "separate_ser": s_ser},
    ))

    b_large, n_large = _mean(cells, best, large, "mcd_conv"), _mean(cells, plain, large, "mcd_conv")
    passed = None
    if small != large and None not in (b_mcd, n_mcd, b_large, n_large):
        passed = (b_mcd - b_large) < (n_mcd - n_large)
    checks.append(OrderingCheck(
        name="degradation",
        passed=passed,
        detail={"combine+separate_drop": None if passed is None else b_mcd - b_large,
                "none_drop": None if passed is None else n_mcd - n_large},
    ))

    paired = [c for c in cells if c.variant == best and c.target_size == small and c.status == "ok"
              and c.valid_l1 is not None and c.scratch_valid_l1 is not None]
    checks.append(OrderingCheck(
        name="pretraining_benefit",
        passed=all(c.valid_l1 < c.scratch_valid_l1 for c in paired) if paired else None,
        detail={"finetune_valid_l1": _mean(paired, best, small, "valid_l1"),
                "scratch_valid_l1": _mean(paired, best, small, "scratch_valid_l1"),
                "repeats": float(len(paired))},
    ))
    return checks

# --- END: QUALITATIVE ORDERING CHECKS ---


def grid_records(cells: List[GridCellOut], checks: List[OrderingCheck], cfg_hash: str) -> List[dict]:
    records = []
    for cell in _sorted_cells(cells):
        record = cell.model_dump(mode="json")
        for key in METRIC_COLUMNS:
            record[key] = _round(record[key])
        records.append({"record": "cell", "config_hash": cfg_hash, **record})
    for check in checks:
        records.append({"record": "check", "config_hash": cfg_hash, "name": check.name, "passed": check.passed,
                        "detail": {k: _round(v) for k, v in check.detail.items()}})
    return records


def write_grid_jsonl(path: str, records: List[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


def summary_frame(cells: List[GridCellOut]) -> pd.DataFrame:
    """Mean over repeats of every (variant, target size) cell."""
    df = pd.DataFrame([c.model_dump() for c in _sorted_cells(cells)])
    if df.empty:
        return df
    df[METRIC_COLUMNS] = df[METRIC_COLUMNS].apply(pd.to_numeric, errors="coerce")
    ok = df[df["status"] == "ok"]
    table = (ok.groupby(["variant", "target_size"], sort=True)[METRIC_COLUMNS]
             .mean()
             .reset_index())
    failed = df[df["status"] != "ok"].groupby(["variant", "target_size"]).size().rename("failed").reset_index()
    table = table.merge(failed, on=["variant", "target_size"], how="outer").fillna({"failed": 0})
    table["failed"] = table["failed"].astype(int)
    return table.sort_values(["variant", "target_size"], ascending=[True, False]).reset_index(drop=True)


def write_grid_txt(path: str, table: pd.DataFrame, checks: List[OrderingCheck], cfg_hash: str) -> None:
    lines = [f"config_hash {cfg_hash}", ""]
    if table.empty:
        lines.append("(no cells)")
    else:
        lines.append(table.to_string(index=False, na_rep="-", float_format=lambda v: f"{v:.4f}"))
    lines.append("")
    for check in checks:
        verdict = "n/a" if check.passed is None else ("PASS" if check.passed else "FAIL")
        lines.append(f"{check.name}: {verdict}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def create_grid_excel(path: str, cells: List[GridCellOut], checks: List[OrderingCheck]) -> str:
    try:
        with pd.ExcelWriter(path, engine='openpyxl') as writer:
            pd.DataFrame([c.model_dump() for c in _sorted_cells(cells)]).to_excel(writer, index=False, sheet_name='Cells')
            pd.DataFrame([{"name": c.name, "passed": c.passed, **c.detail} for c in checks]).to_excel(
                writer, index=False, sheet_name='Checks')
        logger.info(f"✅ Excel grid report saved to: {path}")
        return path
    except Exception as e:
        logger.error(f"❌ Failed to generate Excel grid report: {e}", exc_info=True)
        return ""


class ReportPDF(FPDF):
    def header(self):
        self.set_font('Helvetica', 'B', 14)
        self.cell(0, 10, 'Voice Conversion Grid Report', 0, 1, 'C')
        self.ln(2)

    def footer(self):
        self.set_y(-15)
        self.set_font('Helvetica', 'I', 8)
        self.cell(0, 10, f'Page {self.page_no()}', 0, 0, 'C')


def _chart_to_pdf(pdf: FPDF, fig, margin: float) -> None:
    img_buffer = io.BytesIO()
    plt.tight_layout()
    fig.savefig(img_buffer, format='PNG', dpi=200)
    img_buffer.seek(0)
    plt.close(fig)
    pdf.image(img_buffer, x=margin, w=pdf.w - (margin * 2))
    pdf.ln(5)


def create_grid_pdf(path: str, table: pd.DataFrame, checks: List[OrderingCheck], cfg_hash: str,
                    quantizer_curve: Optional[str] = None) -> str:
    pdf = ReportPDF('P', 'mm', 'A4')
    pdf.add_page()
    page_margin = 15

    pdf.set_font('Helvetica', '', 10)
    pdf.cell(0, 6, f"Generated {datetime.now().strftime('%d %b %Y, %H:%M')}", 0, 1, 'C')
    pdf.cell(0, 6, f"Config hash {cfg_hash[:16]}", 0, 1, 'C')
    pdf.ln(4)

    # --- Summary table ---
    if not table.empty:
        pdf.set_font('Helvetica', 'B', 9)
        pdf.set_fill_color(220, 220, 220)
        headers = ['Variant', 'Size', 'MCD conv', 'MCD copy', 'SER', 'Success']
        col_widths = [45, 20, 28, 28, 28, 28]
        for i, header in enumerate(headers):
            pdf.cell(col_widths[i], 7, header, 1, 0, 'C', 1)
        pdf.ln()
        pdf.set_font('Helvetica', '', 9)
        pdf.set_fill_color(245, 245, 245)
        fill = False
        for _, row in table.iterrows():
            values = [row['variant'], str(row['target_size'])] + [
                "-" if pd.isna(row[k]) else f"{row[k]:.3f}"
                for k in ("mcd_conv", "mcd_copy", "symbol_error_rate", "success_rate")]
            for i, value in enumerate(values):
                pdf.cell(col_widths[i], 6, value, 1, 0, 'L' if i == 0 else 'R', fill)
            pdf.ln()
            fill = not fill
        pdf.ln(5)

    pdf.set_font('Helvetica', 'B', 12)
    pdf.cell(0, 8, 'Ordering checks', 0, 1, 'L')
    pdf.set_font('Helvetica', '', 10)
    for check in checks:
        verdict = "n/a" if check.passed is None else ("pass" if check.passed else "FAIL")
        pdf.cell(0, 6, f"{check.name}: {verdict}", 0, 1, 'L')
    pdf.ln(4)

    # --- MCD per cell chart ---
    try:
        ok = table.dropna(subset=["mcd_conv"]) if not table.empty else table
        if not ok.empty:
            labels = [f"{r.variant}\n{r.target_size}" for r in ok.itertuples()]
            x = range(len(labels))
            fig, ax = plt.subplots(figsize=(8, 4))
            ax.bar([i - 0.2 for i in x], ok["mcd_conv"], width=0.4, color=CONV_BAR_COLOR, label='converted')
            ax.bar([i + 0.2 for i in x], ok["mcd_copy"], width=0.4, color=COPY_BAR_COLOR, label='copy baseline')
            ax.set_xticks(list(x))
            ax.set_xticklabels(labels, fontsize=8)
            ax.set_ylabel('MCD')
            ax.set_title('Cepstral distortion per cell')
            ax.spines['top'].set_visible(False)
            ax.spines['right'].set_visible(False)
            ax.legend()
            _chart_to_pdf(pdf, fig, page_margin)
    except Exception as e:
        logger.error(f"Failed to generate MCD chart: {e}")

    # --- Quantizer loss curve ---
    try:
        if quantizer_curve and os.path.isfile(quantizer_curve):
            curve = pd.read_csv(quantizer_curve, sep="\t")
            if not curve.empty:
                pdf.add_page()
                fig, ax = plt.subplots(figsize=(8, 4))
                ax.plot(curve["step"], curve["loss"], color=LOSS_LINE_COLOR)
                ax.set_xlabel('step')
                ax.set_ylabel('contrastive loss')
                ax.set_title('Quantizer pretraining')
                _chart_to_pdf(pdf, fig, page_margin)
    except Exception as e:
        logger.error(f"Failed to generate quantizer loss chart: {e}")

    pdf.output(path)
    logger.info(f"✅ PDF grid report saved to: {path}")
    return path


def render_grid(cells: List[GridCellOut], cfg: RunConfig, paths: RunPaths) -> Dict[str, str]:
    """
    Write the grid report. grid.jsonl and grid.txt depend only on the cells and
    the config; the xlsx and pdf renderings carry timestamps.
    """
    os.makedirs(paths.reports_dir, exist_ok=True)
    cfg_hash = config_hash(cfg)
    checks = ordering_checks(cells, cfg.corpus.target_sizes)
    table = summary_frame(cells)

    out = {
        "jsonl": os.path.join(paths.reports_dir, "grid.jsonl"),
        "txt": os.path.join(paths.reports_dir, "grid.txt"),
    }
    write_grid_jsonl(out["jsonl"], grid_records(cells, checks, cfg_hash))
    write_grid_txt(out["txt"], table, checks, cfg_hash)
    xlsx = create_grid_excel(os.path.join(paths.reports_dir, "grid.xlsx"), cells, checks)
    if xlsx:
        out["xlsx"] = xlsx
    try:
        out["pdf"] = create_grid_pdf(os.path.join(paths.reports_dir, "grid.pdf"), table, checks, cfg_hash,
                                     paths.quantizer_curve)
    except Exception as e:
        logger.error(f"❌ Failed to generate PDF grid report: {e}", exc_info=True)

    for check in checks:
        verdict = "n/a" if check.passed is None else ("✅" if check.passed else "❌")
        logger.info(f"   {check.name}: {verdict} {check.detail}")
    logger.info(f"✅ Grid report written: {out['jsonl']}")
    return out
