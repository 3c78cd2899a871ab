import logging
from datetime import datetime, timezone
from pathlib import Path

from fpdf import FPDF
from fpdf.enums import XPos, YPos

from io_utils import atomic_write_bytes

logger = logging.getLogger(__name__)

REPORT_PDF = "report.pdf"


def _line(pdf, label, value, label_w=60):
    pdf.cell(label_w, 6, label, border=0)
    pdf.cell(0, 6, str(value), new_x=XPos.LMARGIN, new_y=YPos.NEXT)


def _heading(pdf, text):
    pdf.ln(4)
    pdf.set_font("Helvetica", "B", 11)
    pdf.cell(0, 7, text, new_x=XPos.LMARGIN, new_y=YPos.NEXT)
    pdf.set_font("Helvetica", "", 9)


def report_pdf_bytes(report, title="dforce run report"):
    """Render a RunReport as a PDF: header block, final metrics, series summary."""
    pdf = FPDF()
    pdf.add_page()
    pdf.set_margins(left=12, top=12, right=12)

    pdf.set_font("Helvetica", "B", 14)
    pdf.cell(0, 10, title, align="C", new_x=XPos.LMARGIN, new_y=YPos.NEXT)
    pdf.set_font("Helvetica", "", 9)
    _line(pdf, "Config hash:", report.config_hash[:32])
    _line(pdf, "Seed:", report.seed)
    _line(pdf, "Code version:", report.code_version)
    _line(pdf, "Wall clock:", f"{report.wall_clock:.2f} s")

    _heading(pdf, "Final metrics")
    pdf.set_font("Helvetica", "B", 9)
    pdf.cell(70, 6, "Metric", border=1)
    pdf.cell(40, 6, "Value", border=1)
    pdf.cell(0, 6, "Operation", border=1, new_x=XPos.LMARGIN, new_y=YPos.NEXT)
    pdf.set_font("Helvetica", "", 9)
    for metric, f in sorted(report.final.items()):
        pdf.cell(70, 6, metric, border=1)
        pdf.cell(40, 6, f"{f['value']:.6g}", border=1)
        pdf.cell(0, 6, f["operation"], border=1, new_x=XPos.LMARGIN, new_y=YPos.NEXT)

    if report.series:
        _heading(pdf, "Series")
        for metric, s in sorted(report.series.items()):
            values = s["values"]
            if not values:
                continue
            _line(pdf, f"{metric} ({s['operation']})",
                  f"{len(values)} points, first {values[0]:.6g}, last {values[-1]:.6g}", label_w=90)

    pdf.ln(6)
    pdf.set_font("Helvetica", "I", 8)
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M UTC")
    pdf.cell(0, 6, f"Generated {stamp}", new_x=XPos.LMARGIN, new_y=YPos.NEXT)
    return bytes(pdf.output())


def write_report_pdf(report, run_dir):
    path = Path(run_dir) / REPORT_PDF
    atomic_write_bytes(path, report_pdf_bytes(report))
    logger.info("Wrote %s", path)
    return path
