from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd
from jinja2 import Environment, FileSystemLoader, select_autoescape

from config import FIXED_RATE_LENGTHS, TEMPLATES_DIR, logger
from errors import EmptyInputError
from harness import ExperimentResult
from models import Family, ModelVariant, Scale, parameter_table, storage_savings

GRID_COLUMNS = ["family", "model", "n", "b", "nmse_db", "entropy_bits", "feedback_bits", "bit_width_saving"]

jinja_env = Environment(
    loader=FileSystemLoader(searchpath=TEMPLATES_DIR),
    autoescape=select_autoescape(["html", "xml"]),
    trim_blocks=True,
    lstrip_blocks=True,
)
jinja_env.filters["thousands"] = lambda value: f"{value:,}"


def _display(family: Family, changeable_rate: bool) -> str:
    return ModelVariant(family=family, changeable_rate=changeable_rate).name


def parameter_frame(families: Sequence[Family] = tuple(Family)) -> pd.DataFrame:
    """Parameter accounting of every fixed-rate length, one row per (family, M)."""
    rows = []
    for family in families:
        family = Family(family)
        for row in parameter_table(family, FIXED_RATE_LENGTHS[family.value], Scale.FULL):
            rows.append({"family": family.value, **row})
    return pd.DataFrame(rows, columns=["family", "M", "encoder", "decoder", "total"])


def storage_frame(families: Sequence[Family] = tuple(Family)) -> pd.DataFrame:
    rows = []
    for family in families:
        s = storage_savings(Family(family))
        rows.append({"family": s.family.value, **s.model_dump(exclude={"family", "fixed_rate_lengths"})})
    return pd.DataFrame(rows)


def render_parameter_table(families: Sequence[Family] = tuple(Family)) -> str:
    frame = parameter_frame(families)
    blocks = [{"title": _display(Family(f), False), "rows": frame[frame["family"] == Family(f).value].to_dict("records")}
              for f in families]
    return jinja_env.get_template("parameter_table.txt").render(blocks=blocks)


def render_storage_savings(families: Sequence[Family] = tuple(Family)) -> str:
    savings = []
    for family in families:
        s = storage_savings(Family(family)).model_dump()
        s["fixed_name"] = _display(Family(family), False)
        s["changeable_name"] = _display(Family(family), True)
        savings.append(s)
    return jinja_env.get_template("storage_savings.txt").render(savings=savings)


def grid_frame(results: Sequence[ExperimentResult]) -> pd.DataFrame:
    """NMSE grid of all results, sorted by (family, n, b)."""
    rows = []
    for result in results:
        for point in result.grid:
            rows.append({"family": result.family.value, "model": result.model, **point.model_dump()})
    frame = pd.DataFrame(rows, columns=GRID_COLUMNS)
    return frame.sort_values(["family", "n", "b"], kind="stable").reset_index(drop=True)


def render_nmse_grid(frame: pd.DataFrame) -> str:
    rows = []
    for row in frame.to_dict("records"):
        row["entropy_text"] = "-" if pd.isna(row["entropy_bits"]) else f"{row['entropy_bits']:.3f}"
        row["bits_text"] = "-" if pd.isna(row["feedback_bits"]) else str(int(row["feedback_bits"]))
        rows.append(row)
    return jinja_env.get_template("nmse_grid.txt").render(rows=rows)


def load_grid_csv(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path)
    return frame[GRID_COLUMNS]


@dataclass
class Report:
    text: str
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    files: List[Path] = field(default_factory=list)


def emit_report(results: Sequence[ExperimentResult], output_dir: Optional[Union[str, Path]] = None,
                families: Sequence[Family] = tuple(Family)) -> Report:
    """Render the accounting tables and the NMSE grid of ``results``.

    With ``output_dir`` the text goes to ``report.txt`` and every table to a CSV file.
    """
    if not results:
        raise EmptyInputError("emit_report needs at least one experiment result")
    grid = grid_frame(results)
    text = "\n\n".join([render_parameter_table(families), render_storage_savings(families), render_nmse_grid(grid)])
    report = Report(text=text, tables={
        "parameters": parameter_frame(families),
        "storage": storage_frame(families),
        "nmse_grid": grid,
    })
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        (output_dir / "report.txt").write_text(text)
        report.files.append(output_dir / "report.txt")
        for name, frame in report.tables.items():
            path = output_dir / f"{name}.csv"
            frame.to_csv(path, index=False)
            report.files.append(path)
        logger.info(f"📝 Report for {len(results)} results written to {output_dir}")
    return report
