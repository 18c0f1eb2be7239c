from pathlib import Path

from jinja2 import Environment, FileSystemLoader, StrictUndefined

from expotwist.config import settings

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"

templates = Environment(
    loader=FileSystemLoader(str(TEMPLATE_DIR)),
    undefined=StrictUndefined,
    keep_trailing_newline=True,
    trim_blocks=True,
    lstrip_blocks=True,
)

templates.globals["app_version"] = settings.version
templates.globals["app_name"] = settings.app_name


# --- Filters ---
def short_float(value, digits: int = 6) -> str:
    """Compact number for human-readable tables (CSV files keep full precision)."""
    if value is None:
        return "-"
    return f"{float(value):.{digits}g}"


def status(passed: bool) -> str:
    return "PASS" if passed else "FAIL"


def pluralize(count: int, singular: str, plural: str = None) -> str:
    if count == 1:
        return singular
    return plural if plural else singular + "s"


templates.filters["short_float"] = short_float
templates.filters["status"] = status
templates.filters["pluralize"] = pluralize


def render(name: str, **context) -> str:
    return templates.get_template(name).render(**context)
