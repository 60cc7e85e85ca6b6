import logging
import math

from pathlib import Path
from typing import Any, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from jinja2 import Environment, FileSystemLoader  # noqa: E402

from labelfactory.manifest import RunManifest  # noqa: E402

LOG = logging.getLogger(__name__)

DEFAULT_TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"
PLOTS_DIR = "plots"


def metric_format(value: Any) -> str:
    """Numbers to 4 decimals, NaN as 'n/a'"""
    if isinstance(value, bool) or value is None:
        return str(value)
    if isinstance(value, (int, float)):
        if isinstance(value, float) and math.isnan(value):
            return "n/a"
        return f"{value:.4f}" if isinstance(value, float) else str(value)
    return str(value)


def seconds_format(seconds: float) -> str:
    minutes, secs = divmod(int(round(seconds)), 60)
    return f"{minutes}:{secs:02d}"


def _environment(template_dir: Path) -> Environment:
    env = Environment(loader=FileSystemLoader(template_dir), autoescape=True)
    env.filters['metric_format'] = metric_format
    env.filters['seconds_format'] = seconds_format
    return env


def plot_traces(name: str, traces: dict[str, list[float]], path: Path) -> Optional[Path]:
    """ One loss-trace figure per stage, all components on shared axes """
    traces = {key: values for key, values in traces.items() if values}
    if not traces:
        return None
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, values in sorted(traces.items()):
        ax.plot(range(len(values)), values, label=key, linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(f"{name} losses")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100)
    plt.close(fig)
    return path


def plot_pr_curves(name: str, curves: dict[str, dict], class_names: list[str], path: Path) -> Optional[Path]:
    """ Precision-recall curve per class for one detector """
    if not curves:
        return None
    fig, ax = plt.subplots(figsize=(5, 5))
    for class_id, curve in sorted(curves.items(), key=lambda item: int(item[0])):
        index = int(class_id)
        label = class_names[index] if index < len(class_names) else class_id
        ax.step(curve["recall"], curve["precision"], where="post", label=label)
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"PR curves: {name}")
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100)
    plt.close(fig)
    return path


def render_report(manifest: RunManifest, output_dir: Path, template_dir: Path = DEFAULT_TEMPLATE_DIR) -> Path:
    """ Render ``report.html`` and its plots for one run directory """

    output_dir = Path(output_dir)
    plots_dir = output_dir / PLOTS_DIR
    plots_dir.mkdir(parents=True, exist_ok=True)
    class_names = manifest.config.get("class_names", [])

    trace_plots = []
    pr_plots = []
    for name, record in manifest.stages.items():
        plot = plot_traces(name, record.traces, plots_dir / f"{name}_loss.png")
        if plot is not None:
            trace_plots.append((name, plot.relative_to(output_dir).as_posix()))
        for detector, curves in record.metrics.get("pr_curves", {}).items():
            plot = plot_pr_curves(detector, curves, class_names, plots_dir / f"pr_{detector}.png")
            if plot is not None:
                pr_plots.append((detector, plot.relative_to(output_dir).as_posix()))

    env = _environment(template_dir)
    template = env.get_template("report.html.j2")
    html_content = template.render(
        page_title="Labelled data factory run",
        manifest=manifest,
        metrics={k: v for k, v in sorted(manifest.metrics.items()) if not isinstance(v, dict)},
        per_class={k: v for k, v in sorted(manifest.metrics.items()) if isinstance(v, dict)},
        trace_plots=trace_plots,
        pr_plots=pr_plots,
    )

    output_file = output_dir / "report.html"
    with open(output_file, 'w', encoding='utf-8') as f:
        f.write(html_content)
    LOG.info("Run report written to %s", output_file)
    return output_file


def render_summary(title: str, summary: dict, output_path: Path, template_dir: Path = DEFAULT_TEMPLATE_DIR) -> Path:
    """ Render a benchmark or ablation summary (variant -> per-seed values and means) """

    env = _environment(template_dir)
    template = env.get_template("summary.html.j2")
    html_content = template.render(page_title=title, summary=summary)

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, 'w', encoding='utf-8') as f:
        f.write(html_content)
    LOG.info("%s written to %s", title, output_path)
    return output_path
