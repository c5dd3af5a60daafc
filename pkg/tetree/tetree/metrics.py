"""
Structured metric logging. Report dataclasses are flattened into named, tagged values by an extracted
`pytyped-metrics` exporter and written to the module logger one metric per line.
"""
import logging
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Type
from typing import TypeVar

from pytyped.metrics.common import Metric
from pytyped.metrics.exporter import AutoMetricExporter
from pytyped.metrics.exporter import MetricsExporter

logger = logging.getLogger(__name__)

T = TypeVar("T")

_auto_metric_exporter = AutoMetricExporter()
_exporters: Dict[type, MetricsExporter[Any]] = {}


def exporter_for(t: Type[T]) -> MetricsExporter[T]:
    exporter = _exporters.get(t)
    if exporter is None:
        exporter = _auto_metric_exporter.extract(t)
        _exporters[t] = exporter
    return exporter


def metrics_of(prefix: str, value: T, t: Type[T], tags: Optional[Dict[str, str]] = None) -> List[Metric]:
    return exporter_for(t).export([prefix], value).to_metrics(dict(tags or {}))


def log_metrics(prefix: str, value: T, t: Type[T], tags: Optional[Dict[str, str]] = None) -> List[Metric]:
    metrics = metrics_of(prefix, value, t, tags)
    for m in metrics:
        rendered = " ".join("%s=%s" % (k, v) for k, v in sorted(m.tags.items()))
        logger.info("%s %s %s", m.name, m.value, rendered)
    return metrics
