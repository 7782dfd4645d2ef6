"""Getting measurements onto the bus: polling, push handling and receivers."""

from .poller import (
    DEFAULT_WIDTH,
    POLL_INTERVAL,
    POLL_JITTER,
    PRODUCTION_WIDTH,
    Collector,
    PushDetector,
    PushTransformer,
    add_metrics_routes,
    bus_publisher,
    http_fetch,
    metrics_text,
)
from .receivers import (
    HTCONDOR_TOPIC,
    XROOTD_TOPIC,
    HTCondorClient,
    HTCondorReceiver,
    HTCondorServer,
    Unauthorized,
    XRootDReceiver,
    XRootDServer,
)
from .state import CollectorState, ToolkitEndpoint, ToolkitState, is_due, schedule

__all__ = [
    "DEFAULT_WIDTH",
    "HTCONDOR_TOPIC",
    "POLL_INTERVAL",
    "POLL_JITTER",
    "PRODUCTION_WIDTH",
    "XROOTD_TOPIC",
    "Collector",
    "CollectorState",
    "HTCondorClient",
    "HTCondorReceiver",
    "HTCondorServer",
    "PushDetector",
    "PushTransformer",
    "ToolkitEndpoint",
    "ToolkitState",
    "Unauthorized",
    "XRootDReceiver",
    "XRootDServer",
    "add_metrics_routes",
    "bus_publisher",
    "http_fetch",
    "is_due",
    "metrics_text",
    "schedule",
]
