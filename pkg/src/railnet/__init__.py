"""Train delay prediction on heterogeneous snapshot graphs of a railway network."""

from importlib import resources

from .records import NetworkTopology, OperationRecord, load_topology, parse_records, serialize_records
from .sim import DisturbanceConfig, simulate

__version__ = "0.1.0"


def data_text(name: str) -> str:
    """Contents of a bundled data file (e.g. 'default_topology.json')."""
    return resources.files(__package__).joinpath("data", name).read_text()


def default_topology() -> NetworkTopology:
    return load_topology(data_text("default_topology.json"))


__all__ = [
    "DisturbanceConfig", "NetworkTopology", "OperationRecord", "data_text", "default_topology",
    "load_topology", "parse_records", "serialize_records", "simulate",
]
