from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class FeedbackVector:
    """Per-step metrics of the managed slice.

    ``max_delay`` covers packets completed during the interval and packets
    still queued at its end; it is ``inf`` when the interval dropped a packet.
    """

    se: float
    violated: bool
    reconfigured: bool
    arrived_bits: int
    served_bits: int
    dropped_bytes: int
    queued_delta_bytes: int
    arrival_throughput: float
    max_delay: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FeedbackVector":
        return cls(
            se=float(data["se"]),
            violated=bool(data["violated"]),
            reconfigured=bool(data["reconfigured"]),
            arrived_bits=int(data["arrived_bits"]),
            served_bits=int(data["served_bits"]),
            dropped_bytes=int(data["dropped_bytes"]),
            queued_delta_bytes=int(data["queued_delta_bytes"]),
            arrival_throughput=float(data["arrival_throughput"]),
            max_delay=float(data["max_delay"]),
        )
