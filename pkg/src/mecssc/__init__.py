"""Session continuity for edge computing through S/P-GW state replication.

Subpackages and modules:

- ``gtp``: GTP-U and GTPv2-C codecs
- ``flow``: multi-table match/action switch pipeline with a GTP port
- ``epc``: MME, eNodeB and S/P-GW session logic
- ``controller``: forwarding, GTP-C interception, replication and diverting
- ``sim``: deterministic discrete-event fabric and scenario runner
- ``bench`` / ``cli``: cost sweeps and the ``mecssc`` command
"""

from .config import DEFAULT_TIMING, Timing
from .controller import Controller, DivertRecord, MessageStore, ReplicationReport, StoreMode
from .epc import Enb, Mme, SpgwInstance, UeProfile
from .flow import FlowRule, FlowTablePipeline, MatchFields, Priority
from .gtp import GtpControlMessage, GtpUserPacket, MsgKind, decode_gtpc, decode_gtpu, \
    encode_gtpc, encode_gtpu
from .metrics import expected_stored_bytes, expected_transmitted_bytes, ram_replication_model

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_TIMING", "Controller", "DivertRecord", "Enb", "FlowRule", "FlowTablePipeline",
    "GtpControlMessage", "GtpUserPacket", "MatchFields", "MessageStore", "Mme", "MsgKind",
    "Priority", "ReplicationReport", "SpgwInstance", "StoreMode", "Timing", "UeProfile",
    "decode_gtpc", "decode_gtpu", "encode_gtpc", "encode_gtpu", "expected_stored_bytes",
    "expected_transmitted_bytes", "ram_replication_model",
]
