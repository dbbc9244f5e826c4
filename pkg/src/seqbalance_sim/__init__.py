"""Packet-level simulator of RoCEv2 fabrics with SeqBalance and baseline load balancers."""

__version__ = "0.1.0"
