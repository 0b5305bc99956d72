"""Controller/agent control plane: wire protocol, controller core, agent, TCP transport."""

from gridling.control.protocol import Message, authenticate, decode, encode

__all__ = ["Message", "authenticate", "decode", "encode"]
