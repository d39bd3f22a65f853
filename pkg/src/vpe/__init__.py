"""Desk-scale distributed video parsing and evaluation platform.

A task is a user-submitted flow graph of processing modules. Modules run as
independent processes, exchange task messages over a durable embedded
publish-subscribe bus, persist per-node results to a file-backed metadata
store, and are operated through an HTTP gateway, a web console and a CLI.
"""

__version__ = "0.1.0"
