"""Bulk-parallel external-memory priority queue."""
from .core import (MAX_FIRST, MAX_KEY, MIN_FIRST, BulkPQError, Config, ConfigError, ContractError,
                   Counters, EmptyQueueError, Item, SessionError)
from .ppq import BulkSession, ParallelPriorityQueue
from .reference import OracleQueue, generate_op_script, replay_script

__all__ = [
    "BulkPQError", "BulkSession", "Config", "ConfigError", "ContractError", "Counters",
    "EmptyQueueError", "Item", "MAX_FIRST", "MAX_KEY", "MIN_FIRST", "OracleQueue",
    "ParallelPriorityQueue", "SessionError", "generate_op_script", "replay_script",
]
