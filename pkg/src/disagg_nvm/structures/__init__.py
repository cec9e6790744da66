"""Persistent structures and the kind -> implementation registry."""

from .base import MAP_KINDS, Kind, Op, PendingMap, PendingQueue, PendingStack, RawMem, Walk, partition_route
from .bptree import BPT, MVBPT
from .bst import BST, MVBST
from .hashtable import HashTable
from .linear import Queue, Stack
from .skiplist import SkipList

REGISTRY = {
    Kind.STACK: Stack,
    Kind.QUEUE: Queue,
    Kind.HASH: HashTable,
    Kind.SKIPLIST: SkipList,
    Kind.BST: BST,
    Kind.BPT: BPT,
    Kind.MVBST: MVBST,
    Kind.MVBPT: MVBPT,
}


def make_structure(kind: int, param: int = 0, hot: int = 64):
    cls = REGISTRY[Kind(kind)]
    if cls in (Stack, Queue):
        return cls(param, hot=hot)
    return cls(param)


def default_partitions(kind: int) -> int:
    return 4 if Kind(kind) in MAP_KINDS else 1


__all__ = [
    "BPT", "BST", "HashTable", "Kind", "MAP_KINDS", "MVBPT", "MVBST", "Op", "PendingMap",
    "PendingQueue", "PendingStack", "Queue", "REGISTRY", "RawMem", "SkipList", "Stack", "Walk",
    "default_partitions", "make_structure", "partition_route",
]
