"""Binary search tree, in place or multi-version.

Anchor: root pointer @+0.
Node (40 B): key u64 | value u64 | left u64 | right u64 | crc u32 | pad.

The multi-version variant never modifies a node that a reader could reach:
every changed node on the root-to-leaf path is copied (nodes created earlier
in the same batch are still private and are updated in place), and the new
root is published by one 8-byte anchor write. Replaced nodes are retired.

Batched inserts go through :meth:`BST.vector_insert`, which walks the tree
once for a whole sorted key vector.
"""

from __future__ import annotations

import bisect
import struct

from ..errors import UnsortedInput
from .base import Kind, Mem, ReadMem, Structure, Walk, seal, unseal

NODE = struct.Struct("<QQQQ")
NODE_SIZE = 40


class BNode:
    __slots__ = ("addr", "key", "value", "left", "right")

    def __init__(self, addr, key, value, left, right):
        self.addr, self.key, self.value, self.left, self.right = addr, key, value, left, right

    def encode(self) -> bytes:
        return seal(NODE.pack(self.key, self.value, self.left, self.right), NODE_SIZE)


def read_bnode(mem: ReadMem, addr: int, depth: int | None = None) -> BNode:
    return BNode(addr, *NODE.unpack(unseal(mem.read(addr, NODE_SIZE, depth), NODE.size)))


def check_vector(kvs) -> None:
    for a, b in zip(kvs, kvs[1:]):
        if a[0] >= b[0]:
            raise UnsortedInput("vector insert needs strictly ascending keys")


class BST(Structure):
    kind = Kind.BST
    tree = True

    def init_partition(self, mem: Mem, root: int) -> None:
        mem.put_word(root, 0)

    # -- node writes -----------------------------------------------------

    def _write(self, mem: Mem, node: BNode) -> int:
        if self.mv and not mem.is_fresh(node.addr):
            old = node.addr
            node.addr = mem.alloc(NODE_SIZE)
            mem.retire(old)
        mem.put(node.addr, node.encode())
        return node.addr

    def _new(self, mem: Mem, key, value, left=0, right=0) -> int:
        node = BNode(mem.alloc(NODE_SIZE), key, value, left, right)
        mem.put(node.addr, node.encode())
        return node.addr

    # -- queries ---------------------------------------------------------

    def find(self, mem: ReadMem, root: int, key: int) -> int | None:
        cur, depth = mem.read_word(root), 0
        while cur:
            node = read_bnode(mem, cur, depth)
            if key == node.key:
                return node.value
            cur = node.left if key < node.key else node.right
            depth += 1
        return None

    # -- updates ---------------------------------------------------------

    def build(self, mem: Mem, kvs) -> int:
        """Balanced subtree over a sorted vector; children are written first."""
        if not kvs:
            return 0
        mid = len(kvs) // 2
        left = self.build(mem, kvs[:mid])
        right = self.build(mem, kvs[mid + 1:])
        return self._new(mem, kvs[mid][0], kvs[mid][1], left, right)

    def _vinsert(self, mem: Mem, addr: int, kvs, depth: int) -> int:
        if not kvs:
            return addr
        if addr == 0:
            return self.build(mem, kvs)
        node = read_bnode(mem, addr, depth)
        keys = [k for k, _ in kvs]
        lo = bisect.bisect_left(keys, node.key)
        hi = lo + 1 if lo < len(keys) and keys[lo] == node.key else lo
        changed = False
        if hi > lo and kvs[lo][1] != node.value:
            node.value = kvs[lo][1]  # the key is already present: update
            changed = True
        left = self._vinsert(mem, node.left, kvs[:lo], depth + 1)
        right = self._vinsert(mem, node.right, kvs[hi:], depth + 1)
        if left != node.left or right != node.right:
            node.left, node.right = left, right
            changed = True
        return self._write(mem, node) if changed else addr

    def vector_insert(self, mem: Mem, root: int, kvs) -> None:
        kvs = list(kvs)
        check_vector(kvs)
        old = mem.read_word(root)
        new = self._vinsert(mem, old, kvs, 0)
        if new != old:
            mem.put_word(root, new)

    def insert(self, mem: Mem, root: int, key: int, value: int) -> None:
        self.vector_insert(mem, root, [(key, value)])

    def _delete_min(self, mem: Mem, addr: int, depth: int) -> tuple[int, BNode]:
        node = read_bnode(mem, addr, depth)
        if node.left == 0:
            mem.retire(addr)
            return node.right, node
        left, least = self._delete_min(mem, node.left, depth + 1)
        node.left = left
        return self._write(mem, node), least

    def _delete(self, mem: Mem, addr: int, key: int, depth: int) -> int:
        if addr == 0:
            return 0
        node = read_bnode(mem, addr, depth)
        if key < node.key:
            left = self._delete(mem, node.left, key, depth + 1)
            if left == node.left:
                return addr
            node.left = left
            return self._write(mem, node)
        if key > node.key:
            right = self._delete(mem, node.right, key, depth + 1)
            if right == node.right:
                return addr
            node.right = right
            return self._write(mem, node)
        if node.left == 0 or node.right == 0:
            mem.retire(addr)
            return node.left or node.right
        right, succ = self._delete_min(mem, node.right, depth + 1)
        node.key, node.value, node.right = succ.key, succ.value, right
        return self._write(mem, node)

    def delete(self, mem: Mem, root: int, key: int) -> None:
        old = mem.read_word(root)
        new = self._delete(mem, old, key, 0)
        if new != old:
            mem.put_word(root, new)

    def apply(self, mem: Mem, root: int, pend) -> None:
        keys = sorted(pend.effects)
        for key in keys:
            if pend.effects[key] is None:
                self.delete(mem, root, key)
        inserts = [(k, pend.effects[k]) for k in keys if pend.effects[k] is not None]
        if inserts:
            self.vector_insert(mem, root, inserts)

    # -- inspection ------------------------------------------------------

    def walk(self, mem: ReadMem, root: int) -> Walk:
        items, ext = [], []
        stack, cur = [], mem.read_word(root)
        while stack or cur:
            while cur:
                node = read_bnode(mem, cur)
                stack.append(node)
                cur = node.left
            node = stack.pop()
            items.append((node.key, node.value))
            ext.append((node.addr, NODE_SIZE))
            cur = node.right
        return Walk(items, ext)

    def shape(self, mem: ReadMem, root: int) -> dict[int, int]:
        """key -> node address, for sharing checks between versions."""
        out, todo = {}, [mem.read_word(root)]
        while todo:
            cur = todo.pop()
            if cur:
                node = read_bnode(mem, cur)
                out[node.key] = cur
                todo += [node.left, node.right]
        return out

    def check(self, mem: ReadMem, root: int) -> bool:
        keys = [k for k, _ in self.walk(mem, root).content]
        return all(a < b for a, b in zip(keys, keys[1:]))


class MVBST(BST):
    kind = Kind.MVBST
    reader_mode = "snapshot"
    mv = True

    def snapshot(self, mem: ReadMem, root: int) -> int:
        return mem.read_word(root)

    def find_at(self, mem: ReadMem, snap: int, key: int) -> int | None:
        cur = snap
        while cur:
            node = read_bnode(mem, cur)
            if key == node.key:
                return node.value
            cur = node.left if key < node.key else node.right
        return None
