"""B+tree, in place or multi-version.

Anchor: root pointer @+0 (0 = empty tree).
Node, for order ``m`` (maximum keys per node, default 62 = one 1 KiB node)::

    leaf u8 | pad u8 | n u16 | pad u32 | keys[m] u64 | ptrs[m + 1] u64 | crc u32

Leaves keep values in ptrs[0:n] and the next-leaf pointer in ptrs[m] (always 0
in the multi-version variant, where sibling links would force copying the
whole leaf level). Internal nodes keep children in ptrs[0:n + 1]; child i
holds keys below keys[i].

Deletion removes the key from its leaf and rebalances an underflowing node by
borrowing from, or merging with, a sibling. Every non-root node keeps between
m // 2 and m keys.
"""

from __future__ import annotations

import bisect
import struct

from .base import Kind, Mem, ReadMem, Structure, Walk, seal, unseal
from ..layout import align

HDR = struct.Struct("<BBHI")
DEFAULT_ORDER = 62


class BPNode:
    __slots__ = ("addr", "leaf", "keys", "ptrs", "next")

    def __init__(self, addr, leaf, keys, ptrs, nxt=0):
        self.addr, self.leaf, self.keys, self.ptrs, self.next = addr, leaf, keys, ptrs, nxt


class BPT(Structure):
    kind = Kind.BPT
    tree = True

    def __init__(self, param: int = 0):
        super().__init__(param or DEFAULT_ORDER)
        self.order = self.param
        if self.order < 3:
            raise ValueError("B+tree order must be >= 3")
        self.body_len = HDR.size + 8 * self.order + 8 * (self.order + 1)
        self.node_size = align(self.body_len + 4, 64)
        self.min_keys = self.order // 2

    # -- codec -----------------------------------------------------------

    def encode(self, node: BPNode) -> bytes:
        m = self.order
        n = len(node.keys)
        keys = node.keys + [0] * (m - n)
        ptrs = node.ptrs + [0] * (m + 1 - len(node.ptrs))
        if node.leaf:
            ptrs[m] = node.next
        body = HDR.pack(1 if node.leaf else 0, 0, n, 0) + struct.pack(f"<{m}Q{m + 1}Q", *keys, *ptrs)
        return seal(body, self.node_size)

    def read(self, mem: ReadMem, addr: int, depth: int | None = None) -> BPNode:
        m = self.order
        body = unseal(mem.read(addr, self.node_size, depth), self.body_len)
        leaf, _, n, _ = HDR.unpack_from(body, 0)
        if n > m:
            raise ValueError("corrupt B+tree node")
        vals = struct.unpack_from(f"<{m}Q{m + 1}Q", body, HDR.size)
        keys = list(vals[:n])
        ptrs = vals[m:]
        if leaf:
            return BPNode(addr, True, keys, list(ptrs[:n]), ptrs[m])
        return BPNode(addr, False, keys, list(ptrs[:n + 1]))

    def _write(self, mem: Mem, node: BPNode) -> int:
        if self.mv and node.addr and not mem.is_fresh(node.addr):
            mem.retire(node.addr)
            node.addr = 0
        if not node.addr:
            node.addr = mem.alloc(self.node_size)
        mem.put(node.addr, self.encode(node))
        return node.addr

    def init_partition(self, mem: Mem, root: int) -> None:
        mem.put_word(root, 0)

    # -- queries ---------------------------------------------------------

    def find(self, mem: ReadMem, root: int, key: int) -> int | None:
        return self.find_at(mem, mem.read_word(root), key)

    def find_at(self, mem: ReadMem, addr: int, key: int) -> int | None:
        depth = 0
        while addr:
            node = self.read(mem, addr, depth)
            if node.leaf:
                i = bisect.bisect_left(node.keys, key)
                return node.ptrs[i] if i < len(node.keys) and node.keys[i] == key else None
            addr = node.ptrs[bisect.bisect_right(node.keys, key)]
            depth += 1
        return None

    # -- insert ----------------------------------------------------------

    def _split(self, mem: Mem, node: BPNode):
        mid = len(node.keys) // 2
        if node.leaf:
            right = BPNode(0, True, node.keys[mid:], node.ptrs[mid:], 0 if self.mv else node.next)
            node.keys, node.ptrs = node.keys[:mid], node.ptrs[:mid]
            sep = right.keys[0]
            self._write(mem, right)
            if not self.mv:
                node.next = right.addr
        else:
            sep = node.keys[mid]
            right = BPNode(0, False, node.keys[mid + 1:], node.ptrs[mid + 1:])
            node.keys, node.ptrs = node.keys[:mid], node.ptrs[:mid + 1]
            self._write(mem, right)
        return self._write(mem, node), (sep, right.addr)

    def _ins(self, mem: Mem, addr: int, key: int, value: int, depth: int):
        node = self.read(mem, addr, depth)
        if node.leaf:
            i = bisect.bisect_left(node.keys, key)
            if i < len(node.keys) and node.keys[i] == key:
                if node.ptrs[i] == value:
                    return addr, None
                node.ptrs[i] = value
            else:
                node.keys.insert(i, key)
                node.ptrs.insert(i, value)
        else:
            i = bisect.bisect_right(node.keys, key)
            child = node.ptrs[i]
            new_child, split = self._ins(mem, child, key, value, depth + 1)
            if new_child == child and split is None:
                return addr, None
            node.ptrs[i] = new_child
            if split is not None:
                node.keys.insert(i, split[0])
                node.ptrs.insert(i + 1, split[1])
        if len(node.keys) > self.order:
            return self._split(mem, node)
        return self._write(mem, node), None

    def insert(self, mem: Mem, root: int, key: int, value: int) -> None:
        old = mem.read_word(root)
        if old == 0:
            new = self._write(mem, BPNode(0, True, [key], [value]))
        else:
            new, split = self._ins(mem, old, key, value, 0)
            if split is not None:
                new = self._write(mem, BPNode(0, False, [split[0]], [new, split[1]]))
        if new != old:
            mem.put_word(root, new)

    # -- delete ----------------------------------------------------------

    def _rebalance(self, mem: Mem, parent: BPNode, i: int, child: BPNode, depth: int) -> None:
        if i > 0:
            left = self.read(mem, parent.ptrs[i - 1], depth)
            if len(left.keys) > self.min_keys:
                if child.leaf:
                    child.keys.insert(0, left.keys.pop())
                    child.ptrs.insert(0, left.ptrs.pop())
                    parent.keys[i - 1] = child.keys[0]
                else:
                    child.keys.insert(0, parent.keys[i - 1])
                    child.ptrs.insert(0, left.ptrs.pop())
                    parent.keys[i - 1] = left.keys.pop()
                parent.ptrs[i - 1] = self._write(mem, left)
                parent.ptrs[i] = self._write(mem, child)
                return
            if child.leaf:
                left.keys += child.keys
                left.ptrs += child.ptrs
                left.next = child.next
            else:
                left.keys += [parent.keys[i - 1]] + child.keys
                left.ptrs += child.ptrs
            mem.retire(child.addr)
            parent.keys.pop(i - 1)
            parent.ptrs.pop(i)
            parent.ptrs[i - 1] = self._write(mem, left)
            return
        right = self.read(mem, parent.ptrs[i + 1], depth)
        if len(right.keys) > self.min_keys:
            if child.leaf:
                child.keys.append(right.keys.pop(0))
                child.ptrs.append(right.ptrs.pop(0))
                parent.keys[i] = right.keys[0]
            else:
                child.keys.append(parent.keys[i])
                child.ptrs.append(right.ptrs.pop(0))
                parent.keys[i] = right.keys.pop(0)
            parent.ptrs[i + 1] = self._write(mem, right)
            parent.ptrs[i] = self._write(mem, child)
            return
        if child.leaf:
            child.keys += right.keys
            child.ptrs += right.ptrs
            child.next = right.next
        else:
            child.keys += [parent.keys[i]] + right.keys
            child.ptrs += right.ptrs
        mem.retire(right.addr)
        parent.keys.pop(i)
        parent.ptrs.pop(i + 1)
        parent.ptrs[i] = self._write(mem, child)

    def _del(self, mem: Mem, addr: int, key: int, depth: int):
        node = self.read(mem, addr, depth)
        if node.leaf:
            i = bisect.bisect_left(node.keys, key)
            if i == len(node.keys) or node.keys[i] != key:
                return addr, None
            del node.keys[i]
            del node.ptrs[i]
            return self._write(mem, node), node
        i = bisect.bisect_right(node.keys, key)
        new_child, child = self._del(mem, node.ptrs[i], key, depth + 1)
        if child is None:
            return addr, None
        node.ptrs[i] = new_child
        if len(child.keys) < self.min_keys:
            self._rebalance(mem, node, i, child, depth + 1)
        return self._write(mem, node), node

    def delete(self, mem: Mem, root: int, key: int) -> None:
        old = mem.read_word(root)
        if old == 0:
            return
        new, node = self._del(mem, old, key, 0)
        if node is None:
            return
        if not node.keys:
            mem.retire(new)
            new = 0 if node.leaf else node.ptrs[0]
        if new != old:
            mem.put_word(root, new)

    def apply(self, mem: Mem, root: int, pend) -> None:
        keys = sorted(pend.effects)
        for key in keys:
            if pend.effects[key] is None:
                self.delete(mem, root, key)
        for key in keys:
            value = pend.effects[key]
            if value is not None:
                self.insert(mem, root, key, value)

    def vector_insert(self, mem: Mem, root: int, kvs) -> None:
        from .bst import check_vector

        kvs = list(kvs)
        check_vector(kvs)
        for k, v in kvs:
            self.insert(mem, root, k, v)

    # -- inspection ------------------------------------------------------

    def walk(self, mem: ReadMem, root: int) -> Walk:
        items, ext = [], []
        todo = [mem.read_word(root)]
        leaves = []
        while todo:
            addr = todo.pop()
            if not addr:
                continue
            node = self.read(mem, addr)
            ext.append((addr, self.node_size))
            if node.leaf:
                leaves.append(node)
            else:
                todo += node.ptrs
        for leaf in leaves:
            items += zip(leaf.keys, leaf.ptrs)
        items.sort()
        return Walk(items, ext)

    def check(self, mem: ReadMem, root: int) -> bool:
        """Ordering, separator bounds, occupancy and uniform leaf depth."""
        depths = set()

        def visit(addr, lo, hi, depth, is_root):
            node = self.read(mem, addr)
            n = len(node.keys)
            if not is_root and not self.min_keys <= n <= self.order:
                return False
            if n > self.order or any(a >= b for a, b in zip(node.keys, node.keys[1:])):
                return False
            if any((lo is not None and k < lo) or (hi is not None and k >= hi) for k in node.keys):
                return False
            if node.leaf:
                depths.add(depth)
                return True
            bounds = [lo] + node.keys + [hi]
            return all(visit(c, bounds[j], bounds[j + 1], depth + 1, False)
                       for j, c in enumerate(node.ptrs))

        root_addr = mem.read_word(root)
        return root_addr == 0 or (visit(root_addr, None, None, 0, True) and len(depths) == 1)


class MVBPT(BPT):
    kind = Kind.MVBPT
    reader_mode = "snapshot"
    mv = True

    def snapshot(self, mem: ReadMem, root: int) -> int:
        return mem.read_word(root)
