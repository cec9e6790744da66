"""Chained hash table.

Anchors: bucket array @+0, bucket count @+8. Bucket word: head node or 0.
Node (32 B): key u64 | value u64 | next u64 | crc u32 | pad.
"""

from __future__ import annotations

import struct

from .base import Kind, Mem, ReadMem, Structure, Walk, mix64, seal, unseal

NODE = struct.Struct("<QQQ")
NODE_SIZE = 32
DEFAULT_BUCKETS = 256


class HashTable(Structure):
    kind = Kind.HASH

    def __init__(self, param: int = 0):
        super().__init__(param or DEFAULT_BUCKETS)
        self.n_buckets = self.param

    def _bucket(self, base: int, n: int, key: int) -> int:
        return base + 8 * (mix64(key) % n)

    @staticmethod
    def _read(mem: ReadMem, addr: int) -> tuple[int, int, int]:
        return NODE.unpack(unseal(mem.read(addr, NODE_SIZE), NODE.size))

    def init_partition(self, mem: Mem, root: int) -> None:
        base = mem.alloc(8 * self.n_buckets)
        for i in range(self.n_buckets):
            mem.put_word(base + 8 * i, 0)
        mem.put_word(root, base)
        mem.put_word(root + 8, self.n_buckets)

    def find(self, mem: ReadMem, root: int, key: int) -> int | None:
        base, n = mem.read_word(root), mem.read_word(root + 8)
        cur = mem.read_word(self._bucket(base, n, key))
        steps = 0
        while cur:
            k, v, nxt = self._read(mem, cur)
            if k == key:
                return v
            cur = nxt
            steps += 1
            if steps > 1 << 20:
                raise ValueError("cycle in hash chain")
        return None

    def insert(self, mem: Mem, root: int, key: int, value: int) -> None:
        base, n = mem.read_word(root), mem.read_word(root + 8)
        bucket = self._bucket(base, n, key)
        head = mem.read_word(bucket)
        cur = head
        while cur:
            k, v, nxt = self._read(mem, cur)
            if k == key:
                if v != value:
                    mem.put(cur, seal(NODE.pack(k, value, nxt), NODE_SIZE))
                return
            cur = nxt
        node = mem.alloc(NODE_SIZE)
        mem.put(node, seal(NODE.pack(key, value, head), NODE_SIZE))
        mem.put_word(bucket, node)

    def delete(self, mem: Mem, root: int, key: int) -> None:
        base, n = mem.read_word(root), mem.read_word(root + 8)
        bucket = self._bucket(base, n, key)
        prev, prev_node = None, None
        cur = mem.read_word(bucket)
        while cur:
            k, v, nxt = self._read(mem, cur)
            if k == key:
                if prev is None:
                    mem.put_word(bucket, nxt)
                else:
                    pk, pv, _ = prev_node
                    mem.put(prev, seal(NODE.pack(pk, pv, nxt), NODE_SIZE))
                mem.retire(cur)
                return
            prev, prev_node = cur, (k, v, nxt)
            cur = nxt

    def apply(self, mem: Mem, root: int, pend) -> None:
        for key in sorted(pend.effects):
            value = pend.effects[key]
            if value is None:
                self.delete(mem, root, key)
            else:
                self.insert(mem, root, key, value)

    def walk(self, mem: ReadMem, root: int) -> Walk:
        base, n = mem.read_word(root), mem.read_word(root + 8)
        items, ext = [], [(base, 8 * n)]
        raw = mem.read(base, 8 * n)
        for i in range(n):
            cur = struct.unpack_from("<Q", raw, 8 * i)[0]
            while cur:
                k, v, nxt = self._read(mem, cur)
                items.append((k, v))
                ext.append((cur, NODE_SIZE))
                cur = nxt
        items.sort()
        return Walk(items, ext)

    def check(self, mem: ReadMem, root: int) -> bool:
        """Every key sits in its own bucket, at most once."""
        base, n = mem.read_word(root), mem.read_word(root + 8)
        seen = set()
        for i in range(n):
            cur = mem.read_word(base + 8 * i)
            while cur:
                k, _, cur = self._read(mem, cur)
                if k in seen or self._bucket(base, n, k) != base + 8 * i:
                    return False
                seen.add(k)
        return True
