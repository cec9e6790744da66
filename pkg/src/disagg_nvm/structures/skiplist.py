"""Skip list with a single writer and lock-free readers.

Anchor: head pointer @+0. Pointers are tagged: ``addr | height << 56`` so a
reader fetches a node with one exact-size read.
Node: key u64 | value u64 | height u32 | pad u32 | next[height] u64 | crc u32.

A new node is fully written before any predecessor points at it, and the
predecessors are updated from level 0 upwards. Removal unlinks from the top
level down and retires the node only after the unlinking record is applied.
"""

from __future__ import annotations

import struct

from .base import Kind, Mem, ReadMem, Structure, Walk, mix64, node_size, seal, unseal

MAX_HEIGHT = 16
HDR = struct.Struct("<QQII")
ADDR_MASK = (1 << 56) - 1
_SALT = 0x5DEECE66D


def tag(addr: int, height: int) -> int:
    return addr | (height << 56)


def untag(ptr: int) -> tuple[int, int]:
    return ptr & ADDR_MASK, ptr >> 56


def height_of(key: int) -> int:
    h = mix64(key ^ _SALT)
    level = 1
    while level < MAX_HEIGHT and h & 1:
        level += 1
        h >>= 1
    return level


def body_len(height: int) -> int:
    return HDR.size + 8 * height


class SkipNode:
    __slots__ = ("addr", "key", "value", "next")

    def __init__(self, addr: int, key: int, value: int, nxt: list[int]):
        self.addr = addr
        self.key = key
        self.value = value
        self.next = nxt

    @property
    def height(self) -> int:
        return len(self.next)

    def encode(self) -> bytes:
        h = len(self.next)
        body = HDR.pack(self.key, self.value, h, 0) + struct.pack(f"<{h}Q", *self.next)
        return seal(body, node_size(body_len(h)))


def read_node(mem: ReadMem, ptr: int) -> SkipNode:
    addr, h = untag(ptr)
    if not 1 <= h <= MAX_HEIGHT:
        raise ValueError("bad skip-list pointer")
    body = unseal(mem.read(addr, node_size(body_len(h))), body_len(h))
    key, value, height, _ = HDR.unpack_from(body, 0)
    if height != h:
        raise ValueError("skip-list height mismatch")
    return SkipNode(addr, key, value, list(struct.unpack_from(f"<{h}Q", body, HDR.size)))


class SkipList(Structure):
    kind = Kind.SKIPLIST
    reader_mode = "plain"

    def init_partition(self, mem: Mem, root: int) -> None:
        head = SkipNode(0, 0, 0, [0] * MAX_HEIGHT)
        head.addr = mem.alloc(node_size(body_len(MAX_HEIGHT)))
        mem.put(head.addr, head.encode())
        mem.put_word(root, tag(head.addr, MAX_HEIGHT))

    def _search(self, mem: ReadMem, root: int, key: int) -> tuple[list[SkipNode], SkipNode | None]:
        head = read_node(mem, mem.read_word(root))
        preds = [head] * MAX_HEIGHT
        node = head
        for level in range(MAX_HEIGHT - 1, -1, -1):
            while node.next[level]:
                nxt = read_node(mem, node.next[level])
                if nxt.key >= key:
                    break
                node = nxt
            preds[level] = node
        found = None
        if node.next[0]:
            cand = read_node(mem, node.next[0])
            if cand.key == key:
                found = cand
        return preds, found

    def find(self, mem: ReadMem, root: int, key: int) -> int | None:
        _, found = self._search(mem, root, key)
        return None if found is None else found.value

    def insert(self, mem: Mem, root: int, key: int, value: int) -> None:
        preds, found = self._search(mem, root, key)
        if found is not None:
            if found.value != value:
                found.value = value
                mem.put(found.addr, found.encode())
            return
        h = height_of(key)
        node = SkipNode(0, key, value, [preds[i].next[i] for i in range(h)])
        node.addr = mem.alloc(node_size(body_len(h)))
        mem.put(node.addr, node.encode())
        ptr = tag(node.addr, h)
        for i in range(h):  # publish bottom-up
            p = preds[i]
            p.next[i] = ptr
            mem.put(p.addr, p.encode())

    def delete(self, mem: Mem, root: int, key: int) -> None:
        preds, found = self._search(mem, root, key)
        if found is None:
            return
        for i in range(found.height - 1, -1, -1):  # unlink top-down
            p = preds[i]
            p.next[i] = found.next[i]
            mem.put(p.addr, p.encode())
        mem.retire(found.addr)

    def apply(self, mem: Mem, root: int, pend) -> None:
        for key in sorted(pend.effects):
            value = pend.effects[key]
            if value is None:
                self.delete(mem, root, key)
            else:
                self.insert(mem, root, key, value)

    def walk(self, mem: ReadMem, root: int) -> Walk:
        head_ptr = mem.read_word(root)
        head = read_node(mem, head_ptr)
        ext = [(head.addr, node_size(body_len(MAX_HEIGHT)))]
        items = []
        ptr = head.next[0]
        while ptr:
            node = read_node(mem, ptr)
            items.append((node.key, node.value))
            ext.append((node.addr, node_size(body_len(node.height))))
            ptr = node.next[0]
        return Walk(items, ext)

    def check(self, mem: ReadMem, root: int) -> bool:
        """Bottom level strictly ascending; each upper level a subsequence of it."""
        head = read_node(mem, mem.read_word(root))
        levels = []
        for lvl in range(MAX_HEIGHT):
            keys, ptr = [], head.next[lvl]
            while ptr:
                node = read_node(mem, ptr)
                keys.append(node.key)
                ptr = node.next[lvl] if lvl < node.height else 0
            levels.append(keys)
        base = set(levels[0])
        return all(all(a < b for a, b in zip(ks, ks[1:])) and base.issuperset(ks) for ks in levels)
