"""Stack and queue.

Node (24 B): value u64 | next u64 | crc u32 | pad.
Stack anchors: top @+0, count @+8. Queue anchors: head @+0, tail @+8, count @+16.

Pops and dequeues are answered at call time; their effect on NVM, like the
pushes and enqueues, is applied at flush. A pop that meets an unflushed push
annuls it, so the pair never reaches NVM.
"""

from __future__ import annotations

from ..errors import DequeueEmpty, PopEmpty
from .base import KV, Kind, Mem, PendingQueue, PendingStack, ReadMem, Structure, Walk, seal, unseal

NODE_BODY = 16
NODE_SIZE = 24
BYPASS = -1


def _read_node(mem: ReadMem, addr: int, level) -> tuple[int, int]:
    return KV.unpack(unseal(mem.read(addr, NODE_SIZE, level), NODE_BODY))


def _node(value: int, nxt: int) -> bytes:
    return seal(KV.pack(value, nxt), NODE_SIZE)


class Stack(Structure):
    kind = Kind.STACK

    def __init__(self, param: int = 0, hot: int = 64):
        super().__init__(param)
        self.hot = hot

    def new_pending(self):
        return PendingStack()

    def _level(self, depth: int):
        return None if depth < self.hot else BYPASS

    def init_partition(self, mem: Mem, root: int) -> None:
        mem.put_word(root, 0)
        mem.put_word(root + 8, 0)

    def push(self, pend: PendingStack, value: int) -> None:
        pend.pushes.append(value)

    def pop(self, mem: ReadMem, root: int, pend: PendingStack) -> int:
        if pend.pushes:
            pend.annulled += 1
            return pend.pushes.pop()
        cur = mem.read_word(root) if pend.cursor is None else pend.cursor
        if cur == 0:
            raise PopEmpty("stack is empty")
        value, nxt = _read_node(mem, cur, self._level(len(pend.popped)))
        pend.popped.append(cur)
        pend.cursor = nxt
        return value

    def apply(self, mem: Mem, root: int, pend: PendingStack) -> None:
        if not pend.popped and not pend.pushes:
            return
        top = pend.cursor if pend.popped else mem.read_word(root)
        count = mem.read_word(root + 8) - len(pend.popped)
        for addr in pend.popped:
            mem.retire(addr)
        for value in pend.pushes:
            node = mem.alloc(NODE_SIZE)
            mem.put(node, _node(value, top))
            top = node
            count += 1
        mem.put_word(root, top)
        mem.put_word(root + 8, count)

    def walk(self, mem: ReadMem, root: int) -> Walk:
        out, ext = [], []
        cur = mem.read_word(root)
        while cur:
            value, nxt = _read_node(mem, cur, None)
            out.append(value)
            ext.append((cur, NODE_SIZE))
            cur = nxt
        return Walk(out, ext)


class Queue(Structure):
    kind = Kind.QUEUE

    def __init__(self, param: int = 0, hot: int = 64):
        super().__init__(param)
        self.hot = hot

    def new_pending(self):
        return PendingQueue()

    def init_partition(self, mem: Mem, root: int) -> None:
        for off in (0, 8, 16):
            mem.put_word(root + off, 0)

    def enqueue(self, pend: PendingQueue, value: int) -> None:
        pend.enqueues.append(value)

    def dequeue(self, mem: ReadMem, root: int, pend: PendingQueue) -> int:
        cur = mem.read_word(root) if pend.cursor is None else pend.cursor
        if cur:
            level = None if len(pend.dequeued) < self.hot else BYPASS
            value, nxt = _read_node(mem, cur, level)
            pend.dequeued.append(cur)
            pend.cursor = nxt
            return value
        if pend.enqueues:
            pend.annulled += 1
            return pend.enqueues.pop(0)
        raise DequeueEmpty("queue is empty")

    def apply(self, mem: Mem, root: int, pend: PendingQueue) -> None:
        if not pend.dequeued and not pend.enqueues:
            return
        head = pend.cursor if pend.dequeued else mem.read_word(root)
        tail = mem.read_word(root + 8)
        count = mem.read_word(root + 16) - len(pend.dequeued)
        for addr in pend.dequeued:
            mem.retire(addr)
        if head == 0:
            tail = 0
        tail_value = None
        for value in pend.enqueues:
            node = mem.alloc(NODE_SIZE)
            mem.put(node, _node(value, 0))
            if tail:
                if tail_value is None:
                    tail_value, _ = _read_node(mem, tail, None)
                mem.put(tail, _node(tail_value, node))
            else:
                head = node
            tail, tail_value = node, value
            count += 1
        mem.put_word(root, head)
        mem.put_word(root + 8, tail)
        mem.put_word(root + 16, count)

    def walk(self, mem: ReadMem, root: int) -> Walk:
        out, ext = [], []
        cur = mem.read_word(root)
        while cur:
            value, nxt = _read_node(mem, cur, None)
            out.append(value)
            ext.append((cur, NODE_SIZE))
            cur = nxt
        return Walk(out, ext)
