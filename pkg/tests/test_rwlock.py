import threading
import time

from hookrunner.rwlock import RWLock, TracingRWLock, set_activity


def test_readers_share():
    lock = RWLock()
    barrier = threading.Barrier(8)

    def reader():
        with lock.read():
            barrier.wait(timeout=2)  # deadlocks unless all 8 hold the lock together
            time.sleep(0.05)

    threads = [threading.Thread(target=reader) for _ in range(8)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert time.perf_counter() - t0 < 0.3  # well under 8 x 50ms


def test_writer_excludes_readers_and_writers():
    lock = TracingRWLock()

    def writer():
        for _ in range(50):
            with lock.write():
                time.sleep(0.0005)

    def reader():
        for _ in range(100):
            with lock.read():
                pass

    threads = [threading.Thread(target=writer) for _ in range(3)] + [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    spans = sorted(lock.spans(), key=lambda s: s.start)
    writes = [s for s in spans if s.mode == "write"]
    assert len(writes) == 150
    for w in writes:
        for other in spans:
            if other is w:
                continue
            assert other.end <= w.start or other.start >= w.end, (w, other)


def test_waiting_writer_blocks_new_readers():
    lock = RWLock()
    lock.acquire_read()
    order = []

    def writer():
        with lock.write():
            order.append("w")

    def late_reader():
        with lock.read():
            order.append("r")

    w = threading.Thread(target=writer)
    w.start()
    time.sleep(0.05)
    r = threading.Thread(target=late_reader)
    r.start()
    time.sleep(0.05)
    assert order == []
    lock.release_read()
    w.join(1)
    r.join(1)
    assert order == ["w", "r"]


def test_spans_record_activity():
    lock = TracingRWLock()
    set_activity("reading")
    with lock.read():
        pass
    set_activity(None)
    (span,) = lock.spans()
    assert span.activity == "reading" and span.mode == "read" and span.duration >= 0
