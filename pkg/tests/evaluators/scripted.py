"""Fault-injecting evaluator child used by the harness tests.

Usage: scripted.py MODE. Every well-formed answer is
``concept_score = min(100, 10 * request id)`` with coherence 60, so the tests
can tell which request an answer belongs to.
"""

from __future__ import annotations

import json
import sys
import time


def answer(req: dict, **override) -> None:
    msg = {"id": req["id"], "concept_score": min(100, 10 * req["id"]), "coherence": 60}
    msg.update(override)
    print(json.dumps(msg), flush=True)


def main(mode: str) -> None:
    n = 0
    for line in sys.stdin:
        req = json.loads(line)
        if req.get("shutdown"):
            return
        n += 1
        first = n == 1
        if mode == "echo":
            print(json.dumps({"id": req["id"], "concept_score": 80, "coherence": 60}), flush=True)
        elif mode == "drop-first" and first:
            continue
        elif mode == "malformed-first" and first:
            print("{not json", flush=True)
        elif mode == "out-of-range":
            answer(req, concept_score=150)
        elif mode == "missing-field":
            print(json.dumps({"id": req["id"], "concept_score": 50}), flush=True)
        elif mode == "die":
            print("judge crashed: CUDA out of memory", file=sys.stderr, flush=True)
            sys.exit(3)
        elif mode == "die-late" and n > 3:
            print("judge lost its GPU", file=sys.stderr, flush=True)
            sys.exit(4)
        elif mode == "slow":
            time.sleep(0.15)
            answer(req)
        elif mode == "stale-first" and first:
            time.sleep(1.5)
            answer(req)
        else:
            answer(req)


if __name__ == "__main__":
    main(sys.argv[1])
