"""Evaluator process serving a synthetic landscape over the line-delimited JSON protocol.

Usage: ``python -m grace.landscape_evaluator landscape.json``. Useful for
exercising the external-evaluator path end to end without a model.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import LandscapeConfig, UtilityQuery, synth_landscape_evaluate


def serve(config: LandscapeConfig, stdin=sys.stdin, stdout=sys.stdout) -> int:
    for line in stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
            if req.get("shutdown"):
                return 0
            query = UtilityQuery(
                str(req["concept"]),
                str(req["model"]),
                str(req["vector_path"]),
                int(req["layer"]),
                float(req["coefficient"]),
                int(req["seed"]),
            )
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            print(f"bad request: {exc}", file=sys.stderr, flush=True)
            continue
        res = synth_landscape_evaluate(config, query)
        reply = {"concept_score": res.concept_score, "coherence": res.coherence}
        if "id" in req:
            reply["id"] = req["id"]
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config", help="LandscapeConfig JSON file")
    args = parser.parse_args(argv)
    with open(args.config, encoding="utf-8") as fh:
        config = LandscapeConfig.from_dict(json.load(fh))
    return serve(config)


if __name__ == "__main__":
    sys.exit(main())
