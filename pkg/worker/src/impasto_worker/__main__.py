"""Worker entry point: serve the guidance endpoint or run the selftest."""

from __future__ import annotations

import argparse
import logging
import sys

from .models import ModelSuite, WORKING_SIZE
from .selftest import run_selftest
from .service import ENDPOINT_ENV, WorkerServer, resolve_endpoint


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="impasto-worker",
        description="Guidance-oracle worker serving loss/gradient, diffusion "
        "roundtrip, perceptual distance and alignment requests.",
    )
    parser.add_argument(
        "--endpoint",
        help=f"host:port or unix socket path (falls back to ${ENDPOINT_ENV})",
    )
    parser.add_argument("--seed", type=int, default=0, help="model build seed")
    parser.add_argument(
        "--size", type=int, default=WORKING_SIZE, help="working resolution"
    )
    parser.add_argument(
        "--weights", help="directory of state dicts to load instead of seeded init"
    )
    parser.add_argument(
        "--selftest", action="store_true", help="run the contract checks and exit"
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )

    if args.selftest:
        failures = run_selftest(seed=args.seed, size=args.size)
        return 1 if failures else 0

    try:
        endpoint = resolve_endpoint(args.endpoint)
    except ValueError as exc:
        parser.error(str(exc))
    suite = ModelSuite(seed=args.seed, size=args.size, weights_dir=args.weights)
    server = WorkerServer(endpoint, suite)
    print(f"listening on {server.bound_endpoint}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
