"""hfbridge entry point: load checkpoints, self-test, serve the protocol."""

from __future__ import annotations

import argparse
import logging
import sys
import threading

from .server import Bridge, BridgeConfig, BridgeError, BridgeServer, serve_stdio

log = logging.getLogger("hfbridge")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfbridge", description=__doc__)
    parser.add_argument("--model", required=True, help="original checkpoint (path or hub id)")
    parser.add_argument("--cf-model", help="counterfactual checkpoint; selected by config {'model':'cf'}")
    parser.add_argument("--steer-vector", help=".npy or JSON vector added to the residual stream (cf slot)")
    parser.add_argument("--steer-layer", type=int, help="decoder block index for the steering vector")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--listen", help="host:port to serve on (port 0 picks one)")
    parser.add_argument("--stdio", action="store_true", help="serve one session over stdio")
    parser.add_argument("--skip-self-test", action="store_true")
    parser.add_argument("--max-prefix", type=int, default=1024)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if bool(args.listen) == bool(args.stdio):
        build_parser().error("need exactly one of --listen or --stdio")
    config = BridgeConfig(
        model=args.model,
        cf_model=args.cf_model,
        steer_vector=args.steer_vector,
        steer_layer=args.steer_layer,
        device=args.device,
        max_prefix=args.max_prefix,
    )
    try:
        bridge = Bridge(config)
        if not args.skip_self_test:
            report = bridge.self_test()
            log.info("self-test ok: %s", report)
    except BridgeError as exc:
        log.error("%s", exc)
        return 2
    if args.stdio:
        serve_stdio(bridge)
        return 0
    host, _, port = args.listen.rpartition(":")
    server = BridgeServer(bridge, host or "127.0.0.1", int(port or 0))
    log.info("serving %s on %s (vocab %d)", args.model, server.address, bridge.vocab_size)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
