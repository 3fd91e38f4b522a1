"""Bridge binary: load a config file, start adapters, run the core loop.

    simbridge --config bridge.yaml [--log-level debug] [--validate-only]

SIGUSR1 (where available) logs a metrics dump; metrics are also served on the
sb/metrics control channel.
"""

from __future__ import annotations

import argparse
import asyncio
import signal
import sys
from typing import Sequence

from .bridge import Bridge
from .config import ConfigError, LOG_LEVELS, load_config
from .slog import component_logger, configure_logging, fmt_event

log = component_logger("cli")


async def serve(bridge: Bridge) -> None:
    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    for signame in ("SIGINT", "SIGTERM"):
        if hasattr(signal, signame):
            loop.add_signal_handler(getattr(signal, signame), stop.set)
    if hasattr(signal, "SIGUSR1"):
        loop.add_signal_handler(
            signal.SIGUSR1,
            lambda: log.info(fmt_event("metrics", **bridge.metrics_document())))
    await bridge.start()
    for name, adapter in {**bridge.north, **bridge.south}.items():
        where = adapter.spec.bind if adapter.bound_port is None \
            else f"{adapter.spec.bind} (port {adapter.bound_port})"
        log.info(fmt_event("adapter_up", adapter=name, direction=adapter.direction,
                           flavor=adapter.flavor, bind=where))
    log.info(fmt_event("bridge_up"))
    await stop.wait()
    log.info(fmt_event("bridge_stopping"))
    await bridge.stop()


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="simbridge", description=__doc__)
    parser.add_argument("--config", required=True, help="path to the YAML config file")
    parser.add_argument("--log-level", choices=LOG_LEVELS, default=None,
                        help="override the config file's log level")
    parser.add_argument("--validate-only", action="store_true",
                        help="validate the config and exit")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"invalid config:\n{exc}", file=sys.stderr)
        return 2
    if args.validate_only:
        print("config OK")
        return 0
    configure_logging(args.log_level or config.log_level)
    asyncio.run(serve(Bridge(config)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
