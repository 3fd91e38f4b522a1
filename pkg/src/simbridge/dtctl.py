"""DT-side demo CLI for manual interaction with a running bridge.

    dtctl batch  --connect 127.0.0.1:7400 --sim-type ode-decay --model exp-decay \
                 -p k=1 -i x0=1 -i t=1 -o x
    dtctl stream --connect 127.0.0.1:7400 --sim-type ode-decay --model exp-decay \
                 -p k=1 -p dt=0.1 -p horizon=1 -i x0=1 -o t -o x --period-ms 100
    dtctl pt     --connect 127.0.0.1:7400 --subscribe factory/photocell/1/passage \
                 [--command hold:factory/hold/cmd:engaged=true] [--seconds 10]

The bridge's north adapter named by --connect must be TCP-bound.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from typing import Any, Sequence

from . import envelope as ev
from .client import ClientError, Connection
from .slog import configure_logging


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_kv(pairs: Sequence[str]) -> dict[str, Any]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise SystemExit(f"expected key=value, got {pair!r}")
        out[key] = _parse_value(value)
    return out


def _parse_host_port(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise SystemExit(f"expected host:port, got {text!r}")
    return host, int(port)


async def _run_batch(args) -> int:
    host, port = _parse_host_port(args.connect)
    connection = await Connection.tcp(host, port, args.identity)
    try:
        request = ev.SimulationRequest(
            model=args.model,
            outputs=args.outputs,
            mode=ev.MODE_BATCH,
            model_params=_parse_kv(args.params),
            inputs={k: float(v) for k, v in _parse_kv(args.inputs).items()},
        )
        response = await connection.request_batch(args.sim_type, request,
                                                  timeout_ms=args.timeout_ms)
        print(json.dumps(response.to_payload(), sort_keys=True))
        return 0 if response.status == ev.STATUS_OK else 1
    finally:
        await connection.close()


async def _run_stream(args) -> int:
    host, port = _parse_host_port(args.connect)
    connection = await Connection.tcp(host, port, args.identity)
    try:
        request = ev.SimulationRequest(
            model=args.model,
            outputs=args.outputs,
            mode=ev.MODE_STREAMING,
            stream_period_ms=args.period_ms,
            model_params=_parse_kv(args.params),
            inputs={k: float(v) for k, v in _parse_kv(args.inputs).items()},
            timeout_ms=args.timeout_ms,
        )
        handle = connection.open_stream(args.sim_type, request, timeout_ms=args.timeout_ms)
        async for payload in handle:
            print(json.dumps(payload, sort_keys=True))
        print(f"# stream {handle.status}; duplicates={handle.buffer.duplicates_dropped} "
              f"gaps_skipped={handle.buffer.gaps_skipped} dropped={handle.dropped_reported}",
              file=sys.stderr)
        return 0 if handle.status == "ended" else 1
    finally:
        await connection.close()


async def _run_pt(args) -> int:
    host, port = _parse_host_port(args.connect)
    connection = await Connection.tcp(host, port, args.identity)
    try:
        commands = {}
        sendables = []
        for spec in args.command_specs:
            entity, sep, rest = spec.partition(":")
            channel, sep2, assign = rest.partition(":")
            if not sep or not sep2 or "=" not in assign:
                raise SystemExit(f"expected entity:channel:field=value, got {spec!r}")
            field_name, _, raw = assign.partition("=")
            commands[entity] = channel
            sendables.append((entity, field_name, _parse_value(raw)))
        if args.launch:
            import yaml
            with open(args.launch, "r", encoding="utf-8") as handle:
                model_doc = yaml.safe_load(handle) or {}
            mappings = []
            for spec in args.map:
                parts = spec.split(":")
                if len(parts) != 3:
                    raise SystemExit(f"expected entity:channel:direction, got {spec!r}")
                mappings.append({"entity_id": parts[0], "channel": parts[1],
                                 "direction": parts[2]})
            connection.send_raw(ev.Envelope(
                header=ev.make_header(
                    kind=ev.PT_CONFIG,
                    source_id=args.identity,
                    request_id=ev.fresh_request_id(args.identity),
                    sim_type=args.sim_type,
                ),
                payload={"sim_type": args.sim_type, "model": model_doc,
                         "pacing": args.pacing, "until_ms": args.until_ms,
                         "mappings": mappings}))
        session = await connection.pt_session(args.subscribe, commands)
        for entity, field_name, value in sendables:
            session.send_command(entity, field_name, value)
        loop = asyncio.get_running_loop()
        deadline = loop.time() + args.seconds
        while loop.time() < deadline:
            try:
                channel, payload = await session.recv(timeout_s=max(0.1, deadline - loop.time()))
            except asyncio.TimeoutError:
                break
            print(json.dumps({"channel": channel, "telemetry": payload}, sort_keys=True))
        return 0
    finally:
        await connection.close()


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="dtctl", description=__doc__)
    parser.add_argument("--log-level", default="warning")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--connect", required=True, help="bridge north adapter host:port")
        p.add_argument("--identity", default="DT_1")
        p.add_argument("--timeout-ms", type=int, default=30_000, dest="timeout_ms")

    p_batch = sub.add_parser("batch", help="one-shot simulation request")
    common(p_batch)
    p_batch.add_argument("--sim-type", required=True)
    p_batch.add_argument("--model", required=True)
    p_batch.add_argument("-p", "--param", action="append", default=[], dest="params")
    p_batch.add_argument("-i", "--input", action="append", default=[], dest="inputs")
    p_batch.add_argument("-o", "--output", action="append", required=True, dest="outputs")

    p_stream = sub.add_parser("stream", help="ordered streaming request")
    common(p_stream)
    p_stream.add_argument("--sim-type", required=True)
    p_stream.add_argument("--model", required=True)
    p_stream.add_argument("-p", "--param", action="append", default=[], dest="params")
    p_stream.add_argument("-i", "--input", action="append", default=[], dest="inputs")
    p_stream.add_argument("-o", "--output", action="append", required=True, dest="outputs")
    p_stream.add_argument("--period-ms", type=int, required=True, dest="period_ms")

    p_pt = sub.add_parser("pt", help="subscribe to PT telemetry and send commands")
    common(p_pt)
    p_pt.add_argument("--subscribe", action="append", default=[],
                      help="telemetry channel (repeatable)")
    p_pt.add_argument("--command", action="append", default=[], dest="command_specs",
                      help="entity:channel:field=value (repeatable)")
    p_pt.add_argument("--seconds", type=float, default=10.0)
    p_pt.add_argument("--launch", default=None,
                      help="launch a PT session from this model YAML first")
    p_pt.add_argument("--sim-type", default="microfactory")
    p_pt.add_argument("--pacing", type=float, default=1.0,
                      help="real ms per sim ms for a launched session")
    p_pt.add_argument("--until-ms", type=int, default=600_000, dest="until_ms")
    p_pt.add_argument("--map", action="append", default=[],
                      help="entity:channel:direction mapping for --launch (repeatable)")

    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    runner = {"batch": _run_batch, "stream": _run_stream, "pt": _run_pt}[args.command]
    try:
        return asyncio.run(runner(args))
    except ClientError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        return 0


if __name__ == "__main__":
    sys.exit(main())
