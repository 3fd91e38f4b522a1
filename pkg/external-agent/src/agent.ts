/**
 * External simulation agent: connects to a bridge south adapter over framed
 * TCP, advertises the "logistic-map" simulation type and serves batch and
 * streaming requests. Reconnects with exponential backoff (200 ms base,
 * 10 s cap) and re-advertises on every connect.
 *
 * Usage: node dist/agent.js --bridge 127.0.0.1:7401 --agent-id Agent-TS
 */

import * as net from 'node:net';
import * as process from 'node:process';

import { Envelope, Kind, decode, encode, makeHeader, canonicalJson } from './codec.js';
import { FrameDecoder, frame } from './framing.js';
import { logisticRun, logisticStep } from './logistic.js';

const MODEL_NAME = 'logistic-map';
const BACKOFF_BASE_MS = 200;
const BACKOFF_CAP_MS = 10_000;

interface Options {
  host: string;
  port: number;
  agentId: string;
  simType: string;
}

function parseArgs(argv: string[]): Options {
  const options: Options = { host: '127.0.0.1', port: 7401, agentId: 'Agent-TS', simType: MODEL_NAME };
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg === '--bridge') {
      const value = argv[++i] ?? '';
      const sep = value.lastIndexOf(':');
      if (sep < 1) throw new Error(`--bridge expects host:port, got ${value}`);
      options.host = value.slice(0, sep);
      options.port = Number(value.slice(sep + 1));
    } else if (arg === '--agent-id') {
      options.agentId = argv[++i] ?? options.agentId;
    } else if (arg === '--sim-type') {
      options.simType = argv[++i] ?? options.simType;
    } else {
      throw new Error(`unknown argument ${arg}`);
    }
  }
  return options;
}

interface StreamState {
  timer: NodeJS.Timeout;
}

class Agent {
  private socket: net.Socket | null = null;
  private backoffMs = BACKOFF_BASE_MS;
  private readonly streams = new Map<string, StreamState>();

  constructor(private readonly options: Options) {}

  start(): void {
    this.connect();
  }

  private connect(): void {
    const socket = net.connect(this.options.port, this.options.host);
    const decoder = new FrameDecoder();
    this.socket = socket;

    socket.on('connect', () => {
      this.backoffMs = BACKOFF_BASE_MS;
      this.sendControl({ ctl: 'hello', peer_id: this.options.agentId });
      this.advertise();
      console.error(`connected to ${this.options.host}:${this.options.port}`);
    });
    socket.on('data', (data) => {
      let frames: Buffer[];
      try {
        frames = decoder.feed(data);
      } catch (err) {
        console.error(`frame error: ${(err as Error).message}`);
        socket.destroy();
        return;
      }
      for (const raw of frames) {
        try {
          this.handle(decode(raw));
        } catch (err) {
          console.error(`bad envelope: ${(err as Error).message}`);
        }
      }
    });
    socket.on('error', (err) => {
      console.error(`socket error: ${err.message}`);
    });
    socket.on('close', () => {
      this.cancelStreams();
      this.socket = null;
      const delay = this.backoffMs;
      this.backoffMs = Math.min(this.backoffMs * 2, BACKOFF_CAP_MS);
      console.error(`disconnected; retrying in ${delay} ms`);
      setTimeout(() => this.connect(), delay);
    });
  }

  private cancelStreams(): void {
    for (const state of this.streams.values()) {
      clearInterval(state.timer);
    }
    this.streams.clear();
  }

  private write(payload: Buffer): boolean {
    if (this.socket === null || this.socket.destroyed) return false;
    this.socket.write(frame(payload));
    return true;
  }

  private sendControl(doc: Record<string, unknown>): void {
    this.write(Buffer.from(canonicalJson(doc), 'utf-8'));
  }

  private send(env: Envelope): boolean {
    return this.write(encode(env));
  }

  private advertise(): void {
    this.send({
      header: makeHeader('advertise', this.options.agentId, '', this.options.simType),
      payload: {
        name: this.options.simType,
        modes: ['batch', 'streaming'],
        models: [MODEL_NAME],
        input_schema: { x0: 'value' },
        output_schema: { x: 'value' },
        pt_capable: false,
      },
    });
  }

  private handle(env: Envelope): void {
    switch (env.header.kind) {
      case 'batch_request':
        this.handleBatch(env);
        break;
      case 'stream_request':
        this.handleStream(env);
        break;
      default:
        console.error(`ignoring kind ${env.header.kind}`);
    }
  }

  private respond(env: Envelope, kind: Kind, payload: Record<string, unknown>, seq?: number): void {
    this.send({
      header: makeHeader(kind, this.options.agentId, env.header.request_id,
                         env.header.sim_type, null, seq),
      payload,
    });
  }

  private errorResponse(env: Envelope, detail: string): void {
    this.respond(env, 'batch_response', {
      request_id: env.header.request_id,
      status: 'error',
      values: {},
      final: true,
      error_detail: detail,
    });
  }

  private modelInputs(env: Envelope): { r: number; n: number; x0: number; outputs: string[] } | null {
    const payload = env.payload;
    const model = payload['model'];
    if (model !== MODEL_NAME) {
      this.errorResponse(env, `unknown model ${JSON.stringify(model)}`);
      return null;
    }
    const params = (payload['model_params'] ?? {}) as Record<string, unknown>;
    const inputs = (payload['inputs'] ?? {}) as Record<string, unknown>;
    const outputs = (payload['outputs'] ?? []) as string[];
    if (typeof inputs['x0'] !== 'number') {
      this.errorResponse(env, 'missing input: x0');
      return null;
    }
    const r = typeof params['r'] === 'number' ? (params['r'] as number) : 3.7;
    const n = typeof params['n'] === 'number' ? (params['n'] as number) : 1;
    return { r, n, x0: inputs['x0'] as number, outputs };
  }

  private handleBatch(env: Envelope): void {
    const parsed = this.modelInputs(env);
    if (parsed === null) return;
    const { r, n, x0, outputs } = parsed;
    const x = logisticRun(r, x0, n);
    const available: Record<string, number> = { x, n };
    const values: Record<string, number> = {};
    for (const name of outputs) {
      if (!(name in available)) {
        this.errorResponse(env, `missing output: ${name}`);
        return;
      }
      values[name] = available[name];
    }
    this.respond(env, 'batch_response', {
      request_id: env.header.request_id,
      status: 'ok',
      values,
      final: true,
    });
  }

  private handleStream(env: Envelope): void {
    const parsed = this.modelInputs(env);
    if (parsed === null) return;
    const period = env.payload['stream_period_ms'];
    if (typeof period !== 'number' || period <= 0) {
      this.errorResponse(env, 'stream_period_ms must be positive');
      return;
    }
    const { r, n, x0, outputs } = parsed;
    const rid = env.header.request_id;
    let x = x0;
    let seq = 0;
    let dropped = 0;
    const timer = setInterval(() => {
      if (seq >= n) {
        clearInterval(timer);
        this.streams.delete(rid);
        this.respond(env, 'stream_end', {
          request_id: rid,
          status: 'ok',
          final: true,
          dropped,
        }, seq + 1);
        return;
      }
      x = logisticStep(r, x);
      seq += 1;
      const available: Record<string, number> = { x, n: seq };
      const values: Record<string, number> = {};
      for (const name of outputs) {
        values[name] = available[name] ?? 0;
      }
      const ok = this.send({
        header: makeHeader('stream_data', this.options.agentId, rid,
                           env.header.sim_type, null, seq),
        payload: { request_id: rid, status: 'ok', values, final: false },
      });
      if (!ok) dropped += 1;
    }, period);
    this.streams.set(rid, { timer });
  }
}

function main(): void {
  let options: Options;
  try {
    options = parseArgs(process.argv.slice(2));
  } catch (err) {
    console.error((err as Error).message);
    process.exit(2);
  }
  new Agent(options).start();
}

main();
