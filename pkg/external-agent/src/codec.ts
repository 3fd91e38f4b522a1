/**
 * Simulation protocol envelope codec, implemented independently from the wire
 * documentation (docs/protocol.md in the bridge repository).
 *
 * Canonical form: UTF-8 JSON, lexicographically sorted keys, no whitespace.
 */

export const KINDS = [
  'batch_request', 'batch_response', 'stream_request', 'stream_data',
  'stream_end', 'pt_config', 'pt_telemetry', 'pt_command', 'advertise', 'error',
] as const;

export type Kind = (typeof KINDS)[number];

const KIND_SET: ReadonlySet<string> = new Set(KINDS);
const SEQ_KINDS: ReadonlySet<string> = new Set(['stream_data', 'stream_end']);

const HEADER_FIELDS: ReadonlySet<string> = new Set([
  'dest_id', 'issued_at', 'kind', 'message_id', 'request_id', 'seq',
  'sim_type', 'source_id', 'trace',
]);

export interface EnvelopeHeader {
  message_id: string;
  request_id: string;
  sim_type: string;
  kind: Kind;
  source_id: string;
  dest_id: string | null;
  seq?: number;
  issued_at: number;
  trace: Array<[string, number]>;
}

export interface Envelope {
  header: EnvelopeHeader;
  payload: Record<string, unknown>;
}

export class CodecError extends Error {}

function isPlainObject(value: unknown): value is Record<string, unknown> {
  return typeof value === 'object' && value !== null && !Array.isArray(value);
}

/** Canonical JSON: sorted keys, compact separators. */
export function canonicalJson(value: unknown): string {
  if (value === null) return 'null';
  switch (typeof value) {
    case 'boolean':
      return value ? 'true' : 'false';
    case 'number':
      if (!Number.isFinite(value)) throw new CodecError('non-finite number');
      return JSON.stringify(value);
    case 'string':
      return JSON.stringify(value);
    case 'object': {
      if (Array.isArray(value)) {
        return '[' + value.map(canonicalJson).join(',') + ']';
      }
      const obj = value as Record<string, unknown>;
      const keys = Object.keys(obj).sort();
      const parts = keys.map((k) => JSON.stringify(k) + ':' + canonicalJson(obj[k]));
      return '{' + parts.join(',') + '}';
    }
    default:
      throw new CodecError(`unsupported value type ${typeof value}`);
  }
}

function checkInvariants(header: EnvelopeHeader, payload: unknown): void {
  if (!KIND_SET.has(header.kind)) {
    throw new CodecError(`unsupported kind: ${header.kind}`);
  }
  const wantsSeq = SEQ_KINDS.has(header.kind);
  if (wantsSeq && header.seq === undefined) {
    throw new CodecError(`seq required for kind ${header.kind}`);
  }
  if (!wantsSeq && header.seq !== undefined) {
    throw new CodecError(`seq forbidden for kind ${header.kind}`);
  }
  if (header.seq !== undefined && header.seq < 0) {
    throw new CodecError('seq must be non-negative');
  }
  if (header.kind !== 'advertise' && header.request_id === '') {
    throw new CodecError(`request_id required for kind ${header.kind}`);
  }
  if (!header.message_id || !header.source_id) {
    throw new CodecError('message_id and source_id must be non-empty');
  }
  if (!isPlainObject(payload)) {
    throw new CodecError('payload must be an object');
  }
  const mode = (payload as Record<string, unknown>)['mode'];
  if (header.kind === 'batch_request' && mode !== undefined && mode !== 'batch') {
    throw new CodecError('batch_request payload has non-batch mode');
  }
  if (header.kind === 'stream_request' && mode !== undefined && mode !== 'streaming') {
    throw new CodecError('stream_request payload has non-streaming mode');
  }
}

export function encode(env: Envelope): Buffer {
  checkInvariants(env.header, env.payload);
  const headerDoc: Record<string, unknown> = {
    dest_id: env.header.dest_id,
    issued_at: env.header.issued_at,
    kind: env.header.kind,
    message_id: env.header.message_id,
    request_id: env.header.request_id,
    sim_type: env.header.sim_type,
    source_id: env.header.source_id,
    trace: env.header.trace.map(([hop, ts]) => [hop, ts]),
  };
  if (env.header.seq !== undefined) headerDoc['seq'] = env.header.seq;
  return Buffer.from(canonicalJson({ header: headerDoc, payload: env.payload }), 'utf-8');
}

function requireString(doc: Record<string, unknown>, key: string, nullable = false): string | null {
  const value = doc[key];
  if (value === null && nullable) return null;
  if (typeof value !== 'string') throw new CodecError(`header.${key} must be a string`);
  return value;
}

function requireInt(value: unknown, what: string): number {
  if (typeof value !== 'number' || !Number.isInteger(value)) {
    throw new CodecError(`${what} must be an integer`);
  }
  return value;
}

export function decodeDocument(doc: unknown): Envelope {
  if (!isPlainObject(doc)) throw new CodecError('document must be an object');
  const extra = Object.keys(doc).filter((k) => k !== 'header' && k !== 'payload');
  if (extra.length) throw new CodecError(`unexpected top-level fields: ${extra.sort()}`);
  if (!('header' in doc) || !('payload' in doc)) {
    throw new CodecError('document requires header and payload');
  }
  const raw = doc['header'];
  if (!isPlainObject(raw)) throw new CodecError('header must be an object');
  const unknown = Object.keys(raw).filter((k) => !HEADER_FIELDS.has(k));
  if (unknown.length) throw new CodecError(`unknown header fields: ${unknown.sort()}`);
  for (const field of HEADER_FIELDS) {
    if (field !== 'seq' && !(field in raw)) {
      throw new CodecError(`missing header field: ${field}`);
    }
  }
  const kind = requireString(raw, 'kind') as string;
  if (!KIND_SET.has(kind)) throw new CodecError(`unsupported kind: ${kind}`);
  const traceRaw = raw['trace'];
  if (!Array.isArray(traceRaw)) throw new CodecError('header.trace must be a list');
  const trace: Array<[string, number]> = traceRaw.map((pair, i) => {
    if (!Array.isArray(pair) || pair.length !== 2 || typeof pair[0] !== 'string') {
      throw new CodecError(`header.trace[${i}] must be a [hop, timestamp] pair`);
    }
    return [pair[0], requireInt(pair[1], `header.trace[${i}][1]`)];
  });
  const header: EnvelopeHeader = {
    message_id: requireString(raw, 'message_id') as string,
    request_id: requireString(raw, 'request_id') as string,
    sim_type: requireString(raw, 'sim_type') as string,
    kind: kind as Kind,
    source_id: requireString(raw, 'source_id') as string,
    dest_id: requireString(raw, 'dest_id', true),
    issued_at: requireInt(raw['issued_at'], 'header.issued_at'),
    trace,
  };
  if ('seq' in raw) header.seq = requireInt(raw['seq'], 'header.seq');
  checkInvariants(header, doc['payload']);
  return { header, payload: doc['payload'] as Record<string, unknown> };
}

export function decode(data: Buffer): Envelope {
  let doc: unknown;
  try {
    doc = JSON.parse(data.toString('utf-8'));
  } catch (err) {
    throw new CodecError(`invalid JSON: ${(err as Error).message}`);
  }
  return decodeDocument(doc);
}

let messageCounter = 0;

export function makeHeader(
  kind: Kind,
  sourceId: string,
  requestId: string,
  simType = '',
  destId: string | null = null,
  seq?: number,
): EnvelopeHeader {
  const now = Date.now();
  messageCounter += 1;
  const header: EnvelopeHeader = {
    message_id: `${sourceId}-${now.toString(16)}-${messageCounter}`,
    request_id: requestId,
    sim_type: simType,
    kind,
    source_id: sourceId,
    dest_id: destId,
    issued_at: now,
    trace: [[sourceId, now]],
  };
  if (seq !== undefined) header.seq = seq;
  return header;
}
