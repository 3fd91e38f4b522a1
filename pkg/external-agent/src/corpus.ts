/**
 * Corpus tool for cross-implementation codec checks.
 *
 *   node dist/corpus.js roundtrip   < corpus.jsonl > reencoded.jsonl
 *       Decode each line with this codec and re-emit it canonically;
 *       a line that fails to decode becomes {"error": "..."}.
 *
 *   node dist/corpus.js generate N SEED > corpus.jsonl
 *       Emit N random valid envelopes from a deterministic generator.
 */

import * as process from 'node:process';
import * as readline from 'node:readline';

import { Envelope, KINDS, decode, encode } from './codec.js';

async function roundtrip(): Promise<void> {
  const rl = readline.createInterface({ input: process.stdin, terminal: false });
  for await (const line of rl) {
    if (!line.trim()) continue;
    try {
      const env = decode(Buffer.from(line, 'utf-8'));
      process.stdout.write(encode(env).toString('utf-8') + '\n');
    } catch (err) {
      process.stdout.write(JSON.stringify({ error: (err as Error).message }) + '\n');
    }
  }
}

/** Deterministic 64-bit LCG so corpora are reproducible across runs. */
class Rng {
  private state: bigint;

  constructor(seed: number) {
    this.state = BigInt(seed) & 0xffffffffffffffffn;
  }

  next(): number {
    this.state = (this.state * 6364136223846793005n + 1442695040888963407n)
      & 0xffffffffffffffffn;
    return Number(this.state >> 11n) / 2 ** 53;
  }

  int(lo: number, hi: number): number {
    return lo + Math.floor(this.next() * (hi - lo + 1));
  }

  choice<T>(items: readonly T[]): T {
    return items[this.int(0, items.length - 1)];
  }
}

const ALPHABET = 'abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-./';

function randomString(rng: Rng, maxLen = 12): string {
  const n = rng.int(1, maxLen);
  let out = '';
  for (let i = 0; i < n; i++) out += ALPHABET[rng.int(0, ALPHABET.length - 1)];
  return out;
}

function randomScalar(rng: Rng): unknown {
  switch (rng.int(0, 4)) {
    case 0:
      return rng.int(-(2 ** 40), 2 ** 40);
    case 1: {
      // Non-integral doubles only: integral floats render differently across
      // JSON encoders (1500.0 vs 1500).
      const value = (rng.next() - 0.5) * 2e6;
      return Number.isInteger(value) ? value + 0.5 : value;
    }
    case 2:
      return randomString(rng);
    case 3:
      return rng.next() < 0.5;
    default:
      return null;
  }
}

function randomValue(rng: Rng, depth: number): unknown {
  if (depth <= 0 || rng.next() < 0.6) return randomScalar(rng);
  if (rng.next() < 0.5) {
    return Array.from({ length: rng.int(0, 4) }, () => randomValue(rng, depth - 1));
  }
  const out: Record<string, unknown> = {};
  for (let i = rng.int(0, 4); i > 0; i--) out[randomString(rng)] = randomValue(rng, depth - 1);
  return out;
}

function randomEnvelope(rng: Rng): Envelope {
  const kind = rng.choice(KINDS);
  const seqKinds = new Set(['stream_data', 'stream_end']);
  const payload: Record<string, unknown> = {};
  for (let i = rng.int(0, 6); i > 0; i--) payload[randomString(rng)] = randomValue(rng, 2);
  if (kind === 'batch_request' || kind === 'stream_request') delete payload['mode'];
  const trace: Array<[string, number]> = Array.from(
    { length: rng.int(0, 4) }, () => [randomString(rng), rng.int(0, 2 ** 40)]);
  return {
    header: {
      message_id: randomString(rng, 16),
      request_id: kind === 'advertise' && rng.next() < 0.5 ? '' : randomString(rng, 32),
      sim_type: randomString(rng),
      kind,
      source_id: randomString(rng),
      dest_id: rng.next() < 0.7 ? randomString(rng) : null,
      ...(seqKinds.has(kind) ? { seq: rng.int(1, 10_000) } : {}),
      issued_at: rng.int(0, 2 ** 41),
      trace,
    },
    payload,
  };
}

function generate(count: number, seed: number): void {
  const rng = new Rng(seed);
  for (let i = 0; i < count; i++) {
    process.stdout.write(encode(randomEnvelope(rng)).toString('utf-8') + '\n');
  }
}

const command = process.argv[2];
if (command === 'roundtrip') {
  void roundtrip();
} else if (command === 'generate') {
  generate(Number(process.argv[3] ?? 100), Number(process.argv[4] ?? 1));
} else {
  console.error('usage: corpus.js roundtrip|generate [count seed]');
  process.exit(2);
}
