/** Length-prefixed framing: 4-byte big-endian length, then the document. */

export const MAX_FRAME_BYTES = 16 * 1024 * 1024;

export class FrameError extends Error {}

export function frame(document: Buffer, limit = MAX_FRAME_BYTES): Buffer {
  if (document.length > limit) {
    throw new FrameError(`frame of ${document.length} bytes exceeds ${limit} byte limit`);
  }
  const prefix = Buffer.allocUnsafe(4);
  prefix.writeUInt32BE(document.length, 0);
  return Buffer.concat([prefix, document]);
}

export class FrameDecoder {
  private buffer: Buffer = Buffer.alloc(0);

  constructor(private readonly limit = MAX_FRAME_BYTES) {}

  feed(data: Buffer): Buffer[] {
    this.buffer = this.buffer.length ? Buffer.concat([this.buffer, data]) : data;
    const frames: Buffer[] = [];
    for (;;) {
      if (this.buffer.length < 4) break;
      const length = this.buffer.readUInt32BE(0);
      if (length > this.limit) {
        throw new FrameError(`declared frame length ${length} exceeds ${this.limit} byte limit`);
      }
      if (this.buffer.length < 4 + length) break;
      frames.push(this.buffer.subarray(4, 4 + length));
      this.buffer = this.buffer.subarray(4 + length);
    }
    return frames;
  }

  pending(): number {
    return this.buffer.length;
  }
}
