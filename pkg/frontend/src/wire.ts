/**
 * Wire records: the JSON-line message grammar the whole cluster speaks.
 *
 * Every message is one JSON object, keys in constructor order, no spaces,
 * non-ASCII escaped — so that encoding a record here produces byte-identical
 * output to every other implementation.  The `ch` field names the logical
 * channel a record belongs to: `boot` (bootstrap/signaling), `ctrl`
 * (membership, heartbeats, status), `data` (job values and results).  Over a
 * WebSocket each text frame carries one record; a trailing newline is
 * tolerated but not sent.
 */

export type Channel = 'boot' | 'ctrl' | 'data';

export interface WireRecord {
    ch: Channel;
    type: string;
    [field: string]: unknown;
}

const HEX16 = /^[0-9a-f]{16}$/;

export function isHex16(v: unknown): v is string {
    return typeof v === 'string' && HEX16.test(v);
}

// -- record constructors (field order matters: it is the byte order) ---------

export function register(root = false): WireRecord {
    const rec: WireRecord = { ch: 'boot', type: 'REGISTER' };
    if (root) {
        rec.root = true;
    }
    return rec;
}

export function ident(nodeIdHex: string): WireRecord {
    return { ch: 'boot', type: 'ID', id: nodeIdHex };
}

export function reject(): WireRecord {
    return { ch: 'boot', type: 'REJECT' };
}

export function join(originHex: string, signal: unknown, destinationHex?: string): WireRecord {
    const rec: WireRecord = { ch: 'boot', type: 'JOIN', origin: originHex, signal };
    if (destinationHex !== undefined) {
        rec.destination = destinationHex;
    }
    return rec;
}

export function heartbeat(tsMs: number): WireRecord {
    return { ch: 'ctrl', type: 'HEARTBEAT', ts: tsMs };
}

export function status(leaves: number): WireRecord {
    return { ch: 'ctrl', type: 'STATUS', leaves };
}

export function openData(tokenHex: string): WireRecord {
    return { ch: 'ctrl', type: 'OPEN_DATA', token: tokenHex };
}

export function attach(vchan: string): WireRecord {
    return { ch: 'boot', type: 'ATTACH', vchan };
}

export function value(seq: number, payload: string): WireRecord {
    return { ch: 'data', type: 'VALUE', seq, payload };
}

export function result(seq: number, ok: boolean, payload: string): WireRecord {
    return { ch: 'data', type: 'RESULT', seq, ok, payload };
}

// -- framing ------------------------------------------------------------------

/** One record → its canonical wire text (no trailing newline). */
export function encode(record: WireRecord): string {
    // JSON.stringify leaves non-ASCII raw; the canonical form escapes it.
    return JSON.stringify(record).replace(
        /[-￿]/g,
        c => '\\u' + c.charCodeAt(0).toString(16).padStart(4, '0'),
    );
}

/**
 * One frame (or line batch) → records.  Malformed or non-object lines are
 * skipped rather than fatal, matching the native decoder's tolerance.
 */
export function decodeFrame(text: string): WireRecord[] {
    const records: WireRecord[] = [];
    for (const line of text.split('\n')) {
        if (!line.trim()) {
            continue;
        }
        let parsed: unknown;
        try {
            parsed = JSON.parse(line);
        } catch {
            continue;
        }
        if (typeof parsed === 'object' && parsed !== null && !Array.isArray(parsed)) {
            records.push(parsed as WireRecord);
        }
    }
    return records;
}

// -- validation -----------------------------------------------------------------

type FieldCheck = [field: string, ok: (v: unknown) => boolean];

const isInt = (v: unknown): boolean => typeof v === 'number' && Number.isInteger(v);
const isSeq = (v: unknown): boolean => isInt(v) && (v as number) >= 0;

const SCHEMAS = new Map<string, FieldCheck[]>([
    ['boot/REGISTER', []],
    ['boot/ID', [['id', isHex16]]],
    ['boot/REJECT', []],
    ['boot/JOIN', [['origin', isHex16], ['signal', () => true]]],
    ['boot/ATTACH', [['vchan', v => typeof v === 'string']]],
    ['ctrl/HEARTBEAT', [['ts', isInt]]],
    ['ctrl/STATUS', [['leaves', v => isInt(v) && (v as number) >= 0]]],
    ['ctrl/OPEN_DATA', [['token', isHex16]]],
    ['data/VALUE', [['seq', isSeq], ['payload', v => typeof v === 'string']]],
    ['data/RESULT', [['seq', isSeq], ['ok', v => typeof v === 'boolean'], ['payload', v => typeof v === 'string']]],
]);

/** True iff the record matches the protocol grammar. */
export function validate(record: Record<string, unknown>): boolean {
    const key = `${record.ch}/${record.type}`;
    const schema = SCHEMAS.get(key);
    if (schema === undefined) {
        return false;
    }
    for (const [field, ok] of schema) {
        if (!(field in record) || !ok(record[field])) {
            return false;
        }
    }
    if (key === 'boot/JOIN' && 'destination' in record && !isHex16(record.destination)) {
        return false;
    }
    return true;
}
