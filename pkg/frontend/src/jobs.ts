/**
 * Job execution in the page: the built-in functions a volunteer can run.
 *
 * A job function consumes one input line and produces exactly one reply:
 * `done(null, result)` on success or `done(code, null)` on error.  Payloads
 * are opaque strings, and all integer arithmetic uses BigInt so results stay
 * exact at any size — a browser worker's output must be indistinguishable
 * from a native worker's.
 *
 * External-executable functions cannot run in a page; a spec asking for one
 * raises so the session can surface "this cluster needs a native volunteer".
 */

import type { Clock } from './session.js';

export type Done = (errorCode: string | null, result: string | null) => void;

export interface JobFunction {
    apply(x: string, done: Done): void;
}

export const EPARSE = 'EPARSE'; // input line is not a well-formed job input

export const BUILTIN_NAMES = ['square', 'sleep-square', 'collatz-steps', 'collatz-range', 'identity'] as const;

export class JobError extends Error {
    constructor(readonly code: string, message = '') {
        super(message || code);
        this.name = 'JobError';
    }
}

export class UnsupportedFunctionError extends Error {
    constructor(message: string) {
        super(message);
        this.name = 'UnsupportedFunctionError';
    }
}

// -- integer parsing -----------------------------------------------------------

// Decimal integers, native-int style: surrounding whitespace, an optional
// sign, and underscores between digits are accepted.
const DECIMAL = /^[+-]?[0-9](?:_?[0-9])*$/;

export function parseBigInt(text: string): bigint {
    const trimmed = text.trim();
    if (!DECIMAL.test(trimmed)) {
        throw new JobError(EPARSE, `not a decimal integer: ${JSON.stringify(text)}`);
    }
    const negative = trimmed.startsWith('-');
    const digits = trimmed.replace(/^[+-]/, '').replace(/_/g, '');
    const n = BigInt(digits);
    return negative ? -n : n;
}

// -- the computations ------------------------------------------------------------

export function computeSquare(x: string): string {
    const n = parseBigInt(x);
    return (n * n).toString();
}

/** Iterations of n -> n/2 (even) / 3n+1 (odd) until n reaches 1. */
export function collatzSteps(n: bigint): number {
    if (n < 1n) {
        throw new JobError(EPARSE, 'need n >= 1');
    }
    let steps = 0;
    while (n !== 1n) {
        n = n & 1n ? 3n * n + 1n : n >> 1n;
        steps += 1;
    }
    return steps;
}

/** (argmax, steps) over [start, start+count); ties go to the smaller n. */
export function collatzRange(start: bigint, count: bigint): [bigint, number] {
    if (start < 1n) {
        throw new JobError(EPARSE, 'range must start at 1 or above');
    }
    if (count < 1n) {
        throw new JobError(EPARSE, 'range needs at least one number');
    }
    let bestN = start;
    let bestSteps = collatzSteps(start);
    for (let n = start + 1n; n < start + count; n += 1n) {
        const s = collatzSteps(n);
        if (s > bestSteps) {
            bestN = n;
            bestSteps = s;
        }
    }
    return [bestN, bestSteps];
}

function computeSteps(x: string): string {
    return String(collatzSteps(parseBigInt(x)));
}

function computeRange(x: string): string {
    const sep = x.indexOf(':');
    if (sep < 0) {
        throw new JobError(EPARSE, 'expected start:count');
    }
    const [n, steps] = collatzRange(parseBigInt(x.slice(0, sep)), parseBigInt(x.slice(sep + 1)));
    return `${n}:${steps}`;
}

// -- function objects -------------------------------------------------------------

class SyncFunction implements JobFunction {
    constructor(private readonly compute: (x: string) => string) {}

    apply(x: string, done: Done): void {
        let result: string;
        try {
            result = this.compute(x);
        } catch (e) {
            if (e instanceof JobError) {
                done(e.code, null);
                return;
            }
            throw e;
        }
        done(null, result);
    }
}

/** Square, delivered after a fixed delay — a stand-in for a slow job. */
class SleepSquareFunction implements JobFunction {
    constructor(private readonly clock: Clock, private readonly delaySeconds: number) {
        if (delaySeconds < 0) {
            throw new UnsupportedFunctionError('delay must be >= 0');
        }
    }

    apply(x: string, done: Done): void {
        let result: string;
        try {
            result = computeSquare(x);
        } catch (e) {
            if (e instanceof JobError) {
                done(e.code, null);
                return;
            }
            throw e;
        }
        this.clock.setTimeout(() => done(null, result), this.delaySeconds * 1000);
    }
}

// -- function specs ----------------------------------------------------------------

export interface FunctionSpec {
    kind: 'builtin' | 'exec';
    name: string;
    args: string[];
}

/**
 * Split a spec line into tokens with shell-style quoting: single quotes are
 * literal runs, double quotes allow backslash escapes, and an unquoted
 * backslash escapes the next character.
 */
function tokenize(text: string): string[] {
    const tokens: string[] = [];
    let current = '';
    let started = false;
    let i = 0;
    while (i < text.length) {
        const c = text[i];
        if (c === ' ' || c === '\t' || c === '\n') {
            if (started) {
                tokens.push(current);
                current = '';
                started = false;
            }
            i += 1;
        } else if (c === "'") {
            const end = text.indexOf("'", i + 1);
            if (end < 0) {
                throw new UnsupportedFunctionError('unbalanced quote in function spec');
            }
            current += text.slice(i + 1, end);
            started = true;
            i = end + 1;
        } else if (c === '"') {
            i += 1;
            for (;;) {
                if (i >= text.length) {
                    throw new UnsupportedFunctionError('unbalanced quote in function spec');
                }
                const d = text[i];
                if (d === '"') {
                    i += 1;
                    break;
                }
                if (d === '\\' && i + 1 < text.length && '"\\'.includes(text[i + 1])) {
                    current += text[i + 1];
                    i += 2;
                } else {
                    current += d;
                    i += 1;
                }
            }
            started = true;
        } else if (c === '\\' && i + 1 < text.length) {
            current += text[i + 1];
            started = true;
            i += 2;
        } else {
            current += c;
            started = true;
            i += 1;
        }
    }
    if (started) {
        tokens.push(current);
    }
    return tokens;
}

/** Parse a spec line such as `square`, `sleep-square 0.25`, `exec:./tool`. */
export function parseFunctionSpec(text: string): FunctionSpec {
    const parts = tokenize(text);
    if (parts.length === 0) {
        throw new UnsupportedFunctionError('empty function spec');
    }
    const [head, ...args] = parts;
    if (head.startsWith('exec:')) {
        return { kind: 'exec', name: head.slice('exec:'.length), args };
    }
    return { kind: 'builtin', name: head, args };
}

/** Instantiate the function this page will run, or explain why it cannot. */
export function makeFunction(spec: FunctionSpec, clock: Clock): JobFunction {
    if (spec.kind === 'exec') {
        throw new UnsupportedFunctionError(
            `this cluster runs an external executable (${spec.name}); a page cannot`,
        );
    }
    switch (spec.name) {
        case 'square':
            return new SyncFunction(computeSquare);
        case 'collatz-steps':
            return new SyncFunction(computeSteps);
        case 'collatz-range':
            return new SyncFunction(computeRange);
        case 'identity':
            return new SyncFunction(x => x);
        case 'sleep-square': {
            if (spec.args.length > 1) {
                throw new UnsupportedFunctionError('sleep-square takes at most one argument');
            }
            const delay = spec.args.length ? Number(spec.args[0]) : 1.0;
            if (!Number.isFinite(delay)) {
                throw new UnsupportedFunctionError(`bad delay ${JSON.stringify(spec.args[0])}`);
            }
            return new SleepSquareFunction(clock, delay);
        }
        default:
            throw new UnsupportedFunctionError(
                `unknown builtin ${JSON.stringify(spec.name)}; this page knows ${BUILTIN_NAMES.join(', ')}`,
            );
    }
}
