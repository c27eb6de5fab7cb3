/** Shared test machinery: virtual time, scripted sockets, real clusters. */

import { ChildProcessWithoutNullStreams, spawn } from 'node:child_process';
import { fileURLToPath } from 'node:url';
import * as path from 'node:path';
import WebSocket from 'ws';

import * as wire from '../src/wire.js';
import { Clock, SessionConfig, SocketFactory, SocketLike } from '../src/session.js';

export const REPO_ROOT = path.resolve(path.dirname(fileURLToPath(import.meta.url)), '..', '..');
export const FRONTEND_ROOT = path.resolve(path.dirname(fileURLToPath(import.meta.url)), '..');

/** Tight timings so retry/timeout paths run in test time, in seconds. */
export const FAST_CONFIG: SessionConfig = {
    heartbeatInterval: 0.5,
    heartbeatTimeout: 3,
    candidateTimeout: 15,
    statusInterval: 0.5,
    backoffBase: 0.3,
    backoffCap: 2,
};

// -- virtual time -------------------------------------------------------------

interface FakeTimer {
    at: number;
    fn: () => void;
    interval: number | null;
}

export class FakeClock implements Clock {
    private t = 0;
    private nextId = 1;
    private timers = new Map<number, FakeTimer>();

    now(): number {
        return this.t;
    }

    setTimeout(fn: () => void, ms: number): unknown {
        const id = this.nextId++;
        this.timers.set(id, { at: this.t + ms, fn, interval: null });
        return id;
    }

    clearTimeout(handle: unknown): void {
        this.timers.delete(handle as number);
    }

    setInterval(fn: () => void, ms: number): unknown {
        const id = this.nextId++;
        this.timers.set(id, { at: this.t + ms, fn, interval: ms });
        return id;
    }

    clearInterval(handle: unknown): void {
        this.timers.delete(handle as number);
    }

    /** Run the clock forward, firing every timer that comes due on the way. */
    advance(ms: number): void {
        const target = this.t + ms;
        for (;;) {
            let dueId: number | null = null;
            let dueAt = Infinity;
            for (const [id, timer] of this.timers) {
                if (timer.at <= target && timer.at < dueAt) {
                    dueAt = timer.at;
                    dueId = id;
                }
            }
            if (dueId === null) {
                break;
            }
            const timer = this.timers.get(dueId)!;
            this.t = timer.at;
            if (timer.interval === null) {
                this.timers.delete(dueId);
            } else {
                timer.at += timer.interval;
            }
            timer.fn();
        }
        this.t = target;
    }
}

// -- scripted sockets ------------------------------------------------------------

export class FakeSocket implements SocketLike {
    onopen: (() => void) | null = null;
    onmessage: ((text: string) => void) | null = null;
    onclose: (() => void) | null = null;
    sent: wire.WireRecord[] = [];
    closedByClient = false;

    send(text: string): void {
        this.sent.push(...wire.decodeFrame(text));
    }

    close(): void {
        this.closedByClient = true;
    }

    /** Server side of the conversation. */
    open(): void {
        this.onopen?.();
    }

    deliver(rec: wire.WireRecord): void {
        this.onmessage?.(wire.encode(rec));
    }

    dropFromServer(): void {
        this.onclose?.();
    }
}

export class FakeSockets {
    all: FakeSocket[] = [];

    factory: SocketFactory = () => {
        const sock = new FakeSocket();
        this.all.push(sock);
        return sock;
    };

    get latest(): FakeSocket {
        if (this.all.length === 0) {
            throw new Error('no socket opened yet');
        }
        return this.all[this.all.length - 1];
    }
}

// -- a real cluster over loopback ----------------------------------------------

/** The session's socket contract, backed by a real WebSocket client. */
export const nodeSockets: SocketFactory = url => {
    const ws = new WebSocket(url);
    const shim: SocketLike = {
        send: text => ws.send(text),
        close: () => ws.close(),
        onopen: null,
        onmessage: null,
        onclose: null,
    };
    ws.onopen = () => shim.onopen?.();
    ws.onmessage = ev => shim.onmessage?.(String(ev.data));
    ws.onclose = () => shim.onclose?.();
    ws.onerror = () => {
        // the close event follows; nothing to do here
    };
    return shim;
};

export interface RunningCluster {
    port: number;
    proc: ChildProcessWithoutNullStreams;
    /** Resolves at process exit with everything it printed. */
    finished: Promise<{ code: number | null; stdout: string; stderr: string }>;
}

/**
 * Start `pando run` on a loopback socket transport with no local worker, so
 * every job must flow through a volunteer.  Resolves once the relay port is
 * known.  `input` goes to stdin, which is then closed; pass null to keep the
 * stream open (and the cluster alive) until you end stdin yourself.
 */
export function startRun(fnSpec: string, input: string | null, extraArgs: string[] = []): Promise<RunningCluster> {
    const proc = spawn(
        'python3',
        ['-m', 'pando', 'run', '--fn', fnSpec, '--local', '0',
         '--transport', 'socket', '--relay-port', '0', ...extraArgs],
        { cwd: REPO_ROOT, stdio: ['pipe', 'pipe', 'pipe'] },
    );
    let stdout = '';
    let stderr = '';
    proc.stdout.on('data', chunk => { stdout += chunk; });
    const finished = new Promise<{ code: number | null; stdout: string; stderr: string }>(resolve => {
        proc.on('close', code => resolve({ code, stdout, stderr }));
    });
    return new Promise((resolve, reject) => {
        const abort = setTimeout(
            () => reject(new Error(`relay never announced its port; stderr so far:\n${stderr}`)),
            20_000,
        );
        proc.stderr.on('data', chunk => {
            stderr += chunk;
            const hit = stderr.match(/relay listening on [\d.]+:(\d+)/);
            if (hit) {
                clearTimeout(abort);
                if (input !== null) {
                    proc.stdin.write(input);
                    proc.stdin.end();
                }
                resolve({ port: Number(hit[1]), proc, finished });
            }
        });
        proc.on('error', e => {
            clearTimeout(abort);
            reject(new Error(`cannot start the cluster (is the python package installed?): ${e}`));
        });
        void finished.then(r => {
            clearTimeout(abort);
            reject(new Error(`cluster exited before announcing a port (code ${r.code}):\n${r.stderr}`));
        });
    });
}

export function waitFor(check: () => boolean, what: string, timeoutMs = 30_000): Promise<void> {
    const started = Date.now();
    return new Promise((resolve, reject) => {
        const poll = setInterval(() => {
            if (check()) {
                clearInterval(poll);
                resolve();
            } else if (Date.now() - started > timeoutMs) {
                clearInterval(poll);
                reject(new Error(`timed out waiting for ${what}`));
            }
        }, 20);
    });
}
