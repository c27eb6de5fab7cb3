/**
 * The volunteer session a page runs: join the cluster, process jobs, retry.
 *
 * One session owns at most one connection to the relay and walks a single
 * path through it:
 *
 *   connecting → registering → joining → attaching → working
 *
 * REGISTER draws a node identity, JOIN asks the tree for a placement, and —
 * because a page can neither listen nor dial arbitrary peers — ATTACH asks
 * the relay to open the parent's two channels on our behalf and forward
 * frames both ways.  The bootstrap phase is over once the ATTACH echo
 * arrives; only then do ctrl (heartbeats, status) and data (values, results)
 * flow, multiplexed over the same socket by each record's `ch` field.
 *
 * Failures all funnel into one recovery: tear everything down and retry the
 * whole join from scratch after an exponential backoff.  Jobs in flight are
 * simply dropped — the parent re-lends them elsewhere, so correctness never
 * depends on this page.  A session is a processor only: placement requests
 * delegated to it are declined (dropped), and the asker re-routes elsewhere
 * with a fresh identity after its own timeout.
 */

import * as wire from './wire.js';
import { JobFunction, UnsupportedFunctionError, makeFunction, parseFunctionSpec } from './jobs.js';

// -- environment adapters (DOM-free; the page and the tests each supply one) --

export interface Clock {
    /** Milliseconds; only differences are ever used. */
    now(): number;
    setTimeout(fn: () => void, ms: number): unknown;
    clearTimeout(handle: unknown): void;
    setInterval(fn: () => void, ms: number): unknown;
    clearInterval(handle: unknown): void;
}

export const realClock: Clock = {
    now: () => Date.now(),
    setTimeout: (fn, ms) => setTimeout(fn, ms),
    clearTimeout: h => clearTimeout(h as Parameters<typeof clearTimeout>[0]),
    setInterval: (fn, ms) => setInterval(fn, ms),
    clearInterval: h => clearInterval(h as Parameters<typeof clearInterval>[0]),
};

/** What the session needs from a WebSocket, shaped so tests can fake it. */
export interface SocketLike {
    send(text: string): void;
    close(): void;
    onopen: (() => void) | null;
    onmessage: ((text: string) => void) | null;
    onclose: (() => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

// -- configuration ---------------------------------------------------------------

/** Timing knobs, in seconds, mirroring the native overlay defaults. */
export interface SessionConfig {
    heartbeatInterval: number;
    heartbeatTimeout: number;
    candidateTimeout: number;
    statusInterval: number;
    backoffBase: number;
    backoffCap: number;
}

export const DEFAULT_CONFIG: SessionConfig = {
    heartbeatInterval: 2,
    heartbeatTimeout: 10,
    candidateTimeout: 60,
    statusInterval: 1,
    backoffBase: 1,
    backoffCap: 30,
};

export type SessionState =
    | 'idle'
    | 'connecting'
    | 'registering'
    | 'joining'
    | 'attaching'
    | 'working'
    | 'backoff'
    | 'stopped'
    | 'failed';

export interface ChannelStates {
    boot: 'open' | 'done' | 'closed';
    ctrl: 'open' | 'closed';
    data: 'open' | 'closed';
}

export interface SessionCounters {
    attempts: number;
    jobsReceived: number;
    jobsCompleted: number;
    jobsFailed: number;
    placementsDeclined: number;
}

export interface SessionOptions {
    sockets: SocketFactory;
    clock?: Clock;
    config?: Partial<SessionConfig>;
}

interface PendingJob {
    seq: number;
    payload: string;
}

// -- the session -------------------------------------------------------------------

export class BrowserSession {
    readonly counters: SessionCounters = {
        attempts: 0,
        jobsReceived: 0,
        jobsCompleted: 0,
        jobsFailed: 0,
        placementsDeclined: 0,
    };

    /** Called after any visible change; the page repaints from this. */
    onChange: ((session: BrowserSession) => void) | null = null;

    private readonly sockets: SocketFactory;
    private readonly clock: Clock;
    private readonly config: SessionConfig;

    private stateNow: SessionState = 'idle';
    private socket: SocketLike | null = null;
    private epoch = 0;

    private nodeIdNow: string | null = null;
    private parentIdNow: string | null = null;
    private fnTextNow: string | null = null;
    private fn: JobFunction | null = null;
    private vchan: string | null = null;
    private lastErrorNow: string | null = null;

    private backoff: number;
    private parentLastSeen = 0;
    private attemptTimer: unknown = null;
    private retryTimer: unknown = null;
    private heartbeatTimer: unknown = null;
    private statusTimer: unknown = null;

    private queue: PendingJob[] = [];
    private busy = false;

    constructor(readonly relayUrl: string, options: SessionOptions) {
        this.sockets = options.sockets;
        this.clock = options.clock ?? realClock;
        this.config = { ...DEFAULT_CONFIG, ...options.config };
        this.backoff = this.config.backoffBase;
    }

    // -- read-only views ---------------------------------------------------------

    get state(): SessionState {
        return this.stateNow;
    }

    get nodeId(): string | null {
        return this.nodeIdNow;
    }

    get parentId(): string | null {
        return this.parentIdNow;
    }

    get fnText(): string | null {
        return this.fnTextNow;
    }

    get lastError(): string | null {
        return this.lastErrorNow;
    }

    get channels(): ChannelStates {
        if (this.stateNow === 'working') {
            return { boot: 'done', ctrl: 'open', data: 'open' };
        }
        if (this.socket !== null) {
            return { boot: 'open', ctrl: 'closed', data: 'closed' };
        }
        return { boot: 'closed', ctrl: 'closed', data: 'closed' };
    }

    // -- lifecycle ----------------------------------------------------------------

    start(): void {
        if (this.stateNow !== 'idle' && this.stateNow !== 'stopped') {
            throw new Error(`session already started (state ${this.stateNow})`);
        }
        this.beginAttempt();
    }

    stop(): void {
        this.teardown();
        this.stateNow = 'stopped';
        this.notify();
    }

    private beginAttempt(): void {
        if (this.stateNow === 'stopped' || this.stateNow === 'failed') {
            return;
        }
        if (this.socket !== null) {
            throw new Error('join attempt already active');
        }
        this.counters.attempts += 1;
        this.stateNow = 'connecting';
        this.notify();
        const epoch = this.epoch;
        let sock: SocketLike;
        try {
            sock = this.sockets(this.relayUrl);
        } catch (e) {
            this.scheduleRetry(`cannot open socket: ${String(e)}`);
            return;
        }
        this.socket = sock;
        sock.onopen = () => {
            if (epoch !== this.epoch) {
                return;
            }
            this.stateNow = 'registering';
            this.sendRecord(wire.register());
            this.notify();
        };
        sock.onmessage = text => {
            if (epoch !== this.epoch) {
                return;
            }
            for (const rec of wire.decodeFrame(text)) {
                this.onRecord(rec);
                if (epoch !== this.epoch) {
                    return; // a record mid-frame can end the session's life
                }
            }
        };
        sock.onclose = () => {
            if (epoch !== this.epoch) {
                return;
            }
            this.scheduleRetry('connection closed');
        };
    }

    /** Drop everything owned by the current attempt; stale callbacks go dead. */
    private teardown(): void {
        this.epoch += 1;
        for (const handle of [this.attemptTimer, this.retryTimer]) {
            if (handle !== null) {
                this.clock.clearTimeout(handle);
            }
        }
        this.attemptTimer = this.retryTimer = null;
        for (const handle of [this.heartbeatTimer, this.statusTimer]) {
            if (handle !== null) {
                this.clock.clearInterval(handle);
            }
        }
        this.heartbeatTimer = this.statusTimer = null;
        if (this.socket !== null) {
            const sock = this.socket;
            this.socket = null;
            sock.onopen = sock.onmessage = sock.onclose = null;
            try {
                sock.close();
            } catch {
                // already dead; that is fine
            }
        }
        this.queue = [];
        this.busy = false;
        this.vchan = null;
        this.fn = null;
    }

    private scheduleRetry(reason: string): void {
        this.teardown();
        this.lastErrorNow = reason;
        this.stateNow = 'backoff';
        const delay = this.backoff;
        this.backoff = Math.min(this.backoff * 2, this.config.backoffCap);
        this.retryTimer = this.clock.setTimeout(() => {
            this.retryTimer = null;
            this.beginAttempt();
        }, delay * 1000);
        this.notify();
    }

    private fail(reason: string): void {
        this.teardown();
        this.lastErrorNow = reason;
        this.stateNow = 'failed';
        this.notify();
    }

    // -- record handling ----------------------------------------------------------

    private onRecord(rec: wire.WireRecord): void {
        if (rec.ch === 'boot') {
            switch (rec.type) {
                case 'ID':
                    this.onIdentity(rec);
                    return;
                case 'REJECT':
                    this.scheduleRetry('rejected; will try again');
                    return;
                case 'JOIN':
                    this.onJoin(rec);
                    return;
                case 'ATTACH':
                    this.onAttachAck(rec);
                    return;
                default:
                    return;
            }
        }
        if (this.stateNow !== 'working') {
            return; // ctrl/data cannot mean anything before the boot phase ends
        }
        if (rec.ch === 'ctrl') {
            // Anything the parent says on ctrl proves it is alive.
            this.parentLastSeen = this.clock.now();
            return;
        }
        if (rec.ch === 'data' && rec.type === 'VALUE' && wire.validate(rec)) {
            this.counters.jobsReceived += 1;
            this.queue.push({ seq: rec.seq as number, payload: rec.payload as string });
            this.notify();
            this.pump();
        }
    }

    private onIdentity(rec: wire.WireRecord): void {
        if (this.stateNow !== 'registering' || !wire.isHex16(rec.id)) {
            return;
        }
        this.nodeIdNow = rec.id;
        this.stateNow = 'joining';
        this.sendRecord(wire.join(rec.id, {}));
        this.armAttemptTimer('no placement answer');
        this.notify();
    }

    private onJoin(rec: wire.WireRecord): void {
        if (rec.origin !== this.nodeIdNow) {
            // A placement request delegated to this node.  Pages never
            // coordinate, so decline by silence: the asker times out and
            // retries under a fresh identity, which re-rolls its route.
            if (this.stateNow === 'working') {
                this.parentLastSeen = this.clock.now();
                this.counters.placementsDeclined += 1;
                this.notify();
            }
            return;
        }
        if (this.stateNow !== 'joining') {
            return; // duplicate answer; the first one won
        }
        const signal = rec.signal;
        if (typeof signal !== 'object' || signal === null) {
            return;
        }
        const { addr, token, fn } = signal as Record<string, unknown>;
        if (typeof addr !== 'string' || !addr || typeof token !== 'string') {
            return;
        }
        if (typeof fn !== 'string') {
            this.fail('join answer names no function to run');
            return;
        }
        try {
            this.fn = makeFunction(parseFunctionSpec(fn), this.clock);
        } catch (e) {
            if (e instanceof UnsupportedFunctionError) {
                this.fail(e.message);
                return;
            }
            throw e;
        }
        this.fnTextNow = fn;
        this.parentIdNow = typeof rec.destination === 'string' ? rec.destination : null;
        this.clearAttemptTimer();
        this.vchan = `${addr}:${token}`;
        this.stateNow = 'attaching';
        this.sendRecord(wire.attach(this.vchan));
        this.armAttemptTimer('parent channels never opened');
        this.notify();
    }

    private onAttachAck(rec: wire.WireRecord): void {
        if (this.stateNow !== 'attaching' || rec.vchan !== this.vchan) {
            return;
        }
        this.clearAttemptTimer();
        this.stateNow = 'working';
        this.lastErrorNow = null;
        this.backoff = this.config.backoffBase;
        this.parentLastSeen = this.clock.now();
        this.heartbeatTimer = this.clock.setInterval(
            () => this.heartbeatTick(),
            this.config.heartbeatInterval * 1000,
        );
        this.statusTimer = this.clock.setInterval(
            () => this.sendRecord(wire.status(1)),
            this.config.statusInterval * 1000,
        );
        this.notify();
    }

    private heartbeatTick(): void {
        this.sendRecord(wire.heartbeat(Math.floor(this.clock.now())));
        if (this.clock.now() - this.parentLastSeen > this.config.heartbeatTimeout * 1000) {
            this.scheduleRetry('parent went silent');
        }
    }

    // -- the processor loop ---------------------------------------------------------

    private pump(): void {
        if (this.busy || this.stateNow !== 'working') {
            return;
        }
        const job = this.queue.shift();
        if (job === undefined) {
            return;
        }
        this.busy = true;
        const epoch = this.epoch;
        this.fn!.apply(job.payload, (code, outcome) => {
            if (epoch !== this.epoch) {
                return; // session has moved on; the parent re-lends this job
            }
            this.busy = false;
            if (code === null) {
                this.counters.jobsCompleted += 1;
                this.sendRecord(wire.result(job.seq, true, outcome ?? ''));
            } else {
                this.counters.jobsFailed += 1;
                this.sendRecord(wire.result(job.seq, false, code));
            }
            this.notify();
            this.pump();
        });
    }

    // -- small helpers ------------------------------------------------------------

    private armAttemptTimer(reason: string): void {
        this.clearAttemptTimer();
        this.attemptTimer = this.clock.setTimeout(() => {
            this.attemptTimer = null;
            this.scheduleRetry(reason);
        }, this.config.candidateTimeout * 1000);
    }

    private clearAttemptTimer(): void {
        if (this.attemptTimer !== null) {
            this.clock.clearTimeout(this.attemptTimer);
            this.attemptTimer = null;
        }
    }

    private sendRecord(rec: wire.WireRecord): void {
        if (this.socket !== null) {
            this.socket.send(wire.encode(rec));
        }
    }

    private notify(): void {
        if (this.onChange !== null) {
            try {
                this.onChange(this);
            } catch (e) {
                console.error('status listener failed:', e);
            }
        }
    }
}
