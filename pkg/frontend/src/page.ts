/**
 * The thin layer between a session and the page: a status readout and the
 * browser's own WebSocket.  Everything here is structural (settable
 * `textContent` slots), so tests can drive it with plain objects and no DOM.
 */

import { BrowserSession, SessionState, SocketLike } from './session.js';

export interface TextSlot {
    textContent: string | null;
}

export interface StatusElements {
    state: TextSlot;
    node: TextSlot;
    parent: TextSlot;
    fn: TextSlot;
    completed: TextSlot;
    failed: TextSlot;
    note: TextSlot;
}

const STATE_LABELS: Record<SessionState, string> = {
    idle: 'idle',
    connecting: 'contacting the relay…',
    registering: 'drawing an identity…',
    joining: 'asking for a place in the tree…',
    attaching: 'opening channels to the parent…',
    working: 'working',
    backoff: 'disconnected; retrying shortly',
    stopped: 'stopped',
    failed: 'cannot take part',
};

export function render(session: BrowserSession, els: StatusElements): void {
    els.state.textContent = STATE_LABELS[session.state];
    els.node.textContent = session.nodeId ?? '—';
    els.parent.textContent = session.parentId ?? '—';
    els.fn.textContent = session.fnText ?? '—';
    els.completed.textContent = String(session.counters.jobsCompleted);
    els.failed.textContent = String(session.counters.jobsFailed);
    els.note.textContent = session.lastError ?? '';
}

/** Paint now and after every session change. */
export function bindStatus(session: BrowserSession, els: StatusElements): void {
    session.onChange = s => render(s, els);
    render(session, els);
}

/** Wrap the browser's WebSocket in the session's socket shape. */
export function browserSocket(url: string): SocketLike {
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
    return shim;
}

/** The relay that served this page is the relay to volunteer with. */
export function relayUrlFrom(location: { protocol: string; host: string }): string {
    const scheme = location.protocol === 'https:' ? 'wss' : 'ws';
    return `${scheme}://${location.host}/`;
}
