/** Page entry point: one tab volunteers one core. */

import { BrowserSession } from './session.js';
import { StatusElements, bindStatus, browserSocket, relayUrlFrom } from './page.js';

function slot(id: string): HTMLElement {
    const el = document.getElementById(id);
    if (el === null) {
        throw new Error(`status page is missing #${id}`);
    }
    return el;
}

const els: StatusElements = {
    state: slot('state'),
    node: slot('node'),
    parent: slot('parent'),
    fn: slot('fn'),
    completed: slot('completed'),
    failed: slot('failed'),
    note: slot('note'),
};

const session = new BrowserSession(relayUrlFrom(window.location), { sockets: browserSocket });
bindStatus(session, els);
session.start();
window.addEventListener('beforeunload', () => session.stop());
