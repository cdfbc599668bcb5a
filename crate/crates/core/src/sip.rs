//! SIP signaling: dialog state machine, registrar, proxy/redirect server and
//! the user-agent logic that drives calls over an unreliable transport.
//!
//! Messages are structured records, not RFC 3261 text. [`SipLayer`] is
//! written sans-IO: every entry point returns [`SipOutput`]s (messages to
//! send, timers to arm, media to start or stop) that the network glue
//! executes. Requests are retransmitted at a fixed interval until answered
//! or until the attempt budget is spent.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::engine::SimTime;
use crate::stack::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CallId(pub u32);

impl fmt::Display for CallId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "call-{}", self.0)
    }
}

/// A SIP user; its home node is the node id it was provisioned on.
pub type UserId = NodeId;

/// The five request methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Register,
    Invite,
    Ack,
    Bye,
    Cancel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatusCode {
    Trying = 100,
    Ringing = 180,
    Ok = 200,
    MovedTemporarily = 302,
    NotFound = 404,
    RequestTerminated = 487,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Register,
    Invite,
    Ack,
    Bye,
    Cancel,
    Response,
}

impl From<Method> for MessageKind {
    fn from(m: Method) -> Self {
        match m {
            Method::Register => MessageKind::Register,
            Method::Invite => MessageKind::Invite,
            Method::Ack => MessageKind::Ack,
            Method::Bye => MessageKind::Bye,
            Method::Cancel => MessageKind::Cancel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SipMessage {
    pub kind: MessageKind,
    /// Present exactly when `kind` is `Response`.
    pub response_code: Option<StatusCode>,
    /// Method of the request (for responses: the request being answered).
    pub method: Method,
    /// `None` only for REGISTER and its response.
    pub call_id: Option<CallId>,
    pub from_ua: UserId,
    pub to_ua: UserId,
    pub via_proxy: bool,
    pub body_bytes: u32,
    /// Contact node: the registering node, or the redirect target of a 302.
    pub contact: Option<NodeId>,
}

impl SipMessage {
    pub fn request(
        method: Method,
        call_id: Option<CallId>,
        from: UserId,
        to: UserId,
        body_bytes: u32,
    ) -> Self {
        Self {
            kind: method.into(),
            response_code: None,
            method,
            call_id,
            from_ua: from,
            to_ua: to,
            via_proxy: false,
            body_bytes,
            contact: None,
        }
    }

    pub fn response_to(req: &SipMessage, code: StatusCode, body_bytes: u32) -> Self {
        Self {
            kind: MessageKind::Response,
            response_code: Some(code),
            method: req.method,
            call_id: req.call_id,
            from_ua: req.from_ua,
            to_ua: req.to_ua,
            via_proxy: false,
            body_bytes,
            contact: None,
        }
    }

    pub fn is_request(&self) -> bool {
        self.kind != MessageKind::Response
    }

    /// Structural well-formedness: responses carry a code, requests do not,
    /// and a request's kind matches its method.
    pub fn is_well_formed(&self) -> bool {
        match self.kind {
            MessageKind::Response => self.response_code.is_some(),
            k => self.response_code.is_none() && k == MessageKind::from(self.method),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DialogState {
    Idle,
    Registering,
    Inviting,
    Ringing,
    Established,
    Terminating,
    Terminated,
    Cancelled,
    /// INVITE rejected (callee unknown) or never answered.
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DialogInput {
    RegisterSent,
    Registered,
    InviteSent,
    ProvisionalReceived,
    Answered,
    ByeSent,
    ByeConfirmed,
    CancelSent,
    Rejected,
}

impl DialogInput {
    pub const ALL: [DialogInput; 9] = [
        DialogInput::RegisterSent,
        DialogInput::Registered,
        DialogInput::InviteSent,
        DialogInput::ProvisionalReceived,
        DialogInput::Answered,
        DialogInput::ByeSent,
        DialogInput::ByeConfirmed,
        DialogInput::CancelSent,
        DialogInput::Rejected,
    ];
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SipError {
    #[error("{call}: {input:?} is illegal in state {state:?}")]
    IllegalTransition {
        call: CallId,
        state: DialogState,
        input: DialogInput,
    },
    #[error("unknown call {0}")]
    UnknownCall(CallId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Timeline {
    pub invite_sent_at: Option<SimTime>,
    pub established_at: Option<SimTime>,
    pub bye_at: Option<SimTime>,
    pub ended_at: Option<SimTime>,
}

/// Per-call signaling state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SipDialog {
    pub call_id: CallId,
    pub initiator: NodeId,
    pub receiver: NodeId,
    state: DialogState,
    timeline: Timeline,
}

impl SipDialog {
    pub fn new(call_id: CallId, initiator: NodeId, receiver: NodeId) -> Self {
        Self {
            call_id,
            initiator,
            receiver,
            state: DialogState::Idle,
            timeline: Timeline::default(),
        }
    }

    pub fn state(&self) -> DialogState {
        self.state
    }

    pub fn timeline(&self) -> Timeline {
        self.timeline
    }

    /// Target state of a legal transition, `None` when illegal.
    fn next_state(state: DialogState, input: DialogInput) -> Option<DialogState> {
        use DialogInput as I;
        use DialogState as S;
        Some(match (state, input) {
            (S::Idle, I::RegisterSent) => S::Registering,
            (S::Registering, I::Registered) => S::Idle,
            (S::Idle, I::InviteSent) => S::Inviting,
            (S::Inviting, I::ProvisionalReceived) => S::Ringing,
            // 180 is provisional and may be lost; a final answer suffices
            (S::Inviting | S::Ringing, I::Answered) => S::Established,
            (S::Inviting | S::Ringing, I::CancelSent) => S::Cancelled,
            (S::Inviting | S::Ringing, I::Rejected) => S::Failed,
            (S::Established, I::ByeSent) => S::Terminating,
            (S::Terminating, I::ByeConfirmed) => S::Terminated,
            _ => return None,
        })
    }

    /// Applies `input` at `now`. Illegal inputs leave the dialog untouched.
    pub fn apply(&mut self, input: DialogInput, now: SimTime) -> Result<DialogState, SipError> {
        let next = Self::next_state(self.state, input).ok_or(SipError::IllegalTransition {
            call: self.call_id,
            state: self.state,
            input,
        })?;
        let t = &mut self.timeline;
        match input {
            DialogInput::InviteSent => t.invite_sent_at = Some(now),
            DialogInput::Answered => t.established_at = Some(now),
            DialogInput::ByeSent => t.bye_at = Some(now),
            DialogInput::ByeConfirmed | DialogInput::CancelSent | DialogInput::Rejected => {
                t.ended_at = Some(now)
            }
            _ => {}
        }
        self.state = next;
        Ok(next)
    }

    pub fn is_established(&self) -> bool {
        self.state == DialogState::Established
    }
}

/// Location binding of one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistrarBinding {
    pub user: UserId,
    pub node: NodeId,
    pub registered_at: SimTime,
}

/// At most one binding per user; re-registration replaces it.
#[derive(Debug, Clone, Default)]
pub struct Registrar {
    bindings: HashMap<UserId, RegistrarBinding>,
}

impl Registrar {
    pub fn register(&mut self, user: UserId, node: NodeId, now: SimTime) -> RegistrarBinding {
        let b = RegistrarBinding {
            user,
            node,
            registered_at: now,
        };
        self.bindings.insert(user, b);
        b
    }

    pub fn lookup(&self, user: UserId) -> Option<RegistrarBinding> {
        self.bindings.get(&user).copied()
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProxyMode {
    /// Relay requests and responses between user agents.
    #[default]
    Proxy,
    /// Answer INVITEs with 302 and the callee's contact; the caller re-INVITEs directly.
    Redirect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProxyAction {
    Forward { to: NodeId, msg: SipMessage },
    Reply { to: NodeId, msg: SipMessage },
    Drop,
}

/// Stateless proxy/registrar decision for a message arriving from `from_node`.
pub fn proxy_route(
    registrar: &mut Registrar,
    mode: ProxyMode,
    msg: &SipMessage,
    from_node: NodeId,
    response_bytes: u32,
    now: SimTime,
) -> ProxyAction {
    if msg.kind == MessageKind::Register {
        let contact = msg.contact.unwrap_or(from_node);
        registrar.register(msg.from_ua, contact, now);
        let mut ok = SipMessage::response_to(msg, StatusCode::Ok, response_bytes);
        ok.contact = Some(contact);
        return ProxyAction::Reply {
            to: contact,
            msg: ok,
        };
    }
    // responses travel back to the request originator, requests toward the callee
    let target_user = if msg.is_request() {
        msg.to_ua
    } else {
        msg.from_ua
    };
    let Some(binding) = registrar.lookup(target_user) else {
        return if msg.kind == MessageKind::Invite {
            ProxyAction::Reply {
                to: from_node,
                msg: SipMessage::response_to(msg, StatusCode::NotFound, response_bytes),
            }
        } else {
            ProxyAction::Drop
        };
    };
    if mode == ProxyMode::Redirect && msg.kind == MessageKind::Invite {
        let mut moved = SipMessage::response_to(msg, StatusCode::MovedTemporarily, response_bytes);
        moved.contact = Some(binding.node);
        return ProxyAction::Reply {
            to: from_node,
            msg: moved,
        };
    }
    let mut fwd = msg.clone();
    fwd.via_proxy = true;
    ProxyAction::Forward {
        to: binding.node,
        msg: fwd,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SipConfig {
    pub proxy_node: NodeId,
    pub mode: ProxyMode,
    pub retransmit_interval: SimTime,
    pub max_attempts: u32,
    pub request_bytes: u32,
    pub response_bytes: u32,
}

impl Default for SipConfig {
    fn default() -> Self {
        Self {
            proxy_node: 10,
            mode: ProxyMode::Proxy,
            retransmit_interval: SimTime::from_millis(500),
            max_attempts: 7,
            request_bytes: 500,
            response_bytes: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum TxnKind {
    Register,
    Invite,
    /// Callee's 200 to INVITE, repeated until the ACK arrives.
    InviteOk,
    Bye,
    Cancel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct TxnKey {
    node: NodeId,
    call: Option<CallId>,
    kind: TxnKind,
}

#[derive(Debug, Clone)]
struct Txn {
    to: NodeId,
    msg: SipMessage,
    attempts: u32,
    generation: u64,
}

/// Opaque timer token handed to the scheduler and returned via [`SipLayer::on_timer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SipTimer {
    kind: TimerKind,
    generation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimerKind {
    Retransmit(TxnKey),
    Answer(CallId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SipOutput {
    Send {
        from: NodeId,
        to: NodeId,
        msg: SipMessage,
    },
    Timer {
        at: SimTime,
        timer: SipTimer,
    },
    MediaStart(CallId),
    MediaStop(CallId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SipStats {
    pub messages_sent: u64,
    pub retransmissions: u64,
    pub registrations: u64,
    pub registration_failures: u64,
    pub invite_failures: u64,
    pub proxy_drops: u64,
}

#[derive(Debug, Clone)]
struct CallState {
    dialog: SipDialog,
    ring_delay: SimTime,
    /// Direct contact learned from a redirect.
    contact: Option<NodeId>,
    /// Where the callee sends its responses.
    callee_reply_to: Option<NodeId>,
    answered: bool,
    answer_generation: Option<u64>,
}

/// All user agents plus the proxy/registrar of one simulation run.
#[derive(Debug, Clone)]
pub struct SipLayer {
    cfg: SipConfig,
    registrar: Registrar,
    calls: Vec<CallState>,
    txns: HashMap<TxnKey, Txn>,
    next_generation: u64,
    stats: SipStats,
}

impl SipLayer {
    pub fn new(cfg: SipConfig) -> Self {
        Self {
            cfg,
            registrar: Registrar::default(),
            calls: Vec::new(),
            txns: HashMap::new(),
            next_generation: 0,
            stats: SipStats::default(),
        }
    }

    pub fn config(&self) -> &SipConfig {
        &self.cfg
    }

    pub fn add_call(&mut self, caller: NodeId, callee: NodeId, ring_delay: SimTime) -> CallId {
        let id = CallId(self.calls.len() as u32);
        self.calls.push(CallState {
            dialog: SipDialog::new(id, caller, callee),
            ring_delay,
            contact: None,
            callee_reply_to: None,
            answered: false,
            answer_generation: None,
        });
        id
    }

    pub fn dialog(&self, call: CallId) -> Option<&SipDialog> {
        self.calls.get(call.0 as usize).map(|c| &c.dialog)
    }

    pub fn dialogs(&self) -> impl Iterator<Item = &SipDialog> {
        self.calls.iter().map(|c| &c.dialog)
    }

    pub fn registrar(&self) -> &Registrar {
        &self.registrar
    }

    pub fn stats(&self) -> SipStats {
        self.stats
    }

    fn call_mut(&mut self, call: CallId) -> Result<&mut CallState, SipError> {
        self.calls
            .get_mut(call.0 as usize)
            .ok_or(SipError::UnknownCall(call))
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: SipMessage, out: &mut Vec<SipOutput>) {
        self.stats.messages_sent += 1;
        out.push(SipOutput::Send { from, to, msg });
    }

    fn start_txn(
        &mut self,
        key: TxnKey,
        to: NodeId,
        msg: SipMessage,
        now: SimTime,
        out: &mut Vec<SipOutput>,
    ) {
        let generation = self.next_generation;
        self.next_generation += 1;
        self.send(key.node, to, msg.clone(), out);
        self.txns.insert(
            key,
            Txn {
                to,
                msg,
                attempts: 1,
                generation,
            },
        );
        out.push(SipOutput::Timer {
            at: now + self.cfg.retransmit_interval,
            timer: SipTimer {
                kind: TimerKind::Retransmit(key),
                generation,
            },
        });
    }

    fn stop_txn(&mut self, node: NodeId, call: Option<CallId>, kind: TxnKind) -> bool {
        self.txns.remove(&TxnKey { node, call, kind }).is_some()
    }

    /// Sends REGISTER from `ua` to the registrar.
    pub fn start_register(&mut self, ua: NodeId, now: SimTime) -> Vec<SipOutput> {
        let mut out = Vec::new();
        let mut msg = SipMessage::request(Method::Register, None, ua, ua, self.cfg.request_bytes);
        msg.contact = Some(ua);
        let key = TxnKey {
            node: ua,
            call: None,
            kind: TxnKind::Register,
        };
        self.start_txn(key, self.cfg.proxy_node, msg, now, &mut out);
        out
    }

    fn request_target(&self, call: &CallState) -> NodeId {
        call.contact.unwrap_or(self.cfg.proxy_node)
    }

    pub fn start_invite(&mut self, call: CallId, now: SimTime) -> Result<Vec<SipOutput>, SipError> {
        let req_bytes = self.cfg.request_bytes;
        let c = self.call_mut(call)?;
        c.dialog.apply(DialogInput::InviteSent, now)?;
        let (caller, callee) = (c.dialog.initiator, c.dialog.receiver);
        let to = self.request_target(&self.calls[call.0 as usize]);
        let msg = SipMessage::request(Method::Invite, Some(call), caller, callee, req_bytes);
        let mut out = Vec::new();
        let key = TxnKey {
            node: caller,
            call: Some(call),
            kind: TxnKind::Invite,
        };
        self.start_txn(key, to, msg, now, &mut out);
        Ok(out)
    }

    pub fn start_bye(&mut self, call: CallId, now: SimTime) -> Result<Vec<SipOutput>, SipError> {
        let req_bytes = self.cfg.request_bytes;
        let c = self.call_mut(call)?;
        c.dialog.apply(DialogInput::ByeSent, now)?;
        let (caller, callee) = (c.dialog.initiator, c.dialog.receiver);
        let to = self.request_target(&self.calls[call.0 as usize]);
        let msg = SipMessage::request(Method::Bye, Some(call), caller, callee, req_bytes);
        let mut out = vec![SipOutput::MediaStop(call)];
        let key = TxnKey {
            node: caller,
            call: Some(call),
            kind: TxnKind::Bye,
        };
        self.start_txn(key, to, msg, now, &mut out);
        Ok(out)
    }

    pub fn start_cancel(&mut self, call: CallId, now: SimTime) -> Result<Vec<SipOutput>, SipError> {
        let req_bytes = self.cfg.request_bytes;
        let c = self.call_mut(call)?;
        c.dialog.apply(DialogInput::CancelSent, now)?;
        let (caller, callee) = (c.dialog.initiator, c.dialog.receiver);
        let to = self.request_target(&self.calls[call.0 as usize]);
        self.stop_txn(caller, Some(call), TxnKind::Invite);
        let msg = SipMessage::request(Method::Cancel, Some(call), caller, callee, req_bytes);
        let mut out = Vec::new();
        let key = TxnKey {
            node: caller,
            call: Some(call),
            kind: TxnKind::Cancel,
        };
        self.start_txn(key, to, msg, now, &mut out);
        Ok(out)
    }

    /// Ends the call the way the scenario asks at its hang-up time: BYE when
    /// established, CANCEL while still being set up, nothing otherwise.
    pub fn hang_up(&mut self, call: CallId, now: SimTime) -> Result<Vec<SipOutput>, SipError> {
        match self
            .dialog(call)
            .ok_or(SipError::UnknownCall(call))?
            .state()
        {
            DialogState::Established => self.start_bye(call, now),
            DialogState::Inviting | DialogState::Ringing => self.start_cancel(call, now),
            _ => Ok(Vec::new()),
        }
    }

    pub fn on_timer(&mut self, timer: SipTimer, now: SimTime) -> Vec<SipOutput> {
        let mut out = Vec::new();
        match timer.kind {
            TimerKind::Retransmit(key) => {
                let Some(txn) = self.txns.get_mut(&key) else {
                    return out;
                };
                if txn.generation != timer.generation {
                    return out;
                }
                if txn.attempts >= self.cfg.max_attempts {
                    self.txns.remove(&key);
                    self.on_txn_exhausted(key, now);
                    return out;
                }
                txn.attempts += 1;
                let (to, msg) = (txn.to, txn.msg.clone());
                self.stats.retransmissions += 1;
                self.send(key.node, to, msg, &mut out);
                out.push(SipOutput::Timer {
                    at: now + self.cfg.retransmit_interval,
                    timer,
                });
            }
            TimerKind::Answer(call) => {
                let resp_bytes = self.cfg.response_bytes;
                let c = &mut self.calls[call.0 as usize];
                if c.answer_generation != Some(timer.generation) || c.answered {
                    return out;
                }
                if !matches!(
                    c.dialog.state(),
                    DialogState::Inviting | DialogState::Ringing
                ) {
                    return out;
                }
                c.answered = true;
                let (caller, callee) = (c.dialog.initiator, c.dialog.receiver);
                let reply_to = c.callee_reply_to.unwrap_or(self.cfg.proxy_node);
                let invite = SipMessage::request(Method::Invite, Some(call), caller, callee, 0);
                let ok = SipMessage::response_to(&invite, StatusCode::Ok, resp_bytes);
                let key = TxnKey {
                    node: callee,
                    call: Some(call),
                    kind: TxnKind::InviteOk,
                };
                self.start_txn(key, reply_to, ok, now, &mut out);
            }
        }
        out
    }

    fn on_txn_exhausted(&mut self, key: TxnKey, now: SimTime) {
        match key.kind {
            TxnKind::Register => self.stats.registration_failures += 1,
            TxnKind::Invite => {
                self.stats.invite_failures += 1;
                if let Some(call) = key.call {
                    let _ = self.calls[call.0 as usize]
                        .dialog
                        .apply(DialogInput::Rejected, now);
                }
            }
            TxnKind::InviteOk | TxnKind::Bye | TxnKind::Cancel => {}
        }
    }

    /// Handles a message that arrived at node `at` from node `from`.
    pub fn on_message(
        &mut self,
        at: NodeId,
        from: NodeId,
        msg: SipMessage,
        now: SimTime,
    ) -> Vec<SipOutput> {
        let mut out = Vec::new();
        if at == self.cfg.proxy_node && !Self::addressed_to(&msg, at) {
            let action = proxy_route(
                &mut self.registrar,
                self.cfg.mode,
                &msg,
                from,
                self.cfg.response_bytes,
                now,
            );
            match action {
                ProxyAction::Forward { to, msg } | ProxyAction::Reply { to, msg } => {
                    self.send(at, to, msg, &mut out)
                }
                ProxyAction::Drop => self.stats.proxy_drops += 1,
            }
            return out;
        }
        match msg.kind {
            MessageKind::Response => self.ua_response(at, msg, now, &mut out),
            _ => self.ua_request(at, from, msg, now, &mut out),
        }
        out
    }

    /// True when a message is meant for the UA on `node` rather than for the proxy there.
    fn addressed_to(msg: &SipMessage, node: NodeId) -> bool {
        match msg.kind {
            MessageKind::Register => false,
            MessageKind::Response => msg.from_ua == node,
            _ => msg.to_ua == node,
        }
    }

    fn ua_response(&mut self, at: NodeId, msg: SipMessage, now: SimTime, out: &mut Vec<SipOutput>) {
        let code = msg.response_code.expect("responses carry a code");
        if msg.method == Method::Register {
            if code == StatusCode::Ok && self.stop_txn(at, None, TxnKind::Register) {
                self.stats.registrations += 1;
            }
            return;
        }
        let Some(call) = msg.call_id else { return };
        let Some(c) = self.calls.get(call.0 as usize) else {
            return;
        };
        if c.dialog.initiator != at {
            return;
        }
        match (msg.method, code) {
            (Method::Invite, StatusCode::Ringing | StatusCode::Trying) => {
                self.stop_txn(at, Some(call), TxnKind::Invite);
                let c = &mut self.calls[call.0 as usize];
                if c.dialog.state() == DialogState::Inviting && code == StatusCode::Ringing {
                    let _ = c.dialog.apply(DialogInput::ProvisionalReceived, now);
                }
            }
            (Method::Invite, StatusCode::Ok) => {
                self.stop_txn(at, Some(call), TxnKind::Invite);
                let c = &self.calls[call.0 as usize];
                if matches!(
                    c.dialog.state(),
                    DialogState::Inviting | DialogState::Ringing | DialogState::Established
                ) {
                    let to = self.request_target(c);
                    let ack = SipMessage::request(
                        Method::Ack,
                        Some(call),
                        at,
                        c.dialog.receiver,
                        self.cfg.request_bytes,
                    );
                    self.send(at, to, ack, out);
                }
            }
            (Method::Invite, StatusCode::MovedTemporarily) => {
                let Some(contact) = msg.contact else { return };
                let was_pending = self.stop_txn(at, Some(call), TxnKind::Invite);
                let c = &mut self.calls[call.0 as usize];
                if was_pending && c.contact.is_none() && c.dialog.state() == DialogState::Inviting {
                    c.contact = Some(contact);
                    let invite = SipMessage::request(
                        Method::Invite,
                        Some(call),
                        at,
                        c.dialog.receiver,
                        self.cfg.request_bytes,
                    );
                    let key = TxnKey {
                        node: at,
                        call: Some(call),
                        kind: TxnKind::Invite,
                    };
                    self.start_txn(key, contact, invite, now, out);
                }
            }
            (Method::Invite, StatusCode::NotFound) => {
                if self.stop_txn(at, Some(call), TxnKind::Invite) {
                    self.stats.invite_failures += 1;
                    let _ = self.calls[call.0 as usize]
                        .dialog
                        .apply(DialogInput::Rejected, now);
                }
            }
            (Method::Invite, StatusCode::RequestTerminated) => {
                self.stop_txn(at, Some(call), TxnKind::Invite);
            }
            (Method::Bye, StatusCode::Ok) => {
                if self.stop_txn(at, Some(call), TxnKind::Bye) {
                    let _ = self.calls[call.0 as usize]
                        .dialog
                        .apply(DialogInput::ByeConfirmed, now);
                }
            }
            (Method::Cancel, _) => {
                self.stop_txn(at, Some(call), TxnKind::Cancel);
            }
            _ => {}
        }
    }

    fn ua_request(
        &mut self,
        at: NodeId,
        from: NodeId,
        msg: SipMessage,
        now: SimTime,
        out: &mut Vec<SipOutput>,
    ) {
        let Some(call) = msg.call_id else { return };
        let resp_bytes = self.cfg.response_bytes;
        let Some(c) = self.calls.get_mut(call.0 as usize) else {
            return;
        };
        if c.dialog.receiver != at {
            return;
        }
        match msg.method {
            Method::Invite => {
                c.callee_reply_to = Some(from);
                match c.dialog.state() {
                    DialogState::Inviting | DialogState::Ringing => {
                        if c.answered {
                            // duplicate INVITE after answering: the pending 200 covers it
                            return;
                        }
                        let ringing =
                            SipMessage::response_to(&msg, StatusCode::Ringing, resp_bytes);
                        if c.answer_generation.is_none() {
                            let generation = self.next_generation;
                            self.next_generation += 1;
                            c.answer_generation = Some(generation);
                            out.push(SipOutput::Timer {
                                at: now + c.ring_delay,
                                timer: SipTimer {
                                    kind: TimerKind::Answer(call),
                                    generation,
                                },
                            });
                        }
                        self.send(at, from, ringing, out);
                    }
                    DialogState::Cancelled => {
                        let terminated = SipMessage::response_to(
                            &msg,
                            StatusCode::RequestTerminated,
                            resp_bytes,
                        );
                        self.send(at, from, terminated, out);
                    }
                    _ => {}
                }
            }
            Method::Ack => {
                self.stop_txn(at, Some(call), TxnKind::InviteOk);
                let c = &mut self.calls[call.0 as usize];
                if matches!(
                    c.dialog.state(),
                    DialogState::Inviting | DialogState::Ringing
                ) && c.dialog.apply(DialogInput::Answered, now).is_ok()
                {
                    out.push(SipOutput::MediaStart(call));
                }
            }
            Method::Bye => {
                self.stop_txn(at, Some(call), TxnKind::InviteOk);
                let ok = SipMessage::response_to(&msg, StatusCode::Ok, resp_bytes);
                self.send(at, from, ok, out);
            }
            Method::Cancel => {
                self.stop_txn(at, Some(call), TxnKind::InviteOk);
                let ok = SipMessage::response_to(&msg, StatusCode::Ok, resp_bytes);
                self.send(at, from, ok, out);
                let invite =
                    SipMessage::request(Method::Invite, Some(call), msg.from_ua, msg.to_ua, 0);
                let terminated =
                    SipMessage::response_to(&invite, StatusCode::RequestTerminated, resp_bytes);
                self.send(at, from, terminated, out);
            }
            Method::Register => {}
        }
    }
}
