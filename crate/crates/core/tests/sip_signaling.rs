use voipsim::engine::{Engine, SimTime};
use voipsim::sip::{
    CallId, DialogState, MessageKind, Method, ProxyMode, SipConfig, SipLayer, SipMessage,
    SipOutput, SipTimer, StatusCode,
};

const PROXY: u32 = 10;
const HOP: SimTime = SimTime(3_000);

#[derive(Debug, Clone)]
enum Ev {
    Deliver { to: u32, from: u32, msg: SipMessage },
    Timer(SipTimer),
    Invite(CallId),
    HangUp(CallId),
    Cancel(CallId),
}

#[derive(Debug, Default)]
struct Log {
    sent: Vec<(SimTime, u32, u32, SipMessage)>,
    media_start: Vec<(SimTime, CallId)>,
    media_stop: Vec<(SimTime, CallId)>,
    rejected: Vec<(SimTime, CallId)>,
}

/// Every message takes `HOP` per hop; `lose` may swallow a message in transit.
struct Harness {
    sip: SipLayer,
    eng: Engine<Ev>,
    log: Log,
    lose: Box<dyn FnMut(&SipMessage) -> bool>,
}

impl Harness {
    fn new(mode: ProxyMode) -> Self {
        let cfg = SipConfig {
            proxy_node: PROXY,
            mode,
            ..SipConfig::default()
        };
        Self {
            sip: SipLayer::new(cfg),
            eng: Engine::new(),
            log: Log::default(),
            lose: Box::new(|_| false),
        }
    }

    fn apply(&mut self, outs: Vec<SipOutput>) {
        let now = self.eng.now();
        for o in outs {
            match o {
                SipOutput::Send { from, to, msg } => {
                    self.log.sent.push((now, from, to, msg.clone()));
                    if !(self.lose)(&msg) {
                        self.eng
                            .schedule(now + HOP, Ev::Deliver { to, from, msg })
                            .unwrap();
                    }
                }
                SipOutput::Timer { at, timer } => {
                    self.eng.schedule(at, Ev::Timer(timer)).unwrap();
                }
                SipOutput::MediaStart(c) => self.log.media_start.push((now, c)),
                SipOutput::MediaStop(c) => self.log.media_stop.push((now, c)),
            }
        }
    }

    fn register(&mut self, nodes: &[u32]) {
        for &n in nodes {
            let outs = self.sip.start_register(n, self.eng.now());
            self.apply(outs);
        }
        self.run_until(SimTime::from_millis(100));
    }

    fn run_until(&mut self, t: SimTime) {
        let mut eng = std::mem::take(&mut self.eng);
        eng.run_until(t, |eng, ev| {
            std::mem::swap(&mut self.eng, eng);
            let now = self.eng.now();
            let outs = match ev.payload {
                Ev::Deliver { to, from, msg } => self.sip.on_message(to, from, msg, now),
                Ev::Timer(t) => self.sip.on_timer(t, now),
                Ev::Invite(c) => self.sip.start_invite(c, now).unwrap(),
                Ev::HangUp(c) => self.sip.hang_up(c, now).unwrap(),
                Ev::Cancel(c) => match self.sip.start_cancel(c, now) {
                    Ok(o) => o,
                    Err(_) => {
                        self.log.rejected.push((now, c));
                        Vec::new()
                    }
                },
            };
            self.apply(outs);
            std::mem::swap(&mut self.eng, eng);
            Ok(())
        })
        .unwrap();
        self.eng = eng;
    }

    /// Responses with `code` originated by `node` (proxy relays not counted twice).
    fn responses_from(&self, node: u32, code: StatusCode) -> usize {
        self.log
            .sent
            .iter()
            .filter(|(_, from, _, m)| {
                *from == node && m.kind == MessageKind::Response && m.response_code == Some(code)
            })
            .count()
    }
}

fn at(ms: u64) -> SimTime {
    SimTime::from_millis(ms)
}

#[test]
fn zero_ring_delay_timeline_is_three_proxy_legs() {
    let mut h = Harness::new(ProxyMode::Proxy);
    h.register(&[4, 5]);
    let call = h.sip.add_call(4, 5, SimTime::ZERO);
    h.eng.schedule(at(1_000), Ev::Invite(call)).unwrap();
    h.run_until(at(2_000));

    let d = h.sip.dialog(call).unwrap();
    assert_eq!(d.state(), DialogState::Established);
    let tl = d.timeline();
    let one_way = SimTime(2 * HOP.0);
    // INVITE out, 200 back, then the ACK leg
    assert_eq!(tl.invite_sent_at, Some(at(1_000)));
    assert_eq!(tl.established_at, Some(at(1_000) + SimTime(3 * one_way.0)));
    assert_eq!(h.log.media_start, vec![(tl.established_at.unwrap(), call)]);
    assert_eq!(h.sip.stats().retransmissions, 0);
}

#[test]
fn bye_stops_media_and_orders_the_timeline() {
    let mut h = Harness::new(ProxyMode::Proxy);
    h.register(&[4, 5]);
    let call = h.sip.add_call(4, 5, SimTime::from_secs(2));
    h.eng.schedule(at(1_000), Ev::Invite(call)).unwrap();
    h.eng.schedule(at(10_000), Ev::HangUp(call)).unwrap();
    h.run_until(at(11_000));

    let d = h.sip.dialog(call).unwrap();
    assert_eq!(d.state(), DialogState::Terminated);
    let tl = d.timeline();
    let (inv, est, bye, end) = (
        tl.invite_sent_at.unwrap(),
        tl.established_at.unwrap(),
        tl.bye_at.unwrap(),
        tl.ended_at.unwrap(),
    );
    assert!(inv <= est && est <= bye && bye <= end);
    assert!(est >= at(3_000), "answer waits for the ring delay");
    assert_eq!(h.log.media_stop, vec![(at(10_000), call)]);
    assert_eq!(end, at(10_000) + SimTime(4 * HOP.0));
}

#[test]
fn unknown_callee_gets_404_and_the_call_fails() {
    let mut h = Harness::new(ProxyMode::Proxy);
    h.register(&[4]);
    let call = h.sip.add_call(4, 7, SimTime::ZERO);
    h.eng.schedule(at(1_000), Ev::Invite(call)).unwrap();
    h.run_until(at(6_000));

    assert_eq!(h.responses_from(PROXY, StatusCode::NotFound), 1);
    assert_eq!(h.sip.dialog(call).unwrap().state(), DialogState::Failed);
    assert_eq!(h.sip.stats().invite_failures, 1);
    assert_eq!(h.sip.stats().retransmissions, 0);
    assert!(h.log.media_start.is_empty());
}

#[test]
fn redirect_mode_reinvites_the_contact_directly() {
    let mut h = Harness::new(ProxyMode::Redirect);
    h.register(&[4, 5]);
    let call = h.sip.add_call(4, 5, SimTime::ZERO);
    h.eng.schedule(at(1_000), Ev::Invite(call)).unwrap();
    h.run_until(at(2_000));

    assert_eq!(h.responses_from(PROXY, StatusCode::MovedTemporarily), 1);
    let invites: Vec<u32> = h
        .log
        .sent
        .iter()
        .filter(|(_, from, _, m)| *from == 4 && m.kind == MessageKind::Invite)
        .map(|(_, _, to, _)| *to)
        .collect();
    assert_eq!(invites, vec![PROXY, 5]);
    assert_eq!(
        h.sip.dialog(call).unwrap().state(),
        DialogState::Established
    );
    // nothing after the redirect touches the proxy
    let via_proxy_after = h
        .log
        .sent
        .iter()
        .filter(|(t, from, to, _)| {
            *t > at(1_000) + SimTime(2 * HOP.0) && (*from == PROXY || *to == PROXY)
        })
        .count();
    assert_eq!(via_proxy_after, 0);
}

#[test]
fn cancel_while_ringing_yields_487_and_no_media() {
    let mut h = Harness::new(ProxyMode::Proxy);
    h.register(&[4, 5]);
    let call = h.sip.add_call(4, 5, SimTime::from_secs(2));
    h.eng.schedule(at(1_000), Ev::Invite(call)).unwrap();
    h.eng.schedule(at(1_500), Ev::HangUp(call)).unwrap();
    h.run_until(at(6_000));

    let d = h.sip.dialog(call).unwrap();
    assert_eq!(d.state(), DialogState::Cancelled);
    assert_eq!(d.timeline().ended_at, Some(at(1_500)));
    assert_eq!(d.timeline().established_at, None);
    assert_eq!(h.responses_from(5, StatusCode::RequestTerminated), 1);
    assert!(h.log.media_start.is_empty());
    assert!(h
        .log
        .sent
        .iter()
        .all(|(_, _, _, m)| m.method != Method::Bye));
}

#[test]
fn lost_invite_is_retransmitted_after_the_interval() {
    let mut h = Harness::new(ProxyMode::Proxy);
    h.register(&[4, 5]);
    let mut dropped = false;
    h.lose = Box::new(move |m| {
        let hit = !dropped && m.kind == MessageKind::Invite;
        dropped |= hit;
        hit
    });
    let call = h.sip.add_call(4, 5, SimTime::ZERO);
    h.eng.schedule(at(1_000), Ev::Invite(call)).unwrap();
    h.run_until(at(3_000));

    let tl = h.sip.dialog(call).unwrap().timeline();
    assert_eq!(h.sip.stats().retransmissions, 1);
    assert_eq!(tl.established_at, Some(at(1_500) + SimTime(6 * HOP.0)));
}

/// ACK reaching the callee and the caller's CANCEL land on the same tick.
/// The event scheduled first (lower seq) runs first.
fn tie(cancel_first: bool) -> Harness {
    let mut h = Harness::new(ProxyMode::Proxy);
    h.register(&[4, 5]);
    let call = h.sip.add_call(4, 5, SimTime::ZERO);
    h.eng.schedule(at(1_000), Ev::Invite(call)).unwrap();
    let ack_arrives = at(1_000) + SimTime(6 * HOP.0);
    if cancel_first {
        // scheduled before the ACK delivery exists, so it has the lower seq
        h.eng.schedule(ack_arrives, Ev::Cancel(call)).unwrap();
        h.run_until(at(2_000));
    } else {
        h.run_until(ack_arrives - SimTime(1));
        h.eng.schedule(ack_arrives, Ev::Cancel(call)).unwrap();
        h.run_until(at(2_000));
    }
    h
}

#[test]
fn answer_wins_a_same_tick_race_against_cancel_when_scheduled_first() {
    let h = tie(false);
    let call = CallId(0);
    assert_eq!(
        h.sip.dialog(call).unwrap().state(),
        DialogState::Established
    );
    assert_eq!(
        h.log.rejected.len(),
        1,
        "CANCEL after Established is refused"
    );
    assert_eq!(h.log.media_start.len(), 1);
    assert_eq!(h.responses_from(5, StatusCode::RequestTerminated), 0);
}

#[test]
fn cancel_wins_the_same_tick_race_when_scheduled_first() {
    let h = tie(true);
    let call = CallId(0);
    assert_eq!(h.sip.dialog(call).unwrap().state(), DialogState::Cancelled);
    assert!(h.log.rejected.is_empty());
    assert!(h.log.media_start.is_empty());
}

#[test]
fn bye_before_established_is_refused() {
    let mut h = Harness::new(ProxyMode::Proxy);
    h.register(&[4, 5]);
    let call = h.sip.add_call(4, 5, SimTime::from_secs(2));
    assert!(h.sip.start_bye(call, SimTime::ZERO).is_err());
    let outs = h.sip.start_invite(call, at(200)).unwrap();
    h.apply(outs);
    assert!(h.sip.start_bye(call, at(300)).is_err());
    assert_eq!(h.sip.dialog(call).unwrap().state(), DialogState::Inviting);
}
