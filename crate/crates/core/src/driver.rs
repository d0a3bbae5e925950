//! Event loops that run actors (nodes, the controller, attackers) over a
//! transport: a single-threaded discrete-event loop for the simulator and
//! a per-thread wall-clock loop for TCP.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use crate::fabric::{Delivery, Micros, Received, SimFabric, Transport};
use crate::ids::NodeId;

/// Something that reacts to frames and its own timer.
pub trait Actor {
    fn id(&self) -> NodeId;
    fn transport(&self) -> &dyn Transport;
    /// Fabric time of the next timer, if any.
    fn next_timer(&self) -> Option<Micros>;
    fn on_timer(&mut self, now: Micros);
    fn on_frame(&mut self, delivery: Delivery);
    /// True once the actor has nothing left to do on its own.
    fn finished(&self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// No timer or frame left anywhere.
    Quiescent,
    /// Every actor reports finished; undelivered frames may remain.
    AllFinished,
    /// The time horizon was reached.
    Horizon,
}

/// Discrete-event loop over actors attached to one [`SimFabric`].
///
/// At each step the earliest pending event wins; frames precede timers at
/// equal times and ties between actors break by actor id, so a run is a
/// pure function of the seed.
pub struct SimDriver<'a> {
    fabric: SimFabric,
    actors: BTreeMap<NodeId, &'a mut dyn Actor>,
    events: u64,
}

impl<'a> SimDriver<'a> {
    pub fn new(fabric: SimFabric) -> Self {
        SimDriver {
            fabric,
            actors: BTreeMap::new(),
            events: 0,
        }
    }

    pub fn add(&mut self, actor: &'a mut dyn Actor) {
        self.actors.insert(actor.id(), actor);
    }

    pub fn events_processed(&self) -> u64 {
        self.events
    }

    pub fn run(&mut self, horizon: Micros) -> StopReason {
        loop {
            let frame = self
                .fabric
                .peek_earliest()
                .filter(|(_, n)| self.actors.contains_key(n));
            let timer = self
                .actors
                .iter()
                .filter_map(|(&id, a)| a.next_timer().map(|t| (t, id)))
                .min();
            let take_frame = match (frame, timer) {
                (None, None) => return StopReason::Quiescent,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (Some((tf, _)), Some((tt, _))) => tf <= tt,
            };
            if self.actors.values().all(|a| a.finished()) && !take_frame {
                return StopReason::AllFinished;
            }
            if take_frame {
                let (t, node) = frame.expect("frame chosen");
                if t > horizon {
                    return StopReason::Horizon;
                }
                let d = self.fabric.pop_next(node).expect("peeked frame");
                self.events += 1;
                self.actors
                    .get_mut(&node)
                    .expect("actor registered")
                    .on_frame(d);
            } else {
                let (t, node) = timer.expect("timer chosen");
                if t > horizon {
                    return StopReason::Horizon;
                }
                self.fabric.set_clock(node, t);
                self.events += 1;
                self.actors.get_mut(&node).expect("actor registered").on_timer(t);
            }
        }
    }
}

const IDLE_POLL: Micros = 50_000;

/// Runs one actor against a wall-clock transport until it finishes, then
/// keeps serving frames for `linger` so late peers are not cut off.
pub fn run_realtime(actor: &mut dyn Actor, stop: &AtomicBool, linger: Duration) {
    let mut linger_until: Option<Micros> = None;
    loop {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let now = actor.transport().now();
        if actor.finished() {
            let until = *linger_until.get_or_insert(now + linger.as_micros() as Micros);
            if now >= until {
                return;
            }
        }
        let timeout = match actor.next_timer() {
            Some(t) if t <= now => {
                actor.on_timer(now);
                continue;
            }
            Some(t) => (t - now).min(IDLE_POLL),
            None => IDLE_POLL,
        };
        match actor.transport().recv_frame(timeout) {
            Ok(Received::Frame(d)) => actor.on_frame(d),
            Ok(Received::Timeout) => {}
            Err(_) => return,
        }
    }
}
