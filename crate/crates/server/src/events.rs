//! Per-project push channel with a bounded replay buffer.

use std::collections::{BTreeMap, HashMap, VecDeque};

use codeaudit_core::api::{EventKind, PushEvent};
use parking_lot::Mutex;
use serde_json::Value;
use tokio::sync::broadcast;
use uuid::Uuid;

pub const REPLAY_BUFFER: usize = 500;
const CHANNEL_CAPACITY: usize = 1024;

struct Channel {
    next_id: u64,
    buffer: VecDeque<PushEvent>,
    sender: broadcast::Sender<PushEvent>,
}

impl Channel {
    fn new() -> Self {
        Self {
            next_id: 1,
            buffer: VecDeque::with_capacity(REPLAY_BUFFER),
            sender: broadcast::channel(CHANNEL_CAPACITY).0,
        }
    }
}

#[derive(Default)]
pub struct EventHub {
    channels: Mutex<HashMap<Uuid, Channel>>,
}

pub struct Subscription {
    /// Buffered events after the requested id, oldest first.
    pub replay: Vec<PushEvent>,
    pub live: broadcast::Receiver<PushEvent>,
}

impl EventHub {
    pub fn publish(&self, project_id: Uuid, kind: EventKind, payload: Value) -> PushEvent {
        let mut channels = self.channels.lock();
        let ch = channels.entry(project_id).or_insert_with(Channel::new);
        let event = PushEvent {
            event_id: ch.next_id,
            kind,
            payload,
        };
        ch.next_id += 1;
        if ch.buffer.len() == REPLAY_BUFFER {
            ch.buffer.pop_front();
        }
        ch.buffer.push_back(event.clone());
        // no receivers is fine; the buffer still holds the event
        let _ = ch.sender.send(event.clone());
        event
    }

    /// Replay and live feed are taken under one lock, so every event after
    /// `last_event_id` arrives exactly once across the two.
    pub fn subscribe(&self, project_id: Uuid, last_event_id: Option<u64>) -> Subscription {
        let mut channels = self.channels.lock();
        let ch = channels.entry(project_id).or_insert_with(Channel::new);
        let replay = match last_event_id {
            Some(last) => ch
                .buffer
                .iter()
                .filter(|e| e.event_id > last)
                .cloned()
                .collect(),
            None => Vec::new(),
        };
        Subscription {
            replay,
            live: ch.sender.subscribe(),
        }
    }
}

/// Holds back results that finish out of order so each segment's alerts are
/// published in the order their jobs were enqueued.
#[derive(Default)]
pub struct SegmentSequencer {
    segments: Mutex<HashMap<Uuid, SegmentSlot>>,
}

#[derive(Default)]
struct SegmentSlot {
    next_ticket: u64,
    next_emit: u64,
    ready: BTreeMap<u64, Vec<(Uuid, EventKind, Value)>>,
}

impl SegmentSequencer {
    pub fn ticket(&self, segment_id: Uuid) -> u64 {
        let mut map = self.segments.lock();
        let slot = map.entry(segment_id).or_default();
        let t = slot.next_ticket;
        slot.next_ticket += 1;
        t
    }

    /// Records the events of a finished ticket (possibly none) and returns
    /// every event now clear to publish, in order.
    pub fn complete(
        &self,
        segment_id: Uuid,
        ticket: u64,
        events: Vec<(Uuid, EventKind, Value)>,
    ) -> Vec<(Uuid, EventKind, Value)> {
        let mut map = self.segments.lock();
        let slot = map.entry(segment_id).or_default();
        slot.ready.insert(ticket, events);
        let mut out = Vec::new();
        while let Some(batch) = slot.ready.remove(&slot.next_emit) {
            out.extend(batch);
            slot.next_emit += 1;
        }
        if slot.next_emit == slot.next_ticket {
            map.remove(&segment_id);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn ids_are_per_project_and_monotone() {
        let hub = EventHub::default();
        let a = Uuid::from_u128(1);
        let b = Uuid::from_u128(2);
        assert_eq!(hub.publish(a, EventKind::AuditAlert, json!({})).event_id, 1);
        assert_eq!(hub.publish(a, EventKind::AuditAlert, json!({})).event_id, 2);
        assert_eq!(hub.publish(b, EventKind::AuditAlert, json!({})).event_id, 1);
    }

    #[test]
    fn replay_is_bounded() {
        let hub = EventHub::default();
        let p = Uuid::from_u128(1);
        for i in 0..600 {
            hub.publish(p, EventKind::IcrUpdated, json!({ "i": i }));
        }
        let sub = hub.subscribe(p, Some(0));
        assert_eq!(sub.replay.len(), REPLAY_BUFFER);
        assert_eq!(sub.replay[0].event_id, 101);
        let sub = hub.subscribe(p, Some(590));
        assert_eq!(
            sub.replay.iter().map(|e| e.event_id).collect::<Vec<_>>(),
            (591..=600).collect::<Vec<_>>()
        );
        assert!(hub.subscribe(p, None).replay.is_empty());
    }

    #[tokio::test]
    async fn live_events_follow_replay_without_gaps() {
        let hub = EventHub::default();
        let p = Uuid::from_u128(1);
        hub.publish(p, EventKind::AuditAlert, json!(1));
        let mut sub = hub.subscribe(p, Some(0));
        hub.publish(p, EventKind::AuditAlert, json!(2));
        assert_eq!(sub.replay.len(), 1);
        assert_eq!(sub.live.recv().await.unwrap().event_id, 2);
    }

    #[test]
    fn sequencer_releases_in_ticket_order() {
        let seq = SegmentSequencer::default();
        let s = Uuid::from_u128(5);
        let p = Uuid::nil();
        let t0 = seq.ticket(s);
        let t1 = seq.ticket(s);
        let t2 = seq.ticket(s);
        assert!(seq
            .complete(s, t1, vec![(p, EventKind::AuditAlert, json!(1))])
            .is_empty());
        let out = seq.complete(s, t0, vec![(p, EventKind::AuditAlert, json!(0))]);
        assert_eq!(
            out.iter().map(|e| e.2.clone()).collect::<Vec<_>>(),
            vec![json!(0), json!(1)]
        );
        assert!(seq.complete(s, t2, vec![]).is_empty());
        assert!(seq.segments.lock().is_empty());
    }
}
