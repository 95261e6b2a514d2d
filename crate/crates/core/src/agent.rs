//! The agent shell: current knowledge, the selective-perception pipeline and
//! the protocol-communication pipeline.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ContentLanguage, Message, MessageData};
use crate::env::{Focus, Sense, VirtualEnvironment};
use crate::kernel::Tick;
use crate::perception::{interpret, Description, Filter, FilterContext, FilterRegistry};
use crate::value::{Knowledge, Template, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionRequest {
    pub id: String,
    pub focus: Focus,
    pub filter: Filter,
}

impl PerceptionRequest {
    pub fn new(id: impl Into<String>, focus: Focus) -> Self {
        PerceptionRequest { id: id.into(), focus, filter: Filter::new("identity") }
    }

    pub fn filtered(mut self, filter: Filter) -> Self {
        self.filter = filter;
        self
    }
}

/// Sent to the requester once a perception request completes.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionNotice {
    pub request_id: String,
    /// Number of knowledge items written, or the reason perception failed.
    pub outcome: Result<usize, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: u64,
    pub protocol: String,
    pub history: Vec<MessageData>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConversationError {
    #[error("unknown conversation {0}")]
    Unknown(u64),
    #[error("conversation {0} already exists")]
    Duplicate(u64),
    #[error("conversation {id} runs {expected}, message is {found}")]
    ProtocolMismatch { id: u64, expected: String, found: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConversationStore {
    conversations: BTreeMap<u64, Conversation>,
}

impl ConversationStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Open a conversation whose first message is `data`.
    pub fn add(&mut self, data: MessageData) -> Result<(), ConversationError> {
        let id = data.conversation;
        if self.conversations.contains_key(&id) {
            return Err(ConversationError::Duplicate(id));
        }
        self.conversations.insert(id, Conversation { id, protocol: data.protocol.clone(), history: vec![data] });
        Ok(())
    }

    pub fn read(&self, id: u64) -> Result<&Conversation, ConversationError> {
        self.conversations.get(&id).ok_or(ConversationError::Unknown(id))
    }

    /// Append `data` to its conversation.
    pub fn update(&mut self, data: MessageData) -> Result<(), ConversationError> {
        let id = data.conversation;
        let c = self.conversations.get_mut(&id).ok_or(ConversationError::Unknown(id))?;
        if c.protocol != data.protocol {
            return Err(ConversationError::ProtocolMismatch {
                id,
                expected: c.protocol.clone(),
                found: data.protocol,
            });
        }
        c.history.push(data);
        Ok(())
    }

    pub fn terminate(&mut self, id: u64) -> Result<(), ConversationError> {
        self.conversations.remove(&id).map(|_| ()).ok_or(ConversationError::Unknown(id))
    }

    pub fn contains(&self, id: u64) -> bool {
        self.conversations.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Conversation> {
        self.conversations.values()
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }
}

/// A message a protocol handler wants to send; the agent fills in the id
/// and sender.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub conversation: u64,
    pub receiver: String,
    pub performative: String,
    pub content: Vec<(&'static str, Value)>,
}

/// Protocol-specific part of the communication pipeline.
pub trait ProtocolHandler {
    fn protocol(&self) -> &str;
    /// Whether an incoming `performative` may open a new conversation.
    fn opens(&self, performative: &str) -> bool;
    /// React to a received message; the result is written to knowledge.
    fn incoming(&mut self, data: &MessageData, knowledge: &Knowledge, now: Tick) -> Knowledge;
    /// Next message to send, if the protocol has one ready.
    fn outgoing(&mut self, knowledge: &Knowledge, now: Tick) -> Option<Outbound>;
    /// Whether the conversation has reached a final state.
    fn is_final(&self, conversation: &Conversation) -> bool;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommBranch {
    Incoming(u64),
    Outgoing(u64),
    Terminated(u64),
    Silent,
}

/// Something worth a trace record: malformed input, protocol violations.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentEvent {
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct Agent {
    id: String,
    kind: String,
    ordinal: u64,
    counter: u64,
    knowledge: Knowledge,
    inbox: VecDeque<Message>,
    outbox: VecDeque<Message>,
    conversations: ConversationStore,
    descriptions: Vec<Description>,
    filters: FilterRegistry,
    notices: Vec<PerceptionNotice>,
    events: Vec<AgentEvent>,
}

impl Agent {
    /// `ordinal` must be unique per agent; it keeps message and
    /// conversation ids globally unique.
    pub fn new(id: impl Into<String>, kind: impl Into<String>, ordinal: u64) -> Self {
        Agent {
            id: id.into(),
            kind: kind.into(),
            ordinal,
            counter: 0,
            knowledge: Knowledge::new(),
            inbox: VecDeque::new(),
            outbox: VecDeque::new(),
            conversations: ConversationStore::new(),
            descriptions: Vec::new(),
            filters: FilterRegistry::default(),
            notices: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn fresh_id(&mut self) -> u64 {
        self.counter += 1;
        (self.ordinal << 32) | self.counter
    }

    pub fn knowledge(&self) -> &Knowledge {
        &self.knowledge
    }

    pub fn knowledge_read(&self, template: &Template) -> Knowledge {
        self.knowledge.read(template)
    }

    pub fn knowledge_write(&mut self, items: Knowledge) {
        self.knowledge.write(items);
    }

    pub fn forget(&mut self, name: &str) {
        self.knowledge.remove(name);
    }

    pub fn add_description(&mut self, d: Description) {
        self.descriptions.push(d);
    }

    pub fn filters_mut(&mut self) -> &mut FilterRegistry {
        &mut self.filters
    }

    pub fn conversations(&self) -> &ConversationStore {
        &self.conversations
    }

    pub fn inbox_len(&self) -> usize {
        self.inbox.len()
    }

    pub fn deliver(&mut self, msg: Message) {
        self.inbox.push_back(msg);
    }

    pub fn take_outbox(&mut self) -> Vec<Message> {
        self.outbox.drain(..).collect()
    }

    pub fn take_notices(&mut self) -> Vec<PerceptionNotice> {
        std::mem::take(&mut self.notices)
    }

    pub fn take_events(&mut self) -> Vec<AgentEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn event(&mut self, kind: &str, detail: String) {
        self.events.push(AgentEvent { kind: kind.to_string(), detail });
    }

    /// Sense, interpret, filter and update knowledge, all in one dispatch.
    pub fn perceive(&mut self, request: &PerceptionRequest, ve: &mut VirtualEnvironment) -> PerceptionNotice {
        let outcome = if !self.filters.contains(&request.filter.name) {
            Err(format!("unknown filter {}", request.filter.name))
        } else {
            let sense = Sense { agent_id: self.id.clone(), focus: request.focus.clone() };
            ve.sense(&sense).map_err(|e| e.to_string()).and_then(|rep| {
                let percept = interpret(&rep, &self.descriptions);
                let ctx = FilterContext { graph: ve.graph() };
                let filtered = self.filters.apply(&percept, &request.filter, &ctx).map_err(|e| e.to_string())?;
                let n = filtered.len();
                self.knowledge.write(filtered);
                Ok(n)
            })
        };
        let notice = PerceptionNotice { request_id: request.id.clone(), outcome };
        self.notices.push(notice.clone());
        notice
    }

    /// One communication dispatch: handle an incoming message if there is
    /// one, else send the next outgoing message a handler has ready, else
    /// close one conversation that reached its final state.
    pub fn communicate_step(
        &mut self,
        handlers: &mut [&mut dyn ProtocolHandler],
        language: &ContentLanguage,
        now: Tick,
    ) -> CommBranch {
        if let Some(msg) = self.inbox.pop_front() {
            let conv = msg.conversation;
            self.handle_incoming(msg, handlers, language, now);
            return CommBranch::Incoming(conv);
        }
        for h in handlers.iter_mut() {
            let Some(out) = h.outgoing(&self.knowledge, now) else { continue };
            let data = MessageData::new(
                self.fresh_id(),
                out.conversation,
                self.id.clone(),
                out.receiver,
                h.protocol(),
                &out.performative,
                out.content,
            );
            match language.encode(&data) {
                Ok(m) => {
                    let conv = data.conversation;
                    let recorded = if self.conversations.contains(conv) {
                        self.conversations.update(data)
                    } else {
                        self.conversations.add(data)
                    };
                    if let Err(e) = recorded {
                        self.event("protocolViolation", e.to_string());
                    }
                    self.outbox.push_back(m);
                    return CommBranch::Outgoing(conv);
                }
                Err(e) => self.event("malformed", format!("outgoing {}: {e}", data.performative)),
            }
        }
        let done = self.conversations.iter().find_map(|c| {
            handlers
                .iter()
                .any(|h| h.protocol() == c.protocol && h.is_final(c))
                .then_some(c.id)
        });
        match done {
            Some(id) => {
                let _ = self.conversations.terminate(id);
                CommBranch::Terminated(id)
            }
            None => CommBranch::Silent,
        }
    }

    fn handle_incoming(
        &mut self,
        msg: Message,
        handlers: &mut [&mut dyn ProtocolHandler],
        language: &ContentLanguage,
        now: Tick,
    ) {
        let data = match language.decode(&msg) {
            Ok(d) => d,
            Err(e) => return self.event("malformed", format!("message {} from {}: {e}", msg.id, msg.sender)),
        };
        let Some(h) = handlers.iter_mut().find(|h| h.protocol() == data.protocol) else {
            return self.event("protocolViolation", format!("no handler for {}", data.protocol));
        };
        let recorded = if self.conversations.contains(data.conversation) {
            self.conversations.update(data.clone())
        } else if h.opens(&data.performative) {
            self.conversations.add(data.clone())
        } else {
            return self.event(
                "protocolViolation",
                format!("{} {} for unknown conversation {}", data.protocol, data.performative, data.conversation),
            );
        };
        if let Err(e) = recorded {
            return self.event("protocolViolation", e.to_string());
        }
        let learned = h.incoming(&data, &self.knowledge, now);
        self.knowledge.write(learned);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Domain;

    fn lang() -> ContentLanguage {
        let mut l = ContentLanguage::new();
        l.register("Ping", "ping", &[("n", Domain::Count)]);
        l.register("Ping", "pong", &[("n", Domain::Count)]);
        l
    }

    /// Answers every ping with a pong; a conversation ends with the pong.
    #[derive(Default)]
    struct Pinger {
        pending: VecDeque<(u64, String, i64)>,
    }

    impl ProtocolHandler for Pinger {
        fn protocol(&self) -> &str {
            "Ping"
        }
        fn opens(&self, p: &str) -> bool {
            p == "ping"
        }
        fn incoming(&mut self, d: &MessageData, _: &Knowledge, _: Tick) -> Knowledge {
            let n = d.field("n").and_then(Value::as_int).unwrap_or(0);
            if d.performative == "ping" {
                self.pending.push_back((d.conversation, d.sender.clone(), n));
            }
            Knowledge::single("last", n)
        }
        fn outgoing(&mut self, _: &Knowledge, _: Tick) -> Option<Outbound> {
            let (conversation, to, n) = self.pending.pop_front()?;
            Some(Outbound { conversation, receiver: to, performative: "pong".into(), content: vec![("n", Value::Int(n))] })
        }
        fn is_final(&self, c: &Conversation) -> bool {
            c.history.last().is_some_and(|m| m.performative == "pong")
        }
    }

    fn msg(perf: &str, conv: u64, content: &str) -> Message {
        Message {
            id: 9,
            conversation: conv,
            sender: "other".into(),
            receiver: "me".into(),
            protocol: "Ping".into(),
            performative: perf.into(),
            content: vec![content.into()],
        }
    }

    #[test]
    fn three_branches() {
        let l = lang();
        let mut a = Agent::new("me", "test", 1);
        let mut h = Pinger::default();
        a.deliver(msg("ping", 5, "3"));
        assert!(matches!(a.communicate_step(&mut [&mut h], &l, Tick(0)), CommBranch::Incoming(_)));
        assert_eq!(a.conversations().read(5).unwrap().history.len(), 1);
        assert_eq!(a.knowledge().get("last"), Some(&Value::Int(3)));
        assert_eq!(a.communicate_step(&mut [&mut h], &l, Tick(1)), CommBranch::Outgoing(5));
        let out = a.take_outbox();
        assert_eq!(out[0].performative, "pong");
        assert_eq!(out[0].receiver, "other");
        assert_eq!(a.conversations().read(5).unwrap().history.len(), 2);
        assert_eq!(a.communicate_step(&mut [&mut h], &l, Tick(2)), CommBranch::Terminated(5));
        assert!(a.conversations().read(5).is_err());
        assert_eq!(a.communicate_step(&mut [&mut h], &l, Tick(3)), CommBranch::Silent);
    }

    #[test]
    fn violations_are_dropped() {
        let l = lang();
        let mut a = Agent::new("me", "test", 1);
        let mut h = Pinger::default();
        a.deliver(msg("pong", 8, "1"));
        a.deliver(msg("ping", 9, "x"));
        a.communicate_step(&mut [&mut h], &l, Tick(0));
        a.communicate_step(&mut [&mut h], &l, Tick(0));
        let kinds: Vec<String> = a.take_events().into_iter().map(|e| e.kind).collect();
        assert_eq!(kinds, ["protocolViolation", "malformed"]);
        assert!(a.conversations().is_empty());
        assert!(a.knowledge().is_empty());
    }

    #[test]
    fn store_errors() {
        let mut s = ConversationStore::new();
        let d = MessageData::new(1, 4, "a", "b", "Ping", "ping", vec![("n", Value::Int(1))]);
        s.add(d.clone()).unwrap();
        assert_eq!(s.add(d.clone()), Err(ConversationError::Duplicate(4)));
        s.terminate(4).unwrap();
        assert_eq!(s.read(4).err(), Some(ConversationError::Unknown(4)));
        assert_eq!(s.update(d), Err(ConversationError::Unknown(4)));
        assert_eq!(s.terminate(4), Err(ConversationError::Unknown(4)));
    }
}
