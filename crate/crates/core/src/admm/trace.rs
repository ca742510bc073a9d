//! Message log of a distributed run and the privacy audit over it.
//!
//! Only three message kinds exist: a server reports its volume vector to the
//! coordinator, the coordinator returns `(w_k, θ_k)`, and a server tells each
//! of its devices what to upload. Nothing else may leave a party.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Party {
    Coordinator,
    Server(usize),
    Device(usize),
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Coordinator => f.write_str("coordinator"),
            Party::Server(k) => write!(f, "server:{k}"),
            Party::Device(m) => write!(f, "device:{m}"),
        }
    }
}

impl FromStr for Party {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "coordinator" {
            return Ok(Party::Coordinator);
        }
        let (kind, idx) = s
            .split_once(':')
            .ok_or_else(|| format!("bad party `{s}`"))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| format!("bad party index in `{s}`"))?;
        match kind {
            "server" => Ok(Party::Server(idx)),
            "device" => Ok(Party::Device(idx)),
            _ => Err(format!("bad party `{s}`")),
        }
    }
}

impl Serialize for Party {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Party {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    ReportN,
    FeedbackWTheta,
    DeviceAlloc,
}

impl MessageKind {
    pub fn allowed_keys(self) -> &'static [&'static str] {
        match self {
            MessageKind::ReportN => &["n"],
            MessageKind::FeedbackWTheta => &["w", "theta"],
            MessageKind::DeviceAlloc => &["ub_bits", "lb_bits"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMessage {
    pub iter: usize,
    pub from: Party,
    pub to: Party,
    pub kind: MessageKind,
    pub payload: Map<String, Value>,
}

fn numbers<T: Scalar>(v: &[T]) -> Value {
    Value::Array(v.iter().map(|x| Value::from(x.as_f64())).collect())
}

impl TraceMessage {
    pub fn report_n<T: Scalar>(iter: usize, server: usize, n: &[T]) -> Self {
        let mut payload = Map::new();
        payload.insert("n".into(), numbers(n));
        Self {
            iter,
            from: Party::Server(server),
            to: Party::Coordinator,
            kind: MessageKind::ReportN,
            payload,
        }
    }

    pub fn feedback<T: Scalar>(iter: usize, server: usize, w: &[T], theta: &[T]) -> Self {
        let mut payload = Map::new();
        payload.insert("w".into(), numbers(w));
        payload.insert("theta".into(), numbers(theta));
        Self {
            iter,
            from: Party::Coordinator,
            to: Party::Server(server),
            kind: MessageKind::FeedbackWTheta,
            payload,
        }
    }

    pub fn device_alloc<T: Scalar>(
        iter: usize,
        server: usize,
        device: usize,
        ub: T,
        lb: T,
    ) -> Self {
        let mut payload = Map::new();
        payload.insert("ub_bits".into(), numbers(&[ub]));
        payload.insert("lb_bits".into(), numbers(&[lb]));
        Self {
            iter,
            from: Party::Server(server),
            to: Party::Device(device),
            kind: MessageKind::DeviceAlloc,
            payload,
        }
    }

    fn vector_len(&self, key: &str) -> Option<usize> {
        self.payload
            .get(key)
            .and_then(Value::as_array)
            .map(Vec::len)
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(log: &[TraceMessage], mut out: W) -> std::io::Result<()> {
    for m in log {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditFailure {
    /// Zero-based line of the offending message.
    pub index: usize,
    pub reason: String,
    pub message: Option<TraceMessage>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    pub messages_checked: usize,
    pub failures: Vec<AuditFailure>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// First failure rendered as `line N: reason`.
    pub fn first_failure(&self) -> Option<String> {
        self.failures
            .first()
            .map(|f| format!("line {}: {}", f.index + 1, f.reason))
    }
}

fn check_route(m: &TraceMessage) -> Result<usize, String> {
    match (m.kind, m.from, m.to) {
        (MessageKind::ReportN, Party::Server(k), Party::Coordinator) => Ok(k),
        (MessageKind::FeedbackWTheta, Party::Coordinator, Party::Server(k)) => Ok(k),
        (MessageKind::DeviceAlloc, Party::Server(k), Party::Device(_)) => Ok(k),
        (kind, from, to) => Err(format!(
            "{kind:?} message may not travel from {from} to {to}"
        )),
    }
}

fn check_payload(m: &TraceMessage) -> Result<(), String> {
    let allowed = m.kind.allowed_keys();
    for (key, value) in &m.payload {
        if !allowed.contains(&key.as_str()) {
            return Err(format!("unexpected field `{key}` in {:?} payload", m.kind));
        }
        let Some(items) = value.as_array() else {
            return Err(format!("field `{key}` is not a numeric vector"));
        };
        if !items.iter().all(|v| v.as_f64().is_some_and(f64::is_finite)) {
            return Err(format!(
                "field `{key}` holds non-numeric or non-finite entries"
            ));
        }
    }
    for key in allowed {
        if !m.payload.contains_key(*key) {
            return Err(format!("missing field `{key}` in {:?} payload", m.kind));
        }
    }
    Ok(())
}

/// Checks every message against the whitelist of kinds, routes and payload
/// fields. With `layout` (devices per server) vector lengths and device
/// ownership are checked too.
pub fn audit_trace_with_layout(log: &[TraceMessage], layout: Option<&[usize]>) -> AuditReport {
    let ranges: Option<Vec<Range<usize>>> = layout.map(|sizes| {
        let mut start = 0;
        sizes
            .iter()
            .map(|&m| {
                let r = start..start + m;
                start = r.end;
                r
            })
            .collect()
    });
    let mut report = AuditReport::default();
    let mut seen_len: HashMap<usize, usize> = HashMap::new();
    for (index, m) in log.iter().enumerate() {
        report.messages_checked += 1;
        let result = check_route(m).and_then(|k| {
            check_payload(m)?;
            if let Some(ranges) = &ranges {
                let r = ranges.get(k).ok_or_else(|| format!("unknown server {k}"))?;
                if let Party::Device(d) = m.to {
                    if !r.contains(&d) {
                        return Err(format!("device {d} is not attached to server {k}"));
                    }
                }
            }
            match m.kind {
                MessageKind::DeviceAlloc => {
                    for key in m.kind.allowed_keys() {
                        if m.vector_len(key) != Some(1) {
                            return Err(format!("field `{key}` must hold exactly one volume"));
                        }
                    }
                }
                kind => {
                    let expected = ranges.as_ref().map(|r| 2 * r[k].len());
                    for key in kind.allowed_keys() {
                        let len = m.vector_len(key).unwrap_or(0);
                        let known = *seen_len.entry(k).or_insert(expected.unwrap_or(len));
                        if len != known {
                            return Err(format!(
                                "field `{key}` has length {len}, expected {known} for server {k}"
                            ));
                        }
                    }
                }
            }
            Ok(())
        });
        if let Err(reason) = result {
            report.failures.push(AuditFailure {
                index,
                reason,
                message: Some(m.clone()),
            });
        }
    }
    report
}

pub fn audit_trace(log: &[TraceMessage]) -> AuditReport {
    audit_trace_with_layout(log, None)
}

/// Audits a JSON-lines log; unparsable lines are failures.
pub fn audit_jsonl(text: &str, layout: Option<&[usize]>) -> AuditReport {
    let mut parsed = Vec::new();
    let mut lines = Vec::new();
    let mut bad = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceMessage>(line) {
            Ok(m) => {
                parsed.push(m);
                lines.push(index);
            }
            Err(e) => bad.push(AuditFailure {
                index,
                reason: format!("not a trace message: {e}"),
                message: None,
            }),
        }
    }
    let mut report = audit_trace_with_layout(&parsed, layout);
    for f in &mut report.failures {
        f.index = lines[f.index];
    }
    report.messages_checked += bad.len();
    report.failures.extend(bad);
    report.failures.sort_by_key(|f| f.index);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_log() -> Vec<TraceMessage> {
        vec![
            TraceMessage::report_n(0, 0, &[1.0, 2.0]),
            TraceMessage::report_n(0, 1, &[1.0, 2.0, 3.0, 4.0]),
            TraceMessage::feedback(0, 0, &[1.0, 2.0], &[0.0, 0.1]),
            TraceMessage::feedback(0, 1, &[1.0, 2.0, 3.0, 4.0], &[0.0; 4]),
            TraceMessage::device_alloc(1, 1, 2, 5.0, 6.0),
        ]
    }

    #[test]
    fn clean_log_passes_with_layout() {
        let report = audit_trace_with_layout(&clean_log(), Some(&[1, 2]));
        assert!(report.passed(), "{:?}", report.failures);
        assert_eq!(report.messages_checked, 5);
    }

    #[test]
    fn leaked_field_is_flagged() {
        let mut log = clean_log();
        log[1]
            .payload
            .insert("gain_ub".into(), Value::from(vec![0.3]));
        let report = audit_trace(&log);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].index, 1);
        assert!(report.failures[0].reason.contains("gain_ub"));
    }

    #[test]
    fn wrong_route_and_owner_are_flagged() {
        let mut log = clean_log();
        log[0].to = Party::Server(1);
        log.push(TraceMessage::device_alloc(1, 0, 2, 1.0, 1.0));
        let report = audit_trace_with_layout(&log, Some(&[1, 2]));
        let idx: Vec<usize> = report.failures.iter().map(|f| f.index).collect();
        assert_eq!(idx, vec![0, 5]);
    }

    #[test]
    fn jsonl_roundtrip_and_line_numbers() {
        let mut buf = Vec::new();
        write_jsonl(&clean_log(), &mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        assert!(audit_jsonl(&text, Some(&[1, 2])).passed());
        text.push_str("{\"iter\":2,\"from\":\"server:0\",\"to\":\"coordinator\",\"kind\":\"report_n\",\"payload\":{\"n\":[1,2],\"rho\":[1]}}\n");
        let report = audit_jsonl(&text, None);
        assert_eq!(
            report.first_failure().unwrap(),
            "line 6: unexpected field `rho` in ReportN payload"
        );
    }

    #[test]
    fn party_strings() {
        assert_eq!(Party::Server(3).to_string(), "server:3");
        assert_eq!("device:12".parse::<Party>().unwrap(), Party::Device(12));
        assert!("server".parse::<Party>().is_err());
    }
}
