use serde::{Deserialize, Serialize};

use crate::strategy::RoundRecord;

/// Encoded size of one [`MetricSample`] record, tag byte included.
pub const ENCODED_SAMPLE_LEN: usize = 49;
/// Encoded size of one [`StageEvent`] record, tag byte included.
pub const ENCODED_STAGE_LEN: usize = 19;

const TAG_SAMPLE: u8 = 1;
const TAG_STAGE: u8 = 2;
const TAG_ROUND: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub ts_s: f64,
    pub client_id: u32,
    pub cpu_percent: f32,
    pub mem_bytes: u64,
    pub power_w: f64,
    pub net_up_bytes: u64,
    pub net_down_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Fit,
    Eval,
}

impl StageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageKind::Fit => "fit",
            StageKind::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    Start,
    End,
}

impl Edge {
    pub fn as_str(&self) -> &'static str {
        match self {
            Edge::Start => "start",
            Edge::End => "end",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub ts_s: f64,
    pub client_id: u32,
    pub round: u32,
    pub kind: StageKind,
    pub edge: Edge,
}

/// Builds a stage boundary marker at emulated time `ts_s`.
pub fn emit_stage_event(
    client_id: u32,
    round: u32,
    kind: StageKind,
    edge: Edge,
    ts_s: f64,
) -> StageEvent {
    StageEvent {
        ts_s,
        client_id,
        round,
        kind,
        edge,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Sample(MetricSample),
    Stage(StageEvent),
    Round(RoundRecord),
}

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("record truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown record tag {tag} at byte {offset}")]
    UnknownTag { tag: u8, offset: usize },
    #[error("bad record at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
}

impl Record {
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Record::Sample(s) => {
                out.push(TAG_SAMPLE);
                out.extend_from_slice(&s.ts_s.to_le_bytes());
                out.extend_from_slice(&s.client_id.to_le_bytes());
                out.extend_from_slice(&s.cpu_percent.to_le_bytes());
                out.extend_from_slice(&s.mem_bytes.to_le_bytes());
                out.extend_from_slice(&s.power_w.to_le_bytes());
                out.extend_from_slice(&s.net_up_bytes.to_le_bytes());
                out.extend_from_slice(&s.net_down_bytes.to_le_bytes());
            }
            Record::Stage(e) => {
                out.push(TAG_STAGE);
                out.extend_from_slice(&e.ts_s.to_le_bytes());
                out.extend_from_slice(&e.client_id.to_le_bytes());
                out.extend_from_slice(&e.round.to_le_bytes());
                out.push(match e.kind {
                    StageKind::Fit => 0,
                    StageKind::Eval => 1,
                });
                out.push(match e.edge {
                    Edge::Start => 0,
                    Edge::End => 1,
                });
            }
            Record::Round(r) => {
                let json = serde_json::to_vec(r).expect("round record serializes");
                out.push(TAG_ROUND);
                out.extend_from_slice(&(json.len() as u32).to_le_bytes());
                out.extend_from_slice(&json);
            }
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Record::Sample(_) => ENCODED_SAMPLE_LEN,
            Record::Stage(_) => ENCODED_STAGE_LEN,
            Record::Round(r) => 5 + serde_json::to_vec(r).map(|v| v.len()).unwrap_or(0),
        }
    }

    /// Decodes every record in `buf`.
    pub fn decode_all(buf: &[u8]) -> Result<Vec<Record>, RecordError> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < buf.len() {
            let (rec, used) = Record::decode(&buf[pos..]).map_err(|e| match e {
                RecordError::Truncated(o) => RecordError::Truncated(pos + o),
                RecordError::UnknownTag { tag, offset } => RecordError::UnknownTag {
                    tag,
                    offset: pos + offset,
                },
                RecordError::Invalid { offset, reason } => RecordError::Invalid {
                    offset: pos + offset,
                    reason,
                },
            })?;
            out.push(rec);
            pos += used;
        }
        Ok(out)
    }

    fn decode(buf: &[u8]) -> Result<(Record, usize), RecordError> {
        let need = |n: usize| {
            if buf.len() < n {
                Err(RecordError::Truncated(buf.len()))
            } else {
                Ok(())
            }
        };
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(buf[i..i + 8].try_into().unwrap());
        let f64_at = |i: usize| f64::from_le_bytes(buf[i..i + 8].try_into().unwrap());
        match buf[0] {
            TAG_SAMPLE => {
                need(ENCODED_SAMPLE_LEN)?;
                Ok((
                    Record::Sample(MetricSample {
                        ts_s: f64_at(1),
                        client_id: u32_at(9),
                        cpu_percent: f32::from_le_bytes(buf[13..17].try_into().unwrap()),
                        mem_bytes: u64_at(17),
                        power_w: f64_at(25),
                        net_up_bytes: u64_at(33),
                        net_down_bytes: u64_at(41),
                    }),
                    ENCODED_SAMPLE_LEN,
                ))
            }
            TAG_STAGE => {
                need(ENCODED_STAGE_LEN)?;
                let kind = match buf[17] {
                    0 => StageKind::Fit,
                    1 => StageKind::Eval,
                    k => {
                        return Err(RecordError::Invalid {
                            offset: 17,
                            reason: format!("stage kind {k}"),
                        })
                    }
                };
                let edge = match buf[18] {
                    0 => Edge::Start,
                    1 => Edge::End,
                    e => {
                        return Err(RecordError::Invalid {
                            offset: 18,
                            reason: format!("stage edge {e}"),
                        })
                    }
                };
                Ok((
                    Record::Stage(StageEvent {
                        ts_s: f64_at(1),
                        client_id: u32_at(9),
                        round: u32_at(13),
                        kind,
                        edge,
                    }),
                    ENCODED_STAGE_LEN,
                ))
            }
            TAG_ROUND => {
                need(5)?;
                let len = u32_at(1) as usize;
                need(5 + len)?;
                let r: RoundRecord =
                    serde_json::from_slice(&buf[5..5 + len]).map_err(|e| RecordError::Invalid {
                        offset: 5,
                        reason: e.to_string(),
                    })?;
                Ok((Record::Round(r), 5 + len))
            }
            tag => Err(RecordError::UnknownTag { tag, offset: 0 }),
        }
    }
}
