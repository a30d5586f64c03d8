//! Length-prefixed binary framing.
//!
//! ```text
//! frame   = len:u32 tag:u8 payload      (len counts tag + payload)
//! integer = u32 LE     real = f32 LE     string = len:u16 LE + UTF-8
//! kv      = count:u16 (string string)*
//! params  = layers:u32 (rows:u32 cols:u32 bias:u32)* values:f32*
//! ```
//!
//! | tag | message      | payload                                                        |
//! |-----|--------------|----------------------------------------------------------------|
//! | 1   | Hello        | client_id, dev_type                                            |
//! | 2   | HelloAck     | client_id, n_clients                                           |
//! | 3   | FitRequest   | round, config kv, params                                       |
//! | 4   | FitResponse  | round, client_id, num_examples, train_loss:real, metrics kv, params |
//! | 5   | EvalRequest  | round, config kv, params                                       |
//! | 6   | EvalResponse | round, client_id, num_examples, correct, loss:real, metrics kv |
//! | 7   | Shutdown     | (empty)                                                        |
//! | 8   | Error        | message                                                        |

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::model::ParamVector;

/// Frames larger than this are rejected before any allocation.
pub const MAX_FRAME_LEN: u32 = 256 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("frame length {0} out of range")]
    LengthOverflow(u64),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type KeyValues = Vec<(String, String)>;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        client_id: u32,
        dev_type: String,
    },
    HelloAck {
        client_id: u32,
        n_clients: u32,
    },
    FitRequest {
        round: u32,
        config: KeyValues,
        params: ParamVector,
    },
    FitResponse {
        round: u32,
        client_id: u32,
        num_examples: u32,
        train_loss: f32,
        metrics: KeyValues,
        params: ParamVector,
    },
    EvalRequest {
        round: u32,
        config: KeyValues,
        params: ParamVector,
    },
    EvalResponse {
        round: u32,
        client_id: u32,
        num_examples: u32,
        correct: u32,
        loss: f32,
        metrics: KeyValues,
    },
    Shutdown,
    Error {
        message: String,
    },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => 1,
            Message::HelloAck { .. } => 2,
            Message::FitRequest { .. } => 3,
            Message::FitResponse { .. } => 4,
            Message::EvalRequest { .. } => 5,
            Message::EvalResponse { .. } => 6,
            Message::Shutdown => 7,
            Message::Error { .. } => 8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::HelloAck { .. } => "HelloAck",
            Message::FitRequest { .. } => "FitRequest",
            Message::FitResponse { .. } => "FitResponse",
            Message::EvalRequest { .. } => "EvalRequest",
            Message::EvalResponse { .. } => "EvalResponse",
            Message::Shutdown => "Shutdown",
            Message::Error { .. } => "Error",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0u8; 4];
        out.push(self.tag());
        match self {
            Message::Hello {
                client_id,
                dev_type,
            } => {
                put_u32(&mut out, *client_id);
                put_str(&mut out, dev_type);
            }
            Message::HelloAck {
                client_id,
                n_clients,
            } => {
                put_u32(&mut out, *client_id);
                put_u32(&mut out, *n_clients);
            }
            Message::FitRequest {
                round,
                config,
                params,
            }
            | Message::EvalRequest {
                round,
                config,
                params,
            } => {
                put_u32(&mut out, *round);
                put_kv(&mut out, config);
                params.encode_into(&mut out);
            }
            Message::FitResponse {
                round,
                client_id,
                num_examples,
                train_loss,
                metrics,
                params,
            } => {
                put_u32(&mut out, *round);
                put_u32(&mut out, *client_id);
                put_u32(&mut out, *num_examples);
                out.extend_from_slice(&train_loss.to_le_bytes());
                put_kv(&mut out, metrics);
                params.encode_into(&mut out);
            }
            Message::EvalResponse {
                round,
                client_id,
                num_examples,
                correct,
                loss,
                metrics,
            } => {
                put_u32(&mut out, *round);
                put_u32(&mut out, *client_id);
                put_u32(&mut out, *num_examples);
                put_u32(&mut out, *correct);
                out.extend_from_slice(&loss.to_le_bytes());
                put_kv(&mut out, metrics);
            }
            Message::Shutdown => {}
            Message::Error { message } => put_str(&mut out, message),
        }
        let len = (out.len() - 4) as u32;
        out[..4].copy_from_slice(&len.to_le_bytes());
        out
    }

    /// Decodes one frame from the front of `buf`, returning the message and
    /// the number of bytes it occupied.
    pub fn decode(buf: &[u8]) -> Result<(Message, usize), WireError> {
        let header = buf.get(..4).ok_or(WireError::Truncated {
            needed: 4,
            available: buf.len(),
        })?;
        let len = u32::from_le_bytes(header.try_into().unwrap());
        if len == 0 || len > MAX_FRAME_LEN {
            return Err(WireError::LengthOverflow(len as u64));
        }
        let total = 4 + len as usize;
        let body = buf.get(4..total).ok_or(WireError::Truncated {
            needed: total,
            available: buf.len(),
        })?;
        Ok((decode_body(body)?, total))
    }
}

fn decode_body(body: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader { buf: body, pos: 1 };
    let msg = match body[0] {
        1 => Message::Hello {
            client_id: r.u32()?,
            dev_type: r.string()?,
        },
        2 => Message::HelloAck {
            client_id: r.u32()?,
            n_clients: r.u32()?,
        },
        tag @ (3 | 5) => {
            let round = r.u32()?;
            let config = r.kv()?;
            let params = r.params()?;
            if tag == 3 {
                Message::FitRequest {
                    round,
                    config,
                    params,
                }
            } else {
                Message::EvalRequest {
                    round,
                    config,
                    params,
                }
            }
        }
        4 => Message::FitResponse {
            round: r.u32()?,
            client_id: r.u32()?,
            num_examples: r.u32()?,
            train_loss: r.f32()?,
            metrics: r.kv()?,
            params: r.params()?,
        },
        6 => Message::EvalResponse {
            round: r.u32()?,
            client_id: r.u32()?,
            num_examples: r.u32()?,
            correct: r.u32()?,
            loss: r.f32()?,
            metrics: r.kv()?,
        },
        7 => Message::Shutdown,
        8 => Message::Error {
            message: r.string()?,
        },
        other => return Err(WireError::UnknownTag(other)),
    };
    if r.pos != body.len() {
        return Err(WireError::Malformed(format!(
            "{} trailing bytes after {}",
            body.len() - r.pos,
            msg.name()
        )));
    }
    Ok(msg)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    // over-long strings are cut at the last char boundary that fits a u16 length
    let mut len = s.len().min(u16::MAX as usize);
    while !s.is_char_boundary(len) {
        len -= 1;
    }
    out.extend_from_slice(&(len as u16).to_le_bytes());
    out.extend_from_slice(&s.as_bytes()[..len]);
}

fn put_kv(out: &mut Vec<u8>, kv: &KeyValues) {
    out.extend_from_slice(&(kv.len() as u16).to_le_bytes());
    for (k, v) in kv {
        put_str(out, k);
        put_str(out, v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], WireError> {
        let end = self.pos + n;
        let s = self.buf.get(self.pos..end).ok_or(WireError::Truncated {
            needed: end,
            available: self.buf.len(),
        })?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| WireError::Malformed(format!("invalid UTF-8: {e}")))
    }

    fn kv(&mut self) -> Result<KeyValues, WireError> {
        let n = self.u16()? as usize;
        let mut out = Vec::with_capacity(n.min(self.buf.len()));
        for _ in 0..n {
            out.push((self.string()?, self.string()?));
        }
        Ok(out)
    }

    fn params(&mut self) -> Result<ParamVector, WireError> {
        let (p, used) = ParamVector::decode(&self.buf[self.pos..])
            .map_err(|e| WireError::Malformed(e.to_string()))?;
        self.pos += used;
        Ok(p)
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<usize, WireError> {
    let bytes = msg.encode();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

/// Reads exactly one frame. Returns the message and the frame size in bytes.
pub fn read_message<R: Read>(r: &mut R) -> Result<(Message, usize), WireError> {
    let mut header = [0u8; 4];
    r.read_exact(&mut header)?;
    let len = u32::from_le_bytes(header);
    if len == 0 || len > MAX_FRAME_LEN {
        return Err(WireError::LengthOverflow(len as u64));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok((decode_body(&body)?, 4 + len as usize))
}

/// Looks up `key` in a key-value list.
pub fn kv_get<'a>(kv: &'a KeyValues, key: &str) -> Option<&'a str> {
    kv.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

/// Looks up and parses `key`.
pub fn kv_parse<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<T, WireError> {
    let raw =
        kv_get(kv, key).ok_or_else(|| WireError::Malformed(format!("missing key {key:?}")))?;
    raw.parse()
        .map_err(|_| WireError::Malformed(format!("cannot parse {key}={raw:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Activation, ModelSpec};

    #[test]
    fn shutdown_is_five_bytes() {
        let bytes = Message::Shutdown.encode();
        assert_eq!(bytes, vec![1, 0, 0, 0, 7]);
        assert_eq!(Message::decode(&bytes).unwrap(), (Message::Shutdown, 5));
    }

    #[test]
    fn fit_request_roundtrip() {
        let spec = ModelSpec::new(vec![4, 8, 3], Activation::Relu).unwrap();
        let msg = Message::FitRequest {
            round: 3,
            config: vec![("lr".into(), "0.1".into())],
            params: init_model(&spec, 1),
        };
        let bytes = msg.encode();
        // 4 len + 1 tag + 4 round + 2 kv count + (2+2) + (2+3) + params
        assert_eq!(bytes.len(), 4 + 1 + 4 + 2 + 4 + 5 + (4 + 24 + 67 * 4));
        let (back, used) = Message::decode(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, msg);
    }

    #[test]
    fn stream_roundtrip() {
        let msgs = vec![
            Message::Hello {
                client_id: 2,
                dev_type: "JetsonNano".into(),
            },
            Message::Error {
                message: "boom".into(),
            },
            Message::Shutdown,
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_message(&mut buf, m).unwrap();
        }
        let mut cursor = io::Cursor::new(buf);
        for m in &msgs {
            assert_eq!(&read_message(&mut cursor).unwrap().0, m);
        }
        assert!(matches!(read_message(&mut cursor), Err(WireError::Io(_))));
    }

    #[test]
    fn decoder_errors() {
        assert!(matches!(
            Message::decode(&[1, 0]),
            Err(WireError::Truncated { .. })
        ));
        assert!(matches!(
            Message::decode(&[1, 0, 0, 0, 99]),
            Err(WireError::UnknownTag(99))
        ));
        assert!(matches!(
            Message::decode(&[0, 0, 0, 0]),
            Err(WireError::LengthOverflow(0))
        ));
        assert!(matches!(
            Message::decode(&[255, 255, 255, 255, 1]),
            Err(WireError::LengthOverflow(_))
        ));
        assert!(matches!(
            Message::decode(&[5, 0, 0, 0, 2, 1]),
            Err(WireError::Truncated { .. })
        ));
        // Shutdown with a stray payload byte
        assert!(matches!(
            Message::decode(&[2, 0, 0, 0, 7, 0]),
            Err(WireError::Malformed(_))
        ));
        // Error with invalid UTF-8
        assert!(matches!(
            Message::decode(&[5, 0, 0, 0, 8, 2, 0, 0xff, 0xfe]),
            Err(WireError::Malformed(_))
        ));
    }

    #[test]
    fn kv_lookup() {
        let kv: KeyValues = vec![("epochs".into(), "2".into())];
        assert_eq!(kv_parse::<u32>(&kv, "epochs").unwrap(), 2);
        assert!(kv_parse::<u32>(&kv, "lr").is_err());
        assert_eq!(kv_get(&kv, "epochs"), Some("2"));
    }
}
