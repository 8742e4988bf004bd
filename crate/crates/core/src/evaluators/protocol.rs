//! Messages of the external-trainer protocol: UTF-8 JSON, one message per
//! line, tagged by `type`.
//!
//! ```text
//! -> {"type":"hello","proto":1,"space_hash":"..."}
//! <- {"type":"hello_ok","proto":1,"space_hash":"..."}
//! -> {"type":"train","arch_id":"...","spec":{...},"seed":N,"epochs":E,"kd":{"weight":w,"teacher_files":[...]}}
//! <- {"type":"result","arch_id":"...","score":S,"metric":"...","per_epoch":[...],"preds_file":"..."}
//! <- {"type":"error","arch_id":"...","code":"...","message":"..."}
//! ```

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::search_space::ArchitectureSpec;

pub const PROTO_VERSION: u32 = 1;

/// Error code a server sends when the space hash differs from its own.
pub const SPACE_MISMATCH: &str = "space_mismatch";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdSpec {
    pub weight: f64,
    pub teacher_files: Vec<String>,
}

/// Engine to trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello {
        proto: u32,
        space_hash: String,
    },
    Train {
        arch_id: String,
        spec: ArchitectureSpec,
        seed: u64,
        epochs: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kd: Option<KdSpec>,
    },
}

/// Trainer to engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    HelloOk {
        proto: u32,
        space_hash: String,
    },
    Result {
        arch_id: String,
        score: f64,
        metric: String,
        #[serde(default)]
        per_epoch: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        preds_file: Option<String>,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        arch_id: Option<String>,
        code: String,
        #[serde(default)]
        message: String,
    },
}

/// Writes one message followed by a newline and flushes.
pub fn write_message<W: Write, M: Serialize>(w: &mut W, msg: &M) -> io::Result<()> {
    let mut line = serde_json::to_vec(msg).map_err(io::Error::other)?;
    line.push(b'\n');
    w.write_all(&line)?;
    w.flush()
}

/// Reads the next non-blank line and parses it. `Ok(None)` at end of stream.
pub fn read_message<R: BufRead, M: for<'de> Deserialize<'de>>(r: &mut R) -> io::Result<Option<M>> {
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            break;
        }
    }
    serde_json::from_str(line.trim_end())
        .map(Some)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{HeadSpec, Pooling, StemSpec};
    use serde_json::json;

    fn spec() -> ArchitectureSpec {
        ArchitectureSpec::minimal(
            StemSpec { kernel: 3, dropout: false },
            HeadSpec { pooling: Pooling::Max, spatial_dropout: false },
        )
    }

    #[test]
    fn wire_shapes() {
        let hello = ClientMessage::Hello { proto: 1, space_hash: "h".into() };
        assert_eq!(serde_json::to_value(&hello).unwrap(), json!({"type":"hello","proto":1,"space_hash":"h"}));

        let train = ClientMessage::Train { arch_id: "a".into(), spec: spec(), seed: 3, epochs: 5, kd: None };
        let v = serde_json::to_value(&train).unwrap();
        assert_eq!(v["type"], "train");
        assert!(v.get("kd").is_none());
        let with_kd = ClientMessage::Train {
            arch_id: "a".into(),
            spec: spec(),
            seed: 3,
            epochs: 5,
            kd: Some(KdSpec { weight: 1.0, teacher_files: vec!["preds_x.f32".into()] }),
        };
        let v = serde_json::to_value(&with_kd).unwrap();
        assert_eq!(v["kd"], json!({"weight":1.0,"teacher_files":["preds_x.f32"]}));

        let result: ServerMessage = serde_json::from_value(json!({
            "type":"result","arch_id":"a","score":0.5,"metric":"roc_auc","per_epoch":[0.4,0.5],"preds_file":"preds_a.f32"
        }))
        .unwrap();
        assert!(matches!(result, ServerMessage::Result { score, .. } if score == 0.5));
        let err: ServerMessage =
            serde_json::from_value(json!({"type":"error","code":"space_mismatch","message":"no"})).unwrap();
        assert!(matches!(err, ServerMessage::Error { arch_id: None, .. }));
    }

    #[test]
    fn line_framing() {
        let mut buf = Vec::new();
        write_message(&mut buf, &ClientMessage::Hello { proto: 1, space_hash: "x".into() }).unwrap();
        buf.extend_from_slice(b"\n\n");
        write_message(&mut buf, &ClientMessage::Hello { proto: 1, space_hash: "y".into() }).unwrap();
        let mut r = buf.as_slice();
        let a: ClientMessage = read_message(&mut r).unwrap().unwrap();
        let b: ClientMessage = read_message(&mut r).unwrap().unwrap();
        assert_eq!(a, ClientMessage::Hello { proto: 1, space_hash: "x".into() });
        assert_eq!(b, ClientMessage::Hello { proto: 1, space_hash: "y".into() });
        assert!(read_message::<_, ClientMessage>(&mut r).unwrap().is_none());
        assert!(read_message::<_, ClientMessage>(&mut &b"{bad\n"[..]).is_err());
    }
}
