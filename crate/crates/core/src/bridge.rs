//! Framed JSON protocol for the external trainer and real-socket mode.
//!
//! Each frame is a 4-byte big-endian body length followed by a UTF-8 JSON
//! body. Binary payloads travel as standard base64.
//!
//! ```text
//! -> {"type":"TRAIN_PATCH","msg_id":7,"subject_id":"…","n_p":6,
//!     "patches":[{"patch_index":0,"kind":"left_eyebrow","width":96,"height":96,"channels":3,"payload":"…"}]}
//! <- {"type":"TRAIN_RESULT","msg_id":7,"patch_vectors":[[…512 floats…]],"embedding":[…512 floats…]}
//! <- {"type":"ERROR","msg_id":7,"reason":"…"}
//! ```
//!
//! `patch_vectors[k]` belongs to `patches[k]`; `embedding` aggregates all
//! `n_p` slots, with zero vectors for patch indices not sent.

use std::io::{self, Read, Write};
use std::net::TcpListener;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::trainer::EmbeddingTrainer;
use crate::vss::{GridShape, PatchImage, PatchKind, SubjectId};

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(u32),
    #[error("malformed frame body: {0}")]
    Malformed(String),
    #[error("peer closed the connection")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<(), FrameError> {
    let len = u32::try_from(body.len()).map_err(|_| FrameError::TooLarge(u32::MAX))?;
    if len > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(len));
    }
    w.write_all(&len.to_be_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Vec<u8>, FrameError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(FrameError::Closed),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(len));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(body)
}

pub fn send<W: Write>(w: &mut W, msg: &BridgeMessage) -> Result<(), FrameError> {
    let body = serde_json::to_vec(msg).map_err(|e| FrameError::Malformed(e.to_string()))?;
    write_frame(w, &body)
}

pub fn recv<R: Read>(r: &mut R) -> Result<BridgeMessage, FrameError> {
    let body = read_frame(r)?;
    serde_json::from_slice(&body).map_err(|e| FrameError::Malformed(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPayload {
    pub patch_index: u8,
    pub kind: PatchKind,
    pub width: u16,
    pub height: u16,
    pub channels: u8,
    /// Base64 of the interleaved pixel bytes.
    pub payload: String,
}

impl PatchPayload {
    pub fn from_patch(patch: &PatchImage) -> Self {
        let s = patch.shape();
        PatchPayload {
            patch_index: patch.kind().index(),
            kind: patch.kind(),
            width: s.width(),
            height: s.height(),
            channels: s.channels(),
            payload: B64.encode(patch.pixels()),
        }
    }

    pub fn to_patch(&self) -> Result<PatchImage, FrameError> {
        let bad = |e: String| FrameError::Malformed(e);
        let shape = GridShape::new(self.width, self.height, self.channels)
            .map_err(|e| bad(e.to_string()))?;
        let pixels = B64.decode(&self.payload).map_err(|e| bad(e.to_string()))?;
        PatchImage::new(self.kind, shape, pixels).map_err(|e| bad(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BridgeMessage {
    TrainPatch {
        msg_id: u64,
        subject_id: SubjectId,
        n_p: usize,
        patches: Vec<PatchPayload>,
    },
    TrainResult {
        msg_id: u64,
        patch_vectors: Vec<Vec<f32>>,
        embedding: Vec<f32>,
    },
    Error {
        #[serde(default)]
        msg_id: Option<u64>,
        reason: String,
    },
}

/// Answers one TRAIN_PATCH request with `trainer`.
pub fn answer(trainer: &dyn EmbeddingTrainer, msg: BridgeMessage) -> BridgeMessage {
    let BridgeMessage::TrainPatch {
        msg_id,
        subject_id,
        n_p,
        patches,
    } = msg
    else {
        return BridgeMessage::Error {
            msg_id: None,
            reason: "expected TRAIN_PATCH".into(),
        };
    };
    let decoded: Result<Vec<PatchImage>, _> = patches.iter().map(PatchPayload::to_patch).collect();
    let patches = match decoded {
        Ok(p) => p,
        Err(e) => {
            return BridgeMessage::Error {
                msg_id: Some(msg_id),
                reason: e.to_string(),
            }
        }
    };
    let mut slots: Vec<Option<&PatchImage>> = vec![None; n_p];
    for p in &patches {
        match slots.get_mut(p.kind().index() as usize) {
            Some(slot) => *slot = Some(p),
            None => {
                return BridgeMessage::Error {
                    msg_id: Some(msg_id),
                    reason: "patch index beyond n_p".into(),
                }
            }
        }
    }
    let bundle = trainer.embed_bundle(subject_id, &slots);
    let mut patch_vectors = Vec::with_capacity(patches.len());
    for p in &patches {
        match &bundle.patch_vectors[p.kind().index() as usize] {
            Some(Ok(v)) => patch_vectors.push(v.clone()),
            _ => {
                return BridgeMessage::Error {
                    msg_id: Some(msg_id),
                    reason: format!("extract failed for {}", p.kind()),
                }
            }
        }
    }
    match bundle.embedding {
        Ok(embedding) => BridgeMessage::TrainResult {
            msg_id,
            patch_vectors,
            embedding,
        },
        Err(e) => BridgeMessage::Error {
            msg_id: Some(msg_id),
            reason: e.to_string(),
        },
    }
}

/// Serves framed requests on `listener` for up to `max_connections`
/// connections. A malformed frame gets an ERROR reply and the connection
/// stays open; an oversized one closes it after the reply.
pub fn serve(
    listener: &TcpListener,
    trainer: &dyn EmbeddingTrainer,
    max_connections: usize,
) -> io::Result<()> {
    for stream in listener.incoming().take(max_connections) {
        let mut stream = stream?;
        loop {
            let reply = match read_frame(&mut stream) {
                Ok(body) => match serde_json::from_slice::<BridgeMessage>(&body) {
                    Ok(msg) => answer(trainer, msg),
                    Err(e) => BridgeMessage::Error {
                        msg_id: None,
                        reason: format!("malformed frame: {e}"),
                    },
                },
                Err(FrameError::Closed) => break,
                Err(FrameError::Io(e)) => {
                    log::warn!("bridge connection error: {e}");
                    break;
                }
                Err(e @ FrameError::TooLarge(_)) => {
                    // The unread body cannot be skipped safely.
                    let _ = send(
                        &mut stream,
                        &BridgeMessage::Error {
                            msg_id: None,
                            reason: e.to_string(),
                        },
                    );
                    break;
                }
                Err(e) => BridgeMessage::Error {
                    msg_id: None,
                    reason: e.to_string(),
                },
            };
            if send(&mut stream, &reply).is_err() {
                break;
            }
        }
    }
    Ok(())
}
