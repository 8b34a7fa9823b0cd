//! Patch-embedding trainer contract, the deterministic stub, and the
//! client side of the external trainer bridge.

use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{self, BridgeMessage, FrameError, PatchPayload};
use crate::vss::{PatchImage, SubjectId};

pub const EMBEDDING_DIM: usize = 512;

#[derive(Clone, Debug, Error, PartialEq, Serialize, Deserialize)]
pub enum TrainerError {
    #[error("trainer failed: {0}")]
    Failed(String),
    #[error("expected {expected}-d vector, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("bridge: {0}")]
    Bridge(String),
}

/// Per-slot patch features plus the aggregated embedding of one subject.
/// `patch_vectors[i]` is `None` when no patch was supplied for slot `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleEmbedding {
    pub patch_vectors: Vec<Option<Result<Vec<f32>, TrainerError>>>,
    pub embedding: Result<Vec<f32>, TrainerError>,
}

pub trait EmbeddingTrainer: Send + Sync {
    fn name(&self) -> &str;

    /// Feature vector of one patch (the per-patch network).
    fn extract(&self, patch: &PatchImage) -> Result<Vec<f32>, TrainerError>;

    /// Fuses one feature vector per slot into a global embedding.
    fn aggregate(&self, features: &[Vec<f32>]) -> Result<Vec<f32>, TrainerError>;

    /// Extracts every supplied patch, substitutes zero vectors for missing
    /// or failed slots, then aggregates.
    fn embed_bundle(
        &self,
        _subject: SubjectId,
        patches: &[Option<&PatchImage>],
    ) -> BundleEmbedding {
        let patch_vectors: Vec<_> = patches
            .iter()
            .map(|p| p.map(|p| self.extract(p).and_then(check_dim)))
            .collect();
        let features: Vec<Vec<f32>> = patch_vectors
            .iter()
            .map(|v| match v {
                Some(Ok(v)) => v.clone(),
                _ => vec![0.0; EMBEDDING_DIM],
            })
            .collect();
        let embedding = self.aggregate(&features).and_then(check_dim);
        BundleEmbedding {
            patch_vectors,
            embedding,
        }
    }
}

fn check_dim(v: Vec<f32>) -> Result<Vec<f32>, TrainerError> {
    if v.len() != EMBEDDING_DIM {
        return Err(TrainerError::Dimension {
            expected: EMBEDDING_DIM,
            got: v.len(),
        });
    }
    Ok(v)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Signed feature hashing of `input` into `EMBEDDING_DIM` buckets.
fn hash_project(key: u64, input: impl Iterator<Item = f64>) -> Vec<f32> {
    let mut acc = vec![0f64; EMBEDDING_DIM];
    for (j, x) in input.enumerate() {
        let h = splitmix64(key ^ (j as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
        let bucket = (h % EMBEDDING_DIM as u64) as usize;
        if h >> 63 == 0 {
            acc[bucket] += x;
        } else {
            acc[bucket] -= x;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Deterministic linear stand-in for the real networks: features are a
/// fixed-seed signed hash projection of the patch bytes, aggregation a
/// second projection of the concatenated features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StubTrainer {
    pub seed: u64,
}

impl Default for StubTrainer {
    fn default() -> Self {
        StubTrainer { seed: 0x5EED_F00D }
    }
}

impl EmbeddingTrainer for StubTrainer {
    fn name(&self) -> &str {
        "stub"
    }

    fn extract(&self, patch: &PatchImage) -> Result<Vec<f32>, TrainerError> {
        let key = splitmix64(self.seed ^ (patch.kind().index() as u64 + 1) << 56);
        Ok(hash_project(
            key,
            patch.pixels().iter().map(|&b| b as f64 / 255.0),
        ))
    }

    fn aggregate(&self, features: &[Vec<f32>]) -> Result<Vec<f32>, TrainerError> {
        if let Some(bad) = features.iter().find(|f| f.len() != EMBEDDING_DIM) {
            return Err(TrainerError::Dimension {
                expected: EMBEDDING_DIM,
                got: bad.len(),
            });
        }
        let key = splitmix64(self.seed.rotate_left(29) ^ 0xA66E_6A7E);
        Ok(hash_project(
            key,
            features.iter().flatten().map(|&v| v as f64),
        ))
    }
}

/// Client of a trainer service speaking the framed bridge protocol. One
/// connection per bundle; transport failures are retried.
#[derive(Debug)]
pub struct ExternalTrainer {
    addr: SocketAddr,
    pub retries: usize,
    pub timeout: Duration,
    pub backoff: Duration,
    next_id: AtomicU64,
}

impl ExternalTrainer {
    pub fn new(addr: impl ToSocketAddrs) -> Result<Self, TrainerError> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| TrainerError::Bridge(e.to_string()))?
            .next()
            .ok_or_else(|| TrainerError::Bridge("no address".into()))?;
        Ok(ExternalTrainer {
            addr,
            retries: 2,
            timeout: Duration::from_secs(30),
            backoff: Duration::from_millis(50),
            next_id: AtomicU64::new(1),
        })
    }

    fn exchange(&self, msg: &BridgeMessage) -> Result<BridgeMessage, FrameError> {
        let mut stream = TcpStream::connect_timeout(&self.addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        bridge::send(&mut stream, msg)?;
        bridge::recv(&mut stream)
    }

    fn request(
        &self,
        subject: SubjectId,
        patches: &[Option<&PatchImage>],
    ) -> Result<(Vec<Vec<f32>>, Vec<f32>), TrainerError> {
        let msg_id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let payloads: Vec<PatchPayload> = patches
            .iter()
            .flatten()
            .map(|p| PatchPayload::from_patch(p))
            .collect();
        let msg = BridgeMessage::TrainPatch {
            msg_id,
            subject_id: subject,
            n_p: patches.len(),
            patches: payloads,
        };
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(self.backoff * attempt as u32);
            }
            match self.exchange(&msg) {
                Ok(BridgeMessage::TrainResult {
                    msg_id: got,
                    patch_vectors,
                    embedding,
                }) if got == msg_id => {
                    let patch_vectors = patch_vectors.into_iter().map(check_dim).collect::<Result<
                        Vec<_>,
                        _,
                    >>(
                    )?;
                    return Ok((patch_vectors, check_dim(embedding)?));
                }
                Ok(BridgeMessage::Error { reason, .. }) => {
                    return Err(TrainerError::Bridge(reason))
                }
                Ok(other) => {
                    return Err(TrainerError::Bridge(format!("unexpected reply {other:?}")))
                }
                Err(e) => {
                    log::warn!("bridge attempt {} failed: {e}", attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(TrainerError::Bridge(format!(
            "gave up after {} attempts: {last}",
            self.retries + 1
        )))
    }
}

impl EmbeddingTrainer for ExternalTrainer {
    fn name(&self) -> &str {
        "external"
    }

    fn extract(&self, patch: &PatchImage) -> Result<Vec<f32>, TrainerError> {
        let mut slots = vec![None; patch.kind().index() as usize + 1];
        slots[patch.kind().index() as usize] = Some(patch);
        let (mut vectors, _) = self.request(SubjectId::nil(), &slots)?;
        vectors
            .pop()
            .ok_or_else(|| TrainerError::Bridge("empty reply".into()))
    }

    fn aggregate(&self, _features: &[Vec<f32>]) -> Result<Vec<f32>, TrainerError> {
        Err(TrainerError::Failed(
            "the external trainer aggregates inside embed_bundle".into(),
        ))
    }

    fn embed_bundle(&self, subject: SubjectId, patches: &[Option<&PatchImage>]) -> BundleEmbedding {
        match self.request(subject, patches) {
            Ok((vectors, embedding)) => {
                let mut it = vectors.into_iter();
                let patch_vectors = patches
                    .iter()
                    .map(|p| {
                        p.map(|_| {
                            it.next()
                                .ok_or_else(|| TrainerError::Bridge("missing patch vector".into()))
                        })
                    })
                    .collect();
                BundleEmbedding {
                    patch_vectors,
                    embedding: Ok(embedding),
                }
            }
            Err(e) => BundleEmbedding {
                patch_vectors: patches.iter().map(|p| p.map(|_| Err(e.clone()))).collect(),
                embedding: Err(e),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vss::{GridShape, PatchKind};
    use std::net::TcpListener;

    fn bundle(seed: u8) -> Vec<PatchImage> {
        let shape = GridShape::new(8, 8, 3).unwrap();
        PatchKind::ALL
            .into_iter()
            .map(|k| {
                PatchImage::new(
                    k,
                    shape,
                    (0..192)
                        .map(|i| (i as u8).wrapping_mul(seed).wrapping_add(k.index()))
                        .collect(),
                )
                .unwrap()
            })
            .collect()
    }

    fn slots(b: &[PatchImage]) -> Vec<Option<&PatchImage>> {
        b.iter().map(Some).collect()
    }

    #[test]
    fn stub_is_deterministic_and_linear() {
        let b = bundle(3);
        let t = StubTrainer::default();
        let e1 = t
            .embed_bundle(SubjectId::nil(), &slots(&b))
            .embedding
            .unwrap();
        let e2 = StubTrainer::default()
            .embed_bundle(SubjectId::nil(), &slots(&b))
            .embedding
            .unwrap();
        assert_eq!(e1.len(), EMBEDDING_DIM);
        assert_eq!(
            e1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            e2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        let mut blanked = b.clone();
        blanked[4] = PatchImage::new(PatchKind::Nose, b[4].shape(), vec![0; 192]).unwrap();
        let e3 = t
            .embed_bundle(SubjectId::nil(), &slots(&blanked))
            .embedding
            .unwrap();
        let l2: f32 = e1
            .iter()
            .zip(&e3)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f32>()
            .sqrt();
        assert!(l2 > 0.0);

        // A blank patch contributes nothing, exactly like a missing one.
        let mut missing = slots(&b);
        missing[4] = None;
        let e4 = t
            .embed_bundle(SubjectId::nil(), &missing)
            .embedding
            .unwrap();
        assert_eq!(e3, e4);
    }

    #[test]
    fn aggregate_rejects_wrong_dimension() {
        assert_eq!(
            StubTrainer::default()
                .aggregate(&[vec![0.0; 3]])
                .unwrap_err(),
            TrainerError::Dimension {
                expected: 512,
                got: 3
            }
        );
    }

    #[test]
    fn external_matches_stub_through_bridge() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server =
            thread::spawn(move || bridge::serve(&listener, &StubTrainer::default(), 1).unwrap());
        let ext = ExternalTrainer::new(addr).unwrap();
        let b = bundle(5);
        let remote = ext.embed_bundle(SubjectId::nil(), &slots(&b));
        let local = StubTrainer::default().embed_bundle(SubjectId::nil(), &slots(&b));
        assert_eq!(remote, local);
        server.join().unwrap();
    }

    #[test]
    fn external_flags_failure_when_unreachable() {
        let addr = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap()
        };
        let mut ext = ExternalTrainer::new(addr).unwrap();
        ext.retries = 1;
        ext.backoff = Duration::from_millis(1);
        let b = bundle(1);
        let out = ext.embed_bundle(SubjectId::nil(), &slots(&b));
        assert!(out.embedding.is_err());
        assert!(out
            .patch_vectors
            .iter()
            .all(|v| matches!(v, Some(Err(TrainerError::Bridge(_))))));
    }
}
