//! Patch extraction from a face image and the destroy-original contract.
//!
//! Landmark boxes come from an external detector. Each box is cropped and
//! resampled to a common square size with bilinear interpolation using
//! half-pixel-centre sampling and edge clamping (the OpenCV `INTER_LINEAR`
//! convention), so goldens are portable across implementations.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroize;

use crate::hygiene::{BufferKind, BufferRegistry, TrackedBuffer};
use crate::vss::{GridShape, PatchImage, PatchKind, SubjectId, VssError};

/// Patch edge length used throughout training.
pub const DEFAULT_PATCH_SIZE: u16 = 96;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("landmark box for {kind} ({x},{y} {w}x{h}) exceeds image {width}x{height}")]
    LandmarkOutOfBounds {
        kind: PatchKind,
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("landmarks missing for: {0:?}")]
    IncompleteLandmarks(Vec<PatchKind>),
    #[error("malformed landmark file: {0}")]
    LandmarkFormat(#[from] serde_json::Error),
    #[error("target size must be positive")]
    TargetSize,
    #[error("could not decode image: {0}")]
    Decode(#[from] image::ImageError),
    #[error("operation out of order: {0}")]
    Ordering(&'static str),
    #[error("full image not found (destroyed)")]
    NotFound,
    #[error(transparent)]
    Grid(#[from] VssError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A decoded 8-bit RGB image, row-major interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct SourceImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl SourceImage {
    pub const CHANNELS: usize = 3;

    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Self {
        assert_eq!(
            data.len(),
            width as usize * height as usize * Self::CHANNELS
        );
        SourceImage {
            width,
            height,
            data,
        }
    }

    /// Decodes PNG or binary PPM bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self, PipelineError> {
        let rgb = image::load_from_memory(bytes)?.into_rgb8();
        let (width, height) = rgb.dimensions();
        Ok(SourceImage {
            width,
            height,
            data: rgb.into_raw(),
        })
    }
}

impl Drop for SourceImage {
    fn drop(&mut self) {
        self.data.zeroize();
    }
}

impl std::fmt::Debug for SourceImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SourceImage({}x{})", self.width, self.height)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// One box per facial region, as produced by an external landmark detector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet {
    boxes: BTreeMap<PatchKind, LandmarkBox>,
}

impl LandmarkSet {
    pub fn new(boxes: BTreeMap<PatchKind, LandmarkBox>) -> Self {
        LandmarkSet { boxes }
    }

    /// Parses `{"left_eyebrow": {"x":..,"y":..,"w":..,"h":..}, ...}`.
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn get(&self, kind: PatchKind) -> Option<LandmarkBox> {
        self.boxes.get(&kind).copied()
    }

    pub fn insert(&mut self, kind: PatchKind, b: LandmarkBox) {
        self.boxes.insert(kind, b);
    }

    pub fn remove(&mut self, kind: PatchKind) {
        self.boxes.remove(&kind);
    }

    /// Checks presence of all six kinds and that every box is non-empty and
    /// inside a `width` x `height` image.
    pub fn validate(&self, width: u32, height: u32) -> Result<(), PipelineError> {
        let missing: Vec<PatchKind> = PatchKind::ALL
            .into_iter()
            .filter(|k| !self.boxes.contains_key(k))
            .collect();
        if !missing.is_empty() {
            return Err(PipelineError::IncompleteLandmarks(missing));
        }
        for (&kind, b) in &self.boxes {
            let fits = b.w > 0
                && b.h > 0
                && b.x.checked_add(b.w).is_some_and(|r| r <= width)
                && b.y.checked_add(b.h).is_some_and(|r| r <= height);
            if !fits {
                return Err(PipelineError::LandmarkOutOfBounds {
                    kind,
                    x: b.x,
                    y: b.y,
                    w: b.w,
                    h: b.h,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }
}

/// The six resized patches of one subject, in canonical kind order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchBundle {
    pub subject_id: SubjectId,
    pub patches: Vec<PatchImage>,
}

impl PatchBundle {
    pub fn shape(&self) -> GridShape {
        self.patches[0].shape()
    }
}

fn sample_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let x = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
        .clamp(0.0, (src_len - 1) as f64);
    let x0 = x.floor() as usize;
    let x1 = (x0 + 1).min(src_len - 1);
    (x0, x1, x - x0 as f64)
}

/// Bilinear resize of an interleaved `channels`-plane image.
pub fn resize_bilinear(
    src: &[u8],
    src_w: usize,
    src_h: usize,
    channels: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<u8> {
    assert_eq!(src.len(), src_w * src_h * channels);
    let xs: Vec<_> = (0..dst_w).map(|u| sample_coord(u, src_w, dst_w)).collect();
    let mut out = Vec::with_capacity(dst_w * dst_h * channels);
    for v in 0..dst_h {
        let (y0, y1, fy) = sample_coord(v, src_h, dst_h);
        for &(x0, x1, fx) in &xs {
            for c in 0..channels {
                let px = |x: usize, y: usize| src[(y * src_w + x) * channels + c] as f64;
                let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
                let bottom = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
                let value = top * (1.0 - fy) + bottom * fy;
                out.push((value + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

fn crop(width: u32, data: &[u8], b: LandmarkBox) -> Vec<u8> {
    let ch = SourceImage::CHANNELS;
    let mut out = Vec::with_capacity(b.w as usize * b.h as usize * ch);
    for row in b.y..b.y + b.h {
        let start = (row as usize * width as usize + b.x as usize) * ch;
        out.extend_from_slice(&data[start..start + b.w as usize * ch]);
    }
    out
}

/// Crops every landmark box and resizes it to `target` x `target` x 3.
pub fn extract_patches(
    subject_id: SubjectId,
    image: &SourceImage,
    landmarks: &LandmarkSet,
    target: u16,
) -> Result<PatchBundle, PipelineError> {
    extract_from_raw(
        subject_id,
        image.width,
        image.height,
        &image.data,
        landmarks,
        target,
    )
}

fn extract_from_raw(
    subject_id: SubjectId,
    width: u32,
    height: u32,
    data: &[u8],
    landmarks: &LandmarkSet,
    target: u16,
) -> Result<PatchBundle, PipelineError> {
    if target == 0 {
        return Err(PipelineError::TargetSize);
    }
    landmarks.validate(width, height)?;
    let shape = GridShape::new(target, target, SourceImage::CHANNELS as u8)?;
    let t = target as usize;
    let mut patches = Vec::with_capacity(PatchKind::ALL.len());
    for kind in PatchKind::ALL {
        let b = landmarks.get(kind).expect("validated");
        let mut region = crop(width, data, b);
        let pixels = resize_bilinear(
            &region,
            b.w as usize,
            b.h as usize,
            SourceImage::CHANNELS,
            t,
            t,
        );
        region.zeroize();
        patches.push(PatchImage::new(kind, shape, pixels)?);
    }
    Ok(PatchBundle {
        subject_id,
        patches,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub at: DateTime<Utc>,
    pub subject_id: SubjectId,
    pub event: String,
    pub detail: String,
}

/// In-memory audit trail with an optional JSON-lines file sink.
#[derive(Clone, Debug, Default)]
pub struct AuditLog {
    records: Arc<Mutex<Vec<AuditRecord>>>,
    sink: Option<PathBuf>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_sink(path: impl Into<PathBuf>) -> Self {
        AuditLog {
            records: Arc::default(),
            sink: Some(path.into()),
        }
    }

    pub fn record(
        &self,
        subject_id: SubjectId,
        event: &str,
        detail: &str,
    ) -> Result<AuditRecord, PipelineError> {
        let rec = AuditRecord {
            at: Utc::now(),
            subject_id,
            event: event.to_string(),
            detail: detail.to_string(),
        };
        if let Some(path) = &self.sink {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(
                f,
                "{}",
                serde_json::to_string(&rec).expect("audit record serializes")
            )?;
        }
        self.records.lock().expect("audit lock").push(rec.clone());
        Ok(rec)
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.lock().expect("audit lock").clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SessionState {
    Loaded,
    Extracted,
    Destroyed,
}

/// Proof that the original image is gone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DestroyConfirmation {
    pub subject_id: SubjectId,
    pub destroyed_at: DateTime<Utc>,
    pub already_destroyed: bool,
}

/// One ingestion: load, extract, destroy. The full image lives only in a
/// registered, zeroize-on-drop buffer and is never written to disk.
pub struct IngestionSession {
    subject_id: SubjectId,
    width: u32,
    height: u32,
    original: Option<TrackedBuffer>,
    state: SessionState,
    destroyed_at: Option<DateTime<Utc>>,
    audit: AuditLog,
}

impl IngestionSession {
    pub fn new(
        subject_id: SubjectId,
        mut image: SourceImage,
        registry: &BufferRegistry,
        audit: AuditLog,
    ) -> Self {
        let (width, height) = (image.width, image.height);
        let data = std::mem::take(&mut image.data);
        let owner = format!("ingest:{subject_id}");
        IngestionSession {
            subject_id,
            width,
            height,
            original: Some(TrackedBuffer::new(
                registry,
                BufferKind::FullImage,
                owner,
                data,
            )),
            state: SessionState::Loaded,
            destroyed_at: None,
            audit,
        }
    }

    /// Reads and decodes an image file; the encoded bytes are wiped after decoding.
    pub fn load(
        subject_id: SubjectId,
        path: &Path,
        registry: &BufferRegistry,
        audit: AuditLog,
    ) -> Result<Self, PipelineError> {
        let mut raw = std::fs::read(path)?;
        let decoded = SourceImage::decode(&raw);
        raw.zeroize();
        Ok(Self::new(subject_id, decoded?, registry, audit))
    }

    pub fn subject_id(&self) -> SubjectId {
        self.subject_id
    }

    /// Copy of the full image, only while it has not been destroyed.
    pub fn full_image(&self) -> Result<SourceImage, PipelineError> {
        match &self.original {
            Some(buf) => Ok(SourceImage::new(
                self.width,
                self.height,
                buf.bytes().to_vec(),
            )),
            None => Err(PipelineError::NotFound),
        }
    }

    pub fn extract(
        &mut self,
        landmarks: &LandmarkSet,
        target: u16,
    ) -> Result<PatchBundle, PipelineError> {
        let buf = self
            .original
            .as_ref()
            .ok_or(PipelineError::Ordering("extract after destroy"))?;
        let bundle = extract_from_raw(
            self.subject_id,
            self.width,
            self.height,
            buf.bytes(),
            landmarks,
            target,
        )?;
        self.state = SessionState::Extracted;
        Ok(bundle)
    }

    /// Drops (and zeroizes) the full image and records the deletion.
    pub fn destroy_original(&mut self) -> Result<DestroyConfirmation, PipelineError> {
        match self.state {
            SessionState::Loaded => Err(PipelineError::Ordering("destroy before extraction")),
            SessionState::Destroyed => Ok(DestroyConfirmation {
                subject_id: self.subject_id,
                destroyed_at: self.destroyed_at.expect("set on destroy"),
                already_destroyed: true,
            }),
            SessionState::Extracted => {
                self.original = None;
                self.state = SessionState::Destroyed;
                let rec = self.audit.record(
                    self.subject_id,
                    "ORIGINAL_DESTROYED",
                    &format!(
                        "{}x{} image zeroized after patch extraction",
                        self.width, self.height
                    ),
                )?;
                self.destroyed_at = Some(rec.at);
                Ok(DestroyConfirmation {
                    subject_id: self.subject_id,
                    destroyed_at: rec.at,
                    already_destroyed: false,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: u32, h: u32) -> SourceImage {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&[
                    (x * 7 % 256) as u8,
                    (y * 5 % 256) as u8,
                    ((x + y) % 256) as u8,
                ]);
            }
        }
        SourceImage::new(w, h, data)
    }

    fn boxes(b: LandmarkBox) -> LandmarkSet {
        LandmarkSet::new(PatchKind::ALL.into_iter().map(|k| (k, b)).collect())
    }

    #[test]
    fn identity_resize_is_exact_crop() {
        let img = gradient_image(40, 30);
        let lm = boxes(LandmarkBox {
            x: 0,
            y: 0,
            w: 8,
            h: 8,
        });
        let bundle = extract_patches(SubjectId::nil(), &img, &lm, 8).unwrap();
        assert_eq!(bundle.patches.len(), 6);
        let expected = crop(
            img.width,
            &img.data,
            LandmarkBox {
                x: 0,
                y: 0,
                w: 8,
                h: 8,
            },
        );
        for p in &bundle.patches {
            assert_eq!(p.pixels(), expected.as_slice());
        }
        let kinds: Vec<_> = bundle.patches.iter().map(|p| p.kind()).collect();
        assert_eq!(kinds, PatchKind::ALL);
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let img = SourceImage::new(50, 50, [10u8, 20, 30].repeat(2500));
        let mut lm = boxes(LandmarkBox {
            x: 3,
            y: 4,
            w: 17,
            h: 9,
        });
        lm.insert(
            PatchKind::Mouth,
            LandmarkBox {
                x: 0,
                y: 0,
                w: 50,
                h: 50,
            },
        );
        let bundle = extract_patches(SubjectId::nil(), &img, &lm, 12).unwrap();
        for p in &bundle.patches {
            assert!(p.pixels().chunks(3).all(|px| px == [10, 20, 30]));
        }
    }

    #[test]
    fn checkerboard_upscale_matches_hand_oracle() {
        // Frozen from an independent numpy evaluation of half-pixel-centre
        // bilinear sampling (cross-checked with cv2.resize INTER_LINEAR).
        let src = [0u8, 255, 255, 0];
        let out = resize_bilinear(&src, 2, 2, 1, 4, 4);
        #[rustfmt::skip]
        let expected = [
            0, 64, 191, 255,
            64, 96, 159, 191,
            191, 159, 96, 64,
            255, 191, 64, 0,
        ];
        assert_eq!(out, expected);
    }

    #[test]
    fn landmark_errors() {
        let img = gradient_image(20, 20);
        let mut lm = boxes(LandmarkBox {
            x: 0,
            y: 0,
            w: 5,
            h: 5,
        });
        lm.insert(
            PatchKind::Nose,
            LandmarkBox {
                x: 18,
                y: 0,
                w: 5,
                h: 5,
            },
        );
        assert!(matches!(
            extract_patches(SubjectId::nil(), &img, &lm, 8),
            Err(PipelineError::LandmarkOutOfBounds {
                kind: PatchKind::Nose,
                ..
            })
        ));
        lm.remove(PatchKind::Nose);
        assert!(matches!(
            extract_patches(SubjectId::nil(), &img, &lm, 8),
            Err(PipelineError::IncompleteLandmarks(ref v)) if v == &vec![PatchKind::Nose]
        ));
        let lm = boxes(LandmarkBox {
            x: 0,
            y: 0,
            w: 5,
            h: 5,
        });
        assert!(matches!(
            extract_patches(SubjectId::nil(), &img, &lm, 0),
            Err(PipelineError::TargetSize)
        ));
    }

    #[test]
    fn landmark_json() {
        let text = r#"{"left_eyebrow":{"x":1,"y":2,"w":3,"h":4},"right_eyebrow":{"x":1,"y":2,"w":3,"h":4},
            "left_eye":{"x":1,"y":2,"w":3,"h":4},"right_eye":{"x":1,"y":2,"w":3,"h":4},
            "nose":{"x":1,"y":2,"w":3,"h":4},"mouth":{"x":0,"y":0,"w":9,"h":9}}"#;
        let lm = LandmarkSet::from_json(text).unwrap();
        assert_eq!(
            lm.get(PatchKind::Mouth),
            Some(LandmarkBox {
                x: 0,
                y: 0,
                w: 9,
                h: 9
            })
        );
        lm.validate(10, 10).unwrap();
        assert!(LandmarkSet::from_json(r#"{"forehead":{"x":0,"y":0,"w":1,"h":1}}"#).is_err());
    }

    #[test]
    fn extraction_is_deterministic() {
        let img = gradient_image(64, 48);
        let lm = boxes(LandmarkBox {
            x: 5,
            y: 7,
            w: 21,
            h: 13,
        });
        let a = extract_patches(SubjectId::nil(), &img, &lm, 16).unwrap();
        let b = extract_patches(SubjectId::nil(), &img, &lm, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn session_lifecycle() {
        let reg = BufferRegistry::new();
        let audit = AuditLog::in_memory();
        let subject = SubjectId::from_u128(7);
        let mut session =
            IngestionSession::new(subject, gradient_image(32, 32), &reg, audit.clone());
        assert_eq!(reg.live_of(BufferKind::FullImage).len(), 1);

        assert!(matches!(
            session.destroy_original(),
            Err(PipelineError::Ordering(_))
        ));

        let lm = boxes(LandmarkBox {
            x: 0,
            y: 0,
            w: 10,
            h: 10,
        });
        session.extract(&lm, 8).unwrap();
        assert!(session.full_image().is_ok());

        let first = session.destroy_original().unwrap();
        assert!(!first.already_destroyed);
        assert!(matches!(session.full_image(), Err(PipelineError::NotFound)));
        assert!(reg.live_of(BufferKind::FullImage).is_empty());

        let second = session.destroy_original().unwrap();
        assert!(second.already_destroyed);
        assert_eq!(second.destroyed_at, first.destroyed_at);

        let recs = audit.records();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].event, "ORIGINAL_DESTROYED");
        assert_eq!(recs[0].subject_id, subject);
        assert!(matches!(
            session.extract(&lm, 8),
            Err(PipelineError::Ordering(_))
        ));
    }

    #[test]
    fn decode_ppm() {
        let mut ppm = b"P6\n2 1\n255\n".to_vec();
        ppm.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = SourceImage::decode(&ppm).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }
}
