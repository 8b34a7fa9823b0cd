//! Multi-patch XOR random-grid sharing.
//!
//! Every subject gets one authentication share `AS`, a uniform random grid.
//! Each patch `P_i` is hidden as the private share `PS_i = P_i ^ AS`, so the
//! only qualified set for patch `i` is `{AS, PS_i}`. A private share may be
//! split further into XOR-additive sub-grids when there are more storage
//! institutions than shares.
//!
//! All operations are bytewise over 8-bit channels and pure: the random
//! source is always an explicit argument.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;
use zeroize::{Zeroize, ZeroizeOnDrop};

/// `patch_index` value carried by authentication shares.
pub const AS_SENTINEL: u8 = 0xFF;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VssError {
    #[error("invalid dimensions {width}x{height}x{channels}")]
    Dimension {
        width: u16,
        height: u16,
        channels: u8,
    },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: GridShape, right: GridShape },
    #[error("payload has {got} bytes, shape requires {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("expected a {expected:?} share, got {got:?}")]
    WrongRole { expected: ShareRole, got: ShareRole },
    #[error("cannot expand a share into {0} sub-grids (need 2..=255)")]
    ExpansionCount(usize),
    #[error("incomplete share: {got} of {expected} sub-grids present")]
    IncompleteShare { expected: usize, got: usize },
    #[error("sub-grids disagree on patch index ({0} vs {1})")]
    PatchIndexMismatch(u8, u8),
    #[error("sub-grids belong to different subjects")]
    SubjectMismatch,
    #[error("invalid sub-grid metadata: index {index} of {total}")]
    SubgridMetadata { index: u8, total: u8 },
    #[error("no facial patch kind for index {0}")]
    UnknownPatchIndex(u8),
}

/// The six facial regions, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    LeftEyebrow,
    RightEyebrow,
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

impl PatchKind {
    pub const ALL: [PatchKind; 6] = [
        PatchKind::LeftEyebrow,
        PatchKind::RightEyebrow,
        PatchKind::LeftEye,
        PatchKind::RightEye,
        PatchKind::Nose,
        PatchKind::Mouth,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(index: u8) -> Result<Self, VssError> {
        Self::ALL
            .get(index as usize)
            .copied()
            .ok_or(VssError::UnknownPatchIndex(index))
    }

    pub fn name(self) -> &'static str {
        match self {
            PatchKind::LeftEyebrow => "left_eyebrow",
            PatchKind::RightEyebrow => "right_eyebrow",
            PatchKind::LeftEye => "left_eye",
            PatchKind::RightEye => "right_eye",
            PatchKind::Nose => "nose",
            PatchKind::Mouth => "mouth",
        }
    }
}

impl fmt::Display for PatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatchKind {
    type Err = VssError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or(VssError::UnknownPatchIndex(AS_SENTINEL))
    }
}

/// 128-bit subject identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectId(pub Uuid);

impl SubjectId {
    pub fn new_random() -> Self {
        SubjectId(Uuid::new_v4())
    }

    pub fn nil() -> Self {
        SubjectId(Uuid::nil())
    }

    /// Deterministic id, handy for fixtures and simulations.
    pub fn from_u128(v: u128) -> Self {
        SubjectId(Uuid::from_u128(v))
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        self.0.as_bytes()
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        SubjectId(Uuid::from_bytes(bytes))
    }
}

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for SubjectId {
    type Err = uuid::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Uuid::parse_str(s).map(SubjectId)
    }
}

/// Width, height and channel count of a patch or grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    width: u16,
    height: u16,
    channels: u8,
}

impl GridShape {
    pub fn new(width: u16, height: u16, channels: u8) -> Result<Self, VssError> {
        if width == 0 || height == 0 || !matches!(channels, 1 | 3) {
            return Err(VssError::Dimension {
                width,
                height,
                channels,
            });
        }
        Ok(GridShape {
            width,
            height,
            channels,
        })
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    /// Number of bytes in a payload of this shape.
    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize * self.channels as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_payload(&self, bytes: &[u8]) -> Result<(), VssError> {
        if bytes.len() != self.len() {
            return Err(VssError::PayloadLength {
                expected: self.len(),
                got: bytes.len(),
            });
        }
        Ok(())
    }

    fn ensure_same(self, other: GridShape) -> Result<(), VssError> {
        if self != other {
            return Err(VssError::DimensionMismatch {
                left: self,
                right: other,
            });
        }
        Ok(())
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

/// One facial region, interleaved 8-bit channels, row-major. Zeroized on drop.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct PatchImage {
    #[zeroize(skip)]
    kind: PatchKind,
    #[zeroize(skip)]
    shape: GridShape,
    pixels: Vec<u8>,
}

impl PatchImage {
    pub fn new(kind: PatchKind, shape: GridShape, pixels: Vec<u8>) -> Result<Self, VssError> {
        shape.check_payload(&pixels)?;
        Ok(PatchImage {
            kind,
            shape,
            pixels,
        })
    }

    pub fn kind(&self) -> PatchKind {
        self.kind
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

impl fmt::Debug for PatchImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PatchImage")
            .field("kind", &self.kind)
            .field("shape", &self.shape)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareRole {
    Authentication,
    Private,
    Subgrid,
}

impl ShareRole {
    pub fn code(self) -> u8 {
        match self {
            ShareRole::Authentication => 0,
            ShareRole::Private => 1,
            ShareRole::Subgrid => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ShareRole::Authentication),
            1 => Some(ShareRole::Private),
            2 => Some(ShareRole::Subgrid),
            _ => None,
        }
    }
}

/// A self-describing random-looking grid. Zeroized on drop.
///
/// The patch index travels with the bytes so grids can be reassembled
/// without trusting where they were stored.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct ShareGrid {
    #[zeroize(skip)]
    role: ShareRole,
    #[zeroize(skip)]
    subject_id: SubjectId,
    #[zeroize(skip)]
    patch_index: u8,
    #[zeroize(skip)]
    subgrid_index: u8,
    #[zeroize(skip)]
    subgrid_total: u8,
    #[zeroize(skip)]
    shape: GridShape,
    bytes: Vec<u8>,
}

impl ShareGrid {
    /// Builds a grid after checking every metadata invariant.
    pub fn from_parts(
        role: ShareRole,
        subject_id: SubjectId,
        patch_index: u8,
        subgrid_index: u8,
        subgrid_total: u8,
        shape: GridShape,
        bytes: Vec<u8>,
    ) -> Result<Self, VssError> {
        shape.check_payload(&bytes)?;
        let meta_ok = match role {
            ShareRole::Authentication => {
                patch_index == AS_SENTINEL && subgrid_index == 0 && subgrid_total == 1
            }
            ShareRole::Private => {
                patch_index != AS_SENTINEL && subgrid_index == 0 && subgrid_total == 1
            }
            ShareRole::Subgrid => {
                patch_index != AS_SENTINEL && subgrid_total >= 2 && subgrid_index < subgrid_total
            }
        };
        if !meta_ok {
            return Err(VssError::SubgridMetadata {
                index: subgrid_index,
                total: subgrid_total,
            });
        }
        Ok(ShareGrid {
            role,
            subject_id,
            patch_index,
            subgrid_index,
            subgrid_total,
            shape,
            bytes,
        })
    }

    /// A private share for `patch_index` from raw bytes.
    pub fn private(
        subject_id: SubjectId,
        patch_index: u8,
        shape: GridShape,
        bytes: Vec<u8>,
    ) -> Result<Self, VssError> {
        Self::from_parts(
            ShareRole::Private,
            subject_id,
            patch_index,
            0,
            1,
            shape,
            bytes,
        )
    }

    pub fn role(&self) -> ShareRole {
        self.role
    }

    pub fn subject_id(&self) -> SubjectId {
        self.subject_id
    }

    pub fn patch_index(&self) -> u8 {
        self.patch_index
    }

    pub fn subgrid_index(&self) -> u8 {
        self.subgrid_index
    }

    pub fn subgrid_total(&self) -> u8 {
        self.subgrid_total
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Re-labels the grid with a subject id.
    pub fn with_subject(mut self, subject_id: SubjectId) -> Self {
        self.subject_id = subject_id;
        self
    }

    /// Short label used by access-structure checks: `AS`, `PS_3`, `PS_3.1/2`.
    pub fn label(&self) -> String {
        match self.role {
            ShareRole::Authentication => "AS".to_string(),
            ShareRole::Private => format!("PS_{}", self.patch_index as u16 + 1),
            ShareRole::Subgrid => format!(
                "PS_{}.{}/{}",
                self.patch_index as u16 + 1,
                self.subgrid_index as u16 + 1,
                self.subgrid_total
            ),
        }
    }

    fn ensure_role(&self, expected: ShareRole) -> Result<(), VssError> {
        if self.role != expected {
            return Err(VssError::WrongRole {
                expected,
                got: self.role,
            });
        }
        Ok(())
    }
}

impl fmt::Debug for ShareGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ShareGrid")
            .field("role", &self.role)
            .field("subject_id", &self.subject_id)
            .field("patch_index", &self.patch_index)
            .field("subgrid", &(self.subgrid_index, self.subgrid_total))
            .field("shape", &self.shape)
            .finish_non_exhaustive()
    }
}

/// XORs `src` into `dst` in place. Lengths must match.
pub fn xor_into(dst: &mut [u8], src: &[u8]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= *s;
    }
}

fn xor_bytes(a: &[u8], b: &[u8]) -> Vec<u8> {
    a.iter().zip(b).map(|(x, y)| x ^ y).collect()
}

/// Draws a fresh uniform grid. The result is labelled as an authentication
/// share of the nil subject; callers relabel as needed.
pub fn generate_random_grid<R: RngCore + ?Sized>(shape: GridShape, rng: &mut R) -> ShareGrid {
    let mut bytes = vec![0u8; shape.len()];
    rng.fill_bytes(&mut bytes);
    ShareGrid {
        role: ShareRole::Authentication,
        subject_id: SubjectId::nil(),
        patch_index: AS_SENTINEL,
        subgrid_index: 0,
        subgrid_total: 1,
        shape,
        bytes,
    }
}

/// Encrypts the first patch into two random grids: the authentication share
/// and `PS_1 = P_1 ^ AS`.
pub fn bootstrap_first_patch<R: RngCore + ?Sized>(
    subject_id: SubjectId,
    first: &PatchImage,
    rng: &mut R,
) -> (ShareGrid, ShareGrid) {
    let auth = generate_random_grid(first.shape, rng).with_subject(subject_id);
    let ps = ShareGrid {
        role: ShareRole::Private,
        subject_id,
        patch_index: first.kind.index(),
        subgrid_index: 0,
        subgrid_total: 1,
        shape: first.shape,
        bytes: xor_bytes(&first.pixels, &auth.bytes),
    };
    (auth, ps)
}

/// `PS_i = P_i ^ AS`.
pub fn generate_private_share(patch: &PatchImage, auth: &ShareGrid) -> Result<ShareGrid, VssError> {
    auth.ensure_role(ShareRole::Authentication)?;
    patch.shape.ensure_same(auth.shape)?;
    Ok(ShareGrid {
        role: ShareRole::Private,
        subject_id: auth.subject_id,
        patch_index: patch.kind.index(),
        subgrid_index: 0,
        subgrid_total: 1,
        shape: patch.shape,
        bytes: xor_bytes(&patch.pixels, &auth.bytes),
    })
}

/// Shares every patch of a subject: the first patch bootstraps the AS, the
/// rest are XORed against it. Returns `(AS, [PS_1..PS_n])`.
pub fn share_patches<R: RngCore + ?Sized>(
    subject_id: SubjectId,
    patches: &[PatchImage],
    rng: &mut R,
) -> Result<(ShareGrid, Vec<ShareGrid>), VssError> {
    let (first, rest) = patches.split_first().ok_or(VssError::IncompleteShare {
        expected: 1,
        got: 0,
    })?;
    let (auth, ps1) = bootstrap_first_patch(subject_id, first, rng);
    let mut shares = Vec::with_capacity(patches.len());
    shares.push(ps1);
    for p in rest {
        shares.push(generate_private_share(p, &auth)?);
    }
    Ok((auth, shares))
}

/// Splits a private share into `k` XOR-additive sub-grids: `k - 1` fresh
/// random grids plus the residual `ps ^ g_1 ^ ... ^ g_{k-1}`.
pub fn expand_share<R: RngCore + ?Sized>(
    ps: &ShareGrid,
    k: usize,
    rng: &mut R,
) -> Result<Vec<ShareGrid>, VssError> {
    ps.ensure_role(ShareRole::Private)?;
    if !(2..=255).contains(&k) {
        return Err(VssError::ExpansionCount(k));
    }
    let total = k as u8;
    let mut residual = ps.bytes.clone();
    let mut out = Vec::with_capacity(k);
    for idx in 0..total {
        let bytes = if idx + 1 < total {
            let mut g = vec![0u8; ps.shape.len()];
            rng.fill_bytes(&mut g);
            xor_into(&mut residual, &g);
            g
        } else {
            std::mem::take(&mut residual)
        };
        out.push(ShareGrid {
            role: ShareRole::Subgrid,
            subject_id: ps.subject_id,
            patch_index: ps.patch_index,
            subgrid_index: idx,
            subgrid_total: total,
            shape: ps.shape,
            bytes,
        });
    }
    Ok(out)
}

/// XOR of every grid in a complete set of private parts: either one private
/// share or all sub-grids of one expanded share.
pub fn assemble_private(parts: &[ShareGrid]) -> Result<ShareGrid, VssError> {
    let first = parts.first().ok_or(VssError::IncompleteShare {
        expected: 1,
        got: 0,
    })?;
    if first.role == ShareRole::Private {
        if parts.len() != 1 {
            return Err(VssError::IncompleteShare {
                expected: 1,
                got: parts.len(),
            });
        }
        return Ok(first.clone());
    }
    first.ensure_role(ShareRole::Subgrid)?;
    let total = first.subgrid_total as usize;
    let mut seen = vec![false; total];
    let mut bytes = vec![0u8; first.shape.len()];
    for part in parts {
        part.ensure_role(ShareRole::Subgrid)?;
        first.shape.ensure_same(part.shape)?;
        if part.patch_index != first.patch_index {
            return Err(VssError::PatchIndexMismatch(
                first.patch_index,
                part.patch_index,
            ));
        }
        if part.subject_id != first.subject_id {
            return Err(VssError::SubjectMismatch);
        }
        if part.subgrid_total != first.subgrid_total {
            return Err(VssError::SubgridMetadata {
                index: part.subgrid_index,
                total: part.subgrid_total,
            });
        }
        let slot = &mut seen[part.subgrid_index as usize];
        if *slot {
            return Err(VssError::SubgridMetadata {
                index: part.subgrid_index,
                total: part.subgrid_total,
            });
        }
        *slot = true;
        xor_into(&mut bytes, &part.bytes);
    }
    if parts.len() != total {
        return Err(VssError::IncompleteShare {
            expected: total,
            got: parts.len(),
        });
    }
    Ok(ShareGrid {
        role: ShareRole::Private,
        subject_id: first.subject_id,
        patch_index: first.patch_index,
        subgrid_index: 0,
        subgrid_total: 1,
        shape: first.shape,
        bytes,
    })
}

/// `P_i = AS ^ PS_i`, where `PS_i` is given whole or as all of its sub-grids.
pub fn reconstruct_patch(auth: &ShareGrid, parts: &[ShareGrid]) -> Result<PatchImage, VssError> {
    auth.ensure_role(ShareRole::Authentication)?;
    let ps = assemble_private(parts)?;
    auth.shape.ensure_same(ps.shape)?;
    let kind = PatchKind::from_index(ps.patch_index)?;
    Ok(PatchImage {
        kind,
        shape: ps.shape,
        pixels: xor_bytes(&auth.bytes, &ps.bytes),
    })
}
