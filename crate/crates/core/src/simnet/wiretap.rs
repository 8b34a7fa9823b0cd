//! Passive link observer.
//!
//! Every share grid carried by a message on a tapped link is captured,
//! including messages the receiver never processed. Captured grids are
//! classified per (subject, patch) against the common-share access
//! structure; qualified captures are reconstructed and compared with the
//! original patch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Delivery, NodeId, SimMessage};
use crate::access::AccessStructure;
use crate::vss::{reconstruct_patch, PatchImage, PatchKind, ShareGrid, ShareRole, SubjectId};

/// An undirected link; endpoints are stored in order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link {
    pub a: NodeId,
    pub b: NodeId,
}

impl Link {
    pub fn new(x: impl Into<NodeId>, y: impl Into<NodeId>) -> Self {
        let (x, y) = (x.into(), y.into());
        if x <= y {
            Link { a: x, b: y }
        } else {
            Link { a: y, b: x }
        }
    }

    fn carries(&self, m: &SimMessage) -> bool {
        *self == Link::new(m.src.as_str(), m.dst.as_str())
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}<->{}", self.a, self.b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchVerdict {
    pub subject_id: SubjectId,
    pub patch_index: u8,
    /// Labels of the complete shares captured for this subject.
    pub captured: Vec<String>,
    pub reconstructable: bool,
    /// Outcome of the XOR check when reconstructable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bit_exact: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WiretapObservation {
    pub tapped: Vec<Link>,
    pub captured_bytes: BTreeMap<String, usize>,
    pub verdicts: Vec<PatchVerdict>,
}

impl WiretapObservation {
    pub fn reconstructable(&self) -> Vec<(SubjectId, u8)> {
        self.verdicts
            .iter()
            .filter(|v| v.reconstructable)
            .map(|v| (v.subject_id, v.patch_index))
            .collect()
    }

    pub fn total_captured(&self) -> usize {
        self.captured_bytes.values().sum()
    }
}

#[derive(Default)]
struct Captured {
    auth: Option<ShareGrid>,
    private: BTreeMap<u8, ShareGrid>,
    subgrids: BTreeMap<u8, BTreeMap<u8, ShareGrid>>,
}

impl Captured {
    /// Parts that together form the full private share of `patch`.
    fn private_parts(&self, patch: u8) -> Option<Vec<ShareGrid>> {
        if let Some(ps) = self.private.get(&patch) {
            return Some(vec![ps.clone()]);
        }
        let subs = self.subgrids.get(&patch)?;
        let total = subs.values().next()?.subgrid_total() as usize;
        (subs.len() == total).then(|| subs.values().cloned().collect())
    }
}

pub fn wiretap_audit(
    trace: &[SimMessage],
    tapped: &[Link],
    originals: &BTreeMap<SubjectId, Vec<PatchImage>>,
) -> WiretapObservation {
    let n_p = PatchKind::ALL.len();
    let structure = AccessStructure::common_share(n_p).expect("six patches fit the structure");
    let mut captured_bytes = BTreeMap::new();
    let mut by_subject: BTreeMap<SubjectId, Captured> = BTreeMap::new();
    for link in tapped {
        captured_bytes.insert(link.to_string(), 0);
    }
    for m in trace.iter().filter(|m| m.delivery != Delivery::Synthetic) {
        let Some(link) = tapped.iter().find(|l| l.carries(m)) else {
            continue;
        };
        for grid in m.payload.grids() {
            *captured_bytes.entry(link.to_string()).or_default() += grid.bytes().len();
            let c = by_subject.entry(grid.subject_id()).or_default();
            match grid.role() {
                ShareRole::Authentication => c.auth = Some(grid),
                ShareRole::Private => {
                    c.private.insert(grid.patch_index(), grid);
                }
                ShareRole::Subgrid => {
                    c.subgrids
                        .entry(grid.patch_index())
                        .or_default()
                        .insert(grid.subgrid_index(), grid);
                }
            }
        }
    }

    let mut verdicts = Vec::new();
    for (subject_id, c) in &by_subject {
        let mut set = 0;
        let mut labels = BTreeSet::new();
        if c.auth.is_some() {
            set |= AccessStructure::as_bit();
            labels.insert("AS".to_string());
        }
        for p in 0..n_p as u8 {
            if c.private_parts(p).is_some() {
                set |= AccessStructure::ps_bit(p as usize);
                labels.insert(format!("PS_{}", p + 1));
            }
        }
        for p in 0..n_p as u8 {
            let reconstructable = structure
                .is_qualified(p as usize, set)
                .expect("index in range");
            let bit_exact = reconstructable.then(|| {
                let auth = c.auth.as_ref().expect("qualified sets contain the AS");
                let parts = c.private_parts(p).expect("qualified sets contain the PS");
                let original = originals.get(subject_id).and_then(|o| o.get(p as usize));
                match (reconstruct_patch(auth, &parts), original) {
                    (Ok(patch), Some(orig)) => patch.pixels() == orig.pixels(),
                    _ => false,
                }
            });
            verdicts.push(PatchVerdict {
                subject_id: *subject_id,
                patch_index: p,
                captured: labels.iter().cloned().collect(),
                reconstructable,
                bit_exact,
            });
        }
    }
    WiretapObservation {
        tapped: tapped.to_vec(),
        captured_bytes,
        verdicts,
    }
}

/// Audits every link that appears in the trace, one at a time.
pub fn single_link_sweep(
    trace: &[SimMessage],
    originals: &BTreeMap<SubjectId, Vec<PatchImage>>,
) -> Vec<WiretapObservation> {
    let links: BTreeSet<Link> = trace
        .iter()
        .filter(|m| m.delivery != Delivery::Synthetic)
        .map(|m| Link::new(m.src.as_str(), m.dst.as_str()))
        .collect();
    links
        .into_iter()
        .map(|l| wiretap_audit(trace, std::slice::from_ref(&l), originals))
        .collect()
}
