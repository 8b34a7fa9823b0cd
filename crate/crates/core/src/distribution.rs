//! Placement of a subject's private shares onto storage institutions.
//!
//! Every institution receives exactly one grid. With more shares than
//! institutions a random subset is placed and the rest are dropped. With
//! fewer, `j = N - N_ps` extra grids are produced by splitting shares into
//! XOR-additive sub-grids, using the most even composition of `N` into
//! `N_ps` parts; the randomly chosen shares take the larger parts.

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vss::{expand_share, ShareGrid, ShareRole, SubjectId, VssError};

pub type InstitutionId = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DistributionError {
    #[error("no private shares to place")]
    NoShares,
    #[error("at least one institution is required")]
    NoInstitutions,
    #[error("only private shares can be distributed")]
    NotPrivate,
    #[error("shares belong to more than one subject")]
    MixedSubjects,
    #[error("patch {0} appears more than once")]
    DuplicatePatch(u8),
    #[error("patch {0} is not part of this plan")]
    UnknownPatch(u8),
    #[error("{0} sub-grids per share exceed the format limit")]
    TooManySubgrids(usize),
    #[error(transparent)]
    Grid(#[from] VssError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementCase {
    Exact,
    Case1Subset,
    Case2Expanded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub institution: InstitutionId,
    pub patch_index: u8,
    pub subgrid_index: u8,
    pub subgrid_total: u8,
}

/// Where each grid of one subject lives. Serializes to the plan JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub subject_id: SubjectId,
    pub case: PlacementCase,
    /// Expansion deficit `N - N_ps`, zero unless positive.
    pub j: u32,
    pub n_institutions: u32,
    /// Every patch index offered for placement, placed or not.
    pub patch_indices: Vec<u8>,
    /// Patches left out in the subset case; they cannot be trained on.
    pub dropped: Vec<u8>,
    pub assignments: Vec<Placement>,
}

impl PlacementPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Institutions holding a grid of this subject.
    pub fn institutions(&self) -> Vec<InstitutionId> {
        self.assignments.iter().map(|a| a.institution).collect()
    }
}

/// A plan together with the grids it places; `grids[k]` goes to
/// `plan.assignments[k].institution`.
#[derive(Clone, Debug)]
pub struct Distribution {
    pub plan: PlacementPlan,
    pub grids: Vec<ShareGrid>,
}

/// Builds the placement for one subject's private shares over `n_institutions`.
pub fn plan_distribution<R: RngCore + ?Sized>(
    shares: &[ShareGrid],
    n_institutions: usize,
    rng: &mut R,
) -> Result<Distribution, DistributionError> {
    if n_institutions == 0 {
        return Err(DistributionError::NoInstitutions);
    }
    let first = shares.first().ok_or(DistributionError::NoShares)?;
    let subject_id = first.subject_id();
    let mut seen = [false; 256];
    for s in shares {
        if s.role() != ShareRole::Private {
            return Err(DistributionError::NotPrivate);
        }
        if s.subject_id() != subject_id {
            return Err(DistributionError::MixedSubjects);
        }
        if std::mem::replace(&mut seen[s.patch_index() as usize], true) {
            return Err(DistributionError::DuplicatePatch(s.patch_index()));
        }
    }

    let n_ps = shares.len();
    let n = n_institutions;
    let mut ordered: Vec<&ShareGrid> = shares.iter().collect();
    ordered.sort_by_key(|s| s.patch_index());
    let patch_indices: Vec<u8> = ordered.iter().map(|s| s.patch_index()).collect();

    let (case, j, dropped, grids) = if n_ps == n {
        (
            PlacementCase::Exact,
            0,
            Vec::new(),
            ordered.into_iter().cloned().collect::<Vec<_>>(),
        )
    } else if n_ps > n {
        let mut picks: Vec<usize> = (0..n_ps).collect();
        picks.shuffle(rng);
        let mut keep = picks[..n].to_vec();
        keep.sort_unstable();
        let mut dropped: Vec<u8> = picks[n..].iter().map(|&i| patch_indices[i]).collect();
        dropped.sort_unstable();
        log::warn!(
            "subject {subject_id}: {} institutions for {n_ps} shares, patches {dropped:?} are not stored",
            n
        );
        let grids = keep.into_iter().map(|i| ordered[i].clone()).collect();
        (PlacementCase::Case1Subset, 0, dropped, grids)
    } else {
        let counts = even_composition(n, n_ps, rng);
        if let Some(&max) = counts.iter().max().filter(|&&m| m > 255) {
            return Err(DistributionError::TooManySubgrids(max));
        }
        let mut grids = Vec::with_capacity(n);
        for (share, &k) in ordered.iter().zip(&counts) {
            if k == 1 {
                grids.push((*share).clone());
            } else {
                grids.extend(expand_share(share, k, rng)?);
            }
        }
        (
            PlacementCase::Case2Expanded,
            (n - n_ps) as u32,
            Vec::new(),
            grids,
        )
    };

    let assignments = grids
        .iter()
        .enumerate()
        .map(|(k, g)| Placement {
            institution: k as InstitutionId,
            patch_index: g.patch_index(),
            subgrid_index: g.subgrid_index(),
            subgrid_total: g.subgrid_total(),
        })
        .collect();
    Ok(Distribution {
        plan: PlacementPlan {
            subject_id,
            case,
            j,
            n_institutions: n as u32,
            patch_indices,
            dropped,
            assignments,
        },
        grids,
    })
}

/// Splits `total` into `parts` counts differing by at most one; a random
/// selection of parts receives the larger value.
fn even_composition<R: RngCore + ?Sized>(total: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    let base = total / parts;
    let larger = total % parts;
    let mut order: Vec<usize> = (0..parts).collect();
    order.shuffle(rng);
    let mut counts = vec![base; parts];
    for &i in &order[..larger] {
        counts[i] += 1;
    }
    counts
}

/// Institutions that must be contacted to reassemble the private share of
/// `patch_index`. Empty when the patch was dropped.
pub fn locate_shares(
    plan: &PlacementPlan,
    patch_index: u8,
) -> Result<Vec<InstitutionId>, DistributionError> {
    if !plan.patch_indices.contains(&patch_index) {
        return Err(DistributionError::UnknownPatch(patch_index));
    }
    Ok(plan
        .assignments
        .iter()
        .filter(|a| a.patch_index == patch_index)
        .map(|a| a.institution)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::vss::{assemble_private, generate_random_grid, GridShape};

    fn shares(n: usize, seed: u64) -> Vec<ShareGrid> {
        let shape = GridShape::new(4, 4, 3).unwrap();
        let mut rng = seeded(seed);
        (0..n)
            .map(|i| {
                let g = generate_random_grid(shape, &mut rng);
                ShareGrid::private(SubjectId::from_u128(1), i as u8, shape, g.bytes().to_vec())
                    .unwrap()
            })
            .collect()
    }

    fn grids_for(d: &Distribution, patch: u8) -> Vec<ShareGrid> {
        let insts = locate_shares(&d.plan, patch).unwrap();
        insts.iter().map(|&i| d.grids[i as usize].clone()).collect()
    }

    #[test]
    fn exact_is_identity() {
        let s = shares(6, 1);
        let d = plan_distribution(&s, 6, &mut seeded(2)).unwrap();
        assert_eq!(d.plan.case, PlacementCase::Exact);
        assert_eq!(d.plan.j, 0);
        for (k, a) in d.plan.assignments.iter().enumerate() {
            assert_eq!(a.institution as usize, k);
            assert_eq!(a.patch_index as usize, k);
            assert_eq!(d.grids[k], s[k]);
        }
        assert_eq!(locate_shares(&d.plan, 2).unwrap(), vec![2]);
    }

    #[test]
    fn six_shares_eight_institutions() {
        let s = shares(6, 3);
        let d = plan_distribution(&s, 8, &mut seeded(4)).unwrap();
        assert_eq!(d.plan.case, PlacementCase::Case2Expanded);
        assert_eq!(d.plan.j, 2);
        assert_eq!(d.grids.len(), 8);
        let mut per_patch: Vec<usize> = (0..6)
            .map(|p| locate_shares(&d.plan, p).unwrap().len())
            .collect();
        per_patch.sort_unstable();
        assert_eq!(per_patch, vec![1, 1, 1, 1, 2, 2]);
        for p in 0..6u8 {
            assert_eq!(assemble_private(&grids_for(&d, p)).unwrap(), s[p as usize]);
        }
    }

    #[test]
    fn six_shares_twenty_institutions() {
        let s = shares(6, 5);
        let d = plan_distribution(&s, 20, &mut seeded(6)).unwrap();
        assert_eq!(d.plan.j, 14);
        let mut per_patch: Vec<usize> = (0..6)
            .map(|p| locate_shares(&d.plan, p).unwrap().len())
            .collect();
        assert_eq!(per_patch.iter().sum::<usize>(), 20);
        per_patch.sort_unstable();
        assert_eq!(per_patch, vec![3, 3, 3, 3, 4, 4]);
        for p in 0..6u8 {
            let g = grids_for(&d, p);
            assert!(g.iter().all(|x| x.role() == ShareRole::Subgrid));
            assert_eq!(assemble_private(&g).unwrap(), s[p as usize]);
        }
        assert_eq!(
            locate_shares(&d.plan, 1).unwrap().len(),
            grids_for(&d, 1)[0].subgrid_total() as usize
        );
    }

    #[test]
    fn subset_drops_shares() {
        let s = shares(6, 7);
        let d = plan_distribution(&s, 4, &mut seeded(8)).unwrap();
        assert_eq!(d.plan.case, PlacementCase::Case1Subset);
        assert_eq!(d.plan.dropped.len(), 2);
        for &p in &d.plan.dropped {
            assert!(locate_shares(&d.plan, p).unwrap().is_empty());
            assert!(d.grids.iter().all(|g| g.bytes() != s[p as usize].bytes()));
        }
        assert_eq!(
            locate_shares(&d.plan, 9).unwrap_err(),
            DistributionError::UnknownPatch(9)
        );
    }

    #[test]
    fn input_errors() {
        assert_eq!(
            plan_distribution(&[], 3, &mut seeded(0)).unwrap_err(),
            DistributionError::NoShares
        );
        let s = shares(2, 9);
        assert_eq!(
            plan_distribution(&s, 0, &mut seeded(0)).unwrap_err(),
            DistributionError::NoInstitutions
        );
        let dup = vec![s[0].clone(), s[0].clone()];
        assert_eq!(
            plan_distribution(&dup, 3, &mut seeded(0)).unwrap_err(),
            DistributionError::DuplicatePatch(0)
        );
        let mixed = vec![
            s[0].clone(),
            s[1].clone().with_subject(SubjectId::from_u128(2)),
        ];
        assert_eq!(
            plan_distribution(&mixed, 3, &mut seeded(0)).unwrap_err(),
            DistributionError::MixedSubjects
        );
    }

    #[test]
    fn plan_json_round_trip() {
        let d = plan_distribution(&shares(3, 10), 5, &mut seeded(11)).unwrap();
        let json = d.plan.to_json();
        assert!(json.contains("\"case\": \"case2_expanded\""));
        assert!(json.contains("\"subgrid_total\""));
        assert_eq!(PlacementPlan::from_json(&json).unwrap(), d.plan);
    }

    #[test]
    fn composition_is_even() {
        let mut rng = seeded(12);
        for total in 1..40 {
            for parts in 1..=total {
                let c = even_composition(total, parts, &mut rng);
                assert_eq!(c.iter().sum::<usize>(), total);
                let (lo, hi) = (c.iter().min().unwrap(), c.iter().max().unwrap());
                assert!(hi - lo <= 1);
            }
        }
    }
}
