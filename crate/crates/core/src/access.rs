//! Multi-secret access structures over a small share universe.
//!
//! Share subsets are bitmasks over a label table. Validity checks enumerate
//! the full power set, so the universe is capped at [`MAX_ENUMERABLE`]
//! labels.

use std::fmt;

use thiserror::Error;

/// Largest universe the exhaustive checks will enumerate.
pub const MAX_ENUMERABLE: usize = 16;
const MAX_LABELS: usize = 32;

/// A subset of the share universe, one bit per label.
pub type ShareSet = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AccessError {
    #[error("universe of {0} shares exceeds the enumeration limit of {MAX_ENUMERABLE}")]
    Capacity(usize),
    #[error("universe of {0} labels cannot be represented")]
    TooManyLabels(usize),
    #[error("unknown secret index {0}")]
    UnknownSecret(usize),
    #[error("unknown share label {0:?}")]
    UnknownLabel(String),
    #[error("share set {0:#b} is not a subset of the universe")]
    OutsideUniverse(ShareSet),
    #[error("at least one patch is required")]
    NoPatches,
    #[error("a qualified family cannot be defined as a complement")]
    InvalidFamily,
}

/// How one family of subsets is described.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Family {
    /// Every superset of at least one listed basis set.
    UpClosure(Vec<ShareSet>),
    /// Exactly the listed sets.
    Explicit(Vec<ShareSet>),
    /// Every subset that is not qualified for the same secret.
    ComplementOfQualified,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecretAccess {
    pub qualified: Family,
    pub forbidden: Family,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessStructure {
    labels: Vec<String>,
    secrets: Vec<SecretAccess>,
}

impl AccessStructure {
    pub fn new(labels: Vec<String>, secrets: Vec<SecretAccess>) -> Result<Self, AccessError> {
        if labels.len() > MAX_LABELS {
            return Err(AccessError::TooManyLabels(labels.len()));
        }
        let s = AccessStructure { labels, secrets };
        for secret in &s.secrets {
            if secret.qualified == Family::ComplementOfQualified {
                return Err(AccessError::InvalidFamily);
            }
            for fam in [&secret.qualified, &secret.forbidden] {
                if let Family::UpClosure(sets) | Family::Explicit(sets) = fam {
                    for &set in sets {
                        s.check_subset(set)?;
                    }
                }
            }
        }
        Ok(s)
    }

    /// The minimally refined perfect structure for `n_p` patches:
    /// universe `{AS, PS_1..PS_n}`, the sole minimal qualified set of patch
    /// `i` is `{AS, PS_i}`, and everything else is forbidden.
    pub fn common_share(n_p: usize) -> Result<Self, AccessError> {
        if n_p == 0 {
            return Err(AccessError::NoPatches);
        }
        let mut labels = vec!["AS".to_string()];
        labels.extend((1..=n_p).map(|i| format!("PS_{i}")));
        let secrets = (0..n_p)
            .map(|i| SecretAccess {
                qualified: Family::UpClosure(vec![Self::as_bit() | Self::ps_bit(i)]),
                forbidden: Family::ComplementOfQualified,
            })
            .collect();
        Self::new(labels, secrets)
    }

    /// Bit of the authentication share in a [`common_share`](Self::common_share) universe.
    pub fn as_bit() -> ShareSet {
        1
    }

    /// Bit of `PS_{patch_index + 1}` in a [`common_share`](Self::common_share) universe.
    pub fn ps_bit(patch_index: usize) -> ShareSet {
        1 << (patch_index + 1)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn universe_size(&self) -> usize {
        self.labels.len()
    }

    pub fn secret_count(&self) -> usize {
        self.secrets.len()
    }

    fn full_mask(&self) -> ShareSet {
        if self.labels.len() == 32 {
            u32::MAX
        } else {
            (1u32 << self.labels.len()) - 1
        }
    }

    fn check_subset(&self, set: ShareSet) -> Result<(), AccessError> {
        if set & !self.full_mask() != 0 {
            return Err(AccessError::OutsideUniverse(set));
        }
        Ok(())
    }

    fn secret(&self, secret: usize) -> Result<&SecretAccess, AccessError> {
        self.secrets
            .get(secret)
            .ok_or(AccessError::UnknownSecret(secret))
    }

    fn enumerable(&self) -> Result<(), AccessError> {
        if self.labels.len() > MAX_ENUMERABLE {
            return Err(AccessError::Capacity(self.labels.len()));
        }
        Ok(())
    }

    /// Builds a share set from labels.
    pub fn set_of<S: AsRef<str>>(&self, labels: &[S]) -> Result<ShareSet, AccessError> {
        labels.iter().try_fold(0, |acc, l| {
            let l = l.as_ref();
            self.labels
                .iter()
                .position(|x| x == l)
                .map(|p| acc | (1 << p))
                .ok_or_else(|| AccessError::UnknownLabel(l.to_string()))
        })
    }

    pub fn labels_of(&self, set: ShareSet) -> Vec<&str> {
        (0..self.labels.len())
            .filter(|i| set & (1 << i) != 0)
            .map(|i| self.labels[i].as_str())
            .collect()
    }

    fn in_qualified(&self, sa: &SecretAccess, set: ShareSet) -> bool {
        match &sa.qualified {
            Family::UpClosure(basis) => basis.iter().any(|&b| b & !set == 0),
            Family::Explicit(sets) => sets.contains(&set),
            Family::ComplementOfQualified => false,
        }
    }

    fn in_forbidden(&self, sa: &SecretAccess, set: ShareSet) -> bool {
        match &sa.forbidden {
            Family::UpClosure(basis) => basis.iter().any(|&b| b & !set == 0),
            Family::Explicit(sets) => sets.contains(&set),
            Family::ComplementOfQualified => !self.in_qualified(sa, set),
        }
    }

    /// True iff `shares` contains a qualified set for `secret`.
    pub fn is_qualified(&self, secret: usize, shares: ShareSet) -> Result<bool, AccessError> {
        let sa = self.secret(secret)?;
        self.check_subset(shares)?;
        Ok(self.in_qualified(sa, shares))
    }

    pub fn is_forbidden(&self, secret: usize, shares: ShareSet) -> Result<bool, AccessError> {
        let sa = self.secret(secret)?;
        self.check_subset(shares)?;
        Ok(self.in_forbidden(sa, shares))
    }

    /// Qualified families are closed upwards, forbidden families downwards,
    /// and the two never overlap.
    pub fn check_monotonicity(&self) -> Result<bool, AccessError> {
        self.enumerable()?;
        let n = self.labels.len();
        let full = self.full_mask();
        for sa in &self.secrets {
            for set in 0..=full {
                let q = self.in_qualified(sa, set);
                let f = self.in_forbidden(sa, set);
                if q && f {
                    return Ok(false);
                }
                for bit in (0..n).map(|b| 1u32 << b) {
                    if q && set & bit == 0 && !self.in_qualified(sa, set | bit) {
                        return Ok(false);
                    }
                    if f && set & bit != 0 && !self.in_forbidden(sa, set & !bit) {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    }

    fn minimal_of(&self, member: impl Fn(ShareSet) -> bool) -> Vec<ShareSet> {
        let mut sets: Vec<ShareSet> = (0..=self.full_mask()).filter(|&s| member(s)).collect();
        sets.sort_by_key(|s| (s.count_ones(), *s));
        let mut minimal: Vec<ShareSet> = Vec::new();
        for s in sets {
            if !minimal.iter().any(|&m| m & !s == 0) {
                minimal.push(s);
            }
        }
        minimal
    }

    pub fn minimal_qualified(&self, secret: usize) -> Result<Vec<ShareSet>, AccessError> {
        self.enumerable()?;
        let sa = self.secret(secret)?;
        Ok(self.minimal_of(|s| self.in_qualified(sa, s)))
    }

    /// Minimal elements of the forbidden family under inclusion. For a
    /// downward-closed family that is non-empty this is `[{}]`.
    pub fn minimal_forbidden(&self, secret: usize) -> Result<Vec<ShareSet>, AccessError> {
        self.enumerable()?;
        let sa = self.secret(secret)?;
        Ok(self.minimal_of(|s| self.in_forbidden(sa, s)))
    }

    /// No minimal qualified set of one secret is a minimal forbidden set of another.
    pub fn check_uniqueness(&self) -> Result<bool, AccessError> {
        self.enumerable()?;
        let mq: Vec<Vec<ShareSet>> = (0..self.secrets.len())
            .map(|i| self.minimal_qualified(i))
            .collect::<Result<_, _>>()?;
        let mf: Vec<Vec<ShareSet>> = (0..self.secrets.len())
            .map(|i| self.minimal_forbidden(i))
            .collect::<Result<_, _>>()?;
        for (i, q) in mq.iter().enumerate() {
            for (j, f) in mf.iter().enumerate() {
                if i != j && q.iter().any(|s| f.contains(s)) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Every subset is classified as exactly one of qualified or forbidden.
    pub fn is_perfect(&self) -> Result<bool, AccessError> {
        self.enumerable()?;
        Ok(self.secrets.iter().all(|sa| {
            (0..=self.full_mask()).all(|s| self.in_qualified(sa, s) != self.in_forbidden(sa, s))
        }))
    }
}

impl fmt::Display for AccessStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "universe: {{{}}}", self.labels.join(", "))?;
        writeln!(f, "secrets: {}", self.secrets.len())?;
        for (i, sa) in self.secrets.iter().enumerate() {
            let basis: Vec<String> = match &sa.qualified {
                Family::UpClosure(b) | Family::Explicit(b) => b
                    .iter()
                    .map(|&s| format!("{{{}}}", self.labels_of(s).join(", ")))
                    .collect(),
                Family::ComplementOfQualified => Vec::new(),
            };
            let kind = match sa.qualified {
                Family::Explicit(_) => "explicit",
                _ => "minimal",
            };
            writeln!(
                f,
                "  secret {}: {kind} qualified {{{}}}",
                i + 1,
                basis.join(", ")
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(s: &AccessStructure, labels: &[&str]) -> ShareSet {
        s.set_of(labels).unwrap()
    }

    #[test]
    fn common_share_six_patches() {
        let s = AccessStructure::common_share(6).unwrap();
        assert_eq!(s.universe_size(), 7);
        assert_eq!(s.secret_count(), 6);
        for i in 0..6 {
            let label = format!("PS_{}", i + 1);
            assert_eq!(
                s.minimal_qualified(i).unwrap(),
                vec![bits(&s, &["AS", &label])]
            );
            assert_eq!(s.minimal_forbidden(i).unwrap(), vec![0]);
        }
        assert!(s.check_monotonicity().unwrap());
        assert!(s.check_uniqueness().unwrap());
        assert!(s.is_perfect().unwrap());
    }

    #[test]
    fn all_private_shares_are_forbidden() {
        let s = AccessStructure::common_share(6).unwrap();
        let all_ps: Vec<String> = (1..=6).map(|i| format!("PS_{i}")).collect();
        let set = s.set_of(&all_ps).unwrap();
        for i in 0..6 {
            assert!(s.is_forbidden(i, set).unwrap());
            assert!(!s.is_qualified(i, set).unwrap());
        }
    }

    #[test]
    fn qualified_examples() {
        let s = AccessStructure::common_share(6).unwrap();
        assert!(s.is_qualified(2, bits(&s, &["AS", "PS_3"])).unwrap());
        assert!(!s.is_qualified(2, bits(&s, &["PS_3"])).unwrap());
        let everything = bits(&s, &["AS", "PS_1", "PS_2", "PS_3", "PS_4", "PS_5", "PS_6"]);
        for i in 0..6 {
            assert!(s.is_qualified(i, everything).unwrap());
        }
        assert_eq!(
            s.is_qualified(6, 0).unwrap_err(),
            AccessError::UnknownSecret(6)
        );
        assert_eq!(
            s.is_qualified(0, 1 << 9).unwrap_err(),
            AccessError::OutsideUniverse(1 << 9)
        );
    }

    #[test]
    fn single_patch() {
        let s = AccessStructure::common_share(1).unwrap();
        assert_eq!(s.minimal_qualified(0).unwrap(), vec![0b11]);
        assert_eq!(
            AccessStructure::common_share(0).unwrap_err(),
            AccessError::NoPatches
        );
    }

    #[test]
    fn monotonicity_violation_detected() {
        let labels = vec!["AS".into(), "PS_1".into()];
        let s = AccessStructure::new(
            labels,
            vec![SecretAccess {
                qualified: Family::UpClosure(vec![0b01]),
                forbidden: Family::Explicit(vec![0b11]),
            }],
        )
        .unwrap();
        assert!(!s.check_monotonicity().unwrap());

        // A non-up-closed explicit qualified family.
        let s = AccessStructure::new(
            vec!["AS".into(), "PS_1".into()],
            vec![SecretAccess {
                qualified: Family::Explicit(vec![0b01]),
                forbidden: Family::Explicit(vec![0b00]),
            }],
        )
        .unwrap();
        assert!(!s.check_monotonicity().unwrap());
    }

    #[test]
    fn empty_families_are_vacuously_monotone() {
        let s = AccessStructure::new(
            vec!["AS".into(), "PS_1".into(), "PS_2".into()],
            vec![
                SecretAccess {
                    qualified: Family::UpClosure(vec![]),
                    forbidden: Family::Explicit(vec![]),
                },
                SecretAccess {
                    qualified: Family::Explicit(vec![]),
                    forbidden: Family::Explicit(vec![]),
                },
            ],
        )
        .unwrap();
        assert!(s.check_monotonicity().unwrap());
    }

    #[test]
    fn uniqueness_violation_detected() {
        let labels: Vec<String> = vec!["AS".into(), "PS_1".into(), "PS_2".into()];
        let pair = 0b011;
        let s = AccessStructure::new(
            labels,
            vec![
                SecretAccess {
                    qualified: Family::UpClosure(vec![pair]),
                    forbidden: Family::ComplementOfQualified,
                },
                SecretAccess {
                    qualified: Family::UpClosure(vec![pair]),
                    forbidden: Family::Explicit(vec![pair]),
                },
            ],
        )
        .unwrap();
        assert!(!s.check_uniqueness().unwrap());
    }

    #[test]
    fn single_secret_uniqueness_is_vacuous() {
        let s = AccessStructure::new(
            vec!["AS".into(), "PS_1".into()],
            vec![SecretAccess {
                qualified: Family::UpClosure(vec![0b11]),
                forbidden: Family::Explicit(vec![0b11]),
            }],
        )
        .unwrap();
        assert!(s.check_uniqueness().unwrap());
    }

    #[test]
    fn capacity_limit() {
        let s = AccessStructure::common_share(16).unwrap();
        assert_eq!(
            s.check_monotonicity().unwrap_err(),
            AccessError::Capacity(17)
        );
        assert_eq!(s.check_uniqueness().unwrap_err(), AccessError::Capacity(17));
        // Membership queries still work without enumeration.
        assert!(s.is_qualified(15, 1 | (1 << 16)).unwrap());
    }

    #[test]
    fn valid_for_one_through_twelve() {
        for n in 1..=12 {
            let s = AccessStructure::common_share(n).unwrap();
            assert!(s.check_monotonicity().unwrap(), "n={n}");
            assert!(s.check_uniqueness().unwrap(), "n={n}");
            assert!(s.is_perfect().unwrap(), "n={n}");
        }
    }

    #[test]
    fn text_dump() {
        let s = AccessStructure::common_share(2).unwrap();
        let text = s.to_string();
        assert!(text.contains("universe: {AS, PS_1, PS_2}"));
        assert!(text.contains("secret 2: minimal qualified {{AS, PS_2}}"));
    }
}
