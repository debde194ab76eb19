//! Sign sectors over the most important latent variables, and the small
//! representative "support set" of samples drawn from them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::numerics::{mse, RngState, Tensor};

/// Which points count as lying in the extreme region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SectorRule {
    /// Every selected coordinate has magnitude at least `th`.
    #[default]
    PerCoordinate,
    /// The selected sub-vector has Euclidean norm at least `th`.
    Euclidean,
}

/// How each nonempty sector picks its representative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum PickRule {
    /// Largest minimum selected magnitude; ties by dataset index.
    #[default]
    Extreme,
    /// Uniform member of the sector.
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SectorSpec {
    pub selected: Vec<usize>,
    pub threshold: f64,
    pub rule: SectorRule,
}

impl SectorSpec {
    pub fn new(selected: Vec<usize>, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must be positive, got {threshold}"
            )));
        }
        if selected.is_empty() || selected.len() > 30 {
            return Err(Error::InvalidArgument(format!(
                "need between 1 and 30 selected variables, got {}",
                selected.len()
            )));
        }
        Ok(Self {
            selected,
            threshold,
            rule: SectorRule::PerCoordinate,
        })
    }

    pub fn with_rule(mut self, rule: SectorRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn num_sectors(&self) -> usize {
        1 << self.selected.len()
    }

    /// Sector id of `z`: bit `i` is set when `z[selected[i]]` is positive.
    pub fn sector_of(&self, z: &[f32]) -> Option<usize> {
        let th = self.threshold;
        match self.rule {
            SectorRule::PerCoordinate => {
                if self.selected.iter().any(|&s| !((z[s] as f64).abs() >= th)) {
                    return None;
                }
            }
            SectorRule::Euclidean => {
                let n2: f64 = self.selected.iter().map(|&s| (z[s] as f64).powi(2)).sum();
                if !(n2.sqrt() >= th) || self.selected.iter().any(|&s| z[s] == 0.0) {
                    return None;
                }
            }
        }
        Some(
            self.selected
                .iter()
                .enumerate()
                .fold(0, |id, (i, &s)| if z[s] > 0.0 { id | (1 << i) } else { id }),
        )
    }

    /// `min_i |z[selected[i]]|`, the extremeness of a point.
    fn extremeness(&self, z: &[f32]) -> f64 {
        self.selected
            .iter()
            .map(|&s| (z[s] as f64).abs())
            .fold(f64::INFINITY, f64::min)
    }

    fn check_width(&self, codes: &Tensor) -> Result<()> {
        let need = self.selected.iter().max().map_or(0, |m| m + 1);
        if codes.row_len() < need {
            return Err(Error::IndexOutOfRange {
                what: "selected variable",
                index: need - 1,
                size: codes.row_len(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Census {
    /// Point count per sector id.
    pub counts: Vec<usize>,
    /// Points outside every sector.
    pub none: usize,
}

impl Census {
    /// Largest over smallest count among occupied sectors.
    pub fn occupancy_ratio(&self) -> Option<f64> {
        let occ = self.counts.iter().filter(|&&c| c > 0);
        let max = occ.clone().max()?;
        let min = occ.min()?;
        Some(*max as f64 / *min as f64)
    }
}

pub fn sector_census(codes: &Tensor, spec: &SectorSpec) -> Result<Census> {
    if codes.rows() == 0 {
        return Err(Error::InvalidArgument(
            "census needs at least one code".into(),
        ));
    }
    spec.check_width(codes)?;
    let mut counts = vec![0usize; spec.num_sectors()];
    let mut none = 0;
    for i in 0..codes.rows() {
        match spec.sector_of(codes.row(i)) {
            Some(id) => counts[id] += 1,
            None => none += 1,
        }
    }
    Ok(Census { counts, none })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EntryTag {
    Sector(usize),
    TopUp(TopUp),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopUp {
    Topup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportEntry {
    pub dataset_index: usize,
    pub sector_id: EntryTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportSet {
    pub n: usize,
    pub th: f64,
    pub target_size: usize,
    pub selected_vars: Vec<usize>,
    #[serde(default)]
    pub rule: SectorRule,
    #[serde(default)]
    pub pick: PickRule,
    pub entries: Vec<SupportEntry>,
}

impl SupportSet {
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.dataset_index).collect()
    }

    pub fn num_topups(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.sector_id, EntryTag::TopUp(_)))
            .count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        let mut seen = std::collections::BTreeSet::new();
        if !s.entries.iter().all(|e| seen.insert(e.dataset_index)) {
            return Err(Error::InvalidArgument(
                "support set repeats a dataset index".into(),
            ));
        }
        Ok(s)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

/// One representative per nonempty sector, then farthest-point top-ups in
/// full latent space until `target_size`. When there are more occupied
/// sectors than `target_size`, the most populated sectors win (ties by id).
pub fn build_support_set(
    codes: &Tensor,
    spec: &SectorSpec,
    target_size: usize,
    pick: PickRule,
) -> Result<SupportSet> {
    let n = codes.rows();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "support set needs at least one code".into(),
        ));
    }
    if target_size == 0 {
        return Err(Error::InvalidArgument(
            "support-set target size must be positive".into(),
        ));
    }
    spec.check_width(codes)?;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.num_sectors()];
    for i in 0..n {
        if let Some(id) = spec.sector_of(codes.row(i)) {
            members[id].push(i);
        }
    }
    let mut occupied: Vec<usize> = (0..members.len())
        .filter(|&s| !members[s].is_empty())
        .collect();
    if occupied.len() > target_size {
        occupied.sort_by(|&a, &b| members[b].len().cmp(&members[a].len()).then(a.cmp(&b)));
        occupied.truncate(target_size);
        occupied.sort_unstable();
    }

    let mut rng = match pick {
        PickRule::Random { seed } => Some(RngState::new(seed)),
        PickRule::Extreme => None,
    };
    let mut entries = Vec::with_capacity(target_size);
    for &s in &occupied {
        let m = &members[s];
        let idx = match &mut rng {
            Some(r) => m[r.below(m.len())],
            None => {
                let mut best = m[0];
                let mut best_e = spec.extremeness(codes.row(best));
                for &i in &m[1..] {
                    let e = spec.extremeness(codes.row(i));
                    if e > best_e {
                        best = i;
                        best_e = e;
                    }
                }
                best
            }
        };
        entries.push(SupportEntry {
            dataset_index: idx,
            sector_id: EntryTag::Sector(s),
        });
    }

    let want = target_size.min(n);
    if entries.len() < want {
        let mut chosen = vec![false; n];
        let mut dist = vec![f64::INFINITY; n];
        let relax = |p: usize, chosen: &mut Vec<bool>, dist: &mut Vec<f64>| {
            chosen[p] = true;
            let zp = codes.row(p);
            dist.par_iter_mut().enumerate().for_each(|(i, d)| {
                let v = sq_dist(codes.row(i), zp);
                if v < *d {
                    *d = v;
                }
            });
        };
        if entries.is_empty() {
            // Seed with the point farthest from the origin.
            let mut best = 0;
            let mut best_n = -1.0;
            for i in 0..n {
                let v = sq_dist(codes.row(i), &vec![0.0; codes.row_len()]);
                if v > best_n {
                    best = i;
                    best_n = v;
                }
            }
            entries.push(SupportEntry {
                dataset_index: best,
                sector_id: EntryTag::TopUp(TopUp::Topup),
            });
        }
        for e in &entries {
            relax(e.dataset_index, &mut chosen, &mut dist);
        }
        while entries.len() < want {
            let mut best = usize::MAX;
            let mut best_d = -1.0;
            for i in 0..n {
                if !chosen[i] && dist[i] > best_d {
                    best = i;
                    best_d = dist[i];
                }
            }
            entries.push(SupportEntry {
                dataset_index: best,
                sector_id: EntryTag::TopUp(TopUp::Topup),
            });
            relax(best, &mut chosen, &mut dist);
        }
    }

    Ok(SupportSet {
        n: spec.selected.len(),
        th: spec.threshold,
        target_size,
        selected_vars: spec.selected.clone(),
        rule: spec.rule,
        pick,
        entries,
    })
}

/// Mean per-pixel MSE over all unordered pairs of the chosen images.
pub fn diversity_score(images: &Tensor, indices: &[usize]) -> Result<f64> {
    if indices.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "diversity needs at least 2 images, got {}",
            indices.len()
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= images.rows()) {
        return Err(Error::IndexOutOfRange {
            what: "image",
            index: bad,
            size: images.rows(),
        });
    }
    let flat = images.as_matrix();
    let k = indices.len();
    let per_row: Vec<f64> = (0..k)
        .into_par_iter()
        .map(|a| {
            ((a + 1)..k)
                .map(|b| mse(flat.row(indices[a]), flat.row(indices[b])))
                .sum()
        })
        .collect();
    let pairs = (k * (k - 1) / 2) as f64;
    Ok(per_row.iter().sum::<f64>() / pairs)
}

/// Uniform subset of `k` distinct row indices, sorted.
pub fn random_subset(n: usize, k: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    if k > n {
        return Err(dim_mismatch("random subset size", format!("≤ {n}"), k));
    }
    let mut idx = rng.permutation(n);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes(rows: &[&[f32]]) -> Tensor {
        let w = rows[0].len();
        Tensor::matrix(
            rows.len(),
            w,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sector_examples() {
        let spec = SectorSpec::new(vec![0, 1], 1.0).unwrap();
        assert_eq!(spec.sector_of(&[2.0, -2.0, 0.0]), Some(0b01));
        assert_eq!(spec.sector_of(&[-2.0, 2.0, 0.0]), Some(0b10));
        assert_eq!(spec.sector_of(&[0.5, 2.0, 0.0]), None);
        assert_eq!(
            SectorSpec::new((0..7).collect(), 1.0)
                .unwrap()
                .num_sectors(),
            128
        );
        assert!(SectorSpec::new(vec![0], 0.0).is_err());
    }

    #[test]
    fn euclidean_rule_uses_subspace_norm() {
        let spec = SectorSpec::new(vec![0, 1], 1.0)
            .unwrap()
            .with_rule(SectorRule::Euclidean);
        assert_eq!(spec.sector_of(&[0.8, -0.8]), Some(0b01));
        assert_eq!(spec.sector_of(&[0.5, 0.5]), None);
        assert_eq!(spec.sector_of(&[2.0, 0.0]), None);
    }

    #[test]
    fn census_limits() {
        let c = codes(&[&[1.0, -1.0], &[-3.0, 2.0], &[0.5, 0.5]]);
        let far = sector_census(&c, &SectorSpec::new(vec![0, 1], 1e9).unwrap()).unwrap();
        assert_eq!(far.none, 3);
        let near = sector_census(&c, &SectorSpec::new(vec![0, 1], 1e-9).unwrap()).unwrap();
        assert_eq!(near.none, 0);
        assert_eq!(near.counts, vec![0, 1, 1, 1]);
        assert!(sector_census(&c, &SectorSpec::new(vec![2], 1.0).unwrap()).is_err());
    }

    #[test]
    fn single_sector_gets_topups() {
        let c = codes(&[
            &[2.0, 2.0],
            &[3.0, 2.5],
            &[0.0, 0.1],
            &[-0.5, 0.0],
            &[2.1, 2.0],
        ]);
        let spec = SectorSpec::new(vec![0, 1], 1.0).unwrap();
        let s = build_support_set(&c, &spec, 3, PickRule::Extreme).unwrap();
        assert_eq!(s.entries[0].dataset_index, 1);
        assert_eq!(s.entries[0].sector_id, EntryTag::Sector(3));
        assert_eq!(s.num_topups(), 2);
        assert_eq!(s.indices(), vec![1, 3, 0]);
    }

    #[test]
    fn one_point_per_sector_needs_no_topup() {
        let c = codes(&[&[1.5, 1.5], &[-1.5, 1.5], &[1.5, -1.5], &[-1.5, -1.5]]);
        let spec = SectorSpec::new(vec![0, 1], 1.0).unwrap();
        let s = build_support_set(&c, &spec, 4, PickRule::Extreme).unwrap();
        assert_eq!(s.num_topups(), 0);
        let mut idx = s.indices();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn crowded_sectors_win_when_over_target() {
        let c = codes(&[
            &[1.5, 1.5],
            &[-1.5, 1.5],
            &[-1.6, 1.5],
            &[1.5, -1.5],
            &[1.5, -1.7],
            &[1.6, -1.5],
        ]);
        let spec = SectorSpec::new(vec![0, 1], 1.0).unwrap();
        let s = build_support_set(&c, &spec, 2, PickRule::Extreme).unwrap();
        let tags: Vec<EntryTag> = s.entries.iter().map(|e| e.sector_id).collect();
        assert_eq!(tags, vec![EntryTag::Sector(0b01), EntryTag::Sector(0b10)]);
        assert_eq!(s.indices(), vec![3, 1]);
    }

    #[test]
    fn json_round_trip_and_topup_tag() {
        let c = codes(&[&[2.0, 2.0], &[0.0, 0.0]]);
        let spec = SectorSpec::new(vec![0], 1.0).unwrap();
        let s = build_support_set(&c, &spec, 2, PickRule::Extreme).unwrap();
        let text = s.to_json().unwrap();
        assert!(text.contains("\"topup\""));
        assert_eq!(SupportSet::from_json(&text).unwrap(), s);
        assert!(SupportSet::from_json(&text.replace("\"th\"", "\"thresh\"")).is_err());
    }

    #[test]
    fn diversity_of_identical_images_is_zero() {
        let imgs = Tensor::full(&[4, 9], 0.3f32);
        assert_eq!(diversity_score(&imgs, &[0, 1, 2, 3]).unwrap(), 0.0);
        assert!(diversity_score(&imgs, &[0]).is_err());
        let two = Tensor::<f32>::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(diversity_score(&two, &[0, 1]).unwrap(), 1.0);
    }
}
